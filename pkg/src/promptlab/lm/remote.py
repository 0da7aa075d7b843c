"""HTTP client for an external mask-logit scoring service.

Wire protocol (all bodies UTF-8 JSON, byte-exact):

- handshake:  ``GET {base}/handshake`` ->
  ``{"vocab_size": int, "max_len": int, "mask_id": int}``
- scoring:    ``POST {base}/score`` with body
  ``{"tokens": [int, ...], "mask_index": int}`` ->
  ``{"logits": [float, ...]}`` of exactly ``vocab_size`` entries.

Floats travel as JSON numbers; Python's repr round-trip keeps float64
values bit-exact. Connection failures are retried a configurable number
of times; malformed or shape-mismatched responses raise a protocol error
without producing a partial result. Scoring is safe to call from several
threads, bounded by ``max_in_flight``.
"""

from __future__ import annotations

import json
import threading
import time
from typing import TYPE_CHECKING

import numpy as np
import requests

from ..mapping import MaskLogits
from .base import LmBackend, UnsupportedOperationError

if TYPE_CHECKING:
    from ..template import RenderedInput


class ProtocolError(RuntimeError):
    """The service replied with something that violates the protocol."""


class RemoteUnavailableError(RuntimeError):
    """The service could not be reached after the configured attempts."""

    def __init__(self, message: str, attempts: int):
        super().__init__(f"{message} (after {attempts} attempts)")
        self.attempts = attempts


class RemoteLm(LmBackend):
    """Scores rendered inputs against a remote service."""

    def __init__(
        self,
        base_url: str,
        max_attempts: int = 3,
        retry_wait: float = 0.1,
        timeout: float = 10.0,
        max_in_flight: int = 4,
        session: requests.Session | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.max_attempts = max_attempts
        self.retry_wait = retry_wait
        self.timeout = timeout
        self._gate = threading.Semaphore(max_in_flight)
        self._session = session or requests.Session()
        handshake = self._request("GET", "/handshake")
        try:
            self.vocab_size = int(handshake["vocab_size"])
            self.max_len = int(handshake["max_len"])
            self.mask_id = int(handshake["mask_id"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"bad handshake payload: {handshake!r}") from exc

    def _request(self, method: str, route: str, payload: dict | None = None) -> dict:
        url = self.base_url + route
        body = None if payload is None else json.dumps(payload).encode("utf-8")
        last_error: Exception | None = None
        for attempt in range(1, self.max_attempts + 1):
            try:
                with self._gate:
                    response = self._session.request(
                        method,
                        url,
                        data=body,
                        headers={"Content-Type": "application/json"} if body else None,
                        timeout=self.timeout,
                    )
            except requests.RequestException as exc:
                last_error = exc
                if attempt < self.max_attempts:
                    time.sleep(self.retry_wait)
                continue
            if response.status_code != 200:
                raise ProtocolError(f"{route} returned HTTP {response.status_code}")
            try:
                decoded = json.loads(response.content.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise ProtocolError(f"{route} returned an undecodable body") from exc
            if not isinstance(decoded, dict):
                raise ProtocolError(f"{route} returned {type(decoded).__name__}, expected an object")
            return decoded
        raise RemoteUnavailableError(f"cannot reach {url}: {last_error}", attempts=self.max_attempts)

    def score(self, rendered: "RenderedInput") -> MaskLogits:
        if len(rendered.token_ids) > self.max_len:
            raise ValueError(
                f"input of {len(rendered.token_ids)} tokens exceeds service max length {self.max_len}"
            )
        payload = {"tokens": list(rendered.token_ids), "mask_index": rendered.mask_position}
        decoded = self._request("POST", "/score", payload)
        logits = decoded.get("logits")
        if not isinstance(logits, list) or len(logits) != self.vocab_size:
            got = len(logits) if isinstance(logits, list) else type(logits).__name__
            raise ProtocolError(f"expected {self.vocab_size} logits, got {got}")
        values = np.asarray(logits, dtype=np.float64)
        if not np.all(np.isfinite(values)):
            raise ProtocolError("service returned non-finite logits")
        return MaskLogits(values=values, source=f"remote:{self.base_url}")

    def train_step(self, batch, mask_logit_grads, lr, losses=None) -> float:
        raise UnsupportedOperationError("the remote backend is score-only")


def remote_score(rendered: "RenderedInput", endpoint: str, **kwargs) -> MaskLogits:
    """One-shot scoring against a service address (handshake included)."""
    return RemoteLm(endpoint, **kwargs).score(rendered)
