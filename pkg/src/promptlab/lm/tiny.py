"""A small trainable masked LM: embeddings, a few post-norm encoder
layers (single-head self-attention + feed-forward), and an output
projection tied to the input embeddings — so the vocabulary projection
is a named, inspectable matrix.

Forward and backward passes are written out in numpy; gradients are
exact and verified against finite differences in the test suite.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np

from ..mapping import MaskLogits
from ..optim import make_optimizer
from .base import LmBackend

if TYPE_CHECKING:
    from ..template import RenderedInput

CHECKPOINT_VERSION = 1
_LN_EPS = 1e-5


@dataclass(frozen=True)
class TinyMlmConfig:
    vocab_size: int
    max_len: int = 64
    dim: int = 32
    layers: int = 1
    ff_dim: Optional[int] = None  # defaults to 2 * dim
    seed: int = 0
    optimizer: str = "adamw"

    def __post_init__(self) -> None:
        if not 16 <= self.dim <= 128:
            raise ValueError(f"dim must be in [16, 128], got {self.dim}")
        if not 1 <= self.layers <= 4:
            raise ValueError(f"layers must be in [1, 4], got {self.layers}")
        if self.vocab_size < 6:
            raise ValueError("vocab must cover the special tokens")

    @property
    def ff(self) -> int:
        return self.ff_dim if self.ff_dim is not None else 2 * self.dim


def _layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mu) * inv
    return xhat * gamma + beta, (xhat, inv)


def _layer_norm_backward(dy: np.ndarray, cache, gamma: np.ndarray):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * gamma
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


class TinyMlm(LmBackend):
    def __init__(self, config: TinyMlmConfig):
        self.config = config
        self.vocab_size = config.vocab_size
        self.max_len = config.max_len
        self.mask_id = 4  # TokenizerHandle layout
        self.params = self._init_params()
        self._optimizer = make_optimizer(config.optimizer, self.params)

    def _init_params(self) -> dict[str, np.ndarray]:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        d, f = cfg.dim, cfg.ff
        params: dict[str, np.ndarray] = {
            "emb": rng.normal(0.0, 0.02, (cfg.vocab_size, d)),
            "pos": rng.normal(0.0, 0.02, (cfg.max_len, d)),
        }
        for l in range(cfg.layers):
            for name in ("wq", "wk", "wv", "wo"):
                params[f"{name}{l}"] = rng.normal(0.0, np.sqrt(1.0 / d), (d, d))
            params[f"w1_{l}"] = rng.normal(0.0, np.sqrt(2.0 / (d + f)), (d, f))
            params[f"c1_{l}"] = np.zeros(f)
            params[f"w2_{l}"] = rng.normal(0.0, np.sqrt(2.0 / (d + f)), (f, d))
            params[f"c2_{l}"] = np.zeros(d)
            params[f"g1_{l}"] = np.ones(d)
            params[f"b1_{l}"] = np.zeros(d)
            params[f"g2_{l}"] = np.ones(d)
            params[f"b2_{l}"] = np.zeros(d)
        return params

    @property
    def trainable(self) -> bool:
        return True

    # forward / backward

    def _forward(self, ids: Sequence[int]):
        p = self.params
        ids = np.asarray(ids)
        s = len(ids)
        d = self.config.dim
        x = p["emb"][ids] + p["pos"][:s]
        cache: list[dict] = [{"x0": x}]
        for l in range(self.config.layers):
            x_in = x
            q = x_in @ p[f"wq{l}"]
            k = x_in @ p[f"wk{l}"]
            v = x_in @ p[f"wv{l}"]
            scores = q @ k.T / np.sqrt(d)
            a = _softmax_rows(scores)
            ctx = a @ v
            attn = ctx @ p[f"wo{l}"]
            r1 = x_in + attn
            x1, ln1_cache = _layer_norm(r1, p[f"g1_{l}"], p[f"b1_{l}"])
            pre = x1 @ p[f"w1_{l}"] + p[f"c1_{l}"]
            h = np.maximum(pre, 0.0)
            ff = h @ p[f"w2_{l}"] + p[f"c2_{l}"]
            r2 = x1 + ff
            x, ln2_cache = _layer_norm(r2, p[f"g2_{l}"], p[f"b2_{l}"])
            cache.append(
                {
                    "x_in": x_in, "q": q, "k": k, "v": v, "a": a, "ctx": ctx,
                    "ln1": ln1_cache, "x1": x1, "pre": pre, "h": h, "ln2": ln2_cache,
                }
            )
        return x, cache, ids

    def _backward(self, d_hidden: np.ndarray, cache: list[dict], ids: np.ndarray) -> dict[str, np.ndarray]:
        p = self.params
        d = self.config.dim
        grads = {name: np.zeros_like(val) for name, val in p.items()}
        dx = d_hidden
        for l in reversed(range(self.config.layers)):
            c = cache[l + 1]
            dr2, dg2, db2 = _layer_norm_backward(dx, c["ln2"], p[f"g2_{l}"])
            grads[f"g2_{l}"] += dg2
            grads[f"b2_{l}"] += db2
            dff = dr2
            grads[f"w2_{l}"] += c["h"].T @ dff
            grads[f"c2_{l}"] += dff.sum(axis=0)
            dh = dff @ p[f"w2_{l}"].T
            dpre = dh * (c["pre"] > 0.0)
            grads[f"w1_{l}"] += c["x1"].T @ dpre
            grads[f"c1_{l}"] += dpre.sum(axis=0)
            dx1 = dr2 + dpre @ p[f"w1_{l}"].T
            dr1, dg1, db1 = _layer_norm_backward(dx1, c["ln1"], p[f"g1_{l}"])
            grads[f"g1_{l}"] += dg1
            grads[f"b1_{l}"] += db1
            dattn = dr1
            grads[f"wo{l}"] += c["ctx"].T @ dattn
            dctx = dattn @ p[f"wo{l}"].T
            da = dctx @ c["v"].T
            dv = c["a"].T @ dctx
            dscores = c["a"] * (da - (da * c["a"]).sum(axis=-1, keepdims=True))
            dq = dscores @ c["k"] / np.sqrt(d)
            dk = dscores.T @ c["q"] / np.sqrt(d)
            grads[f"wq{l}"] += c["x_in"].T @ dq
            grads[f"wk{l}"] += c["x_in"].T @ dk
            grads[f"wv{l}"] += c["x_in"].T @ dv
            dx = dr1 + dq @ p[f"wq{l}"].T + dk @ p[f"wk{l}"].T + dv @ p[f"wv{l}"].T
        grads["pos"][: len(ids)] += dx
        np.add.at(grads["emb"], ids, dx)
        return grads

    def _check_input(self, rendered: "RenderedInput") -> None:
        if len(rendered.token_ids) > self.max_len:
            raise ValueError(
                f"input of {len(rendered.token_ids)} tokens exceeds max length {self.max_len}"
            )
        if (
            rendered.mask_position >= len(rendered.token_ids)
            or rendered.token_ids[rendered.mask_position] != self.mask_id
        ):
            raise ValueError("rendered input has no mask token at its mask position")

    def score(self, rendered: "RenderedInput") -> MaskLogits:
        """Tied-projection logits at the mask position: emb @ h_mask."""
        self._check_input(rendered)
        hidden, _, _ = self._forward(rendered.token_ids)
        logits = self.params["emb"] @ hidden[rendered.mask_position]
        return MaskLogits(values=logits, source=f"tiny:{hash(rendered.token_ids) & 0xFFFFFFFF:08x}")

    def score_with_cache(self, rendered: "RenderedInput"):
        self._check_input(rendered)
        hidden, cache, ids = self._forward(rendered.token_ids)
        logits = self.params["emb"] @ hidden[rendered.mask_position]
        return MaskLogits(values=logits), (hidden, cache, ids, rendered.mask_position)

    def grads_from_mask_logits(self, state, d_logits: np.ndarray) -> dict[str, np.ndarray]:
        """Backpropagate a gradient at the mask logits through the model."""
        hidden, cache, ids, mask_pos = state
        d_hidden = np.zeros_like(hidden)
        d_hidden[mask_pos] = self.params["emb"].T @ d_logits
        grads = self._backward(d_hidden, cache, ids)
        # tied projection: logits = emb @ h_mask
        grads["emb"] += np.outer(d_logits, hidden[mask_pos])
        return grads

    def train_step(self, batch, mask_logit_grads, lr, losses=None) -> float:
        """One optimizer step from per-example loss gradients at the mask
        logits; returns the mean of the supplied per-example losses."""
        if len(batch) != len(mask_logit_grads) or not batch:
            raise ValueError("batch and gradient lists must align and be non-empty")
        total = {name: np.zeros_like(val) for name, val in self.params.items()}
        for rendered, d_logits in zip(batch, mask_logit_grads):
            _, state = self.score_with_cache(rendered)
            grads = self.grads_from_mask_logits(state, np.asarray(d_logits, dtype=np.float64))
            for name, g in grads.items():
                total[name] += g
        n = len(batch)
        for name in total:
            total[name] /= n
        self._optimizer.step(total, lr)
        return float(np.mean(losses)) if losses is not None else 0.0

    # parameter snapshots and checkpoints

    def copy_params(self) -> dict[str, np.ndarray]:
        return {name: val.copy() for name, val in self.params.items()}

    def load_params(self, params: dict[str, np.ndarray]) -> None:
        for name, val in params.items():
            if name not in self.params or self.params[name].shape != val.shape:
                raise ValueError(f"parameter {name!r} does not fit this model")
            self.params[name][...] = val

    def save(self, path: str | Path) -> None:
        meta = {"version": CHECKPOINT_VERSION, "config": asdict(self.config)}
        np.savez(path, __meta__=np.array(json.dumps(meta)), **self.params)

    @classmethod
    def load(cls, path: str | Path) -> "TinyMlm":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["__meta__"]))
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
            model = cls(TinyMlmConfig(**meta["config"]))
            model.load_params({k: data[k] for k in data.files if k != "__meta__"})
        return model
