"""Experiment harness tests: aggregation arithmetic, protocol behavior,
reproducibility, the K sweep, and joint ensemble inference."""

import dataclasses

import numpy as np
import pytest

from promptlab.harness import (
    CellResult,
    EvalReport,
    ExperimentConfig,
    HarnessError,
    SeedArtifacts,
    ensemble_report,
    format_cell,
    format_gain,
    k_sweep,
    mean_of,
    median_of,
    population_variance,
    run_experiment,
    with_filter,
)
from promptlab.mapping import LabelMapping, MappingHead
from promptlab.taskconfig import ConfigError

FAST = ExperimentConfig(
    task="synthetic-marker",
    batch_sizes=(8,),
    learning_rates=(5e-3,),
    max_steps=200,
    eval_every=25,
    early_stop_dev=1.0,
)


class TestAggregation:
    def test_paper_cell_arithmetic(self):
        bests = [0.8, 0.9]
        assert mean_of(bests) == pytest.approx(0.85, abs=1e-15)
        assert population_variance(bests) == pytest.approx(0.0025, abs=1e-15)
        assert median_of(bests) == pytest.approx(0.85, abs=1e-15)
        # exactness holds against direct recomputation
        assert mean_of(bests) == (0.8 + 0.9) / 2

    def test_reference_set(self):
        bests = [0.8, 0.9, 0.85, 0.95, 0.9]
        assert mean_of(bests) == sum(bests) / 5
        m = sum(bests) / 5
        assert population_variance(bests) == sum((b - m) ** 2 for b in bests) / 5
        assert median_of(bests) == sorted(bests)[2]

    def test_cell_format_matches_paper_style(self):
        assert format_cell(0.872, 0.00034) == "87.2 (3.4)"
        assert format_cell(0.5040, 0.00013) == "50.4 (1.3)"

    def test_gain_format(self):
        assert format_gain(0.0) == "(+0.0)"
        assert format_gain(0.096) == "(+9.6)"
        assert format_gain(-0.001) == "(-0.1)"

    def test_median_even_count(self):
        assert median_of([0.2, 0.8, 0.4, 0.6]) == pytest.approx(0.5)


class TestConfig:
    def test_needs_grid(self):
        with pytest.raises(ConfigError):
            ExperimentConfig(seeds=())
        with pytest.raises(ConfigError):
            ExperimentConfig(batch_sizes=())

    def test_hash_stable_and_sensitive(self):
        a = ExperimentConfig()
        b = ExperimentConfig()
        assert a.config_hash() == b.config_hash()
        c = dataclasses.replace(a, k=8)
        assert a.config_hash() != c.config_hash()

    def test_with_filter_changes_hash(self):
        from promptlab.depfilter import Filter

        base = ExperimentConfig()
        assert with_filter(base, Filter("POS", "NN")).config_hash() != base.config_hash()


class TestRunExperiment:
    def test_single_cell_aggregates_trivially(self):
        config = dataclasses.replace(FAST, seeds=(1,))
        report = run_experiment(config)
        only = report.per_seed_best[1]
        assert report.mean == only
        assert report.variance == 0.0
        assert report.median == only

    def test_protocol_shapes(self):
        report = run_experiment(FAST)
        assert len(report.cells) == 5  # 5 seeds x 1 bs x 1 lr
        assert sorted(report.per_seed_best) == [1, 2, 3, 4, 5]
        assert not report.incomplete
        recomputed = [report.per_seed_best[s] for s in sorted(report.per_seed_best)]
        assert report.mean == mean_of(recomputed)
        assert report.variance == population_variance(recomputed)
        assert report.median == median_of(recomputed)

    def test_bitwise_reproducible(self):
        a = run_experiment(FAST).to_dict()
        b = run_experiment(FAST).to_dict()
        assert a == b

    def test_audit_orders_selection_before_test(self):
        report = run_experiment(dataclasses.replace(FAST, seeds=(1,)))
        lines = [l for l in report.audit if l.startswith("cell ")]
        selected = [i for i, l in enumerate(lines) if "selected step" in l]
        assert selected, "no selection line in audit"
        dev_lines = [i for i, l in enumerate(lines) if " dev=" in l]
        assert dev_lines and min(dev_lines) < selected[0]

    def test_dev_drives_selection(self):
        report = run_experiment(dataclasses.replace(FAST, seeds=(1,)))
        cell = report.cells[0]
        assert cell.dev_accuracy == 1.0
        assert cell.best_step <= cell.steps

    def test_convergence_over_five_seeds(self):
        report = run_experiment(FAST)
        assert report.mean >= 0.95

    def test_report_serialization(self, tmp_path):
        report = run_experiment(dataclasses.replace(FAST, seeds=(1,)))
        path = tmp_path / "report.json"
        report.save(path)
        import json

        payload = json.loads(path.read_text())
        assert payload["config_hash"] == report.config_hash
        assert payload["formatted"] == report.formatted()
        assert payload["cells"][0]["seed"] == 1

    def test_parallel_matches_serial(self):
        serial = run_experiment(FAST)
        parallel = run_experiment(dataclasses.replace(FAST, parallelism=3))
        assert serial.per_seed_best == parallel.per_seed_best
        assert serial.mean == parallel.mean

    def test_unknown_mapping_errors(self):
        with pytest.raises(ConfigError, match="no mapping"):
            run_experiment(dataclasses.replace(FAST, mapping="nonexistent"))

    def test_filter_without_annotations(self):
        from promptlab.depfilter import Filter
        from promptlab.harness import resolve_task

        task = resolve_task(FAST)
        task.annotations.clear()
        with pytest.raises(ConfigError, match="annotation"):
            run_experiment(with_filter(FAST, Filter("POS", "JJ")), task_data=task)

    def test_failed_cell_recorded_not_fatal(self):
        import warnings

        config = dataclasses.replace(
            FAST, seeds=(1,), learning_rates=(5e-3, float("nan")), max_steps=50
        )
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            report = run_experiment(config)
        assert report.incomplete
        errors = [c for c in report.cells if c.error is not None]
        assert len(errors) == 1
        assert report.per_seed_best[1] > 0.0  # the healthy cell still reports

    def test_remote_backend_heads_only(self, tmp_path):
        # the harness can run against a score-only service: heads train,
        # the backend is never stepped
        import numpy as np

        from promptlab.harness import prepare, resolve_task

        from .loopback import LoopbackService

        task = resolve_task(FAST)
        probe = prepare(FAST, task)  # borrow the tiny-backend tokenizer
        vocab_path = tmp_path / "vocab.txt"
        probe.tokenizer.to_vocab_file(vocab_path)
        rng = np.random.default_rng(5)
        logits = rng.normal(0, 1, len(probe.tokenizer))
        with LoopbackService(logits, max_len=64) as svc:
            config = dataclasses.replace(
                FAST,
                seeds=(1,),
                max_steps=30,
                eval_every=15,
                early_stop_dev=None,
                backend="remote",
                remote_url=svc.url,
                remote_vocab=str(vocab_path),
            )
            report = run_experiment(config)
        assert not report.incomplete
        assert 0.0 <= report.per_seed_best[1] <= 1.0


class TestKSweep:
    def test_rows_and_gain_convention(self):
        rows = k_sweep(
            dataclasses.replace(FAST, seeds=(1, 2)),
            [8, 16],
            batch_size=4,
            learning_rate=5e-3,
            max_steps=150,
        )
        assert [row["k"] for row in rows] == [8, 16]
        assert rows[0]["formatted"].endswith("(+0.0)")
        assert rows[1]["gain"] == pytest.approx(rows[1]["mean"] - rows[0]["mean"])

    def test_single_k_row(self):
        rows = k_sweep(
            dataclasses.replace(FAST, seeds=(1,)),
            [8],
            batch_size=4,
            learning_rate=5e-3,
            max_steps=100,
        )
        assert len(rows) == 1
        assert rows[0]["gain"] == 0.0
        assert rows[0]["formatted"].endswith("(+0.0)")

    def test_ks_must_increase(self):
        with pytest.raises(ConfigError):
            k_sweep(FAST, [16, 8])
        with pytest.raises(ConfigError):
            k_sweep(FAST, [])

    def test_gains_non_negative_on_marker_task(self):
        # more shots cannot hurt on the marker task: k=1 may miss a marker
        # variant, k>=4 sees them all
        rows = k_sweep(FAST, [1, 4, 16], batch_size=4, learning_rate=5e-3, max_steps=300)
        assert all(row["gain"] >= 0.0 for row in rows)
        assert rows[-1]["mean"] >= rows[0]["mean"]


class StubBackend:
    """Fixed per-input logits; lets joint-inference tests fabricate members."""

    trainable = False

    def __init__(self, table, vocab_size):
        self.table = table
        self.vocab_size = vocab_size
        self.max_len = 64
        self.mask_id = 4

    def score(self, rendered):
        from promptlab.mapping import MaskLogits

        return MaskLogits(values=np.asarray(self.table[rendered.token_ids], dtype=np.float64))


def fabricate_member(per_example_probs, examples, rendered_map, vocab=8):
    """Member whose predict_proba on example i returns the given vector."""
    mapping = LabelMapping(name="m", token_ids=((0,), (1,)))
    head = MappingHead.unit(mapping)
    table = {}
    for e, p in zip(examples, per_example_probs):
        values = np.zeros(vocab)
        values[0], values[1] = np.log(p[0]), np.log(p[1])
        table[rendered_map[e.id].token_ids] = values
    return SeedArtifacts(
        label_names=("negative", "positive"),
        backend=StubBackend(table, vocab),
        heads=[head],
        mappings=[mapping],
        rendered=rendered_map,
    )


def report_with_artifacts(artifacts, acc):
    return EvalReport(
        task="synthetic-marker",
        config_hash="x",
        cells=[CellResult(seed=1, batch_size=8, learning_rate=5e-3, test_accuracy=acc)],
        per_seed_best={1: acc},
        mean=acc,
        variance=0.0,
        median=acc,
        artifacts={1: artifacts},
    )


class TestEnsembleReport:
    def _setup(self):
        from promptlab.harness import resolve_task
        from promptlab.template import RenderedInput

        task = resolve_task(ExperimentConfig(task="synthetic-marker"))
        examples = task.test_examples
        rendered_map = {
            e.id: RenderedInput(token_ids=(2, 100 + i, 4, 3), mask_position=2, truncated=False)
            for i, e in enumerate(examples)
        }
        return task, examples, rendered_map

    def test_single_member_equals_member(self):
        report = run_experiment(dataclasses.replace(FAST, seeds=(1, 2)))
        joint = ensemble_report([report], FAST)
        assert joint.per_seed_best == report.per_seed_best

    def test_identical_members_equal_accuracy(self):
        report = run_experiment(dataclasses.replace(FAST, seeds=(1,)))
        joint = ensemble_report([report, report], FAST)
        assert joint.per_seed_best == report.per_seed_best

    def test_complementary_members_beat_best(self):
        task, examples, rendered_map = self._setup()
        half = len(examples) // 2

        probs_a, probs_b = [], []
        for i, e in enumerate(examples):
            right = [0.1, 0.1]
            right[e.label] = 0.9
            wrong = [0.45, 0.45]
            wrong[1 - e.label] = 0.55
            if i < half:  # A confident-right on the first half, B mildly wrong
                probs_a.append(right)
                probs_b.append(wrong)
            else:
                probs_a.append(wrong)
                probs_b.append(right)
        member_a = fabricate_member(probs_a, examples, rendered_map)
        member_b = fabricate_member(probs_b, examples, rendered_map)
        reports = [
            report_with_artifacts(member_a, 0.5),
            report_with_artifacts(member_b, 0.5),
        ]
        joint = ensemble_report(reports, FAST)

        # oracle: direct evaluation of the averaged distributions
        hits = 0
        for pa, pb, e in zip(probs_a, probs_b, examples):
            avg = [(pa[0] + pb[0]) / 2, (pa[1] + pb[1]) / 2]
            hits += int(int(np.argmax(avg)) == e.label)
        direct = hits / len(examples)
        assert joint.per_seed_best[1] == direct
        member_best = max(r.per_seed_best[1] for r in reports)
        assert joint.per_seed_best[1] >= member_best - 0.02

    def test_label_set_mismatch(self):
        task, examples, rendered_map = self._setup()
        member = fabricate_member([[0.6, 0.4]] * len(examples), examples, rendered_map)
        other = fabricate_member([[0.6, 0.4]] * len(examples), examples, rendered_map)
        other.label_names = ("a", "b", "c")
        with pytest.raises(HarnessError, match="label sets"):
            ensemble_report(
                [report_with_artifacts(member, 0.5), report_with_artifacts(other, 0.5)], FAST
            )

    def test_requires_artifacts(self):
        report = run_experiment(dataclasses.replace(FAST, seeds=(1,)))
        stripped = dataclasses.replace(report, artifacts=None)
        with pytest.raises(HarnessError, match="artifacts"):
            ensemble_report([stripped], FAST)
