import json
import math

import numpy as np
import pytest

from avfusion import data
from avfusion.data import SyntheticSpec
from avfusion.errors import InvalidConfig, ShapeMismatch
from avfusion.metrics import compute_report
from avfusion.models import ModelConfig, build, load_weights
from avfusion.training import AdamState, HistoryEntry, TrainConfig, TrainHistory, adam_step, evaluate, train
from oracles import brute_force_gap

TINY = ModelConfig(visual_dim=16, audio_dim=8, vocab_size=24, seq_len=4, hidden=(32,), fusion_hidden=())


@pytest.fixture(scope="module")
def splits():
    return data.split(data.generate(SyntheticSpec()), 0.8, seed=7)


class Scalar:
    """Stand-in model with one scalar parameter for optimizer oracles."""

    def __init__(self, x=0.0):
        self.p = {"x": np.array([x])}
        self.g = {"x": np.zeros(1)}

    def parameters(self):
        return self.p

    def gradients(self):
        return self.g

    def zero_grads(self):
        self.g["x"][...] = 0


class TestAdam:
    def test_zero_gradient_is_bitwise_noop(self):
        model = build(TINY, 1)
        before = model.weights_checksum()
        state = AdamState.for_model(model)
        for _ in range(3):
            adam_step(state, model)
        assert model.weights_checksum() == before
        assert state.t == 3

    def test_first_step_magnitude(self):
        model = Scalar()
        state = AdamState.for_model(model, lr=0.01)
        model.g["x"][0] = 1.0
        adam_step(state, model)
        assert model.p["x"][0] == pytest.approx(-0.01 / (1 + 1e-8), rel=1e-12)
        assert model.g["x"][0] == 0.0

    def test_quadratic_descends(self):
        model = Scalar(0.0)
        state = AdamState.for_model(model, lr=0.1)
        losses = []
        for _ in range(10):
            x = model.p["x"][0]
            losses.append((x - 3.0) ** 2)
            model.g["x"][0] = 2 * (x - 3.0)
            adam_step(state, model)
        assert all(b < a for a, b in zip(losses[1:], losses[2:]))

    def test_registry_drift(self):
        state = AdamState.for_model(build(TINY))
        with pytest.raises(ShapeMismatch):
            adam_step(state, build(ModelConfig(**{**TINY.to_dict(), "hidden": [8]})))


class TestConfigAndHistory:
    def test_invalid(self):
        with pytest.raises(InvalidConfig):
            TrainConfig(batch_size=0)
        with pytest.raises(InvalidConfig):
            TrainConfig(early_stop_patience=0)
        with pytest.raises(InvalidConfig):
            TrainConfig.from_dict({"epoch": 3})

    def test_history_epochs_increase(self):
        report = compute_report(np.array([[0.9]]), [(0,)])
        history = TrainHistory()
        history.append(HistoryEntry(1, 0.5, report))
        with pytest.raises(ValueError):
            history.append(HistoryEntry(1, 0.4, report))


class TestEvaluate:
    def test_pure_and_idempotent(self, splits):
        _, val = splits
        model = build(TINY, 2)
        before = model.weights_checksum()
        a, b = evaluate(model, val), evaluate(model, val)
        assert a == b
        assert model.weights_checksum() == before

    def test_threads_match_single_thread(self, splits):
        _, val = splits
        model = build(TINY, 2)
        assert evaluate(model, val, threads=3) == evaluate(model, val)

    def test_perfect_oracle(self, splits):
        _, val = splits
        preds = np.zeros((len(val), 24))
        for i, ls in enumerate(val.labels):
            preds[i, list(ls)] = 1.0
        report = compute_report(preds, val.labels)
        assert report.gap == 1.0 and report.micro_f1 == 1.0

    @pytest.mark.parametrize("seed", range(3))
    def test_untrained_model_near_prevalence(self, seed):
        spec = SyntheticSpec(num_videos=400, visual_only_fraction=0, audio_only_fraction=0, both_fraction=0, seed=seed)
        ds = data.generate(spec)
        # every class is noise, so any fixed ranking is as good as chance
        p = brute_force_gap(np.zeros((len(ds), 24)), ds.labels, 24)
        gap = evaluate(build(TINY, seed), ds, gap_k=24).gap
        assert 0.8 * p <= gap <= 1.2 * p

    def test_nonconforming_dataset(self, splits):
        _, val = splits
        with pytest.raises(ShapeMismatch):
            evaluate(build(ModelConfig(**{**TINY.to_dict(), "seq_len": 5})), val)


class TestTrain:
    def test_zero_epochs(self, splits):
        history = train(build(TINY), *splits, TrainConfig(epochs=0))
        assert [e.epoch for e in history.entries] == [0]

    def test_deterministic(self, splits, tmp_path):
        cfg = TrainConfig(epochs=3, seed=4)
        a, b = build(TINY, 4), build(TINY, 4)
        ha = train(a, *splits, cfg, tmp_path / "a")
        hb = train(b, *splits, cfg, tmp_path / "b")
        assert ha.to_json() == hb.to_json()
        assert (tmp_path / "a" / "best.afw1").read_bytes() == (tmp_path / "b" / "best.afw1").read_bytes()

    def test_loss_halves(self, splits):
        history = train(build(TINY, 0), *splits, TrainConfig(early_stop_patience=100))
        first, last = history.entries[1].train_loss, history.entries[-1].train_loss
        assert last <= 0.5 * first

    def test_early_stopping_bound_and_best(self, splits, tmp_path):
        cfg = TrainConfig(epochs=40, eval_every=2, early_stop_patience=2, lr=0.05)
        model = build(TINY, 3)
        history = train(model, *splits, cfg, tmp_path)
        assert len(history) <= 1 + math.ceil(40 / 2)
        best = max(e.report.gap for e in history.entries)
        assert history.best.report.gap == best
        # restored parameters reproduce the best evaluation
        assert evaluate(model, splits[1]) == history.best.report

        for name in ("best.afw1", "last.afw1", "history.json", "best.json"):
            assert (tmp_path / name).exists()
        on_disk = json.loads((tmp_path / "history.json").read_text())
        assert [e["epoch"] for e in on_disk] == [e.epoch for e in history.entries]
        sidecar = json.loads((tmp_path / "best.json").read_text())
        assert sidecar["metrics"]["gap"] == best
        reloaded = load_weights(tmp_path / "best.afw1", TINY)
        assert evaluate(reloaded, splits[1]).gap == best

    def test_eval_schedule_includes_last_epoch(self, splits):
        history = train(build(TINY), *splits, TrainConfig(epochs=5, eval_every=2, early_stop_patience=10))
        assert [e.epoch for e in history.entries] == [0, 2, 4, 5]

    def test_mismatched_dataset(self, splits):
        with pytest.raises(ShapeMismatch):
            train(build(ModelConfig(**{**TINY.to_dict(), "vocab_size": 5})), *splits, TrainConfig(epochs=1))
