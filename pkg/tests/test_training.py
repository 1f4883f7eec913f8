import math

import numpy as np
import pytest

from crossmodal import training
from crossmodal.checkpoint import checkpoint_bytes
from crossmodal.config import ExperimentConfig
from crossmodal.correlation import ConstantTower, CorrelationTower
from crossmodal.errors import ConfigError, ContractError, NumericError, SuiteError
from crossmodal.taxonomy import load_taxonomy
from crossmodal.training import evaluate, run_experiment_suite, train_classifier, train_tower

SMALL = dict(heads=2, head_dim=4, rnn_hidden=8, head_hidden=16, clusters_video=4, clusters_audio=2)


class CountingTower(ConstantTower):
    def __init__(self, value):
        super().__init__(value)
        self.calls = 0

    def predict(self, f_v, f_a):
        self.calls += 1
        return super().predict(f_v, f_a)

    def feature(self, f_v, f_a):
        self.calls += 1
        return super().feature(f_v, f_a)


def same_records(a, b):
    # NaN-aware equality of report records
    return [{k: ("nan" if isinstance(v, float) and math.isnan(v) else v) for k, v in r.items()} for r in a] == \
        [{k: ("nan" if isinstance(v, float) and math.isnan(v) else v) for k, v in r.items()} for r in b]


@pytest.fixture(scope="module")
def tiny_tower(tiny_corpus):
    return train_tower(tiny_corpus, ExperimentConfig(), seed=0)[0]


@pytest.mark.parametrize("variant", ["E", "L"])
def test_plain_variants_never_consult_tower(tiny_corpus, variant):
    tower = CountingTower(1.0)
    cfg = ExperimentConfig(variant=variant, max_epochs=1, **SMALL)
    result = train_classifier(cfg, tiny_corpus, tower, seed=0)
    evaluate(result.model, tiny_corpus.test, tiny_corpus.taxonomy, tower, resamples=0)
    assert tower.calls == 0


@pytest.mark.parametrize("backbone", ["rnn", "transformer", "netvlad"])
def test_gate_zero_reproduces_late_fusion(tiny_corpus, backbone):
    base = ExperimentConfig(backbone=backbone, max_epochs=2, **SMALL)
    late = train_classifier(base.replace(variant="L"), tiny_corpus, seed=4)
    gated = train_classifier(base.replace(variant="CM-G"), tiny_corpus, ConstantTower(0.0), seed=4)
    assert len(late.step_losses) == len(gated.step_losses) > 0
    assert max(abs(a - b) for a, b in zip(late.step_losses, gated.step_losses)) < 1e-10


def test_cross_modal_variants_need_frozen_tower(tiny_corpus):
    cfg = ExperimentConfig(variant="CM-G", max_epochs=1, **SMALL)
    with pytest.raises(ContractError):
        train_classifier(cfg, tiny_corpus, None)
    with pytest.raises(ContractError):
        train_classifier(cfg, tiny_corpus, CorrelationTower(tiny_corpus.video_dim, tiny_corpus.audio_dim))


def test_tower_unchanged_by_classifier_training(tiny_corpus, tiny_tower):
    before = tiny_tower.digest()
    train_classifier(ExperimentConfig(variant="CM-C", max_epochs=1, **SMALL), tiny_corpus, tiny_tower, seed=0)
    assert tiny_tower.digest() == before


def test_concat_widens_inputs_by_tower_feature(tiny_corpus, tiny_tower):
    cfg = ExperimentConfig(variant="CM-C", max_epochs=1, **SMALL)
    model = training.build_model(cfg, tiny_corpus, tiny_tower)
    plain = training.build_model(cfg.replace(variant="CM-G"), tiny_corpus, tiny_tower)
    assert model.arch()["corr_dim"] == tiny_tower.feature_dim == 17
    assert model.tower.video.W_q.shape[1] == plain.tower.video.W_q.shape[1] + 17


def test_early_stopping_keeps_best_epoch(tiny_corpus, monkeypatch):
    script = iter([0.5, 0.3, 0.2, 0.4, 0.6])
    snapshots = []

    def fake_mean_loss(model, data, gate, feat):
        snapshots.append({k: p.data.copy() for k, p in model.params.items()})
        return next(script)

    monkeypatch.setattr(training, "_mean_loss", fake_mean_loss)
    cfg = ExperimentConfig(variant="L", max_epochs=5, **SMALL)
    result = train_classifier(cfg, tiny_corpus, seed=0)
    assert result.checkpoint.state["epoch"] == 3 and result.checkpoint.state["best_val"] == 0.2
    for k, arr in result.checkpoint.params.items():
        assert arr.tobytes() == snapshots[2][k].tobytes()
        assert result.model.params[k].data.tobytes() == snapshots[2][k].tobytes()
    assert not all(np.array_equal(snapshots[2][k], snapshots[4][k]) for k in snapshots[2])
    # plateau after epoch 3 decays the lr for epoch 5 (patience 2)
    assert [e["lr"] for e in result.log] == [cfg.lr] * 5
    assert math.isclose(result.checkpoint.state["lr"], cfg.lr * cfg.sched_factor)


def test_nonfinite_loss_aborts(tiny_corpus, monkeypatch):
    monkeypatch.setattr(training, "_mean_loss", lambda *a: math.nan)
    with pytest.raises(NumericError):
        train_classifier(ExperimentConfig(variant="L", max_epochs=1, **SMALL), tiny_corpus, seed=0)


def test_training_deterministic(tiny_corpus, tiny_tower):
    cfg = ExperimentConfig(variant="CM-C", max_epochs=2, **SMALL)
    a = train_classifier(cfg, tiny_corpus, tiny_tower, seed=1)
    b = train_classifier(cfg, tiny_corpus, tiny_tower, seed=1)
    assert a.log == b.log
    assert checkpoint_bytes(a.checkpoint) == checkpoint_bytes(b.checkpoint)


@pytest.fixture(scope="module")
def default_tower(default_corpus):
    return train_tower(default_corpus, ExperimentConfig(), seed=0)[0]


@pytest.mark.slow
@pytest.mark.parametrize("backbone", ["rnn", "transformer", "netvlad"])
@pytest.mark.parametrize("variant", ["E", "L", "CM-G", "CM-C"])
def test_loss_decreases_on_default_corpus(default_corpus, default_tower, backbone, variant):
    cfg = ExperimentConfig(backbone=backbone, variant=variant, max_epochs=3)
    log = train_classifier(cfg, default_corpus, default_tower, seed=0).log
    losses = [e["train_loss"] for e in log]
    assert losses[0] > losses[1] > losses[2]


def test_evaluate_structure_and_determinism(default_corpus):
    cfg = ExperimentConfig(variant="L")
    model = training.build_model(cfg, default_corpus)
    a = evaluate(model, default_corpus.test, default_corpus.taxonomy, seed=0)
    b = evaluate(model, default_corpus.test, default_corpus.taxonomy, seed=0)
    assert same_records(a.to_records(), b.to_records())
    assert a.scopes[:5] == ["overall", "level0", "level1", "level2", "level3"]
    assert [s for s in a.scopes if s.startswith("cat:")] == [
        "cat:Electronics", "cat:Sports", "cat:Movie", "cat:Art", "cat:Transport", "cat:Food", "cat:Games", "cat:Travel"]
    assert a.meta["resamples"] == 5
    row = a.row("overall")
    assert all(math.isfinite(row.std[m]) and row.std[m] >= 0 for m in row.values)
    assert set(a.meta["full"]) == set(a.scopes)


def test_evaluate_from_checkpoint_matches_model(tiny_corpus):
    result = train_classifier(ExperimentConfig(variant="L", max_epochs=1, **SMALL), tiny_corpus, seed=0)
    a = evaluate(result.model, tiny_corpus.test, tiny_corpus.taxonomy, resamples=0)
    b = evaluate(result.checkpoint, tiny_corpus.test, tiny_corpus.taxonomy, resamples=0)
    assert same_records(a.to_records(), b.to_records())


def test_evaluate_label_mismatch(tiny_corpus):
    model = training.build_model(ExperimentConfig(variant="L", **SMALL), tiny_corpus)
    with pytest.raises(ConfigError):
        evaluate(model, tiny_corpus.test, load_taxonomy(["A", "B"]))


def _suite(corpus, **kw):
    configs = [ExperimentConfig(backbone="rnn", variant=v, max_epochs=2, **SMALL) for v in ("CM-C", "L", "E", "CM-G")]
    return run_experiment_suite(configs, corpus, seeds=[1, 0], **kw)


def test_suite_structure_and_deltas(tiny_corpus):
    lines = []
    result = _suite(tiny_corpus, progress=lines.append)
    assert [(r.seed, r.variant) for r in result.runs] == [(s, v) for s in (0, 1) for v in ("E", "L", "CM-G", "CM-C")]
    assert len(lines) == 8 and set(result.towers) == {"0", "1"}
    summary = result.summary()
    overall = [r for r in summary if r["scope"] == "overall" and r["metric"] == "gap"]
    assert [r["variant"] for r in overall] == ["E", "L", "CM-G", "CM-C"]
    by_variant = {r["variant"]: r for r in overall}
    for rec in summary:
        base = next(r for r in summary if r["variant"] == "L" and r["scope"] == rec["scope"]
                    and r["metric"] == rec["metric"])
        if math.isfinite(rec["error_mean"]):
            assert rec["delta_vs_L"] == base["error_mean"] - rec["error_mean"]
    errs = result.errors("rnn", "CM-C", "overall", "gap")
    assert by_variant["CM-C"]["error_mean"] == float(np.mean(errs))
    assert by_variant["L"]["delta_vs_L"] == 0.0


def test_suite_failure_flags_partial(tiny_corpus, monkeypatch):
    real = training.train_classifier
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 3:
            raise NumericError("loss became NaN")
        return real(*args, **kwargs)

    monkeypatch.setattr(training, "train_classifier", flaky)
    with pytest.raises(SuiteError) as err:
        _suite(tiny_corpus)
    assert err.value.partial.partial is True
    assert len(err.value.partial.runs) == 2
    assert isinstance(err.value.__cause__, NumericError)


def test_suite_needs_configs(tiny_corpus):
    with pytest.raises(ConfigError):
        run_experiment_suite([], tiny_corpus)
