"""Two-phase training (correlation tower, then classifiers), evaluation and suites."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint
from .config import BACKBONES, VARIANTS, ExperimentConfig
from .correlation import CorrelationTower, TowerReport, TowerTrainConfig, evaluate_tower, train_correlation_tower
from .data import Corpus, make_correlation_split, stack_examples
from .errors import ConfigError, ContractError, CrossModalError, NumericError, SuiteError
from .layers import FusionVariant
from .metrics import METRICS, MetricsReport, MetricsRow, build_report, predictions_from_scores
from .model import Classifier
from .optim import AdamState, PlateauScheduler, adam_step
from .taxonomy import Taxonomy

EVAL_CHUNK = 256


# -- correlation tower --------------------------------------------------------------------------


def tower_train_config(config: ExperimentConfig, seed: int) -> TowerTrainConfig:
    return TowerTrainConfig(lr=config.tower_lr, epochs=config.tower_epochs, batch_size=config.batch_size,
                            seed=seed, hidden=tuple(config.tower_hidden), threshold=config.gate_threshold)


def train_tower(corpus: Corpus, config: ExperimentConfig, seed: int) -> tuple[CorrelationTower, TowerReport]:
    """Fit and freeze the correlation tower on the corpus' train split; report on valid."""
    pos, neg = make_correlation_split(corpus.train, corpus.taxonomy, seed=seed)
    vpos, vneg = make_correlation_split(corpus.valid, corpus.taxonomy, seed=seed + 1)
    return train_correlation_tower(pos + neg, config.w_neg, tower_train_config(config, seed), vpos + vneg)


def pooled_inputs(batch: dict) -> tuple[np.ndarray, np.ndarray]:
    """Masked frame means of video and audio, [B, Dv] and [B, Da]."""
    m = batch["mask"][:, :, None]
    n = m.sum(axis=1)
    return (batch["video"] * m).sum(axis=1) / n, (batch["audio"] * m).sum(axis=1) / n


def correlation_inputs(batch: dict, variant: FusionVariant, tower, threshold: float):
    """(gate, corr_feat) for one stacked split.  E and L never touch the tower."""
    if not variant.cross_modal:
        return None, None
    f_v, f_a = pooled_inputs(batch)
    if variant is FusionVariant.CROSS_MODAL_GATED:
        y = np.asarray(tower.predict(f_v, f_a), dtype=np.float64)
        return (y >= threshold).astype(np.float64), None
    feat = np.asarray(tower.feature(f_v, f_a), dtype=np.float64)
    return feat[:, 0].copy(), feat


def _check_tower(variant: FusionVariant, tower) -> None:
    if not variant.cross_modal:
        return
    if tower is None:
        raise ContractError(f"variant {variant.value} needs a trained correlation tower")
    if not getattr(tower, "frozen", False):
        raise ContractError("the correlation tower must be frozen before classifier training")


def _rows(batch: dict, idx) -> dict:
    return {k: v[idx] for k, v in batch.items()}


def _take(arr, idx):
    return None if arr is None else arr[idx]


# -- classifier training -------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: Classifier
    checkpoint: Checkpoint
    log: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)


def build_model(config: ExperimentConfig, corpus: Corpus, tower=None, seed: int = 0) -> Classifier:
    corr_dim = tower.feature_dim if config.fusion is FusionVariant.CROSS_MODAL_CONCAT else 0
    return Classifier(config, corpus.video_dim, corpus.audio_dim, len(corpus.taxonomy.ids),
                      corpus.frames, corr_dim, seed)


def _mean_loss(model: Classifier, data: dict, gate, feat) -> float:
    n = data["video"].shape[0]
    total = 0.0
    for start in range(0, n, EVAL_CHUNK):
        idx = slice(start, start + EVAL_CHUNK)
        loss = model.loss(_rows(data, idx), _take(gate, idx), _take(feat, idx))
        total += loss.item() * len(range(*idx.indices(n)))
    return total / n


def train_classifier(config: ExperimentConfig, corpus: Corpus, tower=None, seed: int | None = None,
                     on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Adam on per-label sigmoid cross-entropy; keeps the weights of the best validation epoch.

    Every epoch is logged with its mean train loss, validation loss and lr.
    The learning rate decays on validation plateaus.
    """
    config.validate()
    seed = config.seeds[0] if seed is None else int(seed)
    variant = config.fusion
    _check_tower(variant, tower)
    if not corpus.train or not corpus.valid:
        raise ConfigError("training needs non-empty train and valid splits")
    L = len(corpus.taxonomy.ids)
    train = stack_examples(corpus.train, L)
    valid = stack_examples(corpus.valid, L)
    g_tr, f_tr = correlation_inputs(train, variant, tower, config.gate_threshold)
    g_va, f_va = correlation_inputs(valid, variant, tower, config.gate_threshold)
    model = build_model(config, corpus, tower, seed)
    params = model.params
    state = AdamState()
    sched = PlateauScheduler(config.lr, config.sched_factor, config.sched_patience)
    rng = np.random.default_rng([seed, 101])
    n = train["video"].shape[0]
    best_val, best_epoch = math.inf, -1
    best = {k: p.data.copy() for k, p in params.items()}
    log, step_losses = [], []
    for epoch in range(1, config.max_epochs + 1):
        lr = sched.lr
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            for p in params.values():
                p.grad = None
            loss = model.loss(_rows(train, idx), _take(g_tr, idx), _take(f_tr, idx))
            if not math.isfinite(loss.item()):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            ad.backward(loss)
            adam_step(params, None, state, lr, config.beta1, config.beta2, config.eps)
            step_losses.append(loss.item())
            total += loss.item() * len(idx)
        val = _mean_loss(model, valid, g_va, f_va)
        if not math.isfinite(val):
            raise NumericError(f"non-finite validation loss at epoch {epoch}")
        if val < best_val:
            best_val, best_epoch = val, epoch
            best = {k: p.data.copy() for k, p in params.items()}
        entry = {"epoch": epoch, "train_loss": total / n, "valid_loss": val, "lr": lr}
        log.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        sched.step(val)
    for k, p in params.items():
        p.data[...] = best[k]
    ckpt = Checkpoint(
        config={
            "arch": model.arch(),
            "experiment": config.to_dict(),
            "seed": seed,
            "tower": None if tower is None or not variant.cross_modal else tower.digest(),
        },
        params={k: v.copy() for k, v in best.items()},
        state={"epoch": best_epoch, "best_val": best_val, "lr": sched.lr},
    )
    return TrainResult(model, ckpt, log, step_losses)


def model_from_checkpoint(ckpt: Checkpoint) -> Classifier:
    arch = ckpt.arch
    exp = dict(ckpt.config.get("experiment", {}))
    for k in ("seeds", "tower_hidden"):
        if k in exp:
            exp[k] = tuple(exp[k])
    config = ExperimentConfig(**exp)
    model = Classifier(config, arch["video_dim"], arch["audio_dim"], arch["num_labels"], arch["frames"],
                       arch["corr_dim"], ckpt.config.get("seed", 0))
    model.load_arrays(ckpt.params)
    return model


# -- evaluation ---------------------------------------------------------------------------------------


def predict_scores(model: Classifier, data: dict, gate=None, feat=None) -> np.ndarray:
    n = data["video"].shape[0]
    out = []
    for start in range(0, n, EVAL_CHUNK):
        idx = slice(start, start + EVAL_CHUNK)
        z = model.logits(data["video"][idx], data["audio"][idx], data["mask"][idx], _take(gate, idx), _take(feat, idx))
        out.append(1.0 / (1.0 + np.exp(-z.data)))
    return np.concatenate(out, axis=0)


def evaluate(model_or_ckpt, examples, taxonomy: Taxonomy, tower=None, resamples: int | None = None,
             fraction: float | None = None, seed: int = 0) -> MetricsReport:
    """Score every example once, then report metrics.

    The full-split report is computed first.  With ``resamples > 0`` the row
    values are the mean over that many seeded subsamples of ``fraction`` of
    the split and ``std`` holds their standard deviation; the full-split
    values stay available in ``meta["full"]``.
    """
    model = model_from_checkpoint(model_or_ckpt) if isinstance(model_or_ckpt, Checkpoint) else model_or_ckpt
    config = model.config
    resamples = config.eval_resamples if resamples is None else resamples
    fraction = config.resample_fraction if fraction is None else fraction
    examples = list(examples)
    if not examples:
        raise ConfigError("cannot evaluate an empty split")
    if len(taxonomy.ids) != model.num_labels:
        raise ConfigError(f"model predicts {model.num_labels} labels, taxonomy has {len(taxonomy.ids)}")
    variant = model.variant
    _check_tower(variant, tower)
    data = stack_examples(examples, model.num_labels)
    gate, feat = correlation_inputs(data, variant, tower, config.gate_threshold)
    scores = predict_scores(model, data, gate, feat)
    preds = predictions_from_scores(scores, top_k=config.top_k)
    truths = [set(ex.labels) for ex in examples]
    full = build_report(preds, truths, taxonomy, config.top_k)
    if resamples == 0:
        return full
    rng = np.random.default_rng([seed, 202])
    k = max(1, int(round(fraction * len(examples))))
    runs = []
    for _ in range(resamples):
        idx = np.sort(rng.choice(len(examples), size=k, replace=False))
        runs.append(build_report([preds[i] for i in idx], [truths[i] for i in idx], taxonomy, config.top_k))
    rows = []
    for r, row in enumerate(full.rows):
        vals, std = {}, {}
        for m in METRICS:
            xs = np.array([run.rows[r].values[m] for run in runs])
            vals[m] = float(xs.mean())
            std[m] = float(xs.std())
        rows.append(MetricsRow(row.scope, row.n_examples, vals, std))
    meta = dict(full.meta)
    meta.update({"resamples": resamples, "fraction": fraction,
                 "full": {row.scope: dict(row.values) for row in full.rows}})
    return MetricsReport(rows, meta)


# -- experiment suite ---------------------------------------------------------------------------------


@dataclass
class RunResult:
    backbone: str
    variant: str
    seed: int
    report: MetricsReport
    log: list
    tower: dict | None = None


@dataclass
class SuiteResult:
    runs: list[RunResult]
    towers: dict = field(default_factory=dict)
    partial: bool = False
    certificate: dict = field(default_factory=dict)

    def errors(self, backbone: str, variant: str, scope: str, metric: str) -> list[float]:
        return [
            r.report.row(scope).error(metric)
            for r in sorted(self.runs, key=lambda r: r.seed)
            if r.backbone == backbone and r.variant == variant
        ]

    def summary(self) -> list[dict]:
        """Mean/std over seeds of every error, with the delta against L."""
        keys = sorted({(r.backbone, r.variant) for r in self.runs}, key=_run_order)
        scopes = self.runs[0].report.scopes if self.runs else []
        out = []
        for backbone, variant in keys:
            for scope in scopes:
                for m in METRICS:
                    errs = np.array(self.errors(backbone, variant, scope, m))
                    mean = float(errs.mean()) if errs.size and not np.isnan(errs).all() else math.nan
                    std = float(errs.std()) if errs.size and not np.isnan(errs).all() else math.nan
                    base = self.errors(backbone, "L", scope, m)
                    base_mean = float(np.mean(base)) if base and not np.isnan(base).all() else math.nan
                    out.append({
                        "backbone": backbone, "variant": variant, "scope": scope, "metric": m,
                        "n_seeds": int(errs.size), "error_mean": mean, "error_std": std,
                        "delta_vs_L": base_mean - mean,
                    })
        return out


def _run_order(key):
    backbone, variant = key
    return (BACKBONES.index(backbone), VARIANTS.index(variant))


def run_experiment_suite(configs: Sequence[ExperimentConfig], corpus: Corpus, seeds: Sequence[int] | None = None,
                         progress: Callable[[str], None] | None = None) -> SuiteResult:
    """Train and evaluate every (config, seed); one tower per seed is shared by the CM variants."""
    configs = [c.validate() for c in configs]
    if not configs:
        raise ConfigError("an experiment suite needs at least one config")
    seeds = list(configs[0].seeds if seeds is None else seeds)
    if not seeds:
        raise ConfigError("at least one seed is required")
    result = SuiteResult([], certificate=dict(corpus.certificate))
    towers: dict = {}
    try:
        for seed in sorted(seeds):
            for config in sorted(configs, key=lambda c: _run_order((c.backbone, c.variant))):
                tower = None
                if config.fusion.cross_modal:
                    key = (seed, config.tower_lr, config.tower_epochs, tuple(config.tower_hidden), config.w_neg)
                    if key not in towers:
                        towers[key] = train_tower(corpus, config, seed)
                        rep = towers[key][1]
                        result.towers[str(seed)] = {k: v for k, v in rep.as_dict().items() if k != "history"}
                    tower = towers[key][0]
                trained = train_classifier(config, corpus, tower, seed)
                report = evaluate(trained.model, corpus.test, corpus.taxonomy, tower, seed=seed)
                result.runs.append(RunResult(config.backbone, config.variant, seed, report, trained.log))
                if progress is not None:
                    hit = report.row("overall").error("hit1")
                    progress(f"{config.backbone} {config.variant} seed={seed} hit1_err={hit:.2f}")
    except CrossModalError as exc:
        result.partial = True
        raise SuiteError(f"suite aborted: {exc}", partial=result) from exc
    return result
