"""Audio/video correlation tower.

A small MLP over mean-pooled video and audio features predicts whether the
two streams come from the same (correlated) video.  It is trained on its
own, frozen, and then either gates the cross-modal terms of a classifier
or supplies extra per-frame features to it.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError, EmptySequenceError, SamplingError, TrainingError
from .layers import ParamStore
from .optim import AdamState, adam_step

CLAMP = 1e-12


@dataclass
class CorrelationExample:
    f_v: np.ndarray
    f_a: np.ndarray
    y: int
    source: tuple = ()

    def __post_init__(self):
        if self.y not in (0, 1):
            raise ValueError(f"correlation label must be 0 or 1, got {self.y}")


def pool_modality(X, true_length: int | None = None) -> np.ndarray:
    """Mean of the first ``true_length`` frames of ``X`` ([T, D] -> [D])."""
    X = np.asarray(X.data if isinstance(X, Tensor) else X, dtype=np.float64)
    n = X.shape[0] if true_length is None else int(true_length)
    if n <= 0 or X.shape[0] == 0:
        raise EmptySequenceError("cannot pool a sequence with no valid frames")
    return X[:n].mean(axis=0)


def correlation_gate(y_pred, threshold: float = 0.5):
    """1 where y' >= threshold (ties activate), else 0."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    arr = np.asarray(y_pred, dtype=np.float64)
    out = (arr >= threshold).astype(np.float64)
    return int(out) if arr.ndim == 0 else out


def weighted_correlation_loss(y: int, y_pred: float, w_neg: float = 2.0) -> float:
    """-[y log y' + w_neg (1 - y) log(1 - y')], with y' clamped away from 0 and 1."""
    if w_neg <= 0:
        raise ValueError(f"negative-class weight must be positive, got {w_neg}")
    p = min(max(float(y_pred), CLAMP), 1.0 - CLAMP)
    return -(y * math.log(p) + w_neg * (1 - y) * math.log(1.0 - p))


def weighted_correlation_loss_logits(logits: Tensor, y: np.ndarray, w_neg: float) -> Tensor:
    """Batch mean of the weighted loss, computed from pre-sigmoid logits."""
    y = np.asarray(y, dtype=np.float64)
    return ad.bce_with_logits(logits, y, weights=np.where(y > 0.5, 1.0, w_neg))


class CorrelationTower:
    """concat(f_v, f_a) -> [affine, relu] x 2 -> affine -> sigmoid."""

    def __init__(self, video_dim: int, audio_dim: int, hidden: Sequence[int] = (32, 16), seed: int = 0):
        if len(hidden) != 2:
            raise ValueError("the tower has exactly two hidden layers")
        self.video_dim = int(video_dim)
        self.audio_dim = int(audio_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.seed = int(seed)
        self.store = ParamStore(seed)
        dims = [self.video_dim + self.audio_dim, *self.hidden, 1]
        for i in range(3):
            self.store.get(f"corr.W{i + 1}", (dims[i], dims[i + 1]), fan_in=dims[i])
            self.store.get(f"corr.b{i + 1}", (dims[i + 1],), fan_in=dims[i])
        self.frozen = False

    @property
    def params(self) -> dict[str, Tensor]:
        return dict(self.store.params)

    @property
    def feature_dim(self) -> int:
        return 1 + self.hidden[-1]

    def _inputs(self, f_v, f_a) -> Tensor:
        f_v = np.atleast_2d(np.asarray(f_v, dtype=np.float64))
        f_a = np.atleast_2d(np.asarray(f_a, dtype=np.float64))
        if f_v.shape[1] != self.video_dim or f_a.shape[1] != self.audio_dim:
            raise DimensionError(
                f"tower expects video/audio widths {self.video_dim}/{self.audio_dim}, "
                f"got {f_v.shape[1]}/{f_a.shape[1]}"
            )
        if f_v.shape[0] != f_a.shape[0]:
            raise DimensionError(f"{f_v.shape[0]} video rows vs {f_a.shape[0]} audio rows")
        return Tensor(np.concatenate([f_v, f_a], axis=1))

    def _hidden(self, x: Tensor) -> Tensor:
        p = self.store.params
        h = ad.relu(ad.affine(x, p["corr.W1"], p["corr.b1"]))
        return ad.relu(ad.affine(h, p["corr.W2"], p["corr.b2"]))

    def logits(self, f_v, f_a) -> Tensor:
        p = self.store.params
        h = self._hidden(self._inputs(f_v, f_a))
        return ad.reshape(ad.affine(h, p["corr.W3"], p["corr.b3"]), (-1,))

    def forward(self, f_v, f_a) -> Tensor:
        return ad.sigmoid(self.logits(f_v, f_a))

    def predict(self, f_v, f_a) -> np.ndarray:
        return self.forward(f_v, f_a).data.copy()

    def feature(self, f_v, f_a) -> np.ndarray:
        """[y', last hidden activations] per row, for concatenation onto frames."""
        if not self.frozen:
            raise ContractError("correlation features require a frozen tower")
        p = self.store.params
        h = self._hidden(self._inputs(f_v, f_a))
        y = ad.sigmoid(ad.affine(h, p["corr.W3"], p["corr.b3"]))
        return np.concatenate([y.data, h.data], axis=1)

    def freeze(self) -> "CorrelationTower":
        for t in self.store.params.values():
            t.requires_grad = False
            t.grad = None
            t.data.flags.writeable = False
        self.frozen = True
        return self

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.store.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.store.params[name].data).tobytes())
        return h.hexdigest()

    def config(self) -> dict:
        return {
            "kind": "correlation_tower",
            "video_dim": self.video_dim,
            "audio_dim": self.audio_dim,
            "hidden": list(self.hidden),
        }


class ConstantTower:
    """Frozen stand-in that predicts the same y' for every pair.

    Used to probe the gated variants (y' = 0 must reproduce late fusion).
    """

    frozen = True

    def __init__(self, value: float, hidden_width: int = 16):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"constant prediction must lie in [0, 1], got {value}")
        self.value = float(value)
        self.hidden_width = int(hidden_width)

    @property
    def feature_dim(self) -> int:
        return 1 + self.hidden_width

    def predict(self, f_v, f_a) -> np.ndarray:
        n = np.atleast_2d(np.asarray(f_v)).shape[0]
        return np.full(n, self.value)

    def feature(self, f_v, f_a) -> np.ndarray:
        y = self.predict(f_v, f_a)
        return np.concatenate([y[:, None], np.zeros((y.size, self.hidden_width))], axis=1)

    def digest(self) -> str:
        return hashlib.sha256(f"constant:{self.value!r}:{self.hidden_width}".encode()).hexdigest()


def correlation_forward(f_v, f_a, tower: CorrelationTower) -> float:
    """y' for a single (f_v, f_a) pair."""
    return float(tower.predict(f_v, f_a)[0])


def correlation_feature(f_v, f_a, tower: CorrelationTower) -> np.ndarray:
    return tower.feature(f_v, f_a)[0]


# -- pair construction ---------------------------------------------------------------------


def _top_levels(example, taxonomy) -> frozenset:
    return frozenset(taxonomy.ancestors(lab)[0] for lab in example.labels)


def positive_pairs(examples) -> list[CorrelationExample]:
    return [
        CorrelationExample(
            pool_modality(ex.video, ex.true_length), pool_modality(ex.audio, ex.true_length), 1, (ex.id, ex.id)
        )
        for ex in examples
    ]


def make_negative_pairs(examples, taxonomy, seed: int = 0, count: int | None = None,
                        hard_mining_tower: CorrelationTower | None = None,
                        pool_factor: int = 4) -> list[CorrelationExample]:
    """Video from one example, audio from another with disjoint top-level labels.

    One negative per example by default (``count`` overrides, cycling through
    the examples).  With ``hard_mining_tower`` set, ``pool_factor`` candidates
    are drawn per negative and the one the tower finds most correlated is kept.
    """
    examples = list(examples)
    tops = [_top_levels(ex, taxonomy) for ex in examples]
    if len(set().union(*tops) if tops else set()) < 2:
        raise SamplingError("negative pairs need at least two distinct top-level labels")
    rng = np.random.default_rng(seed)
    pooled_v = [pool_modality(ex.video, ex.true_length) for ex in examples]
    pooled_a = [pool_modality(ex.audio, ex.true_length) for ex in examples]
    by_top: dict[frozenset, list[int]] = {}
    for i, t in enumerate(tops):
        by_top.setdefault(t, []).append(i)
    candidates_for: dict[frozenset, np.ndarray] = {}
    for t in by_top:
        cands = [i for i, other in enumerate(tops) if not (t & other)]
        candidates_for[t] = np.array(cands, dtype=np.int64)
    n = len(examples) if count is None else int(count)
    out = []
    for k in range(n):
        i = k % len(examples)
        cands = candidates_for[tops[i]]
        if cands.size == 0:
            raise SamplingError(f"example {examples[i].id} has no partner with disjoint top-level labels")
        if hard_mining_tower is None:
            j = int(cands[rng.integers(cands.size)])
        else:
            draws = cands[rng.integers(cands.size, size=pool_factor)]
            scores = hard_mining_tower.predict(np.repeat(pooled_v[i][None], len(draws), 0),
                                               np.stack([pooled_a[d] for d in draws]))
            j = int(draws[int(np.argmax(scores))])
        out.append(CorrelationExample(pooled_v[i], pooled_a[j], 0, (examples[i].id, examples[j].id)))
    return out


# -- training -------------------------------------------------------------------------------


@dataclass
class TowerTrainConfig:
    lr: float = 3e-3
    epochs: int = 5
    batch_size: int = 32
    seed: int = 0
    hidden: tuple = (32, 16)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    threshold: float = 0.5


@dataclass
class TowerReport:
    accuracy: float
    error_rate: float
    fpr: float
    fnr: float
    n_pos: int
    n_neg: int
    history: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "error_rate": self.error_rate,
            "fpr": self.fpr,
            "fnr": self.fnr,
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
            "history": list(self.history),
        }


def _stack_pairs(pairs):
    return (
        np.stack([p.f_v for p in pairs]),
        np.stack([p.f_a for p in pairs]),
        np.array([p.y for p in pairs], dtype=np.float64),
    )


def evaluate_tower(tower: CorrelationTower, pairs, threshold: float = 0.5) -> TowerReport:
    """Accuracy, false positive rate and false negative rate (positive = correlated)."""
    fv, fa, y = _stack_pairs(pairs)
    pred = correlation_gate(tower.predict(fv, fa), threshold)
    pos, neg = y == 1, y == 0
    fpr = float(pred[neg].mean()) if neg.any() else math.nan
    fnr = float((1 - pred[pos]).mean()) if pos.any() else math.nan
    acc = float((pred == y).mean())
    return TowerReport(acc, 1.0 - acc, fpr, fnr, int(pos.sum()), int(neg.sum()))


def train_correlation_tower(pairs, w_neg: float = 2.0, config: TowerTrainConfig | None = None,
                            valid_pairs=None) -> tuple[CorrelationTower, TowerReport]:
    """Minimise the weighted cross-entropy with Adam, then freeze.

    The returned report is measured on ``valid_pairs`` when given, otherwise
    on the training pairs; ``history`` holds the mean training loss per epoch.
    """
    config = config or TowerTrainConfig()
    if w_neg <= 0:
        raise ValueError(f"negative-class weight must be positive, got {w_neg}")
    pairs = list(pairs)
    labels = {p.y for p in pairs}
    if labels != {0, 1}:
        raise TrainingError("correlation training needs both positive and negative pairs")
    fv, fa, y = _stack_pairs(pairs)
    tower = CorrelationTower(fv.shape[1], fa.shape[1], config.hidden, config.seed)
    params = tower.params
    state = AdamState()
    rng = np.random.default_rng([config.seed, 7])
    history = []
    for _ in range(config.epochs):
        order = rng.permutation(len(pairs))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            for p in params.values():
                p.grad = None
            loss = weighted_correlation_loss_logits(tower.logits(fv[idx], fa[idx]), y[idx], w_neg)
            ad.backward(loss)
            adam_step(params, None, state, config.lr, config.beta1, config.beta2, config.eps)
            total += loss.item() * len(idx)
        history.append(total / len(order))
    tower.freeze()
    report = evaluate_tower(tower, valid_pairs if valid_pairs is not None else pairs, config.threshold)
    report.history = history
    return tower, report
