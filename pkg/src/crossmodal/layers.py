"""Cross-modal backbones (attention RNN, Transformer, NetVLAD) and fusion heads.

All layer functions accept either a single sequence ``[T, D]`` or a batch
``[B, T, D]`` and return outputs with the matching leading shape.  An
optional ``mask`` (``[T]`` or ``[B, T]``, 1 for real frames, 0 for padding)
removes padded frames from attention, assignments and pooling.

Cross-modal injection follows one pattern everywhere: the receiving
modality's weights become ``own + gate * F(other)``, where ``F`` is a
ReLU-affine map (``CrossModalTransform``) and ``gate`` is a scalar or a
per-example vector in [0, 1].  ``F == 0`` or ``gate == 0`` therefore leaves
the single-modality computation untouched.
"""

from __future__ import annotations

import enum
import math
import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DimensionError, EmptySequenceError

MASK_NEG = -1e9


class FusionVariant(str, enum.Enum):
    EARLY = "E"
    LATE = "L"
    CROSS_MODAL_GATED = "CM-G"
    CROSS_MODAL_CONCAT = "CM-C"

    @property
    def cross_modal(self) -> bool:
        return self in (FusionVariant.CROSS_MODAL_GATED, FusionVariant.CROSS_MODAL_CONCAT)


# -- parameters ------------------------------------------------------------------------


class ParamStore:
    """Named trainable tensors, each drawn from its own seeded stream.

    A parameter's initial value depends only on ``(seed, name, shape)``, so
    two models that share a sub-module name start from identical weights.
    Init is uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.params: dict[str, Tensor] = {}

    def get(self, name: str, shape: tuple, fan_in: int | None = None, zero: bool = False) -> Tensor:
        if name in self.params:
            p = self.params[name]
            if p.shape != tuple(shape):
                raise ConfigError(f"parameter {name!r} reused with shape {shape}, has {p.shape}")
            return p
        if zero:
            data = np.zeros(shape)
        else:
            fan = fan_in if fan_in is not None else (shape[0] if shape else 1)
            bound = 1.0 / math.sqrt(max(fan, 1))
            rng = np.random.default_rng([self.seed, zlib.crc32(name.encode())])
            data = rng.uniform(-bound, bound, size=shape)
        p = Tensor(data, requires_grad=True)
        self.params[name] = p
        return p

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self) -> int:
        return len(self.params)


@dataclass
class CrossModalTransform:
    """F(x) = relu(x @ W + b).

    ``W`` is ``(in_dim, out_dim)`` for vector inputs.  A 0-d ``W`` and ``b``
    act elementwise, which is how per-head transforms treat logit matrices.
    """

    W: Tensor
    b: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        if self.W.ndim == 0:
            return ad.relu(x * self.W + self.b)
        if x.shape[-1] != self.W.shape[0]:
            raise DimensionError(f"transform expects input width {self.W.shape[0]}, got {x.shape}")
        return ad.relu(ad.affine(x, self.W, self.b))

    @property
    def out_dim(self) -> int | None:
        return self.W.shape[1] if self.W.ndim == 2 else None

    @classmethod
    def create(cls, store: ParamStore, name: str, in_dim: int | None, out_dim: int | None) -> "CrossModalTransform":
        if in_dim is None:
            return cls(store.get(f"{name}.W", (), fan_in=1), store.get(f"{name}.b", (), fan_in=1))
        return cls(
            store.get(f"{name}.W", (in_dim, out_dim), fan_in=in_dim),
            store.get(f"{name}.b", (out_dim,), fan_in=in_dim),
        )

    @classmethod
    def per_head(cls, store: ParamStore, name: str, heads: int) -> "CrossModalTransform":
        """One scalar weight and bias per attention head, applied elementwise to logits."""
        return cls(store.get(f"{name}.W", (heads,), fan_in=1), store.get(f"{name}.b", (heads,), fan_in=1))

    @classmethod
    def zeros_like(cls, other: "CrossModalTransform") -> "CrossModalTransform":
        return cls(Tensor(np.zeros(other.W.shape)), Tensor(np.zeros(other.b.shape)))


@dataclass
class RnnParams:
    """Elman recurrence plus dot-product attention scoring for one modality."""

    W_ih: Tensor  # (D, H)
    W_hh: Tensor  # (H, H)
    b: Tensor  # (H,)
    score: Tensor  # (H,)

    @classmethod
    def create(cls, store: ParamStore, name: str, in_dim: int, hidden: int) -> "RnnParams":
        p = cls(
            store.get(f"{name}.W_ih", (in_dim, hidden), fan_in=in_dim),
            store.get(f"{name}.W_hh", (hidden, hidden), fan_in=hidden),
            store.get(f"{name}.b", (hidden,), fan_in=hidden),
            store.get(f"{name}.score", (hidden,), fan_in=hidden),
        )
        if p.W_hh.shape[0] != p.W_ih.shape[1] or p.score.shape[0] != p.W_ih.shape[1]:
            raise ConfigError("inconsistent RNN hidden dimension")
        return p


@dataclass
class RnnTowerParams:
    video: RnnParams
    audio: RnnParams


@dataclass
class AttentionParams:
    """Multi-head projections for one modality; heads stacked on axis 0."""

    W_q: Tensor  # (k, D, d_k)
    W_k: Tensor  # (k, D, d_k)
    W_v: Tensor  # (k, D, d_k)
    W_o: Tensor  # (k * d_k, D_model)

    @property
    def heads(self) -> int:
        return self.W_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.W_q.shape[2]

    @classmethod
    def create(cls, store: ParamStore, name: str, in_dim: int, heads: int, head_dim: int, model_dim: int | None = None) -> "AttentionParams":
        model_dim = heads * head_dim if model_dim is None else model_dim
        if heads < 1 or head_dim < 1:
            raise DimensionError(f"need heads >= 1 and head_dim >= 1, got {heads}, {head_dim}")
        if heads * head_dim != model_dim:
            raise ConfigError(f"heads*head_dim = {heads * head_dim} != model dim {model_dim}")
        shp = (heads, in_dim, head_dim)
        return cls(
            store.get(f"{name}.W_q", shp, fan_in=in_dim),
            store.get(f"{name}.W_k", shp, fan_in=in_dim),
            store.get(f"{name}.W_v", shp, fan_in=in_dim),
            store.get(f"{name}.W_o", (heads * head_dim, model_dim), fan_in=heads * head_dim),
        )


@dataclass
class TransformerLayerParams:
    video: AttentionParams
    audio: AttentionParams


@dataclass
class VladParams:
    centers: Tensor  # (K, D)
    W_assign: Tensor  # (D, K)
    b_assign: Tensor  # (K,)

    @property
    def clusters(self) -> int:
        return self.centers.shape[0]

    @classmethod
    def create(cls, store: ParamStore, name: str, in_dim: int, clusters: int) -> "VladParams":
        if clusters < 1:
            raise ConfigError(f"cluster count must be >= 1, got {clusters}")
        return cls(
            store.get(f"{name}.centers", (clusters, in_dim), fan_in=1),
            store.get(f"{name}.W_assign", (in_dim, clusters), fan_in=in_dim),
            store.get(f"{name}.b_assign", (clusters,), fan_in=in_dim),
        )


@dataclass
class NetVladParams:
    video: VladParams
    audio: VladParams


@dataclass
class HeadParams:
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    @classmethod
    def create(cls, store: ParamStore, name: str, in_dim: int, hidden: int, num_labels: int) -> "HeadParams":
        return cls(
            store.get(f"{name}.W1", (in_dim, hidden), fan_in=in_dim),
            store.get(f"{name}.b1", (hidden,), fan_in=in_dim),
            store.get(f"{name}.W2", (hidden, num_labels), fan_in=hidden),
            store.get(f"{name}.b2", (num_labels,), fan_in=hidden),
        )


# -- helpers -----------------------------------------------------------------------------


def _batched(X) -> tuple[Tensor, bool]:
    X = ad.constant(X)
    if X.ndim == 2:
        return ad.reshape(X, (1, *X.shape)), True
    if X.ndim != 3:
        raise DimensionError(f"expected [T, D] or [B, T, D], got {X.shape}")
    return X, False


def _mask_array(mask, B: int, T: int) -> np.ndarray:
    if mask is None:
        return np.ones((B, T))
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask, dtype=np.float64)
    m = m.reshape(B, T) if m.size == B * T else None
    if m is None:
        raise DimensionError(f"mask does not match batch {B} x frames {T}")
    if np.any(m.sum(axis=1) == 0):
        raise EmptySequenceError("a sequence has no valid frames")
    return m


def _gate_array(gate, B: int) -> np.ndarray:
    g = np.asarray(gate.data if isinstance(gate, Tensor) else gate, dtype=np.float64)
    if g.ndim == 0:
        return np.full(B, float(g))
    g = g.reshape(-1)
    if g.size != B:
        raise DimensionError(f"gate has {g.size} entries for a batch of {B}")
    return g


def _same_frames(X_v: Tensor, X_a: Tensor) -> None:
    if X_v.shape[:-1] != X_a.shape[:-1]:
        raise DimensionError(f"video {X_v.shape} and audio {X_a.shape} frame counts differ")


def _unbatch(t: Tensor, single: bool) -> Tensor:
    return ad.reshape(t, t.shape[1:]) if single else t


def masked_mean(H: Tensor, mask=None) -> Tensor:
    """Mean over valid frames: [B, T, D] -> [B, D] (or [T, D] -> [D])."""
    H, single = _batched(H)
    B, T, _ = H.shape
    m = _mask_array(mask, B, T)
    w = m / m.sum(axis=1, keepdims=True)
    pooled = ad.reduce_sum(H * ad.constant(w[:, :, None]), axis=1)
    return _unbatch(pooled, single)


# -- attention RNN -----------------------------------------------------------------------------


def rnn_hidden_states(X, p: RnnParams) -> Tensor:
    """Elman recurrence h_t = tanh(x_t W_ih + h_{t-1} W_hh + b) over every frame."""
    X, single = _batched(X)
    T = X.shape[1]
    if T == 0:
        raise EmptySequenceError("empty sequence")
    if X.shape[2] != p.W_ih.shape[0]:
        raise DimensionError(f"RNN expects input width {p.W_ih.shape[0]}, got {X.shape}")
    pre = ad.affine(X, p.W_ih, p.b)
    h = ad.tanh(ad.take(pre, 0, axis=1))
    hs = [h]
    for t in range(1, T):
        h = ad.tanh(ad.take(pre, t, axis=1) + ad.matmul(h, p.W_hh))
        hs.append(h)
    return _unbatch(ad.stack(hs, axis=1), single)


def attention_weights(h, score_vector: Tensor, mask=None) -> Tensor:
    """Softmax over frames of h_t . score_vector; returns [T] or [B, T]."""
    h, single = _batched(h)
    B, T, D = h.shape
    if T == 0:
        raise EmptySequenceError("attention over an empty sequence")
    if score_vector.shape != (D,):
        raise DimensionError(f"score vector {score_vector.shape} does not match hidden width {D}")
    m = _mask_array(mask, B, T)
    scores = ad.reshape(ad.matmul(h, ad.reshape(score_vector, (D, 1))), (B, T))
    alpha = ad.softmax_lastdim(scores + ad.constant((1.0 - m) * MASK_NEG))
    return _unbatch(alpha, single)


def _attend(weights: Tensor, H: Tensor) -> Tensor:
    B, T = weights.shape
    return ad.reduce_sum(ad.reshape(weights, (B, T, 1)) * H, axis=1)


def cross_modal_rnn(X_v, X_a, params: RnnTowerParams, F_v: CrossModalTransform | None = None,
                    F_a: CrossModalTransform | None = None, gate=1.0, mask=None):
    """Context vectors (c_v, c_a) of two attention RNNs with cross-modal attention.

    c_a = sum_t (alpha_a + gate * F_v(alpha_v))[t] * h_a[t], symmetric for c_v.
    F_v, F_a map a T-vector of attention weights to a T-vector.
    """
    X_v, single = _batched(X_v)
    X_a, _ = _batched(X_a)
    _same_frames(X_v, X_a)
    B, T, _ = X_v.shape
    m = _mask_array(mask, B, T)
    H_v = rnn_hidden_states(X_v, params.video)
    H_a = rnn_hidden_states(X_a, params.audio)
    alpha_v = attention_weights(H_v, params.video.score, m)
    alpha_a = attention_weights(H_a, params.audio.score, m)
    w_v, w_a = alpha_v, alpha_a
    g = _gate_array(gate, B)
    if F_a is not None and F_v is not None:
        for F in (F_a, F_v):
            if F.out_dim is not None and F.out_dim != T:
                raise DimensionError(f"attention transform outputs {F.out_dim} weights for {T} frames")
        gt = ad.constant(g[:, None])
        mt = ad.constant(m)
        w_v = (alpha_v + gt * F_a(alpha_a)) * mt
        w_a = (alpha_a + gt * F_v(alpha_v)) * mt
    c_v = _attend(w_v, H_v)
    c_a = _attend(w_a, H_a)
    return _unbatch(c_v, single), _unbatch(c_a, single)


def attention_rnn(X, p: RnnParams, mask=None) -> Tensor:
    """Single-modality attention RNN context vector."""
    X, single = _batched(X)
    B, T, _ = X.shape
    H = rnn_hidden_states(X, p)
    alpha = attention_weights(H, p.score, _mask_array(mask, B, T))
    return _unbatch(_attend(alpha, H), single)


# -- transformer ------------------------------------------------------------------------------


def _head_logits(X: Tensor, p: AttentionParams) -> tuple[Tensor, Tensor]:
    """Scaled logits [B, k, T, T] and values [B, k, T, d_k]."""
    B, T, D = X.shape
    if D != p.W_q.shape[1]:
        raise DimensionError(f"attention expects input width {p.W_q.shape[1]}, got {X.shape}")
    X4 = ad.reshape(X, (B, 1, T, D))
    k, _, dk = p.W_q.shape
    Wq, Wk, Wv = (ad.reshape(W, (1, k, D, dk)) for W in (p.W_q, p.W_k, p.W_v))
    Q = ad.matmul(X4, Wq)
    K = ad.matmul(X4, Wk)
    V = ad.matmul(X4, Wv)
    logits = ad.matmul(Q, ad.transpose_last2(K)) * (1.0 / math.sqrt(dk))
    return logits, V


def _heads_out(logits: Tensor, V: Tensor, p: AttentionParams, key_bias: Tensor) -> Tensor:
    A = ad.softmax_lastdim(logits + key_bias)
    Hh = ad.matmul(A, V)  # [B, k, T, d_k]
    heads = [ad.take(Hh, i, axis=1) for i in range(p.heads)]
    cat = heads[0] if len(heads) == 1 else ad.concat(heads, axis=-1)
    return ad.matmul(cat, p.W_o)


def _key_bias(m: np.ndarray) -> Tensor:
    B, T = m.shape
    return ad.constant(((1.0 - m) * MASK_NEG).reshape(B, 1, 1, T))


def multihead_self_attention(X, p: AttentionParams, mask=None) -> Tensor:
    """Standard multi-head self-attention (no positional encoding): [.., T, D] -> [.., T, D_model]."""
    X, single = _batched(X)
    B, T, _ = X.shape
    if T == 0:
        raise EmptySequenceError("attention over an empty sequence")
    logits, V = _head_logits(X, p)
    return _unbatch(_heads_out(logits, V, p, _key_bias(_mask_array(mask, B, T))), single)


def _per_head(F: CrossModalTransform, logits: Tensor) -> Tensor:
    # per-head scalar transforms are stored as W, b of shape (k,)
    k = logits.shape[1]
    if F.W.ndim == 1:
        if F.W.shape[0] != k:
            raise DimensionError(f"{F.W.shape[0]} head transforms for {k} heads")
        return ad.relu(logits * ad.reshape(F.W, (1, k, 1, 1)) + ad.reshape(F.b, (1, k, 1, 1)))
    return F(logits)


def cross_modal_transformer_layer(X_v, X_a, params: TransformerLayerParams,
                                  F_v: CrossModalTransform | None = None,
                                  F_a: CrossModalTransform | None = None, gate=1.0, mask=None):
    """Two multi-head self-attention layers whose logits see the other modality.

    Video head i uses softmax(L_v,i + gate * F_a,i(L_a,i)) V_v,i and the audio
    head the mirror image, where L_m,i is modality m's scaled logit matrix.
    ``F_v``/``F_a`` hold one scalar weight and bias per head (shape (k,)).
    """
    X_v, single = _batched(X_v)
    X_a, _ = _batched(X_a)
    _same_frames(X_v, X_a)
    B, T, _ = X_v.shape
    if T == 0:
        raise EmptySequenceError("attention over an empty sequence")
    pv, pa = params.video, params.audio
    if pv.heads != pa.heads:
        raise DimensionError(f"video has {pv.heads} heads, audio {pa.heads}")
    bias = _key_bias(_mask_array(mask, B, T))
    L_v, V_v = _head_logits(X_v, pv)
    L_a, V_a = _head_logits(X_a, pa)
    in_v, in_a = L_v, L_a
    if F_v is not None and F_a is not None:
        gt = ad.constant(_gate_array(gate, B).reshape(B, 1, 1, 1))
        in_v = L_v + gt * _per_head(F_a, L_a)
        in_a = L_a + gt * _per_head(F_v, L_v)
    Y_v = _heads_out(in_v, V_v, pv, bias)
    Y_a = _heads_out(in_a, V_a, pa, bias)
    return _unbatch(Y_v, single), _unbatch(Y_a, single)


# -- NetVLAD ----------------------------------------------------------------------------------------


def netvlad_assignments(X, params: VladParams, mask=None) -> Tensor:
    """Per-frame softmax over clusters: [.., T, D] -> [.., T, K]; padded frames get 0."""
    if params.clusters < 1:
        raise ConfigError("NetVLAD needs at least one cluster")
    X, single = _batched(X)
    B, T, D = X.shape
    if D != params.W_assign.shape[0]:
        raise DimensionError(f"assignment expects width {params.W_assign.shape[0]}, got {X.shape}")
    alpha = ad.softmax_lastdim(ad.affine(X, params.W_assign, params.b_assign))
    if mask is not None:
        alpha = alpha * ad.constant(_mask_array(mask, B, T)[:, :, None])
    return _unbatch(alpha, single)


def vlad_aggregate(X: Tensor, weights: Tensor, centers: Tensor) -> Tensor:
    """V[j] = sum_t weights[t, j] * (x_t - c_j) for batched inputs -> [B, K, D]."""
    B = X.shape[0]
    K, D = centers.shape
    wx = ad.matmul(ad.transpose_last2(weights), X)  # [B, K, D]
    mass = ad.reshape(ad.reduce_sum(weights, axis=1), (B, K, 1))
    return wx - mass * ad.reshape(centers, (1, K, D))


def netvlad(X, params: VladParams, mask=None) -> Tensor:
    """Single-modality NetVLAD residual matrix [.., K, D]."""
    X, single = _batched(X)
    alpha = netvlad_assignments(X, params, mask)
    return _unbatch(vlad_aggregate(X, alpha, params.centers), single)


def cross_modal_netvlad(X_v, X_a, params: NetVladParams, F_v: CrossModalTransform | None = None,
                        F_a: CrossModalTransform | None = None, gate=1.0, mask=None):
    """VLAD matrices (V_v, V_a) with cross-modal assignment injection.

    V_v[j] = sum_t (alpha_v[t, j] + gate * F_a(alpha_a[t])[j]) * (x_v[t] - c_v[j]).
    F_a maps K_a assignments to K_v and F_v maps K_v to K_a.
    """
    X_v, single = _batched(X_v)
    X_a, _ = _batched(X_a)
    _same_frames(X_v, X_a)
    B, T, _ = X_v.shape
    m = _mask_array(mask, B, T)
    a_v = netvlad_assignments(X_v, params.video, m)
    a_a = netvlad_assignments(X_a, params.audio, m)
    w_v, w_a = a_v, a_a
    if F_v is not None and F_a is not None:
        if F_a.W.shape != (params.audio.clusters, params.video.clusters):
            raise DimensionError(
                f"F_a must map {params.audio.clusters} -> {params.video.clusters} clusters, has W {F_a.W.shape}"
            )
        if F_v.W.shape != (params.video.clusters, params.audio.clusters):
            raise DimensionError(
                f"F_v must map {params.video.clusters} -> {params.audio.clusters} clusters, has W {F_v.W.shape}"
            )
        gt = ad.constant(_gate_array(gate, B).reshape(B, 1, 1))
        mt = ad.constant(m[:, :, None])
        w_v = (a_v + gt * F_a(a_a)) * mt
        w_a = (a_a + gt * F_v(a_v)) * mt
    V_v = vlad_aggregate(X_v, w_v, params.video.centers)
    V_a = vlad_aggregate(X_a, w_a, params.audio.centers)
    return _unbatch(V_v, single), _unbatch(V_a, single)


def vlad_descriptor(V: Tensor, eps: float = 1e-12) -> Tensor:
    """Flatten [B, K, D] -> [B, K*D] and L2-normalise each row."""
    B = V.shape[0]
    flat = ad.reshape(V, (B, -1))
    norm = ad.sqrt(ad.reduce_sum(flat * flat, axis=1, keepdims=True) + eps)
    return flat / norm


# -- fusion ---------------------------------------------------------------------------------------------


def early_fusion(X_v, X_a) -> Tensor:
    """Per-frame concatenation [.., T, Dv] + [.., T, Da] -> [.., T, Dv + Da]."""
    X_v, X_a = ad.constant(X_v), ad.constant(X_a)
    _same_frames(X_v, X_a)
    return ad.concat([X_v, X_a], axis=-1)


def late_fusion_head(e_v: Tensor, e_a: Tensor | None, head: HeadParams) -> Tensor:
    """concat -> affine -> relu -> affine, giving one logit per label."""
    e = e_v if e_a is None else ad.concat([e_v, e_a], axis=-1)
    if e.shape[-1] != head.W1.shape[0]:
        raise DimensionError(f"head expects width {head.W1.shape[0]}, got {e.shape}")
    hidden = ad.relu(ad.affine(e, head.W1, head.b1))
    return ad.affine(hidden, head.W2, head.b2)
