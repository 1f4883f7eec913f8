"""Independent reference implementations used as test oracles.

Nothing here imports the package: metrics are brute force O(n^2) with the
same tie rules, layers are plain numpy forward passes written from the
equations, and gradients come from central differences on numpy functions.
"""

import math

import numpy as np


# -- metrics -----------------------------------------------------------------------


def _key_label(pred, lab):
    return (-pred[lab], lab)


def brute_top(pred, k):
    labs = list(pred)
    ranked = []
    for lab in labs:
        rank = sum(1 for other in labs if _key_label(pred, other) < _key_label(pred, lab))
        ranked.append((rank, lab))
    ranked.sort()
    return [lab for _, lab in ranked[:k]]


def brute_gap(preds, truths, top_k=20):
    items = []
    n_pos = 0
    for i, (pred, truth) in enumerate(zip(preds, truths)):
        n_pos += min(len(truth), top_k)
        for lab in brute_top(pred, top_k):
            items.append(((-pred[lab], lab, i), lab in truth))
    if n_pos == 0:
        return None
    total = 0.0
    for key, correct in items:
        if not correct:
            continue
        rank = 1 + sum(1 for other, _ in items if other < key)
        hits = sum(1 for other, c in items if c and other <= key)
        total += hits / rank
    return total / n_pos


def brute_map(preds, truths):
    labels = sorted({lab for t in truths for lab in t})
    if not labels:
        return None
    aps = []
    for lab in labels:
        pos = sum(1 for t in truths if lab in t)
        scored = [((-p[lab], i), lab in t) for i, (p, t) in enumerate(zip(preds, truths)) if lab in p]
        total = 0.0
        for key, positive in scored:
            if positive:
                rank = 1 + sum(1 for other, _ in scored if other < key)
                hits = sum(1 for other, c in scored if c and other <= key)
                total += hits / rank
        aps.append(total / pos)
    return sum(aps) / len(aps)


def brute_perr(preds, truths):
    vals = []
    for pred, truth in zip(preds, truths):
        if not truth:
            continue
        top = brute_top(pred, len(truth))
        vals.append(sum(1 for lab in top if lab in truth) / len(truth))
    return sum(vals) / len(vals) if vals else None


def brute_hit1(preds, truths):
    hits = 0
    for pred, truth in zip(preds, truths):
        best = None
        for lab in pred:
            if best is None or pred[lab] > pred[best] or (pred[lab] == pred[best] and lab < best):
                best = lab
        hits += best is not None and best in truth
    return hits / len(preds)


# -- numerics ------------------------------------------------------------------------


def numeric_grad(f, x, eps=1e-6):
    """Central-difference gradient of scalar ``f`` at numpy array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(x)
        flat[i] = orig - eps
        down = f(x)
        flat[i] = orig
        gf[i] = (up - down) / (2 * eps)
    return g


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def relu(x):
    return np.maximum(x, 0.0)


# -- layers ----------------------------------------------------------------------


def ref_attention_rnn(X, W_ih, W_hh, b, score):
    """Single sequence [T, D]: Elman states, softmax(h . score), context."""
    h = np.zeros(W_hh.shape[0])
    H = []
    for t in range(X.shape[0]):
        h = np.tanh(X[t] @ W_ih + (h @ W_hh if t else 0.0) + b)
        H.append(h)
    H = np.array(H)
    alpha = softmax(H @ score)
    return H, alpha


def ref_cross_modal_rnn(X_v, X_a, pv, pa, Fv, Fa, gate):
    H_v, a_v = ref_attention_rnn(X_v, *pv)
    H_a, a_a = ref_attention_rnn(X_a, *pa)
    w_v = a_v + gate * relu(a_a @ Fa[0] + Fa[1])
    w_a = a_a + gate * relu(a_v @ Fv[0] + Fv[1])
    return w_v @ H_v, w_a @ H_a


def ref_mhsa_logits(X, Wq, Wk):
    dk = Wq.shape[2]
    return [(X @ Wq[i]) @ (X @ Wk[i]).T / math.sqrt(dk) for i in range(Wq.shape[0])]


def ref_cross_transformer(X_v, X_a, pv, pa, Fv, Fa, gate):
    """pv/pa = (W_q, W_k, W_v, W_o); Fv/Fa = (w[k], b[k]) per-head scalars."""
    Lv = ref_mhsa_logits(X_v, pv[0], pv[1])
    La = ref_mhsa_logits(X_a, pa[0], pa[1])
    out = []
    for X, p, own, other, F in ((X_v, pv, Lv, La, Fa), (X_a, pa, La, Lv, Fv)):
        heads = []
        for i in range(p[0].shape[0]):
            A = softmax(own[i] + gate * relu(F[0][i] * other[i] + F[1][i]))
            heads.append(A @ (X @ p[2][i]))
        out.append(np.concatenate(heads, axis=1) @ p[3])
    return out[0], out[1]


def ref_netvlad(X, centers, W, b, extra=None):
    alpha = softmax(X @ W + b)
    if extra is not None:
        alpha = alpha + extra
    K = centers.shape[0]
    return np.array([sum(alpha[t, j] * (X[t] - centers[j]) for t in range(X.shape[0])) for j in range(K)]), alpha


def random_corpus(rng, n_examples=100, n_labels=10, sparse=True, ties=False):
    """Random (preds, truths) with optional missing scores and tied scores."""
    preds, truths = [], []
    for _ in range(n_examples):
        labs = [l for l in range(n_labels) if not sparse or rng.random() < 0.7]
        scores = rng.integers(0, 4, size=len(labs)) / 4.0 if ties else rng.random(len(labs))
        preds.append({l: float(s) for l, s in zip(labs, scores)})
        truths.append({l for l in range(n_labels) if rng.random() < 0.2})
    return preds, truths
