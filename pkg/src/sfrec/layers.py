"""Neural building blocks: embeddings, GRU, attention pooling, fusion, head.

All blocks follow the row-vector convention of the engine: activations are
``(1, d)`` rows, weight matrices multiply on the right (``x @ W + b``), and a
batch stacks rows.  Every block exposes ``params()`` for optimizer
registration and a ``*_np`` fast path that evaluates the same function on
plain arrays (used for scoring large candidate sets without building graphs;
tests pin the two paths to each other).
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

__all__ = [
    "glorot",
    "EmbeddingTable",
    "OutOfVocabularyError",
    "GruCell",
    "gru_encode",
    "Mlp",
    "AttentionUnit",
    "din_attention",
    "target_aware_fusion",
    "MlpHead",
    "predict_head",
]


def glorot(rng, fan_in, fan_out, dtype=np.float64):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


class OutOfVocabularyError(KeyError):
    pass


class EmbeddingTable:
    """Trainable (vocab, dim) lookup table.

    Rows start at seeded uniform(-0.05, 0.05).  L2 decay applies only to rows
    with a gradient in the current step, so untouched users' items never
    drift.
    """

    def __init__(self, vocab_size, dim, rng, name="emb", dtype=np.float64):
        data = rng.uniform(-0.05, 0.05, size=(vocab_size, dim)).astype(dtype)
        self.table = ad.parameter(data, name, sparse_decay=True)
        self.vocab_size = vocab_size
        self.dim = dim

    def lookup(self, ids):
        for i in ids:
            if not 0 <= i < self.vocab_size:
                raise OutOfVocabularyError(f"item id {i} outside vocabulary of {self.vocab_size}")
        return ad.gather_rows(self.table, ids)

    def lookup_np(self, ids):
        return self.table.data[np.asarray(ids, dtype=np.intp), :]

    def params(self):
        return [self.table]


class GruCell:
    """Standard GRU cell: z, r gates and tanh candidate.

    The whole step is one fused tape node with a hand-written backward, so a
    long encode does not blow up the tape.  Output convention:
    ``(1 - z) * h + z * candidate``.
    """

    def __init__(self, in_dim, hidden_dim, rng, name="gru", dtype=np.float64):
        self.in_dim = in_dim
        self.hidden_dim = hidden_dim
        self.name = name

        def w(tag, fi, fo):
            return ad.parameter(glorot(rng, fi, fo, dtype), f"{name}/{tag}", decay=True)

        def b(tag):
            return ad.parameter(np.zeros((1, hidden_dim), dtype=dtype), f"{name}/{tag}")

        self.w_z, self.u_z, self.b_z = w("w_z", in_dim, hidden_dim), w("u_z", hidden_dim, hidden_dim), b("b_z")
        self.w_r, self.u_r, self.b_r = w("w_r", in_dim, hidden_dim), w("u_r", hidden_dim, hidden_dim), b("b_r")
        self.w_h, self.u_h, self.b_h = w("w_h", in_dim, hidden_dim), w("u_h", hidden_dim, hidden_dim), b("b_h")

    GATE_NAMES = ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h")

    def params(self):
        return [self.w_z, self.u_z, self.b_z, self.w_r, self.u_r, self.b_r, self.w_h, self.u_h, self.b_h]

    def export_gates(self):
        """All nine gate tensors keyed by short name (w_z, u_z, ...)."""
        return {tag: p.data.copy() for tag, p in zip(self.GATE_NAMES, self.params())}

    def load_gates(self, arrays, dtype=None):
        """Overwrite all nine gate tensors from a short-name -> array mapping."""
        for tag, p in zip(self.GATE_NAMES, self.params()):
            src = np.asarray(arrays[tag])
            if src.shape != p.data.shape:
                raise ad.ShapeError(f"{p.name}: cannot load {src.shape} into {p.data.shape}")
            p.data = src.astype(dtype or p.data.dtype, copy=True)

    def step(self, x, h):
        """One GRU step as a single fused tape node."""
        if x.shape != (1, self.in_dim) or h.shape != (1, self.hidden_dim):
            raise ad.ShapeError(
                f"gru step wants x (1,{self.in_dim}) and h (1,{self.hidden_dim}), got {x.shape}, {h.shape}"
            )
        wz, uz, bz = self.w_z, self.u_z, self.b_z
        wr, ur, br = self.w_r, self.u_r, self.b_r
        wh, uh, bh = self.w_h, self.u_h, self.b_h
        xd, hd = x.data, h.data
        z, r, c, out = self._forward_np(xd, hd)
        rh = r * hd

        def backward(g):
            dz = g * (c - hd)
            dc = g * z
            dh = g * (1.0 - z)
            dah = dc * (1.0 - c * c)
            if wh.track:
                wh.accumulate(xd.T @ dah)
                uh.accumulate(rh.T @ dah)
                bh.accumulate(dah)
            drh = dah @ uh.data.T
            dr = drh * hd
            dh = dh + drh * r
            dar = dr * r * (1.0 - r)
            if wr.track:
                wr.accumulate(xd.T @ dar)
                ur.accumulate(hd.T @ dar)
                br.accumulate(dar)
            dh = dh + dar @ ur.data.T
            daz = dz * z * (1.0 - z)
            if wz.track:
                wz.accumulate(xd.T @ daz)
                uz.accumulate(hd.T @ daz)
                bz.accumulate(daz)
            dh = dh + daz @ uz.data.T
            if x.track:
                x.accumulate(dah @ wh.data.T + dar @ wr.data.T + daz @ wz.data.T)
            if h.track:
                h.accumulate(dh)

        return ad.node(out, (x, h, *self.params()), backward)

    def _forward_np(self, xd, hd):
        with np.errstate(over="ignore"):
            z = 1.0 / (1.0 + np.exp(-(xd @ self.w_z.data + hd @ self.u_z.data + self.b_z.data)))
            r = 1.0 / (1.0 + np.exp(-(xd @ self.w_r.data + hd @ self.u_r.data + self.b_r.data)))
        c = np.tanh(xd @ self.w_h.data + (r * hd) @ self.u_h.data + self.b_h.data)
        return z, r, c, (1.0 - z) * hd + z * c

    def step_np(self, xd, hd):
        """Plain-array step; xd (n, in) and hd (n, hidden) batch row-wise."""
        return self._forward_np(xd, hd)[3]

    def encode_np(self, seq, init):
        h = init
        for j in range(seq.shape[0]):
            h = self.step_np(seq[j : j + 1, :], h)
        return h


def gru_encode(cell, seq, init):
    """Fold cell.step over the rows of ``seq`` starting from ``init``.

    An empty sequence returns ``init`` unchanged (the fold identity).
    """
    h = init
    for j in range(seq.shape[0]):
        h = cell.step(ad.row(seq, j), h)
    return h


class Mlp:
    """Affine stack with ReLU between layers and a linear last layer."""

    def __init__(self, dims, rng, name="mlp", dtype=np.float64):
        if len(dims) < 2:
            raise ValueError("an Mlp needs at least input and output dims")
        self.dims = list(dims)
        self.weights = []
        self.biases = []
        for k, (fi, fo) in enumerate(zip(dims[:-1], dims[1:])):
            self.weights.append(ad.parameter(glorot(rng, fi, fo, dtype), f"{name}/w{k}", decay=True))
            self.biases.append(ad.parameter(np.zeros((1, fo), dtype=dtype), f"{name}/b{k}"))

    def params(self):
        return [t for pair in zip(self.weights, self.biases) for t in pair]

    def apply(self, x):
        out = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out = ad.add(ad.matmul(out, w), b)
            if k != last:
                out = ad.relu(out)
        return out

    def apply_np(self, x):
        out = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            out = out @ w.data + b.data
            if k != last:
                out = np.maximum(out, 0.0)
        return out


class AttentionUnit:
    """Local activation unit: per-history-item scalar relevance to a target.

    The feature for history row e_j against target e_t is
    ``e_j (+) e_t (+) (e_j - e_t) (+) (e_j * e_t)``; a small MLP maps it to one
    unnormalized weight.  No softmax over the weights.
    """

    def __init__(self, dim, rng, hidden=16, name="att", dtype=np.float64):
        self.dim = dim
        self.mlp = Mlp([4 * dim, hidden, 1], rng, name=name, dtype=dtype)

    def params(self):
        return self.mlp.params()

    def weights(self, history, target):
        n = history.shape[0]
        ones = ad.constant(np.ones((n, 1), dtype=history.dtype))
        tiled = ad.matmul(ones, target)
        feats = ad.concat(
            [history, tiled, ad.add(history, ad.affine(tiled, mul=-1.0)), ad.mul(history, tiled)],
            axis=1,
        )
        return self.mlp.apply(feats)

    def weights_np(self, history, targets):
        """Weights for every (history row, target row) pair: (n_targets, l)."""
        l = history.shape[0]
        n = targets.shape[0]
        hist_rep = np.tile(history, (n, 1))
        tgt_rep = np.repeat(targets, l, axis=0)
        feats = np.hstack([hist_rep, tgt_rep, hist_rep - tgt_rep, hist_rep * tgt_rep])
        return self.mlp.apply_np(feats).reshape(n, l)


def din_attention(unit, history, target):
    """Weighted pool of history rows against a target: sum_j a_j e_j."""
    if history.shape[0] < 1:
        raise ad.ShapeError("attention needs a non-empty history")
    a = unit.weights(history, target)
    return ad.matmul(ad.transpose(a), history)


def din_attention_np(unit, history, targets):
    """Batched pooled vectors, one per target row: (n_targets, d)."""
    return unit.weights_np(history, targets) @ history


def target_aware_fusion(r1, r2, target, mlp):
    """Convex blend of two interest vectors, weighted by target relevance.

    One shared MLP scores each of ``r1`` and ``r2`` concatenated with the
    target; a softmax over the two logits gives the blend weights.
    """
    logits = ad.concat(
        [mlp.apply(ad.concat([r1, target], axis=1)), mlp.apply(ad.concat([r2, target], axis=1))],
        axis=1,
    )
    w = ad.softmax(logits)
    return ad.matmul(w, ad.concat([r1, r2], axis=0))


def target_aware_fusion_np(mlp, r1, r2, targets):
    """Batched blend: r1/r2 are (n, d) (or (1, d) broadcast), targets (n, d)."""
    n = targets.shape[0]
    r1 = np.broadcast_to(r1, (n, r1.shape[1]))
    r2 = np.broadcast_to(r2, (n, r2.shape[1]))
    l1 = mlp.apply_np(np.hstack([r1, targets]))
    l2 = mlp.apply_np(np.hstack([r2, targets]))
    logits = np.hstack([l1, l2])
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    w = e / e.sum(axis=1, keepdims=True)
    return w[:, :1] * r1 + w[:, 1:] * r2


class MlpHead:
    """Prediction head: three affine layers (ReLU between), sigmoid output."""

    def __init__(self, in_dim, rng, hidden=(64, 32), name="head", dtype=np.float64):
        self.mlp = Mlp([in_dim, *hidden, 1], rng, name=name, dtype=dtype)
        self.in_dim = in_dim

    def params(self):
        return self.mlp.params()

    def apply(self, features):
        return ad.sigmoid(self.mlp.apply(features))

    def apply_np(self, features):
        with np.errstate(over="ignore"):
            return 1.0 / (1.0 + np.exp(-self.mlp.apply_np(features)))


def predict_head(head, features):
    if features.shape != (1, head.in_dim):
        raise ad.ShapeError(f"head wants (1,{head.in_dim}) features, got {features.shape}")
    return head.apply(features)
