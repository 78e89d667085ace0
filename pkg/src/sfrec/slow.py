"""Cloud-side recommender: attention pooling over long histories.

Two wirings share one parameter set shape: the plain variant scores a
candidate from the pooled history alone, and the interactive variant also
consumes the device's negative-memory vector through a gated GRU step.  The
prediction head width differs between them (2d vs 3d input), so a model is
constructed for one wiring and stays there.

Scoring large candidate sets goes through ``score_candidates``, a no-graph
numpy path pinned to the graph forward by tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import layers as ly

__all__ = ["SlowModel", "InterestExport", "cross_entropy"]


def cross_entropy(prob, label):
    """Binary cross-entropy on a (1,1) probability node; label in {0, 1}."""
    return ad.binary_cross_entropy(prob, label)


@dataclass
class InterestExport:
    """Per-user interest snapshot shipped to the device side."""

    user: int
    round: int
    r_n: np.ndarray
    r_t: np.ndarray


class SlowModel:
    def __init__(self, n_items, dim, rng, interactive, dtype=np.float64, head_hidden=(64, 32)):
        self.dim = dim
        self.interactive = interactive
        self.embedding = ly.EmbeddingTable(n_items, dim, rng, name="slow/emb", dtype=dtype)
        self.attention = ly.AttentionUnit(dim, rng, name="slow/att", dtype=dtype)
        if interactive:
            self.gru_n = ly.GruCell(dim, dim, rng, name="slow/gru_n", dtype=dtype)
            self.gate_w = ad.parameter(ly.glorot(rng, 2 * dim, 1, dtype), "slow/gate_w", decay=True)
            self.gate_b = ad.parameter(np.zeros((1, 1), dtype=dtype), "slow/gate_b")
            head_in = 3 * dim
        else:
            head_in = 2 * dim
        self.head = ly.MlpHead(head_in, rng, hidden=head_hidden, name="slow/head", dtype=dtype)

    def params(self):
        out = self.embedding.params() + self.attention.params()
        if self.interactive:
            out += self.gru_n.params() + [self.gate_w, self.gate_b]
        return out + self.head.params()

    def param_count(self):
        return sum(p.data.size for p in self.params())

    def named_arrays(self):
        return {p.name: p.data for p in self.params()}

    def load_arrays(self, arrays):
        for p in self.params():
            src = np.asarray(arrays[p.name])
            if src.shape != p.data.shape:
                raise ad.ShapeError(f"{p.name}: cannot load {src.shape} into {p.data.shape}")
            p.data = src.astype(p.data.dtype, copy=True)

    # -- forward graphs ------------------------------------------------------

    def interest(self, seq_ids, candidate):
        """Pooled history interest r_t for one candidate."""
        if len(seq_ids) == 0:
            raise ad.ShapeError("slow sequences must be non-empty")
        history = self.embedding.lookup(seq_ids)
        target = self.embedding.lookup([candidate])
        return ly.din_attention(self.attention, history, target), target

    def forward(self, seq_ids, candidate):
        """Probability that the user clicks ``candidate`` (plain wiring)."""
        if self.interactive:
            raise RuntimeError("interactive model: use forward_interactive")
        r_t, target = self.interest(seq_ids, candidate)
        return ly.predict_head(self.head, ad.concat([r_t, target], axis=1))

    def forward_interactive(self, seq_ids, candidate, neg_memory, gate_override=None):
        """Exposure-aware probability plus the two interest vectors.

        ``neg_memory`` is the device-uploaded vector (plain (1, d) array).
        ``gate_override`` pins the write gate to a constant, used by tests.
        """
        if not self.interactive:
            raise RuntimeError("plain model: use forward")
        neg_memory = np.asarray(neg_memory)
        if neg_memory.shape != (1, self.dim):
            raise ad.ShapeError(f"negative memory must be (1,{self.dim}), got {neg_memory.shape}")
        r_t, target = self.interest(seq_ids, candidate)
        memory_state = ad.constant(neg_memory.astype(target.dtype))
        refreshed = self.gru_n.step(target, memory_state)
        if gate_override is None:
            gate = ad.sigmoid(ad.add(ad.matmul(ad.concat([refreshed, target], axis=1), self.gate_w), self.gate_b))
        else:
            gate = ad.constant(np.array([[gate_override]], dtype=target.dtype))
        r_n = ad.scale(gate, refreshed)
        prob = ly.predict_head(self.head, ad.concat([r_n, r_t, target], axis=1))
        return prob, r_n, r_t

    def loss(self, seq_ids, candidate, label, neg_memory=None):
        """Per-example training loss under the model's own wiring."""
        if self.interactive:
            prob, _, _ = self.forward_interactive(seq_ids, candidate, neg_memory)
        else:
            prob = self.forward(seq_ids, candidate)
        return cross_entropy(prob, label)

    # -- exchange ------------------------------------------------------------

    def export_interest(self, user, seq_ids, round_no, neg_memory=None):
        """Interest snapshot for one user, conditioned on their latest click.

        Before any upload has arrived the r_n slot is all zeros (there is no
        exposure signal to refresh); afterwards it is exactly the interactive
        forward's r_n for the most recent slow-phase item.
        """
        candidate = seq_ids[-1]
        if neg_memory is None or not self.interactive:
            r_t, _ = self.interest(seq_ids, candidate)
            r_n = np.zeros((1, self.dim), dtype=r_t.data.dtype)
            return InterestExport(user=user, round=round_no, r_n=r_n, r_t=r_t.data.copy())
        _, r_n, r_t = self.forward_interactive(seq_ids, candidate, neg_memory)
        return InterestExport(user=user, round=round_no, r_n=r_n.data.copy(), r_t=r_t.data.copy())

    # -- batched no-graph scoring ---------------------------------------------

    def score_candidates(self, seq_ids, candidate_ids, neg_memory=None):
        """Click probabilities for many candidates against one context.

        Pure numpy; equals the graph forward to float precision.
        """
        history = self.embedding.lookup_np(seq_ids)
        targets = self.embedding.lookup_np(candidate_ids)
        pooled = ly.din_attention_np(self.attention, history, targets)
        if not self.interactive:
            return self.head.apply_np(np.hstack([pooled, targets]))[:, 0]
        n = targets.shape[0]
        memory = np.broadcast_to(np.asarray(neg_memory, dtype=targets.dtype), (n, self.dim))
        refreshed = self.gru_n.step_np(targets, memory)
        with np.errstate(over="ignore"):
            gate = 1.0 / (1.0 + np.exp(-(np.hstack([refreshed, targets]) @ self.gate_w.data + self.gate_b.data)))
        r_n = gate * refreshed
        return self.head.apply_np(np.hstack([r_n, pooled, targets]))[:, 0]
