"""Dataset ingestion, temporal three-phase split, negatives, exposures.

Clicked sequences are ordered per user by timestamp with ties broken by file
order, then cut into three consecutive phases: the last 5 items are test, the
5 before those are the device-side training phase, and everything earlier
trains the cloud side.  Users and items below the interaction floor are
removed by alternating filters until stable.

Public datasets carry no impression logs, so exposures are simulated: a
seeded pool of never-clicked items is scored by the current device model and
the top few become the "shown but not clicked" stream.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Interaction",
    "ParseError",
    "IdMap",
    "parse_ml1m",
    "parse_tsv",
    "group_by_user",
    "UserSplit",
    "PhaseSplit",
    "phase_split",
    "NegativeSampler",
    "sample_negatives",
    "simulate_exposures",
    "make_cluster_dataset",
]


@dataclass(frozen=True)
class Interaction:
    user: int
    item: int
    timestamp: int
    kind: str = "click"


class ParseError(ValueError):
    pass


class IdMap:
    """Dense re-indexing of raw ids, bijective by construction.

    Raw ids are sorted before numbering so the mapping is independent of the
    order they appear in the file.
    """

    def __init__(self, raw_ids):
        self.dense_to_raw = sorted(set(raw_ids))
        self.raw_to_dense = {raw: i for i, raw in enumerate(self.dense_to_raw)}

    def __len__(self):
        return len(self.dense_to_raw)

    def to_dense(self, raw):
        return self.raw_to_dense[raw]

    def to_raw(self, dense):
        return self.dense_to_raw[dense]

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("raw\tdense\n")
            for dense, raw in enumerate(self.dense_to_raw):
                fh.write(f"{raw}\t{dense}\n")

    @classmethod
    def load(cls, path):
        out = cls([])
        with open(path, encoding="utf-8") as fh:
            header = fh.readline()
            if header.strip() != "raw\tdense":
                raise ParseError(f"{path}: not an id-map file")
            for line in fh:
                raw, dense = line.rstrip("\n").split("\t")
                out.dense_to_raw.append(int(raw))
                out.raw_to_dense[int(raw)] = int(dense)
        return out


def _densify(rows):
    users = IdMap(r[0] for r in rows)
    items = IdMap(r[1] for r in rows)
    interactions = [
        Interaction(users.to_dense(u), items.to_dense(i), ts, kind) for u, i, ts, kind in rows
    ]
    return interactions, users, items


def parse_ml1m(path):
    """Read a MovieLens-1M ratings file: ``UserID::MovieID::Rating::Timestamp``.

    Every rating line counts as one click regardless of the rating value.
    Returns (interactions, user id map, item id map) with ids re-indexed
    densely from 0.
    """
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("::")
            if len(parts) != 4:
                raise ParseError(f"{path}:{lineno}: expected 4 '::'-separated fields, got {len(parts)}")
            try:
                user, item, _rating, ts = int(parts[0]), int(parts[1]), parts[2], int(parts[3])
            except ValueError as err:
                raise ParseError(f"{path}:{lineno}: {err}") from None
            rows.append((user, item, ts, "click"))
    return _densify(rows)


def parse_tsv(path):
    """Generic adapter: ``user<TAB>item<TAB>timestamp[<TAB>kind]`` per line."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) not in (3, 4):
                raise ParseError(f"{path}:{lineno}: expected 3 or 4 tab-separated fields")
            kind = parts[3] if len(parts) == 4 else "click"
            if kind not in ("click", "exposure"):
                raise ParseError(f"{path}:{lineno}: unknown interaction kind {kind!r}")
            try:
                rows.append((int(parts[0]), int(parts[1]), int(parts[2]), kind))
            except ValueError as err:
                raise ParseError(f"{path}:{lineno}: {err}") from None
    return _densify(rows)


def group_by_user(interactions, kind="click"):
    """Per-user interaction lists ordered by timestamp, file order on ties."""
    by_user = {}
    for pos, it in enumerate(interactions):
        if kind is not None and it.kind != kind:
            continue
        by_user.setdefault(it.user, []).append((it.timestamp, pos, it))
    return {u: [it for _, _, it in sorted(rows)] for u, rows in by_user.items()}


@dataclass
class UserSplit:
    slow: list
    fast: list
    test: list

    def all_items(self):
        return self.slow + self.fast + self.test


@dataclass
class PhaseSplit:
    users: dict = field(default_factory=dict)
    dropped_users: int = 0
    retained_items: set = field(default_factory=set)
    vocab_size: int = 0


def phase_split(interactions, min_len=20):
    """Cut each user's click sequence into slow/fast/test phases.

    Items with fewer than ``min_len`` clicks and users with fewer than
    ``min_len`` clicks are alternately removed until both floors hold, then
    each surviving sequence is partitioned: first l-10 / next 5 / last 5.
    """
    by_user = group_by_user(interactions)
    sequences = {u: [it.item for it in rows] for u, rows in by_user.items()}
    total_users = len(sequences)

    while True:
        item_counts = Counter(item for seq in sequences.values() for item in seq)
        keep_items = {i for i, c in item_counts.items() if c >= min_len}
        filtered = {}
        for u, seq in sequences.items():
            kept = [i for i in seq if i in keep_items]
            if len(kept) >= min_len:
                filtered[u] = kept
        stable = len(filtered) == len(sequences) and all(
            filtered[u] == sequences[u] for u in filtered
        )
        sequences = filtered
        if stable:
            break

    split = PhaseSplit(dropped_users=total_users - len(sequences))
    vocab = 0
    for u in sorted(sequences):
        seq = sequences[u]
        l = len(seq)
        split.users[u] = UserSplit(slow=seq[: l - 10], fast=seq[l - 10 : l - 5], test=seq[l - 5 :])
        split.retained_items.update(seq)
        vocab = max(vocab, max(seq) + 1)
    split.vocab_size = vocab
    return split


class NegativeSampler:
    """Deterministic per-position negative draws.

    Each (user, phase, position) gets its own generator derived from the base
    seed, so any draw is reproducible regardless of the order requests arrive
    in.  Negatives are uniform over items the user never clicked, distinct
    within one draw.
    """

    _PHASES = {"slow": 0, "fast": 1, "test": 2}

    def __init__(self, split, n_items, seed):
        self.split = split
        self.n_items = n_items
        self.seed = seed
        self._complements = {}

    def complement(self, user):
        """All item ids the user never clicked, ascending."""
        cached = self._complements.get(user)
        if cached is None:
            clicked = np.fromiter(self.split.users[user].all_items(), dtype=np.int64)
            cached = np.setdiff1d(np.arange(self.n_items, dtype=np.int64), clicked)
            if cached.size == 0:
                raise ValueError(f"user {user} has clicked every item; cannot sample negatives")
            self._complements[user] = cached
        return cached

    def _rng(self, user, phase, index):
        key = np.random.SeedSequence(entropy=self.seed, spawn_key=(self._PHASES[phase], user, index))
        return np.random.default_rng(key)

    def draw(self, user, phase, index, n):
        pool = self.complement(user)
        if n > pool.size:
            raise ValueError(f"user {user}: asked for {n} negatives, only {pool.size} unseen items")
        return self._rng(user, phase, index).choice(pool, size=n, replace=False)


def sample_negatives(split, n_items, n_train_neg=1, n_eval_neg=100, seed=0):
    """Materialize negatives for every training position and test position.

    Returns (train, eval) dicts: train maps (user, phase, position) to an id
    array; eval maps (user, test position) to the 101-candidate layout's
    negative ids.
    """
    sampler = NegativeSampler(split, n_items, seed)
    train = {}
    evals = {}
    for user in sorted(split.users):
        us = split.users[user]
        for phase, seq in (("slow", us.slow), ("fast", us.fast)):
            for idx in range(len(seq)):
                train[(user, phase, idx)] = sampler.draw(user, phase, idx, n_train_neg)
        for idx in range(len(us.test)):
            evals[(user, idx)] = sampler.draw(user, "test", idx, n_eval_neg)
    return train, evals


def simulate_exposures(score_fn, pool, next_click, rng, pool_size=20, expose_k=4):
    """Pick the items a serving pass would have shown without a click.

    ``pool`` is the user's never-clicked id array; ``score_fn`` ranks a
    candidate id list with the current device model.  The top ``expose_k``
    of a ``pool_size`` random draw (minus the next true click) are returned,
    ordered best first.  Ties break by id so reruns are identical.
    """
    if expose_k == 0 or pool.size == 0:
        return []
    take = min(pool_size, pool.size)
    sampled = rng.choice(pool, size=take, replace=False)
    sampled = sampled[sampled != next_click]
    if sampled.size == 0:
        return []
    scores = np.asarray(score_fn(sampled))
    order = np.lexsort((sampled, -scores))
    return [int(i) for i in sampled[order[:expose_k]]]


def make_cluster_dataset(n_users=200, n_items=100, n_clusters=4, seed=0):
    """Planted-preference synthetic data: each user clicks one item cluster.

    Items split evenly into clusters; user u belongs to cluster u mod
    n_clusters and clicks a seeded shuffle of that whole block, one tick
    apart.  With the default sizes every user has 25 clicks and every item
    50, so nothing is filtered away.
    """
    if n_items % n_clusters:
        raise ValueError("n_items must divide evenly into clusters")
    block = n_items // n_clusters
    rng = np.random.default_rng(seed)
    interactions = []
    for user in range(n_users):
        cluster = user % n_clusters
        items = np.arange(cluster * block, (cluster + 1) * block)
        rng.shuffle(items)
        for t, item in enumerate(items):
            interactions.append(Interaction(user=user, item=int(item), timestamp=t, kind="click"))
    return interactions
