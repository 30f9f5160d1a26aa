"""Feature, node, rank, time-of-day and day-of-week embeddings and their fusion."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .dataio import DAYS_PER_WEEK, INTERVALS_PER_DAY


def compute_ranks(x) -> np.ndarray:
    """Ascending rank of every row within each column (axis -2).

    Ties go to the lower row index first. Works on stacked ``(..., rows, cols)``
    inputs.
    """
    x = np.asarray(x)
    order = np.argsort(x, axis=-2, kind="stable")
    ranks = np.empty_like(order)
    np.put_along_axis(ranks, order, np.broadcast_to(
        np.arange(x.shape[-2])[:, None], x.shape), axis=-2)
    return ranks


@dataclass
class EmbeddingBanks:
    tod: dc.Node            # (288, d)
    dow: dc.Node            # (7, d)
    node: dc.Node           # (n, d), row i is location i
    rank: dc.Node           # (n, d), row i is rank i
    rank_agg: dict = field(default_factory=dict)  # L -> (weights (L,), bias (1,))

    @property
    def d(self):
        return self.node.shape[1]


def init_banks(store: dc.ParameterStore, n, d, lengths, rng, prefix="emb") -> EmbeddingBanks:
    def xavier(rows, cols):
        lim = np.sqrt(6.0 / (rows + cols))
        return rng.uniform(-lim, lim, (rows, cols))

    banks = EmbeddingBanks(
        tod=store.add(f"{prefix}.tod", xavier(INTERVALS_PER_DAY, d)),
        dow=store.add(f"{prefix}.dow", xavier(DAYS_PER_WEEK, d)),
        node=store.add(f"{prefix}.node", xavier(n, d)),
        rank=store.add(f"{prefix}.rank", xavier(n, d)),
    )
    for L in sorted(set(lengths)):
        w = store.add(f"{prefix}.rank_agg_{L}.w", rng.uniform(-1, 1, L) / np.sqrt(L))
        b = store.add(f"{prefix}.rank_agg_{L}.b", np.zeros(1))
        banks.rank_agg[L] = (w, b)
    return banks


def rank_node_embedding(ranks, banks: EmbeddingBanks, length=None) -> dc.Node:
    """Gather rank-bank rows per time slot and contract the slot axis."""
    ranks = np.asarray(ranks)
    L = ranks.shape[-1] if length is None else length
    if ranks.shape[-1] != L:
        raise dc.ShapeError(f"ranks have {ranks.shape[-1]} slots, expected {L}")
    if L not in banks.rank_agg:
        raise dc.ShapeError(f"no rank aggregator configured for length {L}")
    if ranks.size and ranks.max() >= banks.rank.shape[0]:
        raise IndexError(f"rank {int(ranks.max())} exceeds rank bank of {banks.rank.shape[0]} rows")
    w, b = banks.rank_agg[L]
    return dc.weighted_lookup(banks.rank, ranks, w, b)


def temporal_embedding(tod, dow, n_rows, banks: EmbeddingBanks):
    """Broadcast the bank rows of one calendar position to every location.

    ``tod``/``dow`` may be scalars or ``(B,)`` arrays; outputs have shape
    ``(n_rows, d)`` or ``(B, n_rows, d)``.
    """
    tod, dow = np.asarray(tod), np.asarray(dow)
    if np.any((tod < 0) | (tod >= INTERVALS_PER_DAY)):
        raise IndexError(f"time-of-day index out of range [0, {INTERVALS_PER_DAY}): {tod}")
    if np.any((dow < 0) | (dow >= DAYS_PER_WEEK)):
        raise IndexError(f"day-of-week index out of range [0, {DAYS_PER_WEEK}): {dow}")
    shape = tod.shape + (n_rows,)
    e_tod = dc.embedding_lookup(banks.tod, np.broadcast_to(tod[..., None], shape))
    e_dow = dc.embedding_lookup(banks.dow, np.broadcast_to(dow[..., None], shape))
    return e_tod, e_dow


@dataclass
class Representation:
    H_prime: dc.Node
    components: dict  # name -> Node, in concatenation order

    @property
    def rank_embedding(self):
        return self.components.get("rank")


def build_representation(x, row_ids, tod, dow, banks: EmbeddingBanks, feature_mlps: dict,
                         project: dc.BlockParams, ranks=None, use_rank=True,
                         rate=0.0, training=False, rng=None) -> Representation:
    """Embed a ``(..., rows, L)`` flow slice into ``(..., rows, width)``.

    ``feature_mlps`` maps an input length to its feature block. Ranks are
    computed from ``x`` when not given.
    """
    x = dc.constant(x)
    L = x.shape[-1]
    if L not in feature_mlps:
        raise dc.ShapeError(f"input length {L} matches no configured feature block {sorted(feature_mlps)}")
    lead = x.shape[:-1]  # (..., rows)
    row_ids = np.asarray(row_ids)
    if row_ids.shape != lead[-1:]:
        raise dc.ShapeError(f"{len(row_ids)} row ids for {lead[-1]} rows")

    parts = {"feature": dc.residual_block(x, feature_mlps[L], rate, training, rng)}
    parts["node"] = dc.embedding_lookup(banks.node, np.broadcast_to(row_ids, lead))
    if use_rank:
        if ranks is None:
            ranks = compute_ranks(x.value)
        parts["rank"] = rank_node_embedding(ranks, banks, L)
    parts["tod"], parts["dow"] = temporal_embedding(tod, dow, lead[-1], banks)
    H = dc.concat_features(list(parts.values()))
    H_prime = dc.residual_block(H, project, rate, training, rng)
    return Representation(H_prime, parts)
