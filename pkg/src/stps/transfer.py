"""Embedding-enhanced spatial transfer between location sets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc


@dataclass
class TransferMatrix:
    base: np.ndarray   # (src, dst) adjacency sub-block
    enhanced: dc.Node  # (..., src, dst)


def adjacency_block(adjacency, src, dst) -> np.ndarray:
    return np.asarray(adjacency)[np.ix_(np.asarray(src), np.asarray(dst))]


def enhanced_transfer(A_sub, E_agg, B_src, B_dst) -> TransferMatrix:
    """``A_sub + (E_agg + B_src) @ B_dst.T``.

    ``E_agg`` may be ``None`` (no rank term). ``E_agg`` and ``B_src`` share a
    shape, optionally batched; ``B_dst`` is ``(dst, d)``.
    """
    A_sub = np.asarray(A_sub, dtype=np.float64)
    src_emb = B_src if E_agg is None else dc.add(E_agg, B_src)
    if src_emb.shape[-2] != A_sub.shape[0] or B_dst.shape[0] != A_sub.shape[1] \
            or src_emb.shape[-1] != B_dst.shape[-1]:
        raise dc.ShapeError(
            f"transfer shapes disagree: A {A_sub.shape}, source {src_emb.shape}, dest {B_dst.shape}")
    low_rank = dc.matmul(src_emb, dc.transpose(B_dst))
    base = dc.constant(np.broadcast_to(A_sub, low_rank.shape))
    return TransferMatrix(A_sub, dc.add(base, low_rank))


def plain_transfer(A_sub, learned_sub: dc.Node) -> TransferMatrix:
    """Adjacency plus a free learnable matrix of the same shape."""
    A_sub = np.asarray(A_sub, dtype=np.float64)
    return TransferMatrix(A_sub, dc.add(dc.constant(A_sub), learned_sub))


def transfer_apply(T: TransferMatrix, H_prime: dc.Node, head: dc.BlockParams,
                   rate=0.0, training=False, rng=None) -> dc.Node:
    """Move ``(..., src, w)`` representations to ``(..., dst, out_len)``."""
    if head.in_width != H_prime.shape[-1]:
        raise dc.ShapeError(f"head expects width {head.in_width}, representation has {H_prime.shape[-1]}")
    moved = dc.matmul(dc.transpose(T.enhanced), H_prime)
    return dc.residual_block(moved, head, rate, training, rng)


def location_mixer(H_prime: dc.Node, mixer: dc.BlockParams, rate=0.0, training=False, rng=None):
    """Map ``(..., src, w)`` to ``(..., dst, w)`` with a block over the location axis."""
    mixed = dc.residual_block(dc.transpose(H_prime), mixer, rate, training, rng)
    return dc.transpose(mixed)
