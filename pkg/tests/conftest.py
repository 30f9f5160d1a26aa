import numpy as np
import pytest

from stps import diffcore as dc
from stps.dataio import RoadGraph, SensingPartition, WindowArrays
from stps.pipeline import ModelConfig, StpsModel


def probe(out: dc.Node, seed=0) -> dc.Node:
    """Scalar ``sum(R * out)`` with a fixed random ``R``; exercises every output entry."""
    R = np.random.default_rng(seed).normal(size=out.shape)
    return dc.sum_all(dc.mul(out, dc.constant(R)))


def ring_graph(n):
    return RoadGraph.from_edges(n, [(i, (i + 1) % n) for i in range(n)] + [(0, n // 2)])


def toy_partition(n, m_prime):
    return SensingPartition(tuple(range(m_prime, n)), tuple(range(m_prime)))


def toy_model(n=5, m_prime=2, d=2, l=3, l_prime=4, seed=0, **flags):
    cfg = ModelConfig(l=l, l_prime=l_prime, d=d, seed=seed, **flags)
    from stps.dataio import Normalizer
    return StpsModel(cfg, ring_graph(n).adjacency, toy_partition(n, m_prime), Normalizer(100.0, 50.0))


def random_windows(model, batch=2, seed=1, normalized=True):
    p, c = model.partition, model.config
    rng = np.random.default_rng(seed)
    scale_ = 1.0 if normalized else 50.0
    shift_ = 0.0 if normalized else 100.0
    def blk(rows, cols):
        return shift_ + scale_ * rng.normal(size=(batch, rows, cols))
    return WindowArrays(blk(p.m, c.l), blk(p.m_prime, c.l), blk(p.m, c.l_prime),
                        blk(p.m_prime, c.l_prime), rng.integers(0, 288, batch), rng.integers(0, 7, batch))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
