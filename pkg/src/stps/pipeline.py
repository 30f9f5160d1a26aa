"""The three-stage partial-sensing forecaster: assembly, training, inference, persistence."""

from __future__ import annotations

import hashlib
import json
import logging
import struct
import time
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .dataio import (INTERVALS_PER_DAY, DAYS_PER_WEEK, DataError, Normalizer, RoadGraph,
                     SensingPartition, TrafficTable, WindowArrays, chronological_split,
                     fit_normalizer, inject_noise, make_windows, stack_windows)
from .embeddings import build_representation, init_banks
from .metrics import MetricsReport, build_report
from .transfer import (adjacency_block, enhanced_transfer, location_mixer, plain_transfer,
                       transfer_apply)

log = logging.getLogger(__name__)

ABLATIONS = {
    "one-step": "one_step",
    "two-step": "two_step",
    "plain-transfer": "plain_transfer",
    "no-transfer": "no_transfer",
    "no-rank": "no_rank",
}


class NumericalError(RuntimeError):
    pass


class UntrainedModelError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class MissingParameterError(CheckpointError):
    pass


@dataclass
class ModelConfig:
    l: int = 12
    l_prime: int = 96
    d: int = 64
    alpha: float = 0.5
    dropout: float = 0.15
    lr: float = 1e-3
    weight_decay: float = 1e-3
    batch: int = 64
    epochs_per_stage: int = 50
    patience: int = 10
    one_step: bool = False
    two_step: bool = False
    plain_transfer: bool = False
    no_transfer: bool = False
    no_rank: bool = False
    seed: int = 0
    teacher_forcing: bool = False
    max_steps_per_stage: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.one_step and self.two_step:
            raise ValueError("one_step and two_step are mutually exclusive")
        if self.l < 1 or self.l_prime < 1 or self.d < 1 or self.batch < 1:
            raise ValueError("l, l_prime, d and batch must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def width(self):
        return (4 if self.no_rank else 5) * self.d

    @property
    def stages(self):
        if self.one_step:
            return (1,)
        if self.two_step:
            return (1, 3)
        return (1, 2, 3)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


def _block(store, name, p, h, q, rng):
    """Register a residual block; a skip projection is added when widths differ."""
    def lin(a, b, tag):
        lim = 1.0 / np.sqrt(a)
        return (store.add(f"{name}.{tag}.w", rng.uniform(-lim, lim, (a, b))),
                store.add(f"{name}.{tag}.b", rng.uniform(-lim, lim, b)))
    w1, b1 = lin(p, h, "layer1")
    w2, b2 = lin(h, q, "layer2")
    ws = bs = None
    if p != q:
        ws, bs = lin(p, q, "skip")
    return dc.BlockParams(w1, b1, w2, b2, ws, bs)


class StpsModel:
    def __init__(self, config: ModelConfig, adjacency, partition: SensingPartition,
                 normalizer: Normalizer | None = None):
        adjacency = np.asarray(adjacency, dtype=np.float64)
        if adjacency.shape != (partition.n, partition.n):
            raise DataError(f"adjacency {adjacency.shape} does not match {partition.n} locations")
        self.config = config
        self.adjacency = adjacency
        self.partition = partition
        self.normalizer = normalizer
        self.trained = False
        self.store = dc.ParameterStore()
        self.rng = np.random.default_rng(config.seed)

        c, n, m, mp = config, partition.n, partition.m, partition.m_prime
        W = c.width
        store, rng = self.store, self.rng
        self.banks = init_banks(store, n, c.d, (c.l, c.l_prime), rng)
        self.feature_mlps = {L: _block(store, f"feature_{L}", L, c.d, c.d, rng)
                             for L in sorted({c.l, c.l_prime})}
        self.project = _block(store, "project", W, W, W, rng)
        self.head_l = _block(store, "head_l", W, c.l, c.l, rng)
        self.head_lp = _block(store, "head_lp", W, c.l_prime, c.l_prime, rng)
        self.mixers = {}
        if c.no_transfer:
            for key, (p, q) in {"M_to_Mp": (m, mp), "N_to_M": (n, m), "N_to_Mp": (n, mp)}.items():
                self.mixers[key] = _block(store, f"mix_{key}", p, q, q, rng)
        self.plain = store.add("plain_transfer", np.zeros((n, n))) if c.plain_transfer else None

        self.M = np.array(partition.sensed, dtype=np.intp)
        self.Mp = np.array(partition.unsensed, dtype=np.intp)
        self.N = partition.all

    # ------------------------------------------------------------ building blocks

    def _ctx(self, training):
        return dict(rate=self.config.dropout if training else 0.0, training=training, rng=self.rng)

    def represent(self, x, row_ids, tod, dow, training=False):
        return build_representation(
            x, row_ids, tod, dow, self.banks, self.feature_mlps, self.project,
            use_rank=not self.config.no_rank, **self._ctx(training))

    def _move(self, rep, src, dst, head, key, training):
        H = rep.H_prime
        ctx = self._ctx(training)
        if self.config.no_transfer:
            moved = location_mixer(H, self.mixers[key], **ctx)
            return dc.residual_block(moved, head, **ctx)
        A_sub = adjacency_block(self.adjacency, src, dst)
        if self.config.plain_transfer:
            learned = dc.gather(dc.gather(self.plain, src, axis=0), dst, axis=1)
            T = plain_transfer(A_sub, learned)
        else:
            lead = H.shape[:-2]
            B_src = dc.embedding_lookup(self.banks.node, np.broadcast_to(src, lead + (len(src),)))
            B_dst = dc.embedding_lookup(self.banks.node, dst)
            T = enhanced_transfer(A_sub, rep.rank_embedding, B_src, B_dst)
        return transfer_apply(T, H, head, **ctx)

    # ------------------------------------------------------------ stages

    def step1_forward(self, x_M_T, tod, dow, training=False):
        """Past sensed flows -> past unsensed flows, ``(..., m', l)``."""
        self._check_rows(x_M_T, self.M, "x_M_T")
        rep = self.represent(x_M_T, self.M, tod, dow, training)
        return self._move(rep, self.M, self.Mp, self.head_l, "M_to_Mp", training)

    def step2_forward(self, x_M_T, xhat_Mp_T, tod, dow, training=False, return_rep=False):
        """Past flows at all locations -> future sensed flows, ``(..., m, l')``."""
        x_N = self.join_rows(x_M_T, xhat_Mp_T)
        rep = self.represent(x_N, self.N, tod, dow, training)
        out = self._move(rep, self.N, self.M, self.head_lp, "N_to_M", training)
        return (out, rep) if return_rep else out

    def step3_forward(self, x_N_T, xhat_M_Tp, tod, dow, tod2, dow2, training=False,
                      alpha=None, rep_N=None, return_branches=False):
        """Blend the spatial branch (past, all locations) with the temporal branch
        (predicted future, sensed locations) into ``(..., m', l')``."""
        alpha = self.config.alpha if alpha is None else alpha
        if rep_N is None:
            self._check_rows(x_N_T, self.N, "x_N_T")
            rep_N = self.represent(x_N_T, self.N, tod, dow, training)
        branch_a = self._move(rep_N, self.N, self.Mp, self.head_lp, "N_to_Mp", training)
        if alpha == 1.0 and xhat_M_Tp is None:
            return (branch_a, None) if return_branches else branch_a
        self._check_rows(xhat_M_Tp, self.M, "xhat_M_Tp")
        rep_M = self.represent(xhat_M_Tp, self.M, tod2, dow2, training)
        branch_b = self._move(rep_M, self.M, self.Mp, self.head_lp, "M_to_Mp", training)
        if return_branches:
            return branch_a, branch_b
        return dc.add(dc.scale(branch_a, alpha), dc.scale(branch_b, 1.0 - alpha))

    def one_step_forward(self, x_M_T, tod, dow, training=False):
        """Past sensed flows straight to future unsensed flows."""
        rep = self.represent(x_M_T, self.M, tod, dow, training)
        return self._move(rep, self.M, self.Mp, self.head_lp, "M_to_Mp", training)

    def join_rows(self, x_M, x_Mp):
        return dc.concat([dc.constant(x_M), dc.constant(x_Mp)], axis=-2)

    def _check_rows(self, x, ids, label):
        rows = dc.constant(x).shape[-2]
        if rows != len(ids):
            raise DataError(f"{label} has {rows} rows, partition expects {len(ids)}")

    def future_calendar(self, tod, dow):
        g = np.asarray(tod) + self.config.l
        return g % INTERVALS_PER_DAY, (np.asarray(dow) + g // INTERVALS_PER_DAY) % DAYS_PER_WEEK

    def forward_stage(self, stage, batch: WindowArrays, training=False) -> dc.Node:
        """Prediction (normalized units) for the target of ``stage``.

        ``batch`` holds normalized flows. Earlier stages feed their predictions
        forward unless teacher forcing is on.
        """
        c = self.config
        x, tod, dow = batch.x_M_T, batch.tod, batch.dow
        if c.one_step:
            if stage != 1:
                raise ValueError("the one-step variant has a single stage")
            return self.one_step_forward(x, tod, dow, training)
        s1 = self.step1_forward(x, tod, dow, training)
        if stage == 1:
            return s1
        past_unsensed = dc.constant(batch.x_Mp_T) if c.teacher_forcing else s1
        tod2, dow2 = self.future_calendar(tod, dow)
        if c.two_step:
            if stage != 3:
                raise ValueError("the two-step variant trains stages 1 and 3")
            x_N = self.join_rows(x, past_unsensed)
            return self.step3_forward(x_N, None, tod, dow, tod2, dow2, training, alpha=1.0)
        s2, rep_N = self.step2_forward(x, past_unsensed, tod, dow, training, return_rep=True)
        if stage == 2:
            return s2
        if stage != 3:
            raise ValueError(f"unknown stage {stage}")
        future_sensed = dc.constant(batch.x_M_Tp) if c.teacher_forcing else s2
        return self.step3_forward(None, future_sensed, tod, dow, tod2, dow2, training, rep_N=rep_N)

    def stage_target(self, stage, batch: WindowArrays):
        if self.config.one_step or stage == 3:
            return batch.x_Mp_Tp
        return {1: batch.x_Mp_T, 2: batch.x_M_Tp}[stage]

    def normalize(self, batch: WindowArrays) -> WindowArrays:
        if self.normalizer is None:
            raise UntrainedModelError("model has no fitted normalizer")
        return batch.mapped(self.normalizer.forward)

    def predict(self, batch: WindowArrays, stage=None, chunk=256) -> np.ndarray:
        """Denormalized eval-mode predictions for ``stage`` (default: final)."""
        stage = self.config.stages[-1] if stage is None else stage
        norm = self.normalize(batch)
        outs = []
        for s in range(0, len(norm), chunk):
            part = norm.take(slice(s, s + chunk))
            outs.append(self.normalizer.inverse(self.forward_stage(stage, part).value))
        return np.concatenate(outs)


# ---------------------------------------------------------------- inference & loss

def infer(model: StpsModel, x_M_T, tod, dow) -> np.ndarray:
    """Forecast future unsensed flows from raw past sensed flows."""
    if not model.trained or model.normalizer is None:
        raise UntrainedModelError("infer called on an untrained model")
    x = np.asarray(x_M_T, dtype=np.float64)
    single = x.ndim == 2
    xb = x[None] if single else x
    B = xb.shape[0]
    m, mp, c = model.partition.m, model.partition.m_prime, model.config
    batch = WindowArrays(xb, np.zeros((B, mp, c.l)), np.zeros((B, m, c.l_prime)),
                         np.zeros((B, mp, c.l_prime)),
                         np.broadcast_to(np.asarray(tod), (B,)).copy(),
                         np.broadcast_to(np.asarray(dow), (B,)).copy())
    out = model.predict(batch)
    return out[0] if single else out


def mae_loss(pred_norm: dc.Node, truth_raw, normalizer: Normalizer) -> dc.Node:
    truth_raw = np.asarray(truth_raw, dtype=np.float64)
    if pred_norm.shape != truth_raw.shape:
        raise dc.ShapeError(f"prediction {pred_norm.shape} and truth {truth_raw.shape} differ")
    denorm = dc.shift(dc.scale(pred_norm, normalizer.std), normalizer.mean)
    return dc.mean(dc.absolute(dc.sub(denorm, dc.constant(truth_raw))))


# ---------------------------------------------------------------- training

@dataclass
class EpochLog:
    stage: int
    epoch: int
    steps: int
    train_mae: float
    val_mae: float | None
    seconds: float


def stage_mae(model: StpsModel, stage, data: WindowArrays, chunk=256) -> float:
    pred = model.predict(data, stage, chunk)
    return float(np.mean(np.abs(pred - model.stage_target(stage, data))))


def train_stage(model: StpsModel, stage, train: WindowArrays, val: WindowArrays | None = None):
    """Minibatch AdamW on one stage's MAE; returns per-epoch logs.

    Gradients flow through every earlier stage in the chain. With validation
    data the best-validation parameters are restored at the end.
    """
    c, store = model.config, model.store
    if len(train) == 0:
        raise DataError("no training windows")
    if model.normalizer is None:
        raise UntrainedModelError("fit a normalizer before training")
    store.reset_moments()
    norm_train = model.normalize(train)
    logs = []
    best, best_params, stale = np.inf, None, 0
    steps = 0
    for epoch in range(c.epochs_per_stage):
        t0 = time.perf_counter()
        order = model.rng.permutation(len(train))
        losses = []
        for s in range(0, len(order), c.batch):
            idx = order[s:s + c.batch]
            batch = norm_train.take(idx)
            pred = model.forward_stage(stage, batch, training=True)
            loss = mae_loss(pred, model.stage_target(stage, train.take(idx)), model.normalizer)
            value = float(loss.value)
            if not np.isfinite(value):
                raise NumericalError(
                    f"non-finite loss at stage {stage}, epoch {epoch}, step {steps}: {value}")
            dc.backward(loss)
            dc.adamw_step(store, c.lr, weight_decay=c.weight_decay, names=store.with_grad())
            losses.append(value)
            steps += 1
            if c.max_steps_per_stage and steps >= c.max_steps_per_stage:
                break
        val_mae = stage_mae(model, stage, val) if val is not None and len(val) else None
        logs.append(EpochLog(stage, epoch, steps, float(np.mean(losses)), val_mae,
                             time.perf_counter() - t0))
        log.info("stage %d epoch %d: train %.4f val %s", stage, epoch, logs[-1].train_mae, val_mae)
        if val_mae is not None:
            if val_mae < best:
                best, best_params, stale = val_mae, store.snapshot(), 0
            else:
                stale += 1
                if stale >= c.patience:
                    break
        if c.max_steps_per_stage and steps >= c.max_steps_per_stage:
            break
    if best_params is not None:
        store.restore(best_params)
    return logs


def fit(model: StpsModel, train: WindowArrays, val: WindowArrays | None = None):
    """Train every stage of the configured variant in order."""
    logs = []
    for stage in model.config.stages:
        logs.extend(train_stage(model, stage, train, val))
    model.trained = True
    return logs


# ---------------------------------------------------------------- datasets

@dataclass
class Dataset:
    train: WindowArrays
    val: WindowArrays
    test: WindowArrays
    normalizer: Normalizer
    partition: SensingPartition
    train_table: TrafficTable = field(repr=False)


def prepare_dataset(table: TrafficTable, partition: SensingPartition, l=12, l_prime=96,
                    noise_variance=0.0, noise_seed=0) -> Dataset:
    """Split 3:1:1, optionally corrupt the training split, fit the z-score, window."""
    train_t, val_t, test_t = chronological_split(table, min_length=l + l_prime)
    train_t = inject_noise(train_t, noise_variance, noise_seed)
    norm = fit_normalizer(train_t.values)
    win = [stack_windows(make_windows(t, partition, l, l_prime)) for t in (train_t, val_t, test_t)]
    return Dataset(*win, norm, partition, train_t)


def evaluate(model: StpsModel, data: WindowArrays) -> MetricsReport:
    return build_report(data.x_Mp_Tp, model.predict(data))


def hop_distances(adjacency) -> np.ndarray:
    A = np.asarray(adjacency) > 0
    n = len(A)
    dist = np.full((n, n), np.inf)
    for s in range(n):
        dist[s, s] = 0
        queue = deque([s])
        while queue:
            u = queue.popleft()
            for v in np.nonzero(A[u])[0]:
                if dist[s, v] == np.inf:
                    dist[s, v] = dist[s, u] + 1
                    queue.append(v)
    return dist


def nearest_sensed_copy(x_M_T, adjacency, partition: SensingPartition, l_prime) -> np.ndarray:
    """Baseline: each unsensed site repeats the last reading of its closest sensed site.

    Closeness is hop count on the road graph; ties go to the lower location id.
    """
    dist = hop_distances(adjacency)
    M = np.array(partition.sensed)
    nearest = [int(np.argmin(dist[j, M])) for j in partition.unsensed]
    last = np.asarray(x_M_T)[..., nearest, -1]
    return np.repeat(last[..., None], l_prime, axis=-1)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"STPS"
FORMAT_VERSION = 1


def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def checkpoint_save(model: StpsModel, path):
    tensors = [("graph/adjacency", model.adjacency)]
    step_counts = {}
    for name in model.store.names():
        e = model.store.entries[name]
        tensors += [(f"param/{name}", e.node.value), (f"adam_m/{name}", e.adam_m),
                    (f"adam_v/{name}", e.adam_v)]
        step_counts[name] = e.step_count
    manifest, payload, offset = [], [], 0
    for name, arr in tensors:
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payload.append(raw)
        offset += len(raw)
    norm = model.normalizer
    header = {
        "config": asdict(model.config),
        "normalizer": None if norm is None else {"mean": norm.mean, "std": norm.std},
        "partition": {"sensed": list(model.partition.sensed),
                      "unsensed": list(model.partition.unsensed)},
        "rng_state": model.rng.bit_generator.state,
        "trained": model.trained,
        "step_counts": step_counts,
        "tensors": manifest,
    }
    meta = json.dumps(header, sort_keys=True).encode()
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(meta)) + meta + b"".join(payload)
    Path(path).write_bytes(body + _checksum(body))


def checkpoint_load(path) -> StpsModel:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 12 + 8 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an STPS checkpoint")
    body, tail = data[:-8], data[-8:]
    if _checksum(body) != tail:
        raise ChecksumError(f"{path}: checksum mismatch (truncated or corrupt file)")
    version, meta_len = struct.unpack_from("<IQ", body, 4)
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = 4 + 12
    header = json.loads(body[start:start + meta_len])
    payload = body[start + meta_len:]
    arrays = {}
    for t in header["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        arrays[t["name"]] = np.frombuffer(payload, "<f8", count, t["offset"]).reshape(t["shape"]).copy()

    config = ModelConfig.from_dict(header["config"])
    part = SensingPartition(tuple(header["partition"]["sensed"]), tuple(header["partition"]["unsensed"]))
    norm = header["normalizer"]
    model = StpsModel(config, arrays["graph/adjacency"], part,
                      None if norm is None else Normalizer(norm["mean"], norm["std"]))
    expected = set(model.store.names())
    stored = {k.split("/", 1)[1] for k in arrays if k.startswith("param/")}
    for name in sorted(expected - stored):
        raise MissingParameterError(f"{path}: checkpoint lacks parameter {name!r}")
    for name in sorted(stored - expected):
        raise CheckpointError(f"{path}: unexpected parameter {name!r}")
    for name in expected:
        e = model.store.entries[name]
        value = arrays[f"param/{name}"]
        if value.shape != e.node.shape:
            raise CheckpointError(f"{path}: parameter {name!r} has shape {value.shape}, expected {e.node.shape}")
        e.node.value[...] = value
        e.adam_m[...] = arrays[f"adam_m/{name}"]
        e.adam_v[...] = arrays[f"adam_v/{name}"]
        e.step_count = int(header["step_counts"][name])
    model.rng.bit_generator.state = header["rng_state"]
    model.trained = bool(header["trained"])
    return model
