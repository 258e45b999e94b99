"""Training-instance construction, normalization, Adam and checkpoints."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import stresnet
from .externals import encode_external  # noqa: F401  (re-exported)
from .flowgrid import FlowSeries
from .stresnet import Inputs, ModelConfig
from .tensor import BN_EPS, BN_MOMENTUM

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"STRN"
CHECKPOINT_VERSION = 1


# --- instances ------------------------------------------------------------

@dataclass
class InstanceSet:
    """Stacked training instances, ordered by target interval ``t``."""

    inputs: Inputs
    targets: np.ndarray     # (N, 2, I, J)
    t: np.ndarray           # (N,)

    def __len__(self) -> int:
        return len(self.t)

    def take(self, idx) -> "InstanceSet":
        return InstanceSet(self.inputs.take(idx), self.targets[idx], self.t[idx])

    def where(self, mask) -> "InstanceSet":
        return self.take(np.nonzero(mask)[0])


def dependency_offsets(len_closeness, len_period, len_trend, period, trend):
    return {
        "c": [i for i in range(len_closeness, 0, -1)],
        "p": [i * period for i in range(len_period, 0, -1)],
        "q": [i * trend for i in range(len_trend, 0, -1)],
    }


def valid_targets(series: FlowSeries, lookback: int) -> list[int]:
    """Every ``t`` whose dependencies ``t - lookback .. t - 1`` share t's segment."""
    out = []
    for start, block in series.segments:
        out.extend(range(start + lookback, start + len(block)))
    return out


def stack_window(get, t: int, offsets) -> np.ndarray:
    """Concatenate tensors at ``t - o`` (oldest first) along the channel axis."""
    return np.concatenate([get(t - o) for o in offsets], axis=0)


def make_instances(series: FlowSeries, externals, len_closeness: int, len_period: int,
                   len_trend: int, period: int, trend: int) -> InstanceSet:
    """Build one instance per target interval with a complete history.

    ``externals`` maps interval -> encoded vector, or is ``None`` for models
    without the external branch.
    """
    if period < 1 or trend < 1:
        raise ValueError("period and trend must be >= 1")
    offs = dependency_offsets(len_closeness, len_period, len_trend, period, trend)
    lookback = max([0] + [o[0] for o in offs.values() if o])
    ts = valid_targets(series, lookback)
    grid = series.grid
    shape = grid.shape
    get = lambda t: series[t].astype(np.float64)

    def branch(key):
        if not offs[key]:
            return None
        if not ts:
            return np.zeros((0, 2 * len(offs[key]), grid.rows, grid.cols))
        return np.stack([stack_window(get, t, offs[key]) for t in ts])

    ext = None
    if externals is not None:
        missing = [t for t in ts if t not in externals]
        if missing:
            raise ValueError(f"no external features for interval {missing[0]}")
        ext = np.stack([externals[t] for t in ts]) if ts else np.zeros((0, 0))
    targets = np.stack([get(t) for t in ts]) if ts else np.zeros((0,) + shape)
    inputs = Inputs(branch("c"), branch("p"), branch("q"), ext)
    return InstanceSet(inputs, targets, np.asarray(ts, dtype=np.int64))


def instances_for(cfg: ModelConfig, series: FlowSeries, externals=None) -> InstanceSet:
    return make_instances(series, externals if cfg.ext_dim > 0 else None, cfg.len_closeness,
                          cfg.len_period, cfg.len_trend, cfg.period, cfg.trend)


# --- min-max normalization ------------------------------------------------

@dataclass(frozen=True)
class NormStats:
    min: float
    max: float

    def __post_init__(self):
        if not self.max > self.min:
            raise ValueError(f"degenerate range [{self.min}, {self.max}]")


def minmax_fit(flows) -> NormStats:
    if isinstance(flows, FlowSeries):
        flows = flows.stacked()
    flows = np.asarray(flows, dtype=np.float64)
    return NormStats(float(flows.min()), float(flows.max()))


def minmax_apply(x, stats: NormStats):
    return 2.0 * (np.asarray(x, dtype=np.float64) - stats.min) / (stats.max - stats.min) - 1.0


def minmax_invert(y, stats: NormStats):
    return (np.asarray(y, dtype=np.float64) + 1.0) * 0.5 * (stats.max - stats.min) + stats.min


def normalize_series(series: FlowSeries, stats: NormStats) -> FlowSeries:
    return series.map(lambda b: minmax_apply(b, stats))


# --- Adam -----------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update; returns ``(new_params, state)``."""
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    new = dict(params)
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        new[name] = params[name] - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return new, state


# --- training loop --------------------------------------------------------

@dataclass
class TrainHyper:
    batch_size: int = 32
    lr: float = 1e-3
    max_epochs: int = 100
    patience: int = 10
    finetune_epochs: int = 10
    val_fraction: float = 0.1
    split: str = "chronological"    # or "random"

    @classmethod
    def from_dict(cls, d: dict) -> "TrainHyper":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_rmse: float
    phase: str = "train"


def split_train_val(n: int, hyper: TrainHyper, rng: np.random.Generator):
    n_val = int(round(n * hyper.val_fraction))
    if n_val == 0 or n_val >= n:
        return np.arange(n), np.zeros(0, dtype=np.int64)
    if hyper.split == "chronological":
        return np.arange(n - n_val), np.arange(n - n_val, n)
    if hyper.split == "random":
        perm = rng.permutation(n)
        return np.sort(perm[n_val:]), np.sort(perm[:n_val])
    raise ValueError(f"unknown split {hyper.split!r}")


def predict_batched(params, cfg: ModelConfig, inputs: Inputs, batch: int = 256) -> np.ndarray:
    n = len(inputs)
    parts = [stresnet.forward(params, cfg, inputs.take(slice(i, i + batch))) for i in range(0, n, batch)]
    return np.concatenate(parts) if parts else np.zeros((0, 2, cfg.rows, cfg.cols))


def dataset_rmse(params, cfg: ModelConfig, data: InstanceSet, stats: NormStats | None = None) -> float:
    """RMSE over ``data``, in raw flow units when ``stats`` is given."""
    if len(data) == 0:
        return float("nan")
    pred = predict_batched(params, cfg, data.inputs)
    err = np.sqrt(np.mean((pred - data.targets) ** 2))
    if stats is not None:
        err *= 0.5 * (stats.max - stats.min)
    return float(err)


def _run_epoch(params, cfg, data: InstanceSet, idx, hyper, adam, rng):
    order = idx[rng.permutation(len(idx))]
    total, count = 0.0, 0
    for s in range(0, len(order), hyper.batch_size):
        b = order[s:s + hyper.batch_size]
        batch = data.take(b)
        loss, grads, bn = stresnet.loss_and_grads(params, cfg, batch.inputs, batch.targets)
        params, adam = adam_step(params, grads, adam)
        params.update(bn)
        total += loss * len(b)
        count += len(b)
    return params, total / max(count, 1)


def train(data: InstanceSet, cfg: ModelConfig, hyper: TrainHyper | None = None, seed: int = 0,
          stats: NormStats | None = None, params: dict | None = None):
    """Adam with early stopping on a held-out split, then full-data fine-tuning.

    Returns ``(params, history)``.  The validation RMSE of every epoch is in
    raw units when ``stats`` is supplied.
    """
    hyper = hyper or TrainHyper()
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(seed)
    params = dict(params) if params is not None else stresnet.init_params(cfg, seed)
    train_idx, val_idx = split_train_val(len(data), hyper, rng)
    val = data.take(val_idx)
    adam = AdamState(lr=hyper.lr)
    history: list[EpochRecord] = []

    best_params, best_val = dict(params), dataset_rmse(params, cfg, val, stats)
    wait = 0
    for epoch in range(1, hyper.max_epochs + 1):
        params, tl = _run_epoch(params, cfg, data, train_idx, hyper, adam, rng)
        vr = dataset_rmse(params, cfg, val, stats)
        history.append(EpochRecord(epoch, tl, vr))
        log.debug("epoch %d train_loss=%.6f val_rmse=%.4f", epoch, tl, vr)
        if len(val_idx) == 0 or vr < best_val:
            best_val, best_params, wait = vr, dict(params), 0
        else:
            wait += 1
            if wait >= hyper.patience:
                break
    params = best_params

    all_idx = np.arange(len(data))
    for k in range(hyper.finetune_epochs):
        params, tl = _run_epoch(params, cfg, data, all_idx, hyper, adam, rng)
        history.append(EpochRecord(len(history) + 1, tl, dataset_rmse(params, cfg, val, stats),
                                   phase="finetune"))
    return params, history


def validation_split(data: InstanceSet, hyper: TrainHyper, seed: int) -> InstanceSet:
    """The validation instances ``train`` would hold out for this seed."""
    _, val_idx = split_train_val(len(data), hyper, np.random.default_rng(seed))
    return data.take(val_idx)


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_loss", "val_rmse"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_rmse)])


def read_history_csv(path) -> list[EpochRecord]:
    with open(path, newline="") as f:
        return [EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["val_rmse"]))
                for r in csv.DictReader(f)]


# --- checkpoints ----------------------------------------------------------

class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    stats: NormStats
    config: ModelConfig
    meta: dict = field(default_factory=dict)
    checkpoint_id: str = ""


def encode_checkpoint(params, stats: NormStats, cfg: ModelConfig, meta: dict | None = None) -> bytes:
    block = {
        "model": cfg.to_dict(),
        "norm": {"min": stats.min, "max": stats.max},
        "meta": {"bn_eps": BN_EPS, "bn_momentum": BN_MOMENTUM, **(meta or {})},
    }
    blob = json.dumps(block, sort_keys=True).encode()
    out = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<I", len(blob)), blob,
           struct.pack("<I", len(params))]
    for name, arr in params.items():
        raw = name.encode()
        arr = np.asarray(arr, dtype=np.float64)
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def decode_checkpoint(data: bytes) -> Checkpoint:
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {data[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    try:
        (version,) = struct.unpack_from("<I", data, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"checkpoint version {version} is not supported "
                                  f"(this build reads version {CHECKPOINT_VERSION})")
        (n,) = struct.unpack_from("<I", data, 8)
        block = json.loads(data[12:12 + n])
        off = 12 + n
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        params = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + ln].decode()
            off += ln
            (rank,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            size = int(np.prod(shape))
            arr = np.frombuffer(data, dtype="<f8", count=size, offset=off).astype(np.float64)
            off += 8 * size
            params[name] = arr.reshape(shape)
    except (struct.error, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    return Checkpoint(params, NormStats(block["norm"]["min"], block["norm"]["max"]),
                      ModelConfig.from_dict(block["model"]), block.get("meta", {}),
                      hashlib.sha256(data).hexdigest()[:12])


def save_checkpoint(params, stats: NormStats, cfg: ModelConfig, path, meta: dict | None = None) -> str:
    data = encode_checkpoint(params, stats, cfg, meta)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()[:12]


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def hyper_dict(hyper: TrainHyper) -> dict:
    return asdict(hyper)
