"""Deep spatio-temporal residual network for citywide flow prediction.

Three convolutional branches (closeness, period, trend) share one layout::

    Conv1 -> ReLU -> L x ResUnit -> Conv2          (ResUnit: x + F(x))
    F(x) = Conv(ReLU(Conv(ReLU(x))))               (BN before each ReLU if enabled)

Branch outputs are fused with learned elementwise weight maps, the external
branch (two dense layers) is added, and ``tanh`` squashes the result into
(-1, 1).  Parameters live in a plain ``dict[str, np.ndarray]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

BRANCHES = ("c", "p", "q")


@dataclass
class ModelConfig:
    rows: int
    cols: int
    len_closeness: int = 3
    len_period: int = 1
    len_trend: int = 1
    period: int = 48
    trend: int = 336
    n_units: int = 2
    filters: int = 64
    kernel: int = 3
    use_bn: bool = False
    ext_dim: int = 0
    ext_hidden: int = 10
    fusion: str = "matrix"          # "matrix" (learned Hadamard weights) or "sum"
    fusion_shared: bool = False     # one weight map shared by inflow and outflow
    convs_per_unit: int = 2
    conv1_relu: bool = True

    def __post_init__(self):
        lengths = (self.len_closeness, self.len_period, self.len_trend)
        if min(lengths) < 0 or sum(lengths) == 0:
            raise ValueError(f"dependence lengths must be >= 0 and not all zero, got {lengths}")
        if self.period < 1 or self.trend < 1:
            raise ValueError("period and trend spans must be >= 1")
        if self.n_units < 0 or self.filters < 1 or self.kernel < 1:
            raise ValueError("n_units >= 0, filters >= 1 and kernel >= 1 required")
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid must be at least 1x1")
        if self.fusion not in ("matrix", "sum"):
            raise ValueError(f"unknown fusion {self.fusion!r}")
        if self.convs_per_unit not in (1, 2):
            raise ValueError("convs_per_unit must be 1 or 2")

    def length(self, branch: str) -> int:
        return {"c": self.len_closeness, "p": self.len_period, "q": self.len_trend}[branch]

    def step(self, branch: str) -> int:
        return {"c": 1, "p": self.period, "q": self.trend}[branch]

    @property
    def active_branches(self) -> tuple[str, ...]:
        return tuple(b for b in BRANCHES if self.length(b) > 0)

    @property
    def lookback(self) -> int:
        """Largest dependency offset ``max(l_c, l_p * p, l_q * q)``."""
        return max(self.length(b) * self.step(b) for b in BRANCHES)

    def offsets(self, branch: str) -> list[int]:
        """Dependency offsets of a branch, oldest first (e.g. [3, 2, 1])."""
        n, s = self.length(branch), self.step(branch)
        return [i * s for i in range(n, 0, -1)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class Inputs:
    """A batch of model inputs; any branch may be ``None`` when inactive.

    Branch arrays are ``(N, 2*l, I, J)``; ``external`` is ``(N, ext_dim)``.
    """

    closeness: np.ndarray | None = None
    period: np.ndarray | None = None
    trend: np.ndarray | None = None
    external: np.ndarray | None = None

    def branch(self, b: str) -> np.ndarray | None:
        return {"c": self.closeness, "p": self.period, "q": self.trend}[b]

    def __len__(self) -> int:
        for x in (self.closeness, self.period, self.trend, self.external):
            if x is not None:
                return len(x)
        return 0

    def take(self, idx) -> "Inputs":
        pick = lambda x: None if x is None else x[idx]
        return Inputs(pick(self.closeness), pick(self.period), pick(self.trend), pick(self.external))


# --- parameters -----------------------------------------------------------

def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    s = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-s, s, size=shape)


def _conv_specs(cfg: ModelConfig, b: str):
    """(name, c_in, c_out) of every conv layer in branch ``b``, in order."""
    specs = [(f"{b}.conv1", 2 * cfg.length(b), cfg.filters)]
    for u in range(cfg.n_units):
        for k in range(cfg.convs_per_unit):
            specs.append((f"{b}.res{u}.conv{k}", cfg.filters, cfg.filters))
    specs.append((f"{b}.conv2", cfg.filters, 2))
    return specs


def fusion_shape(cfg: ModelConfig) -> tuple[int, int, int]:
    return (1 if cfg.fusion_shared else 2, cfg.rows, cfg.cols)


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases, fusion maps at 1/(active branches)."""
    rng = np.random.default_rng(seed)
    k = cfg.kernel
    params: dict[str, np.ndarray] = {}
    active = cfg.active_branches
    for b in active:
        for name, c_in, c_out in _conv_specs(cfg, b):
            params[name + ".w"] = _glorot(rng, (c_out, c_in, k, k), c_in * k * k, c_out * k * k)
            params[name + ".b"] = np.zeros(c_out)
        if cfg.use_bn:
            for u in range(cfg.n_units):
                for j in range(cfg.convs_per_unit):
                    pre = f"{b}.res{u}.bn{j}"
                    params[pre + ".gamma"] = np.ones(cfg.filters)
                    params[pre + ".beta"] = np.zeros(cfg.filters)
                    params[pre + ".mean"] = np.zeros(cfg.filters)
                    params[pre + ".var"] = np.ones(cfg.filters)
    if cfg.fusion == "matrix":
        for b in active:
            params[f"fusion.{b}"] = np.full(fusion_shape(cfg), 1.0 / len(active))
    if cfg.ext_dim > 0:
        out = 2 * cfg.rows * cfg.cols
        params["ext.fc1.w"] = _glorot(rng, (cfg.ext_hidden, cfg.ext_dim), cfg.ext_dim, cfg.ext_hidden)
        params["ext.fc1.b"] = np.zeros(cfg.ext_hidden)
        params["ext.fc2.w"] = _glorot(rng, (out, cfg.ext_hidden), cfg.ext_hidden, out)
        params["ext.fc2.b"] = np.zeros(out)
    return params


def is_trainable(name: str) -> bool:
    """Batch-norm running statistics are buffers, not trained parameters."""
    return not (name.endswith(".mean") or name.endswith(".var"))


# --- forward pieces -------------------------------------------------------

class _Pass:
    """Parameter leaves plus batch-norm bookkeeping for one forward pass."""

    def __init__(self, params: dict[str, np.ndarray], training: bool, requires_grad: bool):
        self.training = training
        self.leaves = {name: Tensor(v, requires_grad=requires_grad and is_trainable(name), name=name)
                       for name, v in params.items()}
        self.params = params
        self.bn_updates: dict[str, np.ndarray] = {}

    def __getitem__(self, name: str) -> Tensor:
        return self.leaves[name]

    def bn(self, x: Tensor, pre: str) -> Tensor:
        stats = T.BatchNormStats(self.params[pre + ".mean"], self.params[pre + ".var"])
        out = T.batch_norm(x, self[pre + ".gamma"], self[pre + ".beta"], stats, self.training)
        if self.training:
            self.bn_updates[pre + ".mean"] = stats.mean
            self.bn_updates[pre + ".var"] = stats.var
        return out


def _as_pass(params, training=False, requires_grad=False) -> _Pass:
    return params if isinstance(params, _Pass) else _Pass(params, training, requires_grad)


def residual_unit(p: _Pass, cfg: ModelConfig, x: Tensor, pre: str) -> Tensor:
    h = x
    for k in range(cfg.convs_per_unit):
        if cfg.use_bn:
            h = p.bn(h, f"{pre}.bn{k}")
        h = T.relu(h)
        h = T.conv2d_same(h, p[f"{pre}.conv{k}.w"], p[f"{pre}.conv{k}.b"])
    return T.add(x, h)


def branch_forward(params, cfg: ModelConfig, branch: str, x) -> Tensor:
    """Conv1, ``n_units`` residual units, Conv2; returns (N, 2, I, J)."""
    p = _as_pass(params)
    x = T.as_tensor(x)
    expected = 2 * cfg.length(branch)
    if x.shape[-3] != expected:
        raise ValueError(f"branch {branch} expects {expected} channels, got {x.shape[-3]}")
    h = T.conv2d_same(x, p[f"{branch}.conv1.w"], p[f"{branch}.conv1.b"])
    if cfg.conv1_relu:
        h = T.relu(h)
    for u in range(cfg.n_units):
        h = residual_unit(p, cfg, h, f"{branch}.res{u}")
    return T.conv2d_same(h, p[f"{branch}.conv2.w"], p[f"{branch}.conv2.b"])


def external_forward(params, cfg: ModelConfig, e) -> Tensor:
    """Dense(ext_hidden) -> ReLU -> Dense(2*I*J), reshaped to the flow grid."""
    p = _as_pass(params)
    e = T.as_tensor(e)
    h = T.relu(T.fully_connected(e, p["ext.fc1.w"], p["ext.fc1.b"]))
    h = T.fully_connected(h, p["ext.fc2.w"], p["ext.fc2.b"])
    lead = e.shape[:-1]
    return T.reshape(h, lead + (2, cfg.rows, cfg.cols))


def fuse(outputs: dict[str, Tensor], weights: dict[str, Tensor] | None) -> Tensor:
    """Weighted elementwise sum of branch outputs; ``weights=None`` is a plain sum."""
    total = None
    for b, x in outputs.items():
        term = x if weights is None else T.hadamard(weights[b], x)
        total = term if total is None else T.add(total, term)
    if total is None:
        raise ValueError("no active branch to fuse")
    return total


def forward_graph(params, cfg: ModelConfig, inputs: Inputs) -> Tensor:
    p = _as_pass(params)
    outs = {}
    for b in cfg.active_branches:
        x = inputs.branch(b)
        if x is None:
            raise ValueError(f"branch {b} is active but its input is missing")
        outs[b] = branch_forward(p, cfg, b, x)
    weights = None
    if cfg.fusion == "matrix":
        weights = {b: p[f"fusion.{b}"] for b in outs}
    res = fuse(outs, weights)
    if cfg.ext_dim > 0:
        if inputs.external is None:
            raise ValueError("external branch is configured but no external input given")
        if inputs.external.shape[-1] != cfg.ext_dim:
            raise ValueError(f"external input has {inputs.external.shape[-1]} features, "
                             f"expected {cfg.ext_dim}")
        res = T.add(res, external_forward(p, cfg, inputs.external))
    return T.tanh_op(res)


def forward(params: dict[str, np.ndarray], cfg: ModelConfig, inputs: Inputs) -> np.ndarray:
    """Inference-mode prediction in normalized units, values in (-1, 1)."""
    return forward_graph(_Pass(params, training=False, requires_grad=False), cfg, inputs).data


def loss_and_grads(params: dict[str, np.ndarray], cfg: ModelConfig, inputs: Inputs,
                   target: np.ndarray, training: bool = True):
    """Mean squared error and its gradient w.r.t. every trainable parameter.

    Returns ``(loss, grads, bn_updates)``; ``bn_updates`` holds new running
    statistics when training with batch norm.
    """
    p = _Pass(params, training=training, requires_grad=True)
    pred = forward_graph(p, cfg, inputs)
    loss = T.mse_loss(pred, target)
    names = [n for n in params if is_trainable(n)]
    grads = T.backward(loss, [p[n] for n in names])
    return float(loss.data), dict(zip(names, grads)), p.bn_updates


def loss(params, cfg: ModelConfig, inputs: Inputs, target: np.ndarray) -> float:
    return float(np.mean((forward(params, cfg, inputs) - target) ** 2))


def config_json(cfg: ModelConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)
