"""Calibration regression network: small conv backbone plus a 3-output head."""
from __future__ import annotations

import copy
import hashlib
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .tensor import Tensor

N_OUTPUTS = 3
# softplus(_ETA_INIT) == 1.0
_ETA_INIT = math.log(math.e - 1.0)


@dataclass(frozen=True)
class ArchConfig:
    name: str = "calibnet-tiny"
    in_channels: int = 3
    input_size: int = 64
    channels: tuple = (16, 32, 64)
    feature_dim: int = 64
    head: str = "affine"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        if self.head not in ("affine", "cosine"):
            raise ValueError(f"unknown head {self.head!r}; expected 'affine' or 'cosine'")
        if self.channels and self.input_size % (2 ** len(self.channels)):
            raise ValueError("input_size must be divisible by 2**len(channels)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ArchConfig:
        return cls(**d)


ARCHS = {
    "calibnet-tiny": dict(channels=(16, 32, 64), feature_dim=64),
    "calibnet-micro": dict(channels=(8, 16, 32), feature_dim=32),
    "linear": dict(channels=(), feature_dim=16),
}


def make_arch(name: str, head: str = "affine", input_size: int = 64, **overrides) -> ArchConfig:
    if name not in ARCHS:
        raise ValueError(f"unknown architecture {name!r}; valid: {', '.join(sorted(ARCHS))}")
    kw = dict(ARCHS[name])
    kw.update(overrides)
    return ArchConfig(name=name, head=head, input_size=input_size, **kw)


class ForwardPass(NamedTuple):
    outputs: Tensor
    features: Tensor


def cosine_head_forward(features: Tensor, weight: Tensor, eta_raw: Tensor) -> Tensor:
    """``eta_k * <w_k/|w_k|, f/|f|>`` for each output k; ``eta = softplus(eta_raw)``."""
    f_bar = T.l2_normalize(features, axis=1)
    w_bar = T.l2_normalize(weight, axis=1)
    cos = T.matmul(f_bar, _transpose(w_bar))
    return T.mul(cos, T.softplus(eta_raw))


def _transpose(a: Tensor) -> Tensor:
    return T._make(a.data.T, (a,), lambda g: a._accumulate(g.T))


class Network:
    """Conv blocks (3x3 conv, 2x2 max-pool, ReLU), global average pool,
    a ReLU feature layer, then an affine or cosine-normalized head."""

    def __init__(self, config: ArchConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        rng = np.random.default_rng(seed)
        c_in = config.in_channels
        for i, c_out in enumerate(config.channels):
            fan_in = c_in * 9
            self._add(f"conv{i}.weight", rng.normal(0, math.sqrt(2.0 / fan_in), (c_out, c_in, 3, 3)))
            self._add(f"conv{i}.bias", np.zeros(c_out))
            c_in = c_out
        if config.channels:
            flat = c_in
        else:
            flat = config.in_channels * config.input_size ** 2
        self._add("feat.weight", rng.normal(0, math.sqrt(2.0 / flat), (config.feature_dim, flat)))
        self._add("feat.bias", np.full(config.feature_dim, 0.01))
        if config.head == "affine":
            scale = math.sqrt(1.0 / config.feature_dim)
            self._add("head.weight", rng.normal(0, scale, (N_OUTPUTS, config.feature_dim)))
            self._add("head.bias", np.zeros(N_OUTPUTS))
        else:
            self._add("head.weight", rng.normal(0, 1.0, (N_OUTPUTS, config.feature_dim)))
            self._add("head.eta", np.full(N_OUTPUTS, _ETA_INIT))

    def _add(self, name, value):
        self.params[name] = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True)

    def __call__(self, x) -> ForwardPass:
        return self.forward(x)

    def forward(self, x) -> ForwardPass:
        cfg = self.config
        x = T.as_tensor(x)
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        expected = (cfg.in_channels, cfg.input_size, cfg.input_size)
        if x.data.ndim != 4 or x.shape[1:] != expected:
            raise ValueError(f"expected input of shape (N, {expected[0]}, {expected[1]}, {expected[2]}), got {x.shape}")
        p = self.params
        h = T.channels_last(x) if cfg.channels else x
        for i in range(len(cfg.channels)):
            h = T.conv2d_3x3(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"])
            # pooling before the ReLU is the same function and 4x cheaper
            h = T.relu(T.max_pool_2x2(h))
        h = T.global_avg_pool(h) if cfg.channels else T.reshape(h, (x.shape[0], -1))
        features = T.relu(T.linear(h, p["feat.weight"], p["feat.bias"]))
        if cfg.head == "affine":
            out = T.linear(features, p["head.weight"], p["head.bias"])
        else:
            out = cosine_head_forward(features, p["head.weight"], p["head.eta"])
        return ForwardPass(out, features)

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        outs = []
        with T.no_grad():
            for i in range(0, len(x), batch_size):
                outs.append(self.forward(x[i:i + batch_size]).outputs.data)
        return np.concatenate(outs) if outs else np.zeros((0, N_OUTPUTS), self.dtype)

    def features(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        outs = []
        with T.no_grad():
            for i in range(0, len(x), batch_size):
                outs.append(self.forward(x[i:i + batch_size]).features.data)
        return np.concatenate(outs)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def state_dict(self) -> OrderedDict:
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items())

    def load_state_dict(self, state):
        for k, v in self.params.items():
            if k not in state:
                raise KeyError(f"missing parameter {k}")
            arr = np.asarray(state[k])
            if arr.shape != v.shape:
                raise ValueError(f"shape disagreement for {k}: {arr.shape} vs {v.shape}")
            v.data = arr.astype(self.dtype, copy=True)

    def copy(self, dtype=None) -> Network:
        new = copy.copy(self)
        new.dtype = np.dtype(dtype or self.dtype)
        new.params = OrderedDict(
            (k, Tensor(v.data.astype(new.dtype, copy=True), requires_grad=True)) for k, v in self.params.items()
        )
        return new

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for k, v in self.params.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v.data).tobytes())
        return h.hexdigest()


class TeacherSnapshot:
    """Frozen copy of a network; exposes outputs and normalized features only."""

    def __init__(self, net: Network):
        self._net = net.copy()
        for t in self._net.params.values():
            t.requires_grad = False
        self.hash = self._net.param_hash()

    @property
    def config(self) -> ArchConfig:
        return self._net.config

    def __call__(self, x) -> ForwardPass:
        with T.no_grad():
            fp = self._net.forward(x)
        return ForwardPass(fp.outputs.detach(), fp.features.detach())

    def predict(self, x) -> np.ndarray:
        return self._net.predict(x)

    def features(self, x) -> np.ndarray:
        return self._net.features(x)

    def normalized_features(self, x) -> np.ndarray:
        f = self(x).features.data
        norm = np.linalg.norm(f, axis=1, keepdims=True)
        if np.any(norm == 0):
            raise T.DegenerateFeatureError("teacher produced a zero-norm feature vector")
        return f / norm

    def param_hash(self) -> str:
        return self._net.param_hash()
