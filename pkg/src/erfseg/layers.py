"""Parameter store, initialization and the conv->norm->activation block."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .ops import ConvSpec, conv2d, instance_norm
from .tensor import Tensor, relu


@dataclass(frozen=True)
class ParamSpec:
    """Declares one learnable tensor before it is materialized."""

    name: str
    shape: tuple
    kind: str  # conv_weight | bias | gamma | beta
    fan_in: int | None = None


class ParamStore:
    """Ordered name -> Tensor map of learnable parameters."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, tensor: Tensor):
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        self._params[name] = tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return self._params.values()

    def count(self) -> int:
        return sum(t.size for t in self._params.values())

    def zero_grads(self):
        for t in self._params.values():
            t.grad = None

    def astype(self, dtype) -> "ParamStore":
        out = ParamStore()
        for name, t in self._params.items():
            out.add(name, Tensor(t.data.astype(dtype)))
        return out

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for name, t in self._params.items():
            out.add(name, Tensor(t.data.copy()))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for name, t in self._params.items():
            if name not in state:
                raise ConfigError(f"checkpoint is missing parameter {name!r}")
            if state[name].shape != t.data.shape:
                raise ShapeError(
                    f"checkpoint shape {state[name].shape} != {t.data.shape} for {name!r}"
                )
            t.data = state[name].astype(t.data.dtype)


def count_params(params: ParamStore) -> int:
    return params.count()


def init_params(obj, seed: int, dtype=np.float32) -> ParamStore:
    """Materialize parameters for anything exposing param_specs().

    Conv weights ~ N(0, sqrt(2/fan_in)); biases and betas zero; gammas one.
    Fully determined by (specs, seed).
    """
    specs = obj.param_specs() if hasattr(obj, "param_specs") else obj
    rng = np.random.Generator(np.random.PCG64(seed))
    store = ParamStore()
    for spec in specs:
        if spec.kind == "conv_weight":
            std = np.sqrt(2.0 / spec.fan_in)
            data = rng.normal(0.0, std, size=spec.shape)
        elif spec.kind == "gamma":
            data = np.ones(spec.shape)
        elif spec.kind in ("bias", "beta"):
            data = np.zeros(spec.shape)
        else:
            raise ConfigError(f"unknown parameter kind {spec.kind!r}")
        store.add(spec.name, Tensor(data.astype(dtype)))
    return store


@dataclass(frozen=True)
class BlockSpec:
    """A stack of conv -> instance_norm -> relu units."""

    kind: str  # stem | encoder | decoder | head
    in_channels: int
    out_channels: int
    conv_count: int = 2
    norm: str = "instance"
    activation: str = "relu"
    dilation: int = 1
    depthwise: bool = False

    def __post_init__(self):
        if self.out_channels <= 0:
            raise ConfigError("out_channels must be > 0")
        if self.dilation < 1:
            raise ConfigError("dilation must be >= 1")


def _unit_channels(spec: BlockSpec, i: int) -> tuple[int, int]:
    cin = spec.in_channels if i == 0 else spec.out_channels
    return cin, spec.out_channels


def conv_block_param_specs(spec: BlockSpec, prefix: str):
    specs = []
    for i in range(spec.conv_count):
        cin, cout = _unit_channels(spec, i)
        groups = cin if (spec.depthwise and cin == cout) else 1
        wshape = (cout, cin // groups, 3, 3)
        specs.append(ParamSpec(f"{prefix}.conv{i}.weight", wshape, "conv_weight", cin // groups * 9))
        specs.append(ParamSpec(f"{prefix}.conv{i}.bias", (cout,), "bias"))
        specs.append(ParamSpec(f"{prefix}.norm{i}.gamma", (cout,), "gamma"))
        specs.append(ParamSpec(f"{prefix}.norm{i}.beta", (cout,), "beta"))
    return specs


def conv_block_forward(x: Tensor, spec: BlockSpec, params: ParamStore, prefix: str) -> Tensor:
    """(conv -> instance_norm -> relu) repeated spec.conv_count times."""
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"block {prefix!r} expects {spec.in_channels} channels, got {x.shape[1]}")
    out = x
    for i in range(spec.conv_count):
        cin, cout = _unit_channels(spec, i)
        groups = cin if (spec.depthwise and cin == cout) else 1
        cs = ConvSpec(cin, cout, (3, 3), dilation=spec.dilation, groups=groups)
        out = conv2d(out, params[f"{prefix}.conv{i}.weight"], params[f"{prefix}.conv{i}.bias"], cs)
        out = instance_norm(out, params[f"{prefix}.norm{i}.gamma"], params[f"{prefix}.norm{i}.beta"])
        out = relu(out)
    return out
