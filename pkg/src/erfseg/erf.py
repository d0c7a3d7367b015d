"""Effective-receptive-field measurement.

The analyzer backpropagates a unit gradient from the spatial center of a
network's output (channel 0) to the input, averages absolute input
gradients over random standard-normal samples, and summarizes the
resulting grid with a mass-fraction radius. Lab networks are plain,
dilated or residual conv stacks without normalization, so the comparison
isolates conv topology.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import ParamSpec, ParamStore, init_params
from .ops import ConvSpec, conv2d
from .tensor import Tape, Tensor, add, mul, relu, tensor_sum

TWO_SIGMA_MASS = 0.9545


@dataclass(frozen=True)
class LabSpec:
    """A conv-stack architecture for ERF experiments."""

    kind: str  # plain | dilated | residual
    depth: int
    dilation: int = 1
    channels: int = 8
    in_channels: int = 1

    def __post_init__(self):
        if self.kind not in ("plain", "dilated", "residual"):
            raise ConfigError(f"unknown lab kind {self.kind!r}")
        if self.kind == "dilated" and self.dilation < 2:
            raise ConfigError("dilated lab needs dilation >= 2")
        if self.kind != "dilated" and self.dilation != 1:
            raise ConfigError(f"{self.kind} lab uses dilation 1")
        if self.depth < 1:
            raise ConfigError("depth must be >= 1")

    def conv_spec(self, i: int) -> ConvSpec:
        cin = self.in_channels if i == 0 else self.channels
        return ConvSpec(cin, self.channels, (3, 3), dilation=self.dilation)

    def param_specs(self):
        specs = []
        for i in range(self.depth):
            cs = self.conv_spec(i)
            fan_in = cs.in_channels * 9
            specs.append(ParamSpec(f"conv{i}.weight", cs.weight_shape(), "conv_weight", fan_in))
            specs.append(ParamSpec(f"conv{i}.bias", (self.channels,), "bias"))
        return specs

    def rf_extent(self) -> int:
        """Theoretical receptive-field side length at the output."""
        return 1 + 2 * self.dilation * self.depth

    def forward(self, params: ParamStore, x: Tensor) -> Tensor:
        z = conv2d(x, params["conv0.weight"], params["conv0.bias"], self.conv_spec(0))
        for i in range(1, self.depth):
            h = conv2d(relu(z), params[f"conv{i}.weight"], params[f"conv{i}.bias"], self.conv_spec(i))
            z = add(z, h) if self.kind == "residual" else h
        return z


@dataclass
class ERFMap:
    """Mean absolute input-gradient grid for one output unit."""

    grid: np.ndarray  # (H, W), >= 0
    center: tuple[int, int]
    n_samples: int
    seed: int


@dataclass
class ERFReport:
    rf_extent: int
    erf_radius: int
    ratio: float  # erf diameter / rf extent


@dataclass
class CompareRow:
    label: str
    seed: int
    rf_extent: int
    erf_radius: int
    ratio: float


@dataclass
class CompareReport:
    rows: list = field(default_factory=list)

    def mean_radius(self, label: str) -> float:
        vals = [r.erf_radius for r in self.rows if r.label == label]
        return float(np.mean(vals))

    def mean_ratio(self, label: str) -> float:
        vals = [r.ratio for r in self.rows if r.label == label]
        return float(np.mean(vals))


def compute_erf(forward_fn, input_shape, n_samples: int, seed: int,
                dtype=np.float64) -> ERFMap:
    """Average |d(output[0, 0, center]) / d(input)| over standard-normal inputs."""
    if len(input_shape) != 4:
        raise ShapeError(f"input_shape must be (B,C,H,W), got {input_shape}")
    rng = np.random.Generator(np.random.PCG64(seed))
    h, w = input_shape[2], input_shape[3]
    acc = np.zeros((h, w), dtype=np.float64)
    mask = None
    for _ in range(n_samples):
        x = Tensor(rng.standard_normal(input_shape).astype(dtype), requires_grad=True)
        with Tape() as tape:
            y = forward_fn(x)
            if y.data.size == 0:
                raise ShapeError("network produced a zero-size output")
            if mask is None:
                mask = np.zeros(y.shape, dtype=dtype)
                mask[0, 0, y.shape[2] // 2, y.shape[3] // 2] = 1.0
            loss = tensor_sum(mul(y, Tensor(mask)))
            tape.backward(loss)
        acc += np.abs(x.grad).sum(axis=(0, 1))
    return ERFMap(grid=acc / n_samples, center=(h // 2, w // 2), n_samples=n_samples, seed=seed)


def erf_radius(erf_map: ERFMap, mass_fraction: float = TWO_SIGMA_MASS) -> int:
    """Smallest Chebyshev radius around the center holding >= the given
    fraction of total grid mass."""
    grid = erf_map.grid
    total = grid.sum()
    if total <= 0:
        raise ValueError("all-zero ERF map has no radius")
    target = mass_fraction * total
    cr, cc = erf_map.center
    h, w = grid.shape
    for r in range(max(h, w)):
        window = grid[max(0, cr - r) : cr + r + 1, max(0, cc - r) : cc + r + 1]
        if window.sum() >= target:
            return r
    return max(h, w) - 1


def erf_report(spec: LabSpec, erf_map: ERFMap, mass_fraction: float = TWO_SIGMA_MASS) -> ERFReport:
    r = erf_radius(erf_map, mass_fraction)
    rf = spec.rf_extent()
    return ERFReport(rf_extent=rf, erf_radius=r, ratio=(2 * r + 1) / rf)


def measure_lab(spec: LabSpec, input_size: int, n_samples: int, seed: int):
    """Init a lab net from `seed`, measure its ERF, and report radius stats."""
    params = init_params(spec, seed, dtype=np.float64)
    erf_map = compute_erf(
        lambda x: spec.forward(params, x),
        (1, spec.in_channels, input_size, input_size),
        n_samples,
        seed,
    )
    return erf_map, erf_report(spec, erf_map)


def compare_erf(spec_a: LabSpec, spec_b: LabSpec, depth: int | None = None,
                n_samples: int = 32, seeds=(0, 1, 2), input_size: int = 64) -> CompareReport:
    """Per-seed ERF radii for two architectures on identical output geometry."""
    if depth is not None:
        from dataclasses import replace

        spec_a = replace(spec_a, depth=depth)
        spec_b = replace(spec_b, depth=depth)
    report = CompareReport()
    for label, spec in (("a", spec_a), ("b", spec_b)):
        if spec.rf_extent() > input_size:
            raise ConfigError(
                f"input size {input_size} smaller than the {label} RF {spec.rf_extent()}"
            )
        for seed in seeds:
            _, rep = measure_lab(spec, input_size, n_samples, seed)
            report.rows.append(
                CompareRow(label, seed, rep.rf_extent, rep.erf_radius, rep.ratio)
            )
    return report
