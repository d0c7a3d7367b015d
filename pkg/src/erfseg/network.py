"""Encoder attention blocks and the 3-stage U-Net backbone.

Both attention blocks share one 2x2 max-pool of the stage input, so the
main feature map F and the attention map A live on the same H/2 x W/2
grid. The combination rule is always Y = F*A + F with A = sigmoid(logits),
and the same F/A/Y buffers produced by the forward pass are returned for
inspection, so Y reconstructs from them bitwise.

FPA runs a parallel attention branch on the pooled input: an expansion
conv, a dilated conv applied twice with shared weights, and a projection.
RFNA runs its attention branch sequentially on F: one stride-2 conv per
factor of two in the downsampling ratio, bilinear upsampling back, a 1x1
projection, and a residual add of F before the sigmoid.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError, ShapeError
from .layers import (
    BlockSpec,
    ParamSpec,
    ParamStore,
    conv_block_forward,
    conv_block_param_specs,
)
from .ops import ConvSpec, bilinear_upsample, conv2d, instance_norm, maxpool2d
from .tensor import Tensor, add, concat, mul, relu, sigmoid

VARIANTS = ("unet", "wunet", "d6unet", "d9unet", "fpa", "rfna")


@dataclass(frozen=True)
class FPAConfig:
    dilation: int = 9
    depthwise: bool = False
    expansion: int = 1

    def __post_init__(self):
        if self.dilation < 2:
            raise ConfigError("FPA dilation must be >= 2; small rates have no effect")
        if self.expansion < 1:
            raise ConfigError("FPA expansion ratio must be >= 1")


@dataclass(frozen=True)
class RFNAConfig:
    ratio: int = 8
    depthwise: bool = True
    expansion: int = 4

    def __post_init__(self):
        if self.ratio not in (2, 4, 8):
            raise ConfigError("RFNA downsampling ratio must be one of 2, 4, 8")
        if self.expansion < 1:
            raise ConfigError("RFNA expansion ratio must be >= 1")


@dataclass(frozen=True)
class NetworkSpec:
    variant: str = "unet"
    base_channels: int = 32
    stages: int = 3
    in_channels: int = 4
    out_channels: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.base_channels < 1 or self.stages < 1:
            raise ConfigError("base_channels and stages must be >= 1")


def _norm_specs(prefix: str, channels: int):
    return [
        ParamSpec(f"{prefix}.gamma", (channels,), "gamma"),
        ParamSpec(f"{prefix}.beta", (channels,), "beta"),
    ]


def _conv_specs(prefix: str, cs: ConvSpec):
    return [
        ParamSpec(prefix + ".weight", cs.weight_shape(), "conv_weight",
                  cs.in_channels // cs.groups * cs.kernel[0] * cs.kernel[1]),
        ParamSpec(prefix + ".bias", (cs.out_channels,), "bias"),
    ]


def _conv_in_relu(x, params, prefix, cs, norm=True, act=True):
    out = conv2d(x, params[prefix + ".weight"], params[prefix + ".bias"], cs)
    if norm:
        out = instance_norm(out, params[prefix + ".gamma"], params[prefix + ".beta"])
    if act:
        out = relu(out)
    return out


class FPABlock:
    """Parallel-branch encoder block: enlarged attention field via dilation."""

    def __init__(self, in_channels: int, cfg: FPAConfig, prefix: str = "fpa"):
        c2 = 2 * in_channels
        ce = cfg.expansion * c2
        self.in_channels = in_channels
        self.out_channels = c2
        self.cfg = cfg
        self.prefix = prefix
        self.main = BlockSpec("encoder", in_channels, c2)
        self.expand = ConvSpec(in_channels, ce, (3, 3))
        self.shared = ConvSpec(
            ce, ce, (3, 3), dilation=cfg.dilation, groups=ce if cfg.depthwise else 1
        )
        self.proj = ConvSpec(ce, c2, (3, 3))

    def param_specs(self):
        p = self.prefix
        specs = conv_block_param_specs(self.main, f"{p}.main")
        specs += _conv_specs(f"{p}.attn.expand", self.expand)
        specs += _norm_specs(f"{p}.attn.expand", self.expand.out_channels)
        # the dilated layer is applied twice; conv and norm parameters are shared
        specs += _conv_specs(f"{p}.attn.shared", self.shared)
        specs += _norm_specs(f"{p}.attn.shared", self.shared.out_channels)
        specs += _conv_specs(f"{p}.attn.proj", self.proj)
        return specs

    def forward(self, params: ParamStore, x: Tensor):
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(f"FPA stage needs even spatial extents, got {x.shape[2:]}")
        p = self.prefix
        pooled = maxpool2d(x)
        f = conv_block_forward(pooled, self.main, params, f"{p}.main")
        z = _conv_in_relu(pooled, params, f"{p}.attn.expand", self.expand)
        for _ in range(2):
            z = _conv_in_relu(z, params, f"{p}.attn.shared", self.shared)
        logits = conv2d(z, params[f"{p}.attn.proj.weight"], params[f"{p}.attn.proj.bias"], self.proj)
        a = sigmoid(logits)
        y = add(mul(f, a), f)
        return y, f, a


class RFNABlock:
    """Sequential-branch encoder block: shrunken attention field via deep
    strided convs plus a residual connection."""

    def __init__(self, in_channels: int, cfg: RFNAConfig, prefix: str = "rfna"):
        c2 = 2 * in_channels
        ce = cfg.expansion * c2
        self.in_channels = in_channels
        self.out_channels = c2
        self.cfg = cfg
        self.prefix = prefix
        self.main = BlockSpec("encoder", in_channels, c2)
        self.n_down = cfg.ratio.bit_length() - 1  # log2 of the ratio
        self.downs = []
        for i in range(self.n_down):
            cin = c2 if i == 0 else ce
            groups = ce if (cfg.depthwise and i > 0) else 1
            self.downs.append(ConvSpec(cin, ce, (3, 3), stride=2, groups=groups))
        self.proj = ConvSpec(ce, c2, (1, 1), padding=(0, 0))

    def param_specs(self):
        p = self.prefix
        specs = conv_block_param_specs(self.main, f"{p}.main")
        for i, cs in enumerate(self.downs):
            specs += _conv_specs(f"{p}.attn.down{i}", cs)
            if i < self.n_down - 1:
                specs += _norm_specs(f"{p}.attn.down{i}", cs.out_channels)
        specs += _conv_specs(f"{p}.attn.proj", self.proj)
        return specs

    def forward(self, params: ParamStore, x: Tensor):
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(f"RFNA stage needs even spatial extents, got {x.shape[2:]}")
        p = self.prefix
        pooled = maxpool2d(x)
        f = conv_block_forward(pooled, self.main, params, f"{p}.main")
        r = self.cfg.ratio
        if f.shape[2] % r or f.shape[3] % r:
            raise ShapeError(
                f"RFNA ratio {r} does not divide the main-branch extent {f.shape[2]}x{f.shape[3]}"
            )
        z = f
        for i, cs in enumerate(self.downs):
            # the deepest map can be 1x1, where instance statistics degenerate,
            # so the last downsampling conv is followed by relu alone
            z = _conv_in_relu(z, params, f"{p}.attn.down{i}", cs, norm=i < self.n_down - 1)
        z = bilinear_upsample(z, r)
        z = conv2d(z, params[f"{p}.attn.proj.weight"], params[f"{p}.attn.proj.bias"], self.proj)
        a = sigmoid(add(z, f))
        y = add(mul(f, a), f)
        return y, f, a


def fpa_forward(x: Tensor, cfg: FPAConfig, params: ParamStore, prefix: str = "fpa"):
    """One FPA stage on X: returns (Y, F, A) with Y = F*A + F."""
    return FPABlock(x.shape[1], cfg, prefix).forward(params, x)


def rfna_forward(x: Tensor, cfg: RFNAConfig, params: ParamStore, prefix: str = "rfna"):
    """One RFNA stage on X: returns (Y, F, A) with Y = F*A + F."""
    return RFNABlock(x.shape[1], cfg, prefix).forward(params, x)


class UNet:
    """3-downsampling-stage U-Net with variant encoder stages, bilinear
    decoder upsampling and a 1x1 logit head."""

    def __init__(self, spec: NetworkSpec, fpa_cfg: FPAConfig | None = None,
                 rfna_cfg: RFNAConfig | None = None):
        if (spec.variant == "fpa") != (fpa_cfg is not None):
            raise ConfigError("fpa_cfg must be given exactly when variant == 'fpa'")
        if (spec.variant == "rfna") != (rfna_cfg is not None):
            raise ConfigError("rfna_cfg must be given exactly when variant == 'rfna'")
        self.spec = spec
        self.fpa_cfg = fpa_cfg
        self.rfna_cfg = rfna_cfg
        base = spec.base_channels * (2 if spec.variant == "wunet" else 1)
        self.base = base
        enc_dilation = {"d6unet": 6, "d9unet": 9}.get(spec.variant, 1)

        self.stem = BlockSpec("stem", spec.in_channels, base)
        self.encoders = []
        for i in range(1, spec.stages + 1):
            cin = base * 2 ** (i - 1)
            if spec.variant == "fpa":
                self.encoders.append(FPABlock(cin, fpa_cfg, prefix=f"enc{i}"))
            elif spec.variant == "rfna":
                self.encoders.append(RFNABlock(cin, rfna_cfg, prefix=f"enc{i}"))
            else:
                self.encoders.append(
                    BlockSpec("encoder", cin, 2 * cin, dilation=enc_dilation)
                )
        self.decoders = []  # dec0 is the deepest
        for j, level in enumerate(reversed(range(spec.stages))):
            deep = base * 2 ** (level + 1)
            skip = base * 2 ** level
            self.decoders.append(BlockSpec("decoder", deep + skip, skip))
        self.head = ConvSpec(base, spec.out_channels, (1, 1), padding=(0, 0))

    @property
    def is_attention(self) -> bool:
        return self.spec.variant in ("fpa", "rfna")

    def required_multiple(self) -> int:
        m = 2 ** self.spec.stages
        if self.spec.variant == "rfna":
            m *= self.rfna_cfg.ratio
        return m

    def param_specs(self):
        specs = conv_block_param_specs(self.stem, "stem")
        for i, enc in enumerate(self.encoders, 1):
            if isinstance(enc, BlockSpec):
                specs += conv_block_param_specs(enc, f"enc{i}")
            else:
                specs += enc.param_specs()
        for j, dec in enumerate(self.decoders):
            specs += conv_block_param_specs(dec, f"dec{j}")
        specs += _conv_specs("head.conv0", self.head)
        return specs

    def forward(self, params: ParamStore, x: Tensor, capture: bool = False):
        """Run the full network; with capture=True also return the per-stage
        (F, A, Y) triples of attention encoders."""
        b, c, h, w = x.shape
        if c != self.spec.in_channels:
            raise ShapeError(f"network expects {self.spec.in_channels} input channels, got {c}")
        m = self.required_multiple()
        if h % m or w % m:
            raise ShapeError(
                f"input extents {h}x{w} must be multiples of {m} for variant "
                f"{self.spec.variant!r}"
            )
        z = conv_block_forward(x, self.stem, params, "stem")
        skips = [z]
        triples = []
        for i, enc in enumerate(self.encoders, 1):
            if isinstance(enc, BlockSpec):
                z = conv_block_forward(maxpool2d(z), enc, params, f"enc{i}")
            else:
                z, f, a = enc.forward(params, z)
                triples.append((f, a, z))
            if i < len(self.encoders):
                skips.append(z)
        for j, dec in enumerate(self.decoders):
            z = bilinear_upsample(z, 2)
            z = concat([z, skips.pop()], axis=1)
            z = conv_block_forward(z, dec, params, f"dec{j}")
        logits = conv2d(z, params["head.conv0.weight"], params["head.conv0.bias"], self.head)
        if capture:
            return logits, triples
        return logits


def build_unet(spec: NetworkSpec, fpa_cfg: FPAConfig | None = None,
               rfna_cfg: RFNAConfig | None = None, seed: int = 0, dtype=None):
    """Construct the network and a freshly initialized parameter store."""
    import numpy as np

    from .layers import init_params

    net = UNet(spec, fpa_cfg=fpa_cfg, rfna_cfg=rfna_cfg)
    params = init_params(net, seed, dtype=dtype or np.float32)
    return net, params


def network_forward(network: UNet, params: ParamStore, x: Tensor) -> Tensor:
    """Logits with the same spatial extent as the input."""
    return network.forward(params, x)
