"""Dice loss, AdamW, and the training/evaluation loops."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DivergenceError, ShapeError
from .layers import ParamStore
from .metrics import MetricsReport, binarize
from .tensor import Tape, Tensor, accumulate_grad, record_op, sigmoid

# dataset-specific schedules (epochs, batch, lr) preserved as presets
PRESETS = {
    "cityscapes": (100, 8, 2e-4),
    "brats": (50, 50, 1e-4),
    "isles": (60, 80, 1e-3),
}

DICE_EPS = 1e-5


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 8
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    augment_hflip_prob: float = 0.5

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigError("learning rate must be >= 0")
        b1, b2 = self.betas
        if not (0 <= b1 < 1 and 0 <= b2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        epochs, batch, lr = PRESETS[name]
        base = dict(epochs=epochs, batch_size=batch, learning_rate=lr)
        base.update(overrides)
        return cls(**base)


def dice_loss(prob: Tensor, target: Tensor) -> Tensor:
    """Squared-denominator Dice loss, per sample over pixels, batch-averaged:
    1 - (2*sum(p*g) + eps) / (sum(p^2) + sum(g^2) + eps)."""
    if prob.shape != target.shape:
        raise ShapeError(f"dice_loss shapes differ: {prob.shape} vs {target.shape}")
    p = prob.data
    g = target.data
    if p.min() < 0 or p.max() > 1:
        raise ValueError("dice_loss expects probabilities in [0, 1]")
    if not np.all((g == 0) | (g == 1)):
        raise ValueError("dice_loss target must be binary")
    b = p.shape[0]
    pf = p.reshape(b, -1)
    gf = g.reshape(b, -1)
    num = 2.0 * np.einsum("bn,bn->b", pf, gf) + DICE_EPS
    den = np.einsum("bn,bn->b", pf, pf) + np.einsum("bn,bn->b", gf, gf) + DICE_EPS
    loss_val = np.asarray((1.0 - num / den).mean(), dtype=p.dtype)
    out = Tensor(loss_val)

    def bwd(grad):
        # d/dp_i of -(num/den) for sample b: -(2 g den - num 2 p) / den^2
        coef = grad / b
        dp = (num / (den * den))[:, None] * (2.0 * pf) - (2.0 / den)[:, None] * gf
        dp *= coef
        accumulate_grad(prob, dp.reshape(p.shape).astype(p.dtype, copy=False), fresh=True)

    return record_op("dice_loss", (prob, target), out, bwd)


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adamw_step(params: ParamStore, grads: dict, state: OptimizerState, cfg: TrainConfig):
    """One decoupled-weight-decay Adam update, in place."""
    b1, b2 = cfg.betas
    state.t += 1
    t = state.t
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    lr, lam, eps = cfg.learning_rate, cfg.weight_decay, cfg.eps
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= lr * (mhat / (np.sqrt(vhat) + eps) + lam * p.data)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_iou: float | None
    val_hd95: float | None
    val_fn: float | None


@dataclass
class TrainResult:
    best_params: ParamStore
    final_params: ParamStore
    curves: list  # of EpochStats
    best_val_iou: float
    state: OptimizerState
    start_epoch: int = 0


def _batches(cases, order, batch_size):
    for i in range(0, len(order), batch_size):
        yield [cases[j] for j in order[i : i + batch_size]]


def _forward_prob(network, params, images: np.ndarray):
    logits = network.forward(params, Tensor(images))
    return sigmoid(logits)


def evaluate(network, params: ParamStore, cases, batch_size: int = 8,
             threshold: float = 0.5) -> MetricsReport:
    """Per-case metrics over (case_id, image, mask) samples."""
    report = MetricsReport(param_count=params.count())
    dtype = next(iter(params.tensors())).data.dtype
    for i in range(0, len(cases), batch_size):
        chunk = cases[i : i + batch_size]
        images = np.stack([c.image for c in chunk]).astype(dtype)
        prob = _forward_prob(network, params, images).data
        for j, c in enumerate(chunk):
            pred = binarize(prob[j, 0], threshold)
            report.add_case(c.case_id, pred, c.mask[0] > 0.5)
    return report


def train(network, dataset, cfg: TrainConfig, params: ParamStore | None = None,
          state: OptimizerState | None = None, start_epoch: int = 0,
          log=None) -> TrainResult:
    """Seeded epoch loop: shuffle, augment, forward, dice, backward, AdamW;
    tracks the best-val-IoU parameter snapshot."""
    from .layers import init_params
    from .synth import augment_hflip

    if params is None:
        params = init_params(network, cfg.seed)
    if state is None:
        state = OptimizerState()
    train_cases = dataset.cases("train")
    val_cases = dataset.cases("val")
    if not train_cases:
        raise ConfigError("dataset has no train split")
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    dtype = next(iter(params.tensors())).data.dtype
    curves = []
    best_iou = -1.0
    best_params = params.copy()
    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        order = rng.permutation(len(train_cases))
        losses = []
        for batch in _batches(train_cases, order, cfg.batch_size):
            images, masks = [], []
            for c in batch:
                img, msk = augment_hflip(c.image, c.mask, cfg.augment_hflip_prob, rng)
                images.append(img)
                masks.append(msk)
            xb = np.stack(images).astype(dtype)
            yb = np.stack(masks).astype(dtype)
            params.zero_grads()
            with Tape() as tape:
                prob = _forward_prob(network, params, xb)
                loss = dice_loss(prob, Tensor(yb))
                lval = loss.item()
                if not np.isfinite(lval):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}")
                tape.backward(loss)
            grads = {
                name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for name, p in params.items()
            }
            adamw_step(params, grads, state, cfg)
            losses.append(lval)
        val_iou = val_hd = val_fn = None
        if val_cases:
            rep = evaluate(network, params, val_cases, cfg.batch_size)
            agg = rep.aggregate()
            val_iou, val_hd, val_fn = agg["iou"][0], agg["hd95"][0], agg["fn_rate"][0]
            if val_iou is not None and val_iou > best_iou:
                best_iou = val_iou
                best_params = params.copy()
        stats = EpochStats(epoch, float(np.mean(losses)), val_iou, val_hd, val_fn)
        curves.append(stats)
        if log:
            log(stats)
    if best_iou < 0:  # no validation split: final weights are the best we know
        best_params = params.copy()
    return TrainResult(
        best_params=best_params,
        final_params=params,
        curves=curves,
        best_val_iou=best_iou,
        state=state,
        start_epoch=start_epoch,
    )
