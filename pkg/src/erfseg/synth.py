"""Synthetic class-imbalanced segmentation task.

Each sample is a multi-channel image of soft-edged elliptical blobs with
low-contrast rims over a noisy, mildly tilted background. Masks come from
the exact ellipse-membership inequality at pixel centers, while the
intensity profile bleeds slightly past the mask boundary, so rim pixels
are genuinely ambiguous. Foreground stays within a small budget to
reproduce heavy class imbalance.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError

MIN_SEMI_AXIS = 1.0


@dataclass(frozen=True)
class SyntheticTaskConfig:
    size: int = 64
    channels: int = 4
    n_train: int = 140
    n_val: int = 20
    n_test: int = 40
    fg_budget: float = 0.05  # max foreground fraction per mask
    blobs_min: int = 1
    blobs_max: int = 3
    contrast: float = 0.9
    noise_sigma: float = 0.25
    rim_width: float = 0.45  # relative width of the ambiguous rim

    def __post_init__(self):
        if not 0 < self.fg_budget <= 0.10:
            raise ConfigError("fg_budget must be in (0, 0.10]")
        if self.blobs_min < 1 or self.blobs_max < self.blobs_min:
            raise ConfigError("blob count range invalid")
        if self.size < 16:
            raise ConfigError("size must be >= 16")
        # a single minimal blob covers ~pi px; it must fit the budget
        if self.fg_budget * self.size * self.size < 4:
            raise ConfigError(
                f"fg_budget {self.fg_budget} infeasible at size {self.size}: "
                "not even a minimal blob fits"
            )


@dataclass
class Sample:
    case_id: str
    image: np.ndarray  # (C, H, W) float32
    mask: np.ndarray  # (1, H, W) float32 in {0, 1}
    split: str


@dataclass
class Dataset:
    samples: list = field(default_factory=list)

    def cases(self, split: str):
        return [s for s in self.samples if s.split == split]

    def splits(self):
        return {s.split for s in self.samples}


@dataclass(frozen=True)
class Ellipse:
    cy: float
    cx: float
    a: float  # semi-axis along the rotated x direction
    b: float
    theta: float

    def field_sq(self, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
        """Squared normalized radius; <= 1 inside."""
        dy = yy - self.cy
        dx = xx - self.cx
        c, s = np.cos(self.theta), np.sin(self.theta)
        u = (dx * c + dy * s) / self.a
        v = (-dx * s + dy * c) / self.b
        return u * u + v * v


def ellipse_mask(ellipses, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    m = np.zeros((size, size), dtype=bool)
    for e in ellipses:
        m |= e.field_sq(yy, xx) <= 1.0
    return m


def _draw_ellipses(rng: np.random.Generator, cfg: SyntheticTaskConfig):
    n = int(rng.integers(cfg.blobs_min, cfg.blobs_max + 1))
    margin = 6.0
    ellipses = []
    for _ in range(n):
        cy = rng.uniform(margin, cfg.size - margin)
        cx = rng.uniform(margin, cfg.size - margin)
        a = rng.uniform(2.0, 6.0)
        b = rng.uniform(2.0, 6.0)
        theta = rng.uniform(0.0, np.pi)
        ellipses.append(Ellipse(cy, cx, a, b, theta))
    return ellipses


def _shrink(ellipses, factor: float):
    return [
        Ellipse(e.cy, e.cx, max(MIN_SEMI_AXIS, e.a * factor), max(MIN_SEMI_AXIS, e.b * factor), e.theta)
        for e in ellipses
    ]


def _budgeted_ellipses(rng, cfg):
    budget_px = cfg.fg_budget * cfg.size * cfg.size
    ellipses = _draw_ellipses(rng, cfg)
    mask = ellipse_mask(ellipses, cfg.size)
    guard = 0
    while mask.sum() > budget_px:
        scale = float(np.sqrt(budget_px / mask.sum())) * 0.97
        shrunk = _shrink(ellipses, scale)
        if shrunk == ellipses:  # all axes pinned at the minimum: drop a blob
            ellipses = ellipses[:-1]
            if not ellipses:
                raise ConfigError("fg_budget infeasible: cannot fit a single minimal blob")
        else:
            ellipses = shrunk
        mask = ellipse_mask(ellipses, cfg.size)
        guard += 1
        if guard > 64:
            raise ConfigError("fg_budget infeasible: shrink loop did not converge")
    return ellipses, mask


def _render_image(rng, cfg, ellipses) -> np.ndarray:
    size = cfg.size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    w = cfg.rim_width
    # intensity fades to the background level at the mask boundary (rho = 1),
    # so the outer rim of every labeled blob looks like background and faint
    # blobs can vanish entirely: the under-segmentation pressure of real RoIs
    profile = np.zeros((size, size))
    for e in ellipses:
        amp = rng.uniform(0.15, 1.0)  # the faint end sits at the noise floor
        rho = np.sqrt(e.field_sq(yy, xx))
        p = amp * np.clip((1.0 - rho) / w, 0.0, 1.0)
        profile = np.maximum(profile, p)
    chans = []
    for _ in range(cfg.channels):
        gain = rng.uniform(0.5, 1.0)
        tilt_y, tilt_x = rng.uniform(-0.3, 0.3, size=2)
        bg = tilt_y * (yy / size - 0.5) + tilt_x * (xx / size - 0.5)
        noise = rng.normal(0.0, cfg.noise_sigma, size=(size, size))
        chans.append(bg + noise + cfg.contrast * gain * profile)
    return np.stack(chans).astype(np.float32)


def gen_synthetic(cfg: SyntheticTaskConfig, seed: int) -> Dataset:
    """Deterministic dataset of (image, mask) pairs split train/val/test."""
    rng = np.random.Generator(np.random.PCG64(seed))
    ds = Dataset()
    plan = [("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test)]
    idx = 0
    for split, count in plan:
        for _ in range(count):
            ellipses, mask = _budgeted_ellipses(rng, cfg)
            image = _render_image(rng, cfg, ellipses)
            ds.samples.append(
                Sample(
                    case_id=f"case_{idx:04d}",
                    image=image,
                    mask=mask[None].astype(np.float32),
                    split=split,
                )
            )
            idx += 1
    return ds


def augment_hflip(image: np.ndarray, mask: np.ndarray, p: float, rng: np.random.Generator):
    """Mirror image and mask about the vertical axis together, with probability p."""
    if not 0 <= p <= 1:
        raise ConfigError(f"flip probability {p} outside [0, 1]")
    if p > 0 and rng.random() < p:
        return np.ascontiguousarray(image[..., ::-1]), np.ascontiguousarray(mask[..., ::-1])
    return image, mask


def save_dataset(ds: Dataset, outdir) -> Path:
    """Write TSR1 pairs plus index.csv; returns the index path."""
    from .fileio import write_tsr

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    index = outdir / "index.csv"
    with open(index, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id", "image_path", "mask_path", "split"])
        for s in ds.samples:
            img = f"{s.case_id}_img.tsr"
            msk = f"{s.case_id}_msk.tsr"
            write_tsr(outdir / img, s.image)
            write_tsr(outdir / msk, s.mask)
            w.writerow([s.case_id, img, msk, s.split])
    return index


def load_dataset(path) -> Dataset:
    """Read a dataset directory produced by save_dataset (or any TSR1 pairs
    listed in an index.csv)."""
    from .fileio import read_tsr

    root = Path(path)
    index = root / "index.csv" if root.is_dir() else root
    root = index.parent
    ds = Dataset()
    with open(index, newline="") as fh:
        for row in csv.DictReader(fh):
            ds.samples.append(
                Sample(
                    case_id=row["case_id"],
                    image=read_tsr(root / row["image_path"]),
                    mask=read_tsr(root / row["mask_path"]),
                    split=row["split"],
                )
            )
    return ds
