"""Seeded synthetic multi-modal tumor phantoms.

Each subject is one rotated ellipse (the tumor) with a concentric scaled
ellipse inside it (a necrotic core). Every modality paints background, tumor
and core at its own intensity levels and adds i.i.d. gaussian noise.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from fusenet.data import HALF, SubjectVolume


class PhantomError(ValueError):
    pass


@dataclass(frozen=True)
class Contrast:
    background: float
    tumor: float
    core: float
    sigma: float


# T2 separates best, CT least; PET has a hot rim around a cold necrotic core
DEFAULT_CONTRAST = {
    "CT": Contrast(0.0, 0.6, 0.6, 3.0),
    "PET": Contrast(0.0, 1.2, 0.0, 3.0),
    "T1": Contrast(0.0, 0.7, 0.7, 3.0),
    "T2": Contrast(0.0, 1.0, 1.0, 3.0),
}

CORRUPTIONS = ("none", "invert", "noise_only")


@dataclass(frozen=True)
class PhantomConfig:
    height: int = 96
    width: int = 96
    cohort_size: int = 20
    semi_axes: tuple = (8.0, 20.0)
    core_fraction: float = 0.5
    contrast: Mapping[str, Contrast] = field(default_factory=lambda: dict(DEFAULT_CONTRAST))
    corruption: Mapping[str, str] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.semi_axes
        if not 0 < lo <= hi:
            raise PhantomError(f"semi-axis range must satisfy 0 < min <= max, got {self.semi_axes}")
        # the tumor must fit with a patch half-size margin whatever its rotation
        if 2 * (hi + HALF) >= min(self.height, self.width):
            raise PhantomError(f"semi-axis max {hi} leaves less than {HALF} px margin in a "
                               f"{self.height}x{self.width} image")
        if not 0 <= self.core_fraction < 1:
            raise PhantomError(f"core_fraction must lie in [0, 1), got {self.core_fraction}")
        if self.cohort_size < 1:
            raise PhantomError("cohort_size must be >= 1")
        if not self.contrast:
            raise PhantomError("at least one modality contrast is required")
        for name, c in self.contrast.items():
            if c.sigma < 0:
                raise PhantomError(f"noise sigma for {name} must be >= 0")
        for name, mode in self.corruption.items():
            if name not in self.contrast:
                raise PhantomError(f"corruption names unknown modality {name!r}")
            if mode not in CORRUPTIONS:
                raise PhantomError(f"corruption for {name} must be one of {CORRUPTIONS}, got {mode!r}")

    @property
    def modalities(self):
        return tuple(sorted(self.contrast))


@dataclass(frozen=True)
class Ellipse:
    row: float
    col: float
    a: float
    b: float
    angle: float

    def inside(self, rows, cols, scale=1.0):
        """Boolean interior predicate at pixel centers, with axes scaled by ``scale``."""
        if scale == 0:
            return np.zeros(np.broadcast(rows, cols).shape, dtype=bool)
        dr = np.asarray(rows, dtype=np.float64) - self.row
        dc = np.asarray(cols, dtype=np.float64) - self.col
        ca, sa = np.cos(self.angle), np.sin(self.angle)
        u = dc * ca + dr * sa
        v = -dc * sa + dr * ca
        return (u / (self.a * scale)) ** 2 + (v / (self.b * scale)) ** 2 <= 1.0


def subject_seed(cfg: PhantomConfig, index: int) -> int:
    return cfg.seed ^ index


def _stream(seed: int, *tags) -> np.random.Generator:
    words = [seed & 0xFFFFFFFFFFFFFFFF] + [zlib.crc32(str(t).encode()) for t in tags]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


def draw_ellipse(cfg: PhantomConfig, index: int) -> Ellipse:
    rng = _stream(subject_seed(cfg, index), "geometry")
    lo, hi = cfg.semi_axes
    a, b = rng.uniform(lo, hi, size=2)
    angle = rng.uniform(0.0, np.pi)
    margin = max(a, b) + HALF
    row = rng.uniform(margin, cfg.height - 1 - margin)
    col = rng.uniform(margin, cfg.width - 1 - margin)
    return Ellipse(float(row), float(col), float(a), float(b), float(angle))


def generate_subject(cfg: PhantomConfig, index: int, subject_id: Optional[str] = None) -> SubjectVolume:
    ell = draw_ellipse(cfg, index)
    rows, cols = np.mgrid[0:cfg.height, 0:cfg.width]
    tumor = ell.inside(rows, cols)
    if not tumor.any():
        # semi-axes >= 0.5 px always cover the center pixel; keep the mask nonempty regardless
        tumor[int(round(ell.row)), int(round(ell.col))] = True
    core = ell.inside(rows, cols, cfg.core_fraction) & tumor
    images = {}
    for name in cfg.modalities:
        c = cfg.contrast[name]
        mode = cfg.corruption.get(name, "none")
        bg, tu, co = c.background, c.tumor, c.core
        if mode == "invert":
            bg, tu = tu, bg
        img = np.full((cfg.height, cfg.width), bg, dtype=np.float64)
        img[tumor] = tu
        img[core] = co
        if mode == "noise_only":
            img[...] = 0.0
        noise = _stream(subject_seed(cfg, index), "noise", name).standard_normal(img.shape)
        images[name] = img + c.sigma * noise
    return SubjectVolume(subject_id or f"phantom{index:03d}", images, tumor.astype(np.uint8))


def generate_cohort(cfg: PhantomConfig) -> list[SubjectVolume]:
    return [generate_subject(cfg, i) for i in range(cfg.cohort_size)]
