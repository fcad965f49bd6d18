"""Illumination pattern samplers (brightness weight per LED)."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DataError
from .seeding import PATTERN, SHARED, object_rng, stream_rng

MODES = ("dirichlet", "deterministic", "sequential", "circle-mask")
MAX_CIRCLE_ATTEMPTS = 10_000


@dataclass(frozen=True)
class PatternPlan:
    mode: str = "dirichlet"
    alpha: float = 0.1
    n: int = 1
    seed: int = 0
    circle_radius_mm: float = 2.5

    def __post_init__(self):
        problems = []
        if self.mode not in MODES:
            problems.append(f"pattern mode must be one of {MODES}, got {self.mode!r}")
        if not self.alpha > 0:
            problems.append("alpha must be > 0")
        if self.n < 1:
            problems.append("n must be >= 1")
        if not self.circle_radius_mm > 0:
            problems.append("circle_radius_mm must be > 0")
        if problems:
            raise ConfigError(problems)

    def to_dict(self) -> dict:
        return asdict(self)


def sample_gamma(alpha: float, size: int, rng: np.random.Generator) -> np.ndarray:
    """Gamma(alpha, 1) draws; shapes below 1 use Gamma(alpha+1) * U**(1/alpha)."""
    if alpha >= 1:
        return rng.standard_gamma(alpha, size=size)
    g = rng.standard_gamma(alpha + 1.0, size=size)
    u = rng.random(size=size)
    return g * u ** (1.0 / alpha)


def sample_dirichlet(l: int, alpha: float, rng: np.random.Generator) -> np.ndarray:
    if l < 1:
        raise ConfigError("need at least one LED")
    while True:
        g = sample_gamma(alpha, l, rng)
        total = g.sum()
        if total > 0:
            return g / total


def led_positions_mm(led_indices, pitch_mm: float) -> np.ndarray:
    return np.asarray(led_indices, dtype=np.float64) * pitch_mm


def concentric_layout(ring_counts=(1, 8, 12, 16, 24, 24), pitch_mm: float = 6.5) -> np.ndarray:
    """LED positions (mm) on concentric rings of radius ``k * pitch_mm``.

    The default ring counts give 85 LEDs.
    """
    pts = []
    for k, count in enumerate(ring_counts):
        if k == 0:
            pts.extend([(0.0, 0.0)] * count)
            continue
        for j in range(count):
            t = 2 * math.pi * j / count
            pts.append((k * pitch_mm * math.cos(t), k * pitch_mm * math.sin(t)))
    return np.asarray(pts)


def sample_circle_mask(layout_mm: np.ndarray, radius_mm: float, rng: np.random.Generator) -> np.ndarray:
    """Light half (rounded down) of the LEDs inside a randomly placed circle.

    The circle centre is uniform over the layout's bounding box; draws that
    select no LED are repeated.
    """
    if not radius_mm > 0:
        raise ConfigError("circle radius must be > 0")
    layout_mm = np.asarray(layout_mm, dtype=np.float64)
    lo, hi = layout_mm.min(axis=0), layout_mm.max(axis=0)
    for _ in range(MAX_CIRCLE_ATTEMPTS):
        centre = rng.uniform(lo, hi)
        inside = np.flatnonzero(np.hypot(*(layout_mm - centre).T) <= radius_mm)
        k = len(inside) // 2
        if k == 0:
            continue
        chosen = rng.choice(inside, size=k, replace=False)
        w = np.zeros(len(layout_mm))
        w[chosen] = 1.0 / k
        return w
    raise DataError(
        f"circle mask of radius {radius_mm} mm never covered two LEDs in "
        f"{MAX_CIRCLE_ATTEMPTS} attempts")


def plan_patterns(plan: PatternPlan, m: int, l: int, layout_mm=None) -> np.ndarray:
    """Patterns for ``m`` objects, shape (m, plan.n, l)."""
    out = np.zeros((m, plan.n, l))
    if plan.mode == "dirichlet":
        for i in range(m):
            rng = object_rng(plan.seed, i, PATTERN)
            out[i] = [sample_dirichlet(l, plan.alpha, rng) for _ in range(plan.n)]
    elif plan.mode == "deterministic":
        rng = stream_rng(plan.seed, SHARED)
        out[:] = [sample_dirichlet(l, plan.alpha, rng) for _ in range(plan.n)]
    elif plan.mode == "sequential":
        if plan.n > l:
            raise ConfigError(f"sequential mode needs n <= {l} LEDs, got n={plan.n}")
        out[:, np.arange(plan.n), np.arange(plan.n)] = 1.0
    else:
        if layout_mm is None:
            raise ConfigError("circle-mask mode needs the LED layout")
        for i in range(m):
            rng = object_rng(plan.seed, i, PATTERN)
            out[i] = [sample_circle_mask(layout_mm, plan.circle_radius_mm, rng)
                      for _ in range(plan.n)]
    return out


def effective_support(w: np.ndarray) -> int:
    """Number of LEDs carrying more than half of the uniform share 1/l."""
    w = np.asarray(w)
    return int(np.sum(w > 1.0 / (2 * w.shape[-1])))
