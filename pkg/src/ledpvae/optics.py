"""Forward physics of multiplexed LED-array microscopy.

Each LED is a mutually incoherent tilted plane wave.  For one LED the
object spectrum is shifted by the LED's (quantised) spatial frequency,
filtered by the binary objective pupil and inverse transformed; the camera
records ``|field|^2``.  A multiplexed exposure is the brightness-weighted sum
of the single-LED images.  Two-slice objects apply the tilt as an explicit
phase ramp on the first slice, propagate to the second slice with the
angular-spectrum transfer function, and image through the unshifted pupil.

Arrays are kept in FFT (unshifted) frequency order throughout.  Spatial
axes are (row, col) = (y, x).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError, NumericError

log = logging.getLogger(__name__)

POISSON_EPS = 1e-8


def lattice_leds(radius_sq: int = 9) -> tuple:
    """Integer LED lattice points with ``u^2 + v^2 <= radius_sq``, row-major in (v, u).

    ``radius_sq=9`` gives the 29-LED array used for the synthetic datasets.
    """
    r = int(math.isqrt(radius_sq))
    return tuple((u, v) for v in range(-r, r + 1) for u in range(-r, r + 1)
                 if u * u + v * v <= radius_sq)


@dataclass(frozen=True)
class OpticalConfig:
    wavelength_um: float = 0.525
    na: float = 0.75
    pixel_pitch_um: float = 0.25
    grid_n: int = 32
    led_z_mm: float = 115.0
    led_pitch_mm: float = 6.5
    led_indices: tuple = field(default_factory=lattice_leds)
    photon_budget: float = 1e4
    slice_gap_um: float = 10.0
    medium_index: float = 1.0
    # Not serialised; only the well-posedness checks in tests switch it off.
    check_bandwidth: bool = field(default=True, compare=False, repr=False)

    JSON_KEYS = ("wavelength_um", "na", "pixel_pitch_um", "grid_n", "led_z_mm",
                 "led_pitch_mm", "led_indices", "photon_budget", "slice_gap_um",
                 "medium_index")

    def __post_init__(self):
        object.__setattr__(self, "led_indices",
                           tuple((int(u), int(v)) for u, v in self.led_indices))
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    @property
    def n_leds(self) -> int:
        return len(self.led_indices)

    def problems(self) -> list:
        out = []
        for name in ("wavelength_um", "pixel_pitch_um", "led_z_mm", "led_pitch_mm",
                     "photon_budget", "medium_index"):
            if not getattr(self, name) > 0:
                out.append(f"{name} must be > 0 (got {getattr(self, name)!r})")
        if not 0 < self.na < self.medium_index:
            out.append(f"na must lie in (0, medium_index={self.medium_index}) (got {self.na!r})")
        if self.grid_n < 2 or self.grid_n % 2:
            out.append(f"grid_n must be even and >= 2 (got {self.grid_n!r})")
        if self.slice_gap_um < 0:
            out.append(f"slice_gap_um must be >= 0 (got {self.slice_gap_um!r})")
        if not self.led_indices:
            out.append("led_indices must not be empty")
        elif len(set(self.led_indices)) != len(self.led_indices):
            out.append("led_indices contains duplicates")
        if not out and self.check_bandwidth:
            sin_max = max(math.hypot(*led_sin_angles(led, self)) for led in self.led_indices)
            reach = (self.na + sin_max) / self.wavelength_um
            nyquist = 1.0 / (2 * self.pixel_pitch_um)
            if not reach < nyquist:
                out.append(
                    f"synthetic aperture {reach:.4f}/um exceeds grid Nyquist {nyquist:.4f}/um; "
                    "reduce pixel_pitch_um, na or the LED extent")
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("check_bandwidth")
        d["led_indices"] = [list(p) for p in self.led_indices]
        return d

    @classmethod
    def from_dict(cls, d: dict, check_bandwidth: bool = True) -> "OpticalConfig":
        unknown = sorted(set(d) - set(cls.JSON_KEYS))
        if unknown:
            raise ConfigError([f"unknown optics key {k!r}" for k in unknown])
        kw = dict(d)
        if "led_indices" in kw:
            kw["led_indices"] = tuple(tuple(p) for p in kw["led_indices"])
        try:
            return cls(**kw, check_bandwidth=check_bandwidth)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str, check_bandwidth: bool = True) -> "OpticalConfig":
        return cls.from_dict(json.loads(text), check_bandwidth=check_bandwidth)


@dataclass
class ObjectModel:
    """One or two complex transmittance slices, shape (slices, n, n)."""

    slices: np.ndarray

    def __post_init__(self):
        self.slices = np.asarray(self.slices, dtype=np.complex128)
        if self.slices.ndim == 2:
            self.slices = self.slices[None]
        if self.slices.ndim != 3 or self.slices.shape[0] not in (1, 2):
            raise DataError(f"ObjectModel needs 1 or 2 slices, got shape {self.slices.shape}")

    @property
    def n_slices(self) -> int:
        return self.slices.shape[0]


# ---------------------------------------------------------------------------
# geometry


def led_sin_angles(led, cfg: OpticalConfig) -> tuple:
    u, v = led
    x = u * cfg.led_pitch_mm
    y = v * cfg.led_pitch_mm
    r = math.sqrt(x * x + y * y + cfg.led_z_mm ** 2)
    return x / r, y / r


def led_wavevector(led, cfg: OpticalConfig) -> tuple:
    """(sin theta_x, sin theta_y) of the plane wave from LED ``(u, v)``."""
    if tuple(led) not in cfg.led_indices:
        raise ConfigError(f"LED {tuple(led)} is not part of the configured array")
    return led_sin_angles(led, cfg)


def led_shift_pixels(led, cfg: OpticalConfig) -> tuple:
    """Integer frequency-bin shift (dm along x, dn along y) of the LED's plane wave."""
    sx, sy = led_wavevector(led, cfg)
    scale = cfg.grid_n * cfg.pixel_pitch_um / cfg.wavelength_um
    fx, fy = sx * scale, sy * scale
    dm, dn = int(round(fx)), int(round(fy))
    log.debug("LED %s shift (%d, %d), quantisation error (%.3f, %.3f) bins",
              tuple(led), dm, dn, fx - dm, fy - dn)
    return dm, dn


def shift_quantization_error(cfg: OpticalConfig) -> float:
    """Largest |exact - rounded| LED shift over the array, in frequency bins."""
    scale = cfg.grid_n * cfg.pixel_pitch_um / cfg.wavelength_um
    worst = 0.0
    for led in cfg.led_indices:
        for s in led_sin_angles(led, cfg):
            worst = max(worst, abs(s * scale - round(s * scale)))
    return worst


def frequency_grid(cfg: OpticalConfig) -> tuple:
    """(fy, fx) spatial-frequency arrays in cycles/um, FFT order."""
    f = np.fft.fftfreq(cfg.grid_n, d=cfg.pixel_pitch_um)
    return np.meshgrid(f, f, indexing="ij")


def pupil_mask_for(na: float, wavelength_um: float, pixel_pitch_um: float, grid_n: int) -> np.ndarray:
    f = np.fft.fftfreq(grid_n, d=pixel_pitch_um)
    fy, fx = np.meshgrid(f, f, indexing="ij")
    return (fx ** 2 + fy ** 2 <= (na / wavelength_um) ** 2).astype(np.float64)


def pupil_mask(cfg: OpticalConfig) -> np.ndarray:
    """Binary coherent pupil: 1 where |f| <= NA / wavelength."""
    return pupil_mask_for(cfg.na, cfg.wavelength_um, cfg.pixel_pitch_um, cfg.grid_n)


def propagation_kernel(distance_um: float, cfg: OpticalConfig) -> np.ndarray:
    """Angular-spectrum transfer function; evanescent components are zeroed.

    Zero distance is the exact identity (evanescent terms included).
    """
    if distance_um == 0:
        return np.ones((cfg.grid_n, cfg.grid_n), dtype=np.complex128)
    fy, fx = frequency_grid(cfg)
    k2 = (cfg.medium_index / cfg.wavelength_um) ** 2 - fx ** 2 - fy ** 2
    prop = k2 >= 0
    kz = np.sqrt(np.where(prop, k2, 0.0))
    return np.where(prop, np.exp(2j * np.pi * distance_um * kz), 0.0)


def angular_spectrum_propagate(fld, distance_um: float, cfg: OpticalConfig):
    """Propagate a field by ``distance_um``; accepts arrays or Tensors (last two axes)."""
    if distance_um < 0:
        raise ConfigError("propagation distance must be >= 0")
    h = propagation_kernel(distance_um, cfg)
    if isinstance(fld, ad.Tensor):
        return ad.ifft2(ad.fft2(fld) * h)
    return np.fft.ifft2(np.fft.fft2(fld, norm="ortho") * h, norm="ortho")


# ---------------------------------------------------------------------------
# image formation


class ForwardModel:
    """Precomputed operator for one configuration, differentiable through autodiff.

    Object tensors have shape (batch, slices, n, n); patterns (batch, shots, leds).
    """

    def __init__(self, cfg: OpticalConfig, dtype=np.complex128):
        self.cfg = cfg
        self.cdtype = np.dtype(dtype)
        rdtype = np.float32 if self.cdtype == np.complex64 else np.float64
        n = cfg.grid_n
        self.pupil = pupil_mask(cfg).astype(rdtype)
        self.shifts = [led_shift_pixels(led, cfg) for led in cfg.led_indices]
        self.rolls = [(dn, dm) for dm, dn in self.shifts]
        rows, cols = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        self.ramps = np.stack([np.exp(2j * np.pi * (dm * cols + dn * rows) / n)
                               for dm, dn in self.shifts]).astype(self.cdtype)
        self.transfer = propagation_kernel(cfg.slice_gap_um, cfg).astype(self.cdtype)

    def led_intensities(self, slices, leds=None) -> ad.Tensor:
        """Per-LED coherent images, shape (batch, n_leds, n, n)."""
        t = slices if isinstance(slices, ad.Tensor) else ad.tensor(np.asarray(slices))
        b, s, n, _ = t.shape
        idx = range(len(self.shifts)) if leds is None else list(leds)
        if s == 1:
            spec = ad.fft2(ad.reshape(t, (b, n, n)))
            shifted = ad.roll_stack(spec, [self.rolls[i] for i in idx])
            fld = ad.ifft2(shifted * self.pupil)
        elif s == 2:
            first = ad.reshape(t[:, 0], (b, 1, n, n))
            second = ad.reshape(t[:, 1], (b, 1, n, n))
            ramps = self.ramps if leds is None else self.ramps[list(idx)]
            u = ad.ifft2(ad.fft2(first * ramps) * self.transfer)
            fld = ad.ifft2(ad.fft2(u * second) * self.pupil)
        else:
            raise DataError(f"objects must have 1 or 2 slices, got {s}")
        return ad.abs2(fld)

    def expected(self, slices, patterns) -> ad.Tensor:
        """Multiplexed intensities, shape (batch, shots, n, n)."""
        inten = self.led_intensities(slices)
        b, l, n, _ = inten.shape
        w = patterns.data if isinstance(patterns, ad.Tensor) else np.asarray(patterns)
        if w.shape[-1] != l:
            raise DataError(f"pattern length {w.shape[-1]} != LED count {l}")
        if np.any(w < 0):
            raise DataError("illumination weights must be non-negative")
        w = w.astype(inten.dtype, copy=False)
        out = ad.matmul(w, ad.reshape(inten, (b, l, n * n)))
        return ad.reshape(out, (b, w.shape[-2], n, n))


@lru_cache(maxsize=16)
def forward_model(cfg: OpticalConfig, dtype=np.complex128) -> ForwardModel:
    return ForwardModel(cfg, dtype)


def _batched(obj) -> np.ndarray:
    slices = obj.slices if isinstance(obj, ObjectModel) else np.asarray(obj)
    return slices[None] if slices.ndim == 3 else slices


def coherent_intensity(obj, led, cfg: OpticalConfig) -> np.ndarray:
    """Single-LED image of ``obj`` (ObjectModel or (slices, n, n) array)."""
    j = cfg.led_indices.index(tuple(led)) if tuple(led) in cfg.led_indices else None
    if j is None:
        raise ConfigError(f"LED {tuple(led)} is not part of the configured array")
    return forward_model(cfg).led_intensities(_batched(obj), leds=[j]).data[0, 0]


def forward_multiplexed(obj, pattern, cfg: OpticalConfig) -> np.ndarray:
    """Expected intensity under one illumination pattern (sum of weighted LED images)."""
    w = np.asarray(pattern, dtype=np.float64)
    if w.shape != (cfg.n_leds,):
        raise DataError(f"pattern must have {cfg.n_leds} weights, got shape {w.shape}")
    return forward_model(cfg).expected(_batched(obj), w[None, None]).data[0, 0]


# ---------------------------------------------------------------------------
# noise model


def poisson_sample(intensity, cfg: OpticalConfig, rng: np.random.Generator) -> np.ndarray:
    """Photon counts ~ Poisson(photon_budget * intensity).

    numpy's sampler uses inversion for small means and Hormann's PTRS
    transformed rejection for large ones; it is exact and seed-reproducible.
    """
    lam = cfg.photon_budget * np.asarray(intensity, dtype=np.float64)
    if not np.all(np.isfinite(lam)):
        raise NumericError("non-finite expected intensity passed to poisson_sample")
    if np.any(lam < 0):
        raise DataError("expected intensity must be non-negative")
    return rng.poisson(lam)


def poisson_nll(counts, expected, eps: float = POISSON_EPS) -> ad.Tensor:
    """sum(expected - counts * log(max(expected, eps))), constants in counts dropped."""
    lam = expected if isinstance(expected, ad.Tensor) else ad.tensor(expected)
    y = np.asarray(counts, dtype=lam.dtype)
    return ad.sum_(lam - y * ad.log(ad.clampmin(lam, eps)))
