"""PSNR after global-phase alignment, CSV tables and grayscale PNG panels."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DegenerateTruthError, ShapeError

PSNR_CAP = 99.0
# channel ranges below this fraction of the channel magnitude are storage roundoff
# (e.g. |exp(i*phi)| of a phase-only object held in complex64)
DEGENERATE_RTOL = 1e-5
CHANNELS = ("complex", "amp", "phase")
CSV_HEADER = ["method", "m", "n", "pattern_mode", "object_id", "psnr_complex", "psnr_amp", "psnr_phase"]
PEAK_NOTE = "# psnr peak = max - min of the ground truth over the scored channel (real+imag stacked for complex)"


def align_global_phase(est, truth) -> np.ndarray:
    """Rotate each slice of ``est`` by the closed-form optimal global phase.

    Arrays are (slices, N, N) or (N, N).  The aligned estimate is
    ``est * exp(i*theta)`` with ``theta = arg(sum(truth * conj(est)))``,
    which minimises ``||truth - est * exp(i*theta)||``; zero overlap leaves
    ``est`` unchanged.
    """
    est = np.asarray(est, dtype=np.complex128)
    truth = np.asarray(truth, dtype=np.complex128)
    if est.shape != truth.shape:
        raise ShapeError(f"estimate {est.shape} and truth {truth.shape} differ in shape")
    flat_e = est.reshape(-1, *est.shape[-2:])
    flat_t = truth.reshape(-1, *truth.shape[-2:])
    overlap = np.sum(flat_t * np.conj(flat_e), axis=(1, 2))
    theta = np.where(overlap == 0, 0.0, np.angle(overlap))
    return (flat_e * np.exp(1j * theta)[:, None, None]).reshape(est.shape)


def _channel(x: np.ndarray, channel: str) -> np.ndarray:
    if channel == "complex":
        return np.stack([x.real, x.imag])
    if channel == "amp":
        return np.abs(x)
    if channel == "phase":
        return np.angle(x)
    raise ValueError(f"unknown PSNR channel {channel!r}")


def psnr(est, truth, channel: str = "complex") -> float:
    """10*log10(peak^2 / MSE) with peak = max - min of the truth channel.

    Inputs should already be phase-aligned.  Returns ``inf`` when the MSE is
    zero; raises DegenerateTruthError when the truth channel is constant up
    to roundoff (range <= DEGENERATE_RTOL * max |channel|).
    """
    est = np.asarray(est, dtype=np.complex128)
    truth = np.asarray(truth, dtype=np.complex128)
    if est.shape != truth.shape:
        raise ShapeError(f"estimate {est.shape} and truth {truth.shape} differ in shape")
    t = _channel(truth, channel)
    e = _channel(est, channel)
    peak = float(t.max() - t.min())
    if peak <= DEGENERATE_RTOL * float(np.max(np.abs(t))):
        raise DegenerateTruthError(f"truth has zero dynamic range in the {channel} channel")
    mse = float(np.mean((e - t) ** 2))
    if mse == 0:
        return math.inf
    return 10 * math.log10(peak * peak / mse)


def aligned_psnr(est, truth) -> dict:
    """All three channels after alignment; degenerate channels become NaN."""
    aligned = align_global_phase(est, truth)
    out = {}
    for ch in CHANNELS:
        try:
            out[ch] = psnr(aligned, truth, ch)
        except DegenerateTruthError:
            out[ch] = math.nan
    return out


@dataclass
class PsnrRow:
    method: str
    m: int
    n: int
    pattern_mode: str
    object_id: int
    psnr_complex: float
    psnr_amp: float
    psnr_phase: float


def evaluate_objects(estimates, truths, method: str, m: int, n: int, pattern_mode: str,
                     object_ids=None) -> list:
    ids = range(len(truths)) if object_ids is None else object_ids
    rows = []
    for oid, est, truth in zip(ids, estimates, truths):
        p = aligned_psnr(est, truth)
        rows.append(PsnrRow(method, m, n, pattern_mode, int(oid), p["complex"], p["amp"], p["phase"]))
    return rows


def mean_psnr(rows, channel: str = "complex") -> float:
    vals = [min(getattr(r, f"psnr_{channel}"), PSNR_CAP) for r in rows]
    return float(np.mean(vals))


def _fmt(v: float) -> str:
    if math.isnan(v):
        return "nan"
    return f"{min(v, PSNR_CAP):.6f}"


def report_csv(rows, path) -> None:
    """Write PSNR rows (UTF-8, LF) with a leading comment naming the peak definition."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(PEAK_NOTE + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in rows:
            w.writerow([r.method, r.m, r.n, r.pattern_mode, r.object_id,
                        _fmt(r.psnr_complex), _fmt(r.psnr_amp), _fmt(r.psnr_phase)])


def read_csv(path) -> list:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def to_uint8(arr, normalize: str = "minmax", value_range=None) -> np.ndarray:
    """Quantize a real 2-D array to 8 bits; a constant image maps to all zeros."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D image, got shape {a.shape}")
    if normalize == "minmax":
        lo, hi = float(a.min()), float(a.max())
    elif normalize == "fixed-range":
        if value_range is None:
            raise ValueError("fixed-range normalisation needs value_range")
        lo, hi = map(float, value_range)
    else:
        raise ValueError(f"unknown normalisation {normalize!r}")
    if hi <= lo:
        return np.zeros(a.shape, dtype=np.uint8)
    scaled = np.clip((a - lo) / (hi - lo), 0.0, 1.0)
    return np.round(scaled * 255).astype(np.uint8)


def render_png(arr, path, normalize: str = "minmax", value_range=None) -> np.ndarray:
    """Save an 8-bit grayscale PNG and return the quantized pixels written."""
    img = to_uint8(arr, normalize, value_range)
    Image.fromarray(img, mode="L").save(path, format="PNG", optimize=False)
    return img


def render_object_panels(obj, directory, stem: str) -> list:
    """Amplitude and phase PNGs for every slice of a (slices, N, N) object."""
    directory = Path(directory)
    out = []
    for s, sl in enumerate(np.asarray(obj)):
        for tag, img in (("amp", np.abs(sl)), ("phase", np.angle(sl))):
            p = directory / f"{stem}_s{s}_{tag}.png"
            render_png(img, p)
            out.append(p)
    return out
