"""Gradient-based maximum-likelihood reconstruction, one object at a time.

Each slice is parameterised as ``exp(a + i*phi)`` with ``a`` (log-amplitude)
and ``phi`` (phase) real arrays initialised to zero, and Adam minimises the
Poisson negative log-likelihood of the recorded counts plus a small L2
penalty on ``a``.  Independent objects can be solved in one batched call:
the loss is a sum of per-object terms and Adam acts elementwise, so every
object follows exactly the trajectory it would follow alone.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .errors import DataError, NumericError
from .optics import ObjectModel, OpticalConfig, forward_model, poisson_nll
from .optim import Adam

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ReconParams:
    lr: float = 1e-2
    iterations: int = 2000
    l2_logamp: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer"] = "adam"
        return d


def reconstruct_batch(counts, patterns, cfg: OpticalConfig, params: ReconParams = ReconParams(),
                      n_slices: int = 1, progress=None):
    """Reconstruct a batch of objects.

    counts: (b, n, N, N); patterns: (b, n, l).  Returns the complex
    estimates, shape (b, n_slices, N, N), and the per-iteration loss trace,
    shape (iterations, b).
    """
    counts = np.asarray(counts, dtype=np.float64)
    patterns = np.asarray(patterns, dtype=np.float64)
    if counts.ndim != 4 or patterns.ndim != 3 or counts.shape[:2] != patterns.shape[:2]:
        raise DataError(f"inconsistent stack shapes {counts.shape} / {patterns.shape}")
    b, _, n, _ = counts.shape
    if n != cfg.grid_n:
        raise DataError(f"counts are {n}x{n} but config grid_n is {cfg.grid_n}")
    fm = forward_model(cfg)
    shape = (b, n_slices, n, n)
    a = ad.parameter(np.zeros(shape))
    phi = ad.parameter(np.zeros(shape))
    opt = Adam({"a": a, "phi": phi}, lr=params.lr, betas=(params.beta1, params.beta2),
               eps=params.eps)
    trace = np.empty((params.iterations, b))
    eps = 1e-8

    for it in range(params.iterations):
        obj = ad.exp(ad.make_complex(a, phi))
        lam = fm.expected(obj, patterns) * cfg.photon_budget
        per_obj = ad.sum_(lam - counts * ad.log(ad.clampmin(lam, eps)), axis=(1, 2, 3))
        if params.l2_logamp:
            per_obj = per_obj + params.l2_logamp * ad.sum_(a * a, axis=(1, 2, 3))
        total = ad.sum_(per_obj)
        if not np.isfinite(total.data):
            raise NumericError(f"non-finite reconstruction loss at iteration {it}")
        trace[it] = per_obj.data
        opt.zero_grad()
        total.backward()
        opt.step()
        if progress is not None:
            progress(it, float(total.data))

    est = np.exp(a.data + 1j * phi.data)
    return est, trace


def reconstruct(stack, cfg: OpticalConfig, params: ReconParams = ReconParams(), n_slices: int = 1):
    """Single-object reconstruction from a MeasurementStack; returns (ObjectModel, loss trace)."""
    est, trace = reconstruct_batch(np.asarray(stack.counts)[None], np.asarray(stack.patterns)[None],
                                   cfg, params, n_slices)
    return ObjectModel(est[0]), trace[:, 0]


def total_loss(counts, patterns, est, cfg: OpticalConfig, l2_logamp: float) -> float:
    """Objective value at a given complex estimate (used to audit the solver)."""
    fm = forward_model(cfg)
    lam = fm.expected(np.asarray(est)[None], np.asarray(patterns)[None]).data[0] * cfg.photon_budget
    a = np.log(np.abs(est))
    return float(poisson_nll(counts, lam).data) + l2_logamp * float(np.sum(a * a))
