"""End-to-end stages shared by the command line and the experiment drivers.

Every stage is a pure function of its inputs and the run seed.  Object-level
parallel work is split into fixed-size chunks, so results do not depend on
how many workers run them.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .container import read_container, write_container
from .dataset import Dataset, counts_to_u32, dataset_arrays, read_dataset
from .errors import DataError
from .evaluate import evaluate_objects
from .illumination import led_positions_mm, plan_patterns
from .iterative import reconstruct_batch
from .optics import forward_model
from .phantoms import gen_foam, gen_two_plane_digits
from .pvae import load_checkpoint, sample_posterior, save_checkpoint, train
from .runconfig import RunConfig
from .seeding import NOISE, SAMPLE, object_rng, stream_rng

log = logging.getLogger(__name__)

CHUNK = 16


# -- objects and measurements ----------------------------------------------


def make_objects(rc: RunConfig):
    """Ground-truth objects (m, slices, N, N) complex128, plus header metadata."""
    if rc.phantom_kind == "foam":
        truth = np.stack([o.slices for o in gen_foam(rc.foam, rc.m)])
        return truth, {"phantom": {"kind": "foam", **rc.foam.to_dict()}}, None
    objs, labels = gen_two_plane_digits(rc.digits, rc.m)
    truth = np.stack([o.slices for o in objs])
    return truth, {"phantom": {"kind": "digits", **rc.digits.to_dict()}}, np.asarray(labels, dtype=np.int64)


def write_objects(path, rc: RunConfig, truth, meta, labels=None) -> None:
    arrays = {"truth": np.asarray(truth, dtype=np.complex64)}
    if labels is not None:
        arrays["digit_labels"] = labels
    write_container(path, {"kind": "objects", "config": rc.optics.to_dict(), **meta}, arrays)


def read_objects(path) -> np.ndarray:
    """Truth array from an objects or dataset container."""
    c = read_container(path)
    if "truth" not in c:
        raise DataError(f"{path}: no ground truth stored")
    return c.load("truth").astype(np.complex128)


def simulate(rc: RunConfig, truth=None, meta=None) -> Dataset:
    """Patterns, expected intensities and Poisson counts for every object."""
    if truth is None:
        truth, meta, _ = make_objects(rc)
    truth = np.asarray(truth, dtype=np.complex128)
    m = truth.shape[0]
    cfg = rc.optics
    layout = led_positions_mm(cfg.led_indices, cfg.led_pitch_mm)
    patterns = plan_patterns(rc.patterns, m, cfg.n_leds, layout)
    fm = forward_model(cfg)
    counts = np.empty((m, rc.patterns.n, cfg.grid_n, cfg.grid_n), dtype=np.uint32)
    for s in range(0, m, CHUNK):
        lam = fm.expected(truth[s:s + CHUNK], patterns[s:s + CHUNK]).data * cfg.photon_budget
        for j, i in enumerate(range(s, min(s + CHUNK, m))):
            counts[i] = counts_to_u32(object_rng(rc.seed, i, NOISE).poisson(lam[j]))
    header = {**(meta or {}), "pattern_plan": rc.patterns.to_dict(), "seed": rc.seed}
    return Dataset(cfg, counts, patterns, np.arange(m, dtype=np.int64), truth.astype(np.complex64), header)


# -- iterative baseline -----------------------------------------------------


def _recon_chunk(args):
    counts, patterns, cfg, params, n_slices = args
    est, trace = reconstruct_batch(counts, patterns, cfg, params, n_slices)
    return est, trace


def recon_iterative(ds: Dataset, params, n_slices: int, jobs: int = 1, progress=None):
    """Estimates (m, n_slices, N, N) and final per-object losses."""
    counts = np.asarray(ds.counts, dtype=np.float64)
    patterns = np.asarray(ds.patterns, dtype=np.float64)
    tasks = [(counts[s:s + CHUNK], patterns[s:s + CHUNK], ds.config, params, n_slices)
             for s in range(0, ds.m, CHUNK)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_recon_chunk, tasks))
    else:
        results = []
        for t in tasks:
            est, trace = reconstruct_batch(*t, progress=progress)
            results.append((est, trace))
    est = np.concatenate([r[0] for r in results])
    final = np.concatenate([r[1][-1] for r in results])
    return est, final


# -- P-VAE -----------------------------------------------------------------------


def pvae_train(rc: RunConfig, ds: Dataset, out_dir=None, resume=None, progress=None):
    """Train on every object of ``ds``; checkpoints land in ``out_dir``."""
    state = None
    if resume is not None:
        state, _, _, _ = load_checkpoint(resume)
    hook = None
    if out_dir is not None:
        ckdir = Path(out_dir) / "checkpoints"

        def hook(st):
            ckdir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(ckdir / f"step_{st.step:07d}.pvae", st, rc.train)

    state = train(np.asarray(ds.counts), np.asarray(ds.patterns), rc.arch, ds.config, rc.train,
                  state=state, progress=progress, checkpoint=hook)
    if out_dir is not None:
        save_checkpoint(Path(out_dir) / "checkpoint.pvae", state, rc.train)
    return state


def pvae_estimates(model, ds: Dataset, samples: int, seed: int) -> dict:
    return sample_posterior(model, np.asarray(ds.counts), np.asarray(ds.patterns), samples,
                            rng=stream_rng(seed, SAMPLE))


def evaluate_dataset(est, truth, method: str, ds: Dataset, pattern_mode: str):
    return evaluate_objects(est, truth, method, ds.m, ds.n, pattern_mode, np.asarray(ds.object_ids))


def with_recon(ds: Dataset, est, meta: dict) -> Dataset:
    recon = {int(i): np.asarray(e, dtype=np.complex64) for i, e in zip(ds.object_ids, est)}
    return Dataset(ds.config, np.asarray(ds.counts), np.asarray(ds.patterns), np.asarray(ds.object_ids),
                   None if ds.truth is None else np.asarray(ds.truth), {**ds.meta, **meta}, recon)


def write_with_extra(path, ds: Dataset, extra: dict) -> None:
    header = {"kind": "dataset", "format_version": 1, "config": ds.config.to_dict(), **ds.meta}
    write_container(path, header, {**dataset_arrays(ds), **extra})


def load_dataset(path) -> Dataset:
    return read_dataset(path, lazy=False)
