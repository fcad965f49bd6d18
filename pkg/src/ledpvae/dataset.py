"""Datasets of measurement stacks stored in the binary container.

A dataset container holds, for ``m`` objects with ``n`` shots each:

* ``counts``      u32  (m, n, N, N)   photon counts
* ``patterns``    f64  (m, n, l)      LED weights per shot
* ``object_ids``  i64  (m,)
* ``truth``       c64  (m, S, N, N)   ground truth, synthetic data only
* ``recon/<id>``  c64  (S, N, N)      estimates added by a solver

The header records the optical configuration and the generating recipe.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import read_container, write_container
from .errors import ConfigError, DataError
from .optics import ObjectModel, OpticalConfig

U32_MAX = np.iinfo(np.uint32).max


@dataclass
class MeasurementStack:
    object_id: int
    patterns: np.ndarray
    counts: np.ndarray
    truth: ObjectModel | None = None

    def __post_init__(self):
        if self.counts.ndim != 3 or self.patterns.ndim != 2 or len(self.counts) != len(self.patterns):
            raise DataError(f"stack {self.object_id}: counts {self.counts.shape} and patterns "
                            f"{self.patterns.shape} do not describe the same shots")
        if len(self.counts) < 1:
            raise DataError(f"stack {self.object_id}: no shots")

    @property
    def n(self) -> int:
        return len(self.counts)


@dataclass
class Dataset:
    config: OpticalConfig
    counts: np.ndarray
    patterns: np.ndarray
    object_ids: np.ndarray
    truth: np.ndarray | None = None
    meta: dict = field(default_factory=dict)
    recon: dict = field(default_factory=dict)

    def __post_init__(self):
        m, n = self.counts.shape[:2]
        n_grid = self.config.grid_n
        problems = []
        if self.counts.shape[2:] != (n_grid, n_grid):
            problems.append(f"counts frames are {self.counts.shape[2:]}, config grid is {n_grid}")
        if self.patterns.shape != (m, n, self.config.n_leds):
            problems.append(f"patterns shape {self.patterns.shape} != {(m, n, self.config.n_leds)}")
        if len(self.object_ids) != m:
            problems.append(f"{len(self.object_ids)} object ids for {m} objects")
        if self.truth is not None and (self.truth.shape[0] != m or self.truth.shape[2:] != (n_grid, n_grid)):
            problems.append(f"truth shape {self.truth.shape} inconsistent with {m} objects of {n_grid}x{n_grid}")
        if problems:
            raise DataError("; ".join(problems))

    @property
    def m(self) -> int:
        return self.counts.shape[0]

    @property
    def n(self) -> int:
        return self.counts.shape[1]

    def stack(self, i: int) -> MeasurementStack:
        truth = None if self.truth is None else ObjectModel(np.asarray(self.truth[i], dtype=np.complex128))
        return MeasurementStack(int(self.object_ids[i]), np.asarray(self.patterns[i], dtype=np.float64),
                                np.asarray(self.counts[i]), truth)

    def stacks(self):
        for i in range(self.m):
            yield self.stack(i)


def counts_to_u32(counts) -> np.ndarray:
    c = np.asarray(counts)
    if c.size and (c.min() < 0 or c.max() > U32_MAX):
        raise DataError("counts outside the u32 range")
    return c.astype(np.uint32)


def dataset_arrays(ds: Dataset) -> dict:
    arrays = {
        "counts": counts_to_u32(ds.counts),
        "patterns": np.asarray(ds.patterns, dtype=np.float64),
        "object_ids": np.asarray(ds.object_ids, dtype=np.int64),
    }
    if ds.truth is not None:
        arrays["truth"] = np.asarray(ds.truth, dtype=np.complex64)
    for oid, est in ds.recon.items():
        arrays[f"recon/{int(oid)}"] = np.asarray(est, dtype=np.complex64)
    return arrays


def write_dataset(path, ds: Dataset) -> None:
    header = {"kind": "dataset", "format_version": 1, "config": ds.config.to_dict(), **ds.meta}
    write_container(path, header, dataset_arrays(ds))


def read_dataset(path, lazy: bool = True) -> Dataset:
    c = read_container(path)
    if c.header.get("kind") != "dataset":
        raise DataError(f"{path}: container is not a dataset (kind={c.header.get('kind')!r})")
    for key in ("counts", "patterns", "object_ids"):
        if key not in c:
            raise DataError(f"{path}: dataset lacks array {key!r}")
    try:
        cfg = OpticalConfig.from_dict(c.header["config"])
    except ConfigError as exc:
        raise DataError(f"{path}: invalid stored config: {exc}") from None
    get = c.array if lazy else c.load
    meta = {k: v for k, v in c.header.items() if k not in ("kind", "format_version", "config")}
    recon = {int(k.split("/", 1)[1]): get(k) for k in c.names() if k.startswith("recon/")}
    return Dataset(cfg, get("counts"), get("patterns"), get("object_ids"),
                   get("truth") if "truth" in c else None, meta, recon)


# ---------------------------------------------------------------------------
# raw camera frames


def _read_frame(path: Path, height: int, width: int) -> np.ndarray:
    if not path.is_file():
        raise DataError(f"missing frame file {path}")
    raw = path.read_bytes()
    if len(raw) != 2 * height * width:
        raise DataError(f"{path}: {len(raw)} bytes, expected {2 * height * width} for a "
                        f"{height}x{width} u16 frame")
    return np.frombuffer(raw, dtype="<u2").reshape(height, width)


def import_raw_frames(manifest_path, out_path=None) -> Dataset:
    """Build a dataset from raw little-endian u16 frames listed in a JSON manifest.

    Manifest keys: ``config`` (optical config), ``frame_shape`` ([height,
    width], may be overridden per shot), and ``objects``: a list of
    ``{id, shots: [{weights, frame, crop: [x, y, w, h], dark}]}``.  Frame
    paths are relative to the manifest.  Counts are
    ``round(max(frame - dark, 0))`` over the crop.
    """
    manifest_path = Path(manifest_path)
    try:
        man = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {manifest_path}: {exc}") from None
    unknown = set(man) - {"config", "frame_shape", "objects"}
    if unknown:
        raise ConfigError([f"unknown manifest key {k!r}" for k in sorted(unknown)])
    cfg = OpticalConfig.from_dict(man.get("config", {}))
    objects = man.get("objects") or []
    if not objects:
        raise DataError("manifest lists no objects")
    base = manifest_path.parent
    counts, patterns, ids = [], [], []
    for obj in objects:
        shots = obj.get("shots") or []
        if not shots:
            raise DataError(f"object {obj.get('id')} has no shots")
        c_obj, p_obj = [], []
        for shot in shots:
            h, w = shot.get("frame_shape", man.get("frame_shape", [None, None]))
            if h is None:
                raise DataError("frame_shape missing from manifest")
            frame = _read_frame(base / shot["frame"], int(h), int(w))
            x, y, cw, ch = shot.get("crop", [0, 0, int(w), int(h)])
            if x < 0 or y < 0 or x + cw > w or y + ch > h:
                raise DataError(f"crop {[x, y, cw, ch]} outside {h}x{w} frame {shot['frame']}")
            if (ch, cw) != (cfg.grid_n, cfg.grid_n):
                raise DataError(f"crop is {ch}x{cw} but config grid_n is {cfg.grid_n}")
            crop = frame[y:y + ch, x:x + cw].astype(np.float64)
            c_obj.append(np.rint(np.maximum(crop - float(shot.get("dark", 0.0)), 0.0)))
            weights = np.asarray(shot["weights"], dtype=np.float64)
            if weights.shape != (cfg.n_leds,):
                raise DataError(f"shot weights have length {weights.size}, config has {cfg.n_leds} LEDs")
            p_obj.append(weights)
        counts.append(c_obj)
        patterns.append(p_obj)
        ids.append(int(obj["id"]))
    if len({len(c) for c in counts}) != 1:
        raise DataError("every object must have the same number of shots")
    ds = Dataset(cfg, counts_to_u32(np.asarray(counts)), np.asarray(patterns),
                 np.asarray(ids, dtype=np.int64), None, {"source": "raw-import"})
    if out_path is not None:
        write_dataset(out_path, ds)
    return ds
