"""Run configuration: one JSON document for a whole pipeline run.

Layout (every section optional, every key defaulted)::

    {"seed": 0, "out": "run", "jobs": null,
     "optics":   {OpticalConfig fields},
     "phantom":  {"kind": "foam" | "digits", "m": 10,
                  "foam": {disk_count_range, radius_range, attenuation_range, phase_range},
                  "digits": {glyph_dir, phase_scale}},
     "patterns": {"mode", "alpha", "n", "circle_radius_mm"},
     "recon":    {ReconParams fields except seed, "n_slices"},
     "pvae":     {"arch": {PvaeArch fields}, "train": {TrainHyper fields except seed},
                  "samples": 8},
     "eval":     {"method": "..."}}

The top-level seed drives every stochastic stage; grid size comes from the
optics section.  Unknown keys anywhere are rejected, and all problems are
reported together.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError
from .illumination import PatternPlan
from .iterative import ReconParams
from .optics import OpticalConfig
from .phantoms import FoamSpec, GlyphSpec
from .pvae import PvaeArch, TrainHyper

TOP_KEYS = ("seed", "out", "jobs", "optics", "phantom", "patterns", "recon", "pvae", "eval")


def _names(cls, drop=()):
    return [f.name for f in fields(cls) if f.name not in drop]


FOAM_KEYS = _names(FoamSpec, ("grid_n", "seed"))
GLYPH_KEYS = _names(GlyphSpec, ("grid_n", "seed"))
PATTERN_KEYS = _names(PatternPlan, ("seed",))
RECON_KEYS = _names(ReconParams, ("seed",)) + ["n_slices"]
ARCH_KEYS = _names(PvaeArch)
TRAIN_KEYS = _names(TrainHyper, ("seed",))


@dataclass(frozen=True)
class RunConfig:
    seed: int
    out: str
    jobs: int
    optics: OpticalConfig
    phantom_kind: str
    m: int
    foam: FoamSpec
    digits: GlyphSpec
    patterns: PatternPlan
    recon: ReconParams
    n_slices: int
    arch: PvaeArch
    train: TrainHyper
    samples: int
    eval_method: str

    def to_dict(self) -> dict:
        """Fully expanded JSON form; feeding it back reproduces this config."""
        foam = {k: v for k, v in self.foam.to_dict().items() if k in FOAM_KEYS}
        digits = {k: v for k, v in self.digits.to_dict().items() if k in GLYPH_KEYS}
        recon = {k: v for k, v in asdict(self.recon).items() if k in RECON_KEYS}
        recon["n_slices"] = self.n_slices
        train = {k: v for k, v in asdict(self.train).items() if k in TRAIN_KEYS}
        return {
            "seed": self.seed, "out": self.out, "jobs": self.jobs,
            "optics": self.optics.to_dict(),
            "phantom": {"kind": self.phantom_kind, "m": self.m, "foam": foam, "digits": digits},
            "patterns": {k: v for k, v in asdict(self.patterns).items() if k in PATTERN_KEYS},
            "recon": recon,
            "pvae": {"arch": self.arch.to_dict(), "train": train, "samples": self.samples},
            "eval": {"method": self.eval_method},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def write_snapshot(self, directory) -> Path:
        p = Path(directory) / "config.resolved.json"
        p.write_text(self.to_json(), encoding="utf-8")
        return p


def _section(raw: dict, name: str, allowed, problems: list, parent: str = "") -> dict:
    sec = raw.get(name, {})
    where = f"{parent}.{name}" if parent else name
    if sec is None:
        return {}
    if not isinstance(sec, dict):
        problems.append(f"{where}: expected an object")
        return {}
    for k in sorted(set(sec) - set(allowed)):
        problems.append(f"unknown key {where}.{k}")
    return {k: v for k, v in sec.items() if k in allowed}


def _build(cls, kw, where, problems):
    try:
        return cls(**kw)
    except ConfigError as exc:
        problems.extend(f"{where}: {p}" for p in exc.problems)
    except (TypeError, ValueError) as exc:
        problems.append(f"{where}: {exc}")
    return None


def resolve(raw: dict, overrides: dict | None = None) -> RunConfig:
    """Validate ``raw`` plus CLI overrides into a RunConfig (raises ConfigError)."""
    raw = json.loads(json.dumps(raw or {}))
    problems = []
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    for k in sorted(set(raw) - set(TOP_KEYS)):
        problems.append(f"unknown key {k}")
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    if "seed" in overrides:
        raw["seed"] = overrides["seed"]
    if "out" in overrides:
        raw["out"] = overrides["out"]
    if "jobs" in overrides:
        raw["jobs"] = overrides["jobs"]
    if "m" in overrides:
        raw.setdefault("phantom", {})["m"] = overrides["m"]
    if "n" in overrides:
        raw.setdefault("patterns", {})["n"] = overrides["n"]
    if "pattern_mode" in overrides:
        raw.setdefault("patterns", {})["mode"] = overrides["pattern_mode"]

    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        problems.append(f"seed must be a non-negative integer (got {seed!r})")
        seed = 0
    jobs = raw.get("jobs") or os.cpu_count() or 1
    if not isinstance(jobs, int) or jobs < 1:
        problems.append(f"jobs must be a positive integer (got {jobs!r})")
        jobs = 1
    out = str(raw.get("out", "run"))

    optics = None
    opt_raw = raw.get("optics", {}) or {}
    for k in sorted(set(opt_raw) - set(OpticalConfig.JSON_KEYS)):
        problems.append(f"unknown key optics.{k}")
    optics = _build(OpticalConfig.from_dict, {"d": {k: v for k, v in opt_raw.items()
                                                   if k in OpticalConfig.JSON_KEYS}},
                    "optics", problems)
    grid_n = optics.grid_n if optics else 32

    ph = _section(raw, "phantom", ("kind", "m", "foam", "digits"), problems)
    kind = ph.get("kind", "foam")
    if kind not in ("foam", "digits"):
        problems.append(f"phantom.kind must be 'foam' or 'digits' (got {kind!r})")
    m = ph.get("m", 10)
    if not isinstance(m, int) or m < 1:
        problems.append(f"phantom.m must be a positive integer (got {m!r})")
    foam_kw = _section(ph, "foam", FOAM_KEYS, problems, "phantom")
    glyph_kw = _section(ph, "digits", GLYPH_KEYS, problems, "phantom")
    foam = _build(FoamSpec, {**foam_kw, "grid_n": grid_n, "seed": seed}, "phantom.foam", problems)
    digits = _build(GlyphSpec, {**glyph_kw, "grid_n": grid_n, "seed": seed}, "phantom.digits", problems)

    pat_kw = _section(raw, "patterns", PATTERN_KEYS, problems)
    patterns = _build(PatternPlan, {**pat_kw, "seed": seed}, "patterns", problems)

    rec_kw = _section(raw, "recon", RECON_KEYS, problems)
    n_slices = rec_kw.pop("n_slices", 2 if kind == "digits" else 1)
    if n_slices not in (1, 2):
        problems.append(f"recon.n_slices must be 1 or 2 (got {n_slices!r})")
    recon = _build(ReconParams, {**rec_kw, "seed": seed}, "recon", problems)

    pv = _section(raw, "pvae", ("arch", "train", "samples"), problems)
    arch_kw = _section(pv, "arch", ARCH_KEYS, problems, "pvae")
    arch_kw.setdefault("slices", 2 if kind == "digits" else 1)
    arch = _build(PvaeArch, arch_kw, "pvae.arch", problems)
    if arch is not None:
        problems.extend(f"pvae.arch: {p}" for p in arch.problems(grid_n))
    train_kw = _section(pv, "train", TRAIN_KEYS, problems, "pvae")
    train = _build(TrainHyper, {**train_kw, "seed": seed}, "pvae.train", problems)
    if train is not None:
        if train.steps < 0 or train.batch < 1 or not train.lr > 0:
            problems.append("pvae.train: need steps >= 0, batch >= 1, lr > 0")
        if not train.grad_clip >= 0:
            problems.append(f"pvae.train.grad_clip must be >= 0 (got {train.grad_clip!r})")
        if train.dtype not in ("float32", "float64"):
            problems.append("pvae.train.dtype must be float32 or float64")
    samples = pv.get("samples", 8)
    if not isinstance(samples, int) or samples < 1:
        problems.append(f"pvae.samples must be a positive integer (got {samples!r})")

    ev = _section(raw, "eval", ("method",), problems)
    method = str(ev.get("method", ""))

    if problems:
        raise ConfigError(problems)
    return RunConfig(seed, out, jobs, optics, kind, m, foam, digits, patterns, recon, n_slices,
                     arch, train, samples, method)


def load(path, overrides: dict | None = None) -> RunConfig:
    if path is None:
        return resolve({}, overrides)
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return resolve(raw, overrides)


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    return resolve(replace(cfg, seed=seed).to_dict())
