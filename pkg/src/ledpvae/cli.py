"""Command-line entry point: ``ledpvae <subcommand> [--config FILE] [overrides]``.

Every subcommand writes its outputs and a ``config.resolved.json`` snapshot
under ``--out``.  Progress goes to standard error as ``step=<k> loss=<v>``.
Failures print one line ``error=<Class> <message>`` and exit with 2 (config),
3 (data) or 4 (numeric).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from . import runconfig
from .dataset import import_raw_frames, write_dataset
from .errors import ConfigError, DataError, PvaeError
from .evaluate import render_object_panels, report_csv
from .pvae import load_checkpoint


def _progress(every: int):
    def report(k, loss):
        if k % every == 0:
            print(f"step={k} loss={loss:.10g}", file=sys.stderr, flush=True)
    return report


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config JSON (defaults apply to missing keys)")
    p.add_argument("--seed", type=int)
    p.add_argument("--m", type=int, help="number of objects")
    p.add_argument("--n", type=int, help="shots per object")
    p.add_argument("--pattern-mode", choices=["dirichlet", "deterministic", "sequential", "circle-mask"])
    p.add_argument("--out", help="output directory")
    p.add_argument("--jobs", type=int, help="parallel object-level workers")
    p.add_argument("--log-every", type=int, default=100, help="progress line interval")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ledpvae", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    for name, text in (("phantom-foam", "generate foam objects"),
                       ("phantom-digits", "generate two-plane digit objects")):
        _common(sub.add_parser(name, help=text))

    p = sub.add_parser("simulate", help="simulate multiplexed Poisson measurements")
    _common(p)
    p.add_argument("--objects", help="objects container (default: generate from the config)")

    p = sub.add_parser("recon-iter", help="standard iterative reconstruction")
    _common(p)
    p.add_argument("--data", required=True, help="dataset container")

    p = sub.add_parser("pvae-train", help="train the P-VAE on a dataset")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("pvae-sample", help="posterior samples and point estimates")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--samples", type=int, help="posterior samples per object")

    p = sub.add_parser("eval", help="PSNR table for a reconstruction container")
    _common(p)
    p.add_argument("--recon", required=True, help="container holding recon/<id> arrays")
    p.add_argument("--truth", help="objects or dataset container with ground truth")
    p.add_argument("--method", help="method tag for the CSV")
    p.add_argument("--png", action="store_true", help="also render amplitude/phase panels")

    p = sub.add_parser("import-raw", help="import raw u16 camera frames via a manifest")
    _common(p)
    p.add_argument("--manifest", required=True)
    return ap


def _overrides(args) -> dict:
    return {"seed": args.seed, "m": args.m, "n": args.n, "pattern_mode": args.pattern_mode,
            "out": args.out, "jobs": args.jobs}


def _pattern_mode(ds) -> str:
    return str(ds.meta.get("pattern_plan", {}).get("mode", ds.meta.get("source", "unknown")))


def run(args) -> Path:
    rc = runconfig.load(args.config, _overrides(args))
    out = Path(rc.out)
    out.mkdir(parents=True, exist_ok=True)
    rc.write_snapshot(out)
    progress = _progress(max(1, args.log_every))
    cmd = args.command

    if cmd in ("phantom-foam", "phantom-digits"):
        kind = "foam" if cmd == "phantom-foam" else "digits"
        if rc.phantom_kind != kind:
            rc = runconfig.resolve({**rc.to_dict(), "phantom": {**rc.to_dict()["phantom"], "kind": kind}})
            rc.write_snapshot(out)
        truth, meta, labels = pl.make_objects(rc)
        pl.write_objects(out / "objects.pvae", rc, truth, meta, labels)
        return out / "objects.pvae"

    if cmd == "simulate":
        truth = meta = None
        if args.objects:
            truth = pl.read_objects(args.objects)
            meta = {"objects_source": Path(args.objects).name}
        ds = pl.simulate(rc, truth, meta)
        write_dataset(out / "dataset.pvae", ds)
        return out / "dataset.pvae"

    if cmd == "import-raw":
        import_raw_frames(args.manifest, out / "dataset.pvae")
        return out / "dataset.pvae"

    ds = pl.load_dataset(args.data) if cmd in ("recon-iter", "pvae-train", "pvae-sample") else None

    if cmd == "recon-iter":
        est, final = pl.recon_iterative(ds, rc.recon, rc.n_slices, rc.jobs, progress)
        meta = {"method": "iterative", "recon_params": rc.recon.to_dict(), "n_slices": rc.n_slices}
        pl.write_with_extra(out / "recon.pvae", pl.with_recon(ds, est, meta),
                            {"recon_final_loss": final})
        return out / "recon.pvae"

    if cmd == "pvae-train":
        pl.pvae_train(rc, ds, out, resume=args.resume, progress=progress)
        return out / "checkpoint.pvae"

    if cmd == "pvae-sample":
        state, _, _, _ = load_checkpoint(args.checkpoint)
        samples = args.samples or rc.samples
        r = pl.pvae_estimates(state.model, ds, samples, rc.seed)
        meta = {"method": "pvae", "samples": samples, "arch": state.model.arch.to_dict()}
        extra = {f"posterior/{k}": r[k].astype(np.float32)
                 for k in ("mean_amp", "std_amp", "mean_phase", "std_phase")}
        pl.write_with_extra(out / "posterior.pvae", pl.with_recon(ds, r["mean"], meta), extra)
        return out / "posterior.pvae"

    if cmd == "eval":
        rds = pl.load_dataset(args.recon)
        if not rds.recon:
            raise DataError(f"{args.recon}: no recon/<id> arrays to evaluate")
        truth = pl.read_objects(args.truth) if args.truth else rds.truth
        if truth is None:
            raise DataError("no ground truth: pass --truth or evaluate a synthetic dataset")
        ids = [int(i) for i in rds.object_ids]
        missing = [i for i in ids if i not in rds.recon]
        if missing:
            raise DataError(f"recon arrays missing for objects {missing[:5]}")
        truth = np.asarray(truth)
        if len(truth) != len(ids):
            raise DataError(f"truth holds {len(truth)} objects, reconstruction {len(ids)}")
        est = np.stack([rds.recon[i] for i in ids])
        method = args.method or rc.eval_method or str(rds.meta.get("method", "unknown"))
        rows = pl.evaluate_dataset(est, truth, method, rds, _pattern_mode(rds))
        report_csv(rows, out / "psnr.csv")
        if args.png:
            png = out / "png"
            png.mkdir(exist_ok=True)
            for i, e, t in zip(ids, est, truth):
                render_object_panels(e, png, f"obj{i:05d}_est")
                render_object_panels(t, png, f"obj{i:05d}_truth")
        return out / "psnr.csv"

    raise ConfigError(f"unknown command {cmd}")  # pragma: no cover


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        path = run(args)
    except PvaeError as exc:
        print(f"error={type(exc).__name__} {exc}".replace("\n", " "), file=sys.stderr)
        return exc.exit_code
    except (OSError, KeyError) as exc:
        print(f"error=DataError {exc}".replace("\n", " "), file=sys.stderr)
        return DataError.exit_code
    except ValueError as exc:
        print(f"error=DataError {exc}".replace("\n", " "), file=sys.stderr)
        return DataError.exit_code
    print(path)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
