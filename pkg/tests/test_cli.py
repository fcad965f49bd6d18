import json

import numpy as np
import pytest

from ledpvae import runconfig
from ledpvae.cli import main
from ledpvae.container import read_container
from ledpvae.dataset import read_dataset
from ledpvae.errors import ConfigError
from ledpvae.evaluate import read_csv

SMALL = {"optics": {"grid_n": 16}, "recon": {"iterations": 30},
         "pvae": {"arch": {"scales": 2, "base_channels": 4}, "train": {"steps": 6, "batch": 4,
                                                                        "checkpoint_every": 3}}}


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps(SMALL))
    return str(p)


def run(*argv):
    return main([str(a) for a in argv])


def _pipeline(cfg, out, jobs=1):
    common = ["--config", cfg, "--jobs", jobs, "--log-every", 1]
    assert run("simulate", *common, "--m", 10, "--n", 1, "--pattern-mode", "dirichlet",
               "--out", out / "sim") == 0
    data = out / "sim" / "dataset.pvae"
    assert run("recon-iter", *common, "--data", data, "--out", out / "it") == 0
    assert run("eval", *common, "--recon", out / "it" / "recon.pvae", "--truth", data,
               "--out", out / "ev") == 0
    assert run("pvae-train", *common, "--data", data, "--out", out / "tr") == 0
    assert run("pvae-sample", *common, "--data", data, "--checkpoint", out / "tr" / "checkpoint.pvae",
               "--samples", 2, "--out", out / "ps") == 0
    assert run("eval", *common, "--recon", out / "ps" / "posterior.pvae", "--out", out / "ev2") == 0


def test_simulate_recon_eval(tmp_path, cfg_file, capsys):
    _pipeline(cfg_file, tmp_path)
    ds = read_dataset(tmp_path / "sim" / "dataset.pvae")
    assert ds.counts.shape == (10, 1, 16, 16)
    assert ds.truth is not None
    rows = read_csv(tmp_path / "ev" / "psnr.csv")
    assert len(rows) == 10
    assert {r["method"] for r in rows} == {"iterative"}
    assert {r["pattern_mode"] for r in rows} == {"dirichlet"}
    assert [r["method"] for r in read_csv(tmp_path / "ev2" / "psnr.csv")] == ["pvae"] * 10
    post = read_container(tmp_path / "ps" / "posterior.pvae")
    assert post.shape("posterior/std_amp") == (10, 1, 16, 16)
    ckpts = sorted(p.name for p in (tmp_path / "tr" / "checkpoints").iterdir())
    assert ckpts == ["step_0000003.pvae", "step_0000006.pvae"]
    err = capsys.readouterr().err
    assert "step=1 loss=" in err
    for d in ("sim", "it", "ev", "tr", "ps", "ev2"):
        snap = json.loads((tmp_path / d / "config.resolved.json").read_text())
        assert snap["optics"]["grid_n"] == 16
        assert snap["pvae"]["train"]["lr"] == 1e-3  # defaults expanded


def test_same_seed_byte_identical(tmp_path, cfg_file):
    _pipeline(cfg_file, tmp_path / "a", jobs=1)
    _pipeline(cfg_file, tmp_path / "b", jobs=2)
    for rel in ("sim/dataset.pvae", "it/recon.pvae", "ev/psnr.csv", "tr/checkpoint.pvae",
                "tr/checkpoints/step_0000003.pvae", "ps/posterior.pvae", "ev2/psnr.csv"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_seed_changes_output(tmp_path, cfg_file):
    for s in (1, 2):
        assert run("simulate", "--config", cfg_file, "--m", 2, "--seed", s, "--out", tmp_path / str(s)) == 0
    assert (tmp_path / "1" / "dataset.pvae").read_bytes() != (tmp_path / "2" / "dataset.pvae").read_bytes()


def test_phantoms_then_simulate(tmp_path, cfg_file):
    assert run("phantom-digits", "--config", cfg_file, "--m", 3, "--out", tmp_path / "o") == 0
    c = read_container(tmp_path / "o" / "objects.pvae")
    assert c.shape("truth") == (3, 2, 16, 16)
    assert c.header["phantom"]["kind"] == "digits"
    assert run("simulate", "--config", cfg_file, "--m", 3, "--n", 2, "--objects",
               tmp_path / "o" / "objects.pvae", "--out", tmp_path / "s") == 0
    ds = read_dataset(tmp_path / "s" / "dataset.pvae")
    np.testing.assert_array_equal(ds.truth, c.load("truth"))
    assert ds.counts.shape == (3, 2, 16, 16)


def test_resume_matches_uninterrupted(tmp_path, cfg_file):
    common = ["--config", cfg_file, "--jobs", 1]
    assert run("simulate", *common, "--m", 6, "--out", tmp_path / "s") == 0
    data = tmp_path / "s" / "dataset.pvae"
    assert run("pvae-train", *common, "--data", data, "--out", tmp_path / "full") == 0
    assert run("pvae-train", *common, "--data", data, "--out", tmp_path / "res",
               "--resume", tmp_path / "full" / "checkpoints" / "step_0000003.pvae") == 0
    assert ((tmp_path / "full" / "checkpoint.pvae").read_bytes()
            == (tmp_path / "res" / "checkpoint.pvae").read_bytes())


def test_unknown_keys_all_reported(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps({"sed": 1, "optics": {"grid": 8}, "pvae": {"train": {"lr": -1, "x": 0}}}))
    assert run("simulate", "--config", p, "--out", tmp_path / "o") == 2
    err = capsys.readouterr().err.strip()
    assert err.startswith("error=ConfigError")
    assert len(err.splitlines()) == 1
    for piece in ("unknown key sed", "unknown key optics.grid", "unknown key pvae.train.x", "lr > 0"):
        assert piece in err


def test_resolve_lists_every_problem():
    with pytest.raises(ConfigError) as exc:
        runconfig.resolve({"seed": -1, "phantom": {"kind": "cats", "m": 0}, "recon": {"n_slices": 3}})
    assert len(exc.value.problems) >= 4


def test_negative_grad_clip_rejected():
    with pytest.raises(ConfigError, match="grad_clip"):
        runconfig.resolve({"pvae": {"train": {"grad_clip": -1.0}}})
    assert runconfig.resolve({"pvae": {"train": {"grad_clip": 5.0}}}).train.grad_clip == 5.0


def test_resolved_snapshot_roundtrips():
    rc = runconfig.resolve({"seed": 4, "phantom": {"kind": "digits"}}, {"m": 7, "n": 2})
    again = runconfig.resolve(json.loads(rc.to_json()))
    assert again == rc
    assert rc.n_slices == 2 and rc.arch.slices == 2 and rc.patterns.n == 2


def test_data_error_exit_code(tmp_path, cfg_file, capsys):
    bad = tmp_path / "x.pvae"
    bad.write_bytes(b"NOPE" + bytes(40))
    assert run("recon-iter", "--config", cfg_file, "--data", bad, "--out", tmp_path / "o") == 3
    assert capsys.readouterr().err.startswith("error=ContainerFormatError")
    assert run("recon-iter", "--config", cfg_file, "--data", tmp_path / "missing.pvae",
               "--out", tmp_path / "o") == 3


def test_eval_without_truth_fails(tmp_path, cfg_file, capsys):
    assert run("simulate", "--config", cfg_file, "--m", 2, "--out", tmp_path / "s") == 0
    assert run("eval", "--config", cfg_file, "--recon", tmp_path / "s" / "dataset.pvae",
               "--out", tmp_path / "e") == 3
    assert "error=DataError" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_code(tmp_path, cfg_file, capsys):
    cfg = dict(SMALL, pvae={"arch": {"scales": 2, "base_channels": 4},
                            "train": {"steps": 40, "batch": 4, "lr": 1e30}})
    p = tmp_path / "nan.json"
    p.write_text(json.dumps(cfg))
    assert run("simulate", "--config", p, "--m", 4, "--out", tmp_path / "s") == 0
    code = run("pvae-train", "--config", p, "--data", tmp_path / "s" / "dataset.pvae",
               "--out", tmp_path / "t")
    assert code == 4
    assert "error=NumericError" in capsys.readouterr().err


def test_import_raw(tmp_path, cfg_file):
    frame = np.full((20, 20), 7, dtype="<u2")
    (tmp_path / "f0.raw").write_bytes(frame.tobytes())
    man = {"config": {"grid_n": 16}, "frame_shape": [20, 20],
           "objects": [{"id": 5, "shots": [{"weights": [1.0] + [0.0] * 28, "frame": "f0.raw",
                                             "crop": [2, 2, 16, 16], "dark": 2}]}]}
    (tmp_path / "m.json").write_text(json.dumps(man))
    assert run("import-raw", "--manifest", tmp_path / "m.json", "--out", tmp_path / "o") == 0
    ds = read_dataset(tmp_path / "o" / "dataset.pvae")
    assert ds.object_ids.tolist() == [5]
    assert (np.asarray(ds.counts) == 5).all()
