import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ledpvae.container import MAGIC, PREFIX, encode_header, read_container, write_container
from ledpvae.dataset import Dataset, import_raw_frames, read_dataset, write_dataset
from ledpvae.errors import (ConfigError, ContainerFormatError, DataError, TruncatedContainerError,
                            UnsupportedVersionError)
from ledpvae.optics import OpticalConfig


def _arrays(rng):
    return {
        "counts": rng.integers(0, 2**32 - 1, size=(3, 2, 4, 4), dtype=np.uint32),
        "truth": (rng.normal(size=(3, 1, 4, 4)) + 1j * rng.normal(size=(3, 1, 4, 4))).astype(np.complex64),
        "patterns": rng.random((3, 2, 29)),
        "step": np.array(17, dtype=np.int64),
    }


def test_roundtrip_bit_exact(tmp_path, rng):
    arrays = _arrays(rng)
    p = tmp_path / "a.pvae"
    write_container(p, {"kind": "test", "note": "x"}, arrays)
    c = read_container(p)
    assert c.header == {"kind": "test", "note": "x"}
    assert c.names() == sorted(arrays)
    for k, v in arrays.items():
        got = c.load(k)
        assert got.dtype == v.dtype.newbyteorder("<") and got.shape == v.shape
        assert got.tobytes() == v.tobytes()


def test_layout_prefix(tmp_path):
    p = tmp_path / "e.pvae"
    write_container(p, {}, {})
    raw = p.read_bytes()
    magic, version, hlen = PREFIX.unpack(raw[:16])
    assert (magic, version) == (MAGIC, 1)
    assert len(raw) == 16 + hlen
    assert json.loads(raw[16:]) == {"arrays": {}}


def test_header_is_canonical():
    assert encode_header({"b": 1, "a": [1, 2]}) == b'{"a":[1,2],"b":1}'


def test_bad_magic(tmp_path, rng):
    p = tmp_path / "m.pvae"
    write_container(p, {}, _arrays(rng))
    raw = bytearray(p.read_bytes())
    raw[:4] = b"PVAX"
    p.write_bytes(bytes(raw))
    with pytest.raises(ContainerFormatError, match="magic"):
        read_container(p)


def test_version_two_rejected(tmp_path, rng):
    p = tmp_path / "v.pvae"
    write_container(p, {}, _arrays(rng))
    raw = bytearray(p.read_bytes())
    raw[4:8] = struct.pack("<I", 2)
    p.write_bytes(bytes(raw))
    with pytest.raises(UnsupportedVersionError, match="unsupported version 2"):
        read_container(p)


def test_truncation_names_array(tmp_path, rng):
    arrays = _arrays(rng)
    p = tmp_path / "t.pvae"
    write_container(p, {}, arrays)
    raw = p.read_bytes()
    p.write_bytes(raw[:-10])
    # arrays are laid out in sorted-name order, so the last one is cut short
    with pytest.raises(TruncatedContainerError, match="'truth'"):
        read_container(p)


def test_truncated_header(tmp_path, rng):
    p = tmp_path / "h.pvae"
    write_container(p, {"k": "v" * 100}, {})
    p.write_bytes(p.read_bytes()[:40])
    with pytest.raises(TruncatedContainerError):
        read_container(p)


def test_overlap_detected(tmp_path):
    head = encode_header({"arrays": {
        "a": {"dtype": "<f8", "shape": [2], "byte_offset": 0, "byte_length": 16},
        "b": {"dtype": "<f8", "shape": [2], "byte_offset": 8, "byte_length": 16}}})
    p = tmp_path / "o.pvae"
    p.write_bytes(PREFIX.pack(MAGIC, 1, len(head)) + head + bytes(24))
    with pytest.raises(ContainerFormatError, match="overlap"):
        read_container(p)


def test_lazy_header_without_payload_read(tmp_path, rng):
    p = tmp_path / "big.pvae"
    write_container(p, {"kind": "big"}, {"x": np.zeros((256, 256, 8), dtype=np.float64)})
    c = read_container(p)
    assert c.header["kind"] == "big" and c.shape("x") == (256, 256, 8)
    assert isinstance(c.array("x"), np.memmap)


def test_position_independent(tmp_path, rng):
    arrays = _arrays(rng)
    a, b = tmp_path / "one.pvae", tmp_path / "sub"
    b.mkdir()
    write_container(a, {"k": 1}, arrays)
    write_container(b / "two.bin", {"k": 1}, arrays)
    assert a.read_bytes() == (b / "two.bin").read_bytes()


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["<u1", "<u2", "<u4", "<i8", "<f4", "<f8", "<c8", "<c16"]),
                          st.lists(st.integers(0, 4), min_size=0, max_size=3)),
                max_size=5), st.integers(0, 2**31))
def test_roundtrip_property(tmp_path_factory, specs, seed):
    rng = np.random.default_rng(seed)
    arrays = {}
    for i, (dt, shape) in enumerate(specs):
        raw = rng.integers(0, 256, size=int(np.prod(shape)) * np.dtype(dt).itemsize, dtype=np.uint8)
        arrays[f"arr{i}"] = np.frombuffer(raw.tobytes(), dtype=dt).reshape(shape)
    p = tmp_path_factory.mktemp("prop") / "c.pvae"
    write_container(p, {"n": len(arrays)}, arrays)
    c = read_container(p)
    for k, v in arrays.items():
        assert c.load(k).tobytes() == v.tobytes()


# -- datasets ----------------------------------------------------------------


def _dataset(rng, m=3, n=2):
    cfg = OpticalConfig()
    counts = rng.integers(0, 50000, size=(m, n, 32, 32)).astype(np.uint32)
    patterns = rng.dirichlet(np.full(29, 0.1), size=(m, n))
    truth = np.exp(1j * rng.random((m, 1, 32, 32))).astype(np.complex64)
    return Dataset(cfg, counts, patterns, np.arange(m), truth, {"pattern_plan": {"mode": "dirichlet"}})


def test_dataset_roundtrip(tmp_path, rng):
    ds = _dataset(rng)
    ds.recon[1] = np.ones((1, 32, 32), np.complex64)
    p = tmp_path / "d.pvae"
    write_dataset(p, ds)
    back = read_dataset(p)
    assert back.config == ds.config and back.m == 3 and back.n == 2
    assert np.asarray(back.counts).tobytes() == ds.counts.tobytes()
    assert np.asarray(back.patterns).tobytes() == ds.patterns.tobytes()
    assert np.asarray(back.truth).tobytes() == ds.truth.tobytes()
    assert back.meta == ds.meta and list(back.recon) == [1]
    s = back.stack(2)
    assert s.object_id == 2 and s.n == 2 and s.truth.slices.shape == (1, 32, 32)


def test_dataset_shape_mismatch(rng):
    ds = _dataset(rng)
    with pytest.raises(DataError):
        Dataset(ds.config, ds.counts, ds.patterns[:, :, :5], ds.object_ids)


def test_read_non_dataset(tmp_path):
    p = tmp_path / "x.pvae"
    write_container(p, {"kind": "checkpoint"}, {})
    with pytest.raises(DataError, match="not a dataset"):
        read_dataset(p)


# -- raw import --------------------------------------------------------------


def _manifest(tmp_path, frames, crop=None, dark=100.0, shape=(64, 64), grid=32):
    objects = []
    for i, f in enumerate(frames):
        name = f"f{i}.raw"
        (tmp_path / name).write_bytes(np.asarray(f, dtype="<u2").tobytes())
        w = np.zeros(29)
        w[i % 29] = 1.0
        shot = {"weights": w.tolist(), "frame": name, "dark": dark}
        if crop:
            shot["crop"] = crop
        objects.append({"id": i, "shots": [shot]})
    man = {"config": {"grid_n": grid}, "frame_shape": list(shape), "objects": objects}
    p = tmp_path / "manifest.json"
    p.write_text(json.dumps(man))
    return p


def test_import_dark_frame_gives_zero(tmp_path):
    p = _manifest(tmp_path, [np.full((32, 32), 100)], shape=(32, 32))
    ds = import_raw_frames(p)
    assert ds.counts.dtype == np.uint32 and not ds.counts.any()


def test_import_crop_and_two_objects(tmp_path, rng):
    frames = [rng.integers(0, 4000, size=(64, 64)) for _ in range(2)]
    p = _manifest(tmp_path, frames, crop=[8, 4, 32, 32])
    out = tmp_path / "raw.pvae"
    ds = import_raw_frames(p, out)
    assert ds.counts.shape == (2, 1, 32, 32)
    expect = np.maximum(frames[1][4:36, 8:40] - 100.0, 0)
    assert np.array_equal(ds.counts[1, 0], expect.astype(np.uint32))
    back = read_dataset(out)
    assert back.m == 2 and back.n == 1 and back.truth is None


def test_import_large_frame_crop(tmp_path):
    frame = np.arange(2048 * 2048, dtype=np.uint32).reshape(2048, 2048) % 65535
    p = _manifest(tmp_path, [frame], crop=[1000, 900, 128, 128], dark=0.0, shape=(2048, 2048), grid=128)
    ds = import_raw_frames(p)
    assert ds.counts.shape == (1, 1, 128, 128)
    assert np.array_equal(ds.counts[0, 0], frame[900:1028, 1000:1128])


def test_import_errors(tmp_path):
    p = _manifest(tmp_path, [np.zeros((32, 32))], shape=(32, 32))
    (tmp_path / "f0.raw").write_bytes(b"\0" * 10)
    with pytest.raises(DataError, match="bytes"):
        import_raw_frames(p)
    (tmp_path / "f0.raw").unlink()
    with pytest.raises(DataError, match="missing frame"):
        import_raw_frames(p)
    man = json.loads(p.read_text())
    man["extra"] = 1
    p.write_text(json.dumps(man))
    with pytest.raises(ConfigError):
        import_raw_frames(p)
