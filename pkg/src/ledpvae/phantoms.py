"""Synthetic objects: foam-like complex phantoms and two-plane phase digits."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import zoom

from .errors import ConfigError, DataError
from .optics import ObjectModel
from .seeding import PHANTOM, object_rng


@dataclass(frozen=True)
class FoamSpec:
    grid_n: int = 32
    disk_count_range: tuple = (4, 10)
    radius_range: tuple = (0.06, 0.16)
    attenuation_range: tuple = (0.7, 1.0)
    phase_range: tuple = (0.0, math.pi / 2)
    seed: int = 0

    def __post_init__(self):
        for name in ("disk_count_range", "radius_range", "attenuation_range", "phase_range"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        problems = []
        for name in ("disk_count_range", "radius_range", "attenuation_range", "phase_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                problems.append(f"{name} is empty: {lo} > {hi}")
        if self.disk_count_range[0] < 0:
            problems.append("disk_count_range must be non-negative")
        if not (0 < self.radius_range[0] and self.radius_range[1] < 0.5):
            problems.append("radius_range must lie in (0, 0.5)")
        lo, hi = self.attenuation_range
        if not (0 < lo and hi <= 1):
            problems.append("attenuation_range must lie in (0, 1]")
        if self.grid_n < 2:
            problems.append("grid_n must be >= 2")
        if problems:
            raise ConfigError(problems)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


def foam_object(spec: FoamSpec, index: int) -> ObjectModel:
    rng = object_rng(spec.seed, index, PHANTOM)
    n = spec.grid_n
    rows, cols = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    field = np.ones((n, n), dtype=np.complex128)
    lo, hi = spec.disk_count_range
    for _ in range(int(rng.integers(lo, hi + 1))):
        cy, cx = rng.uniform(0, n, size=2)
        r = rng.uniform(*spec.radius_range) * n
        a = rng.uniform(*spec.attenuation_range)
        phi = rng.uniform(*spec.phase_range)
        inside = (rows - cy) ** 2 + (cols - cx) ** 2 <= r * r
        field[inside] *= a * np.exp(1j * phi)
    return ObjectModel(field[None])


def gen_foam(spec: FoamSpec, count: int) -> list:
    """``count`` single-slice foam objects; object ``i`` depends only on (spec, i)."""
    return [foam_object(spec, i) for i in range(count)]


# ---------------------------------------------------------------------------
# digits

# 5x7 dot-matrix digits, one string per row.
_FONT = {
    0: (".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."),
    1: ("..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."),
    2: (".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"),
    3: ("#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."),
    4: ("...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."),
    5: ("#####", "#....", "####.", "....#", "....#", "#...#", ".###."),
    6: ("..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."),
    7: ("#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."),
    8: (".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."),
    9: (".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."),
}


def builtin_glyphs() -> np.ndarray:
    """Ten 28x28 uint8 digit bitmaps (index = digit), MNIST-like framing."""
    out = np.zeros((10, 28, 28), dtype=np.uint8)
    kernel = np.ones(3) / 3
    for d, rows in _FONT.items():
        dots = np.array([[c == "#" for c in r] for r in rows], dtype=float)
        img = np.zeros((28, 28))
        img[0:28, 4:24] = np.kron(dots, np.ones((4, 4)))
        img = np.apply_along_axis(np.convolve, 0, img, kernel, "same")
        img = np.apply_along_axis(np.convolve, 1, img, kernel, "same")
        out[d] = np.round(255 * img / img.max()).astype(np.uint8)
    return out


def read_pgm(path) -> np.ndarray:
    """Binary (P5) 8-bit PGM reader."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    pos += 1
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise DataError(f"{path}: only 8-bit PGM supported")
    pix = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    return pix.reshape(h, w)


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())


def load_glyph_dir(directory) -> np.ndarray:
    paths = sorted(Path(directory).glob("*.pgm"))
    if not paths:
        raise DataError(f"no .pgm glyph files in {directory}")
    glyphs = []
    for p in paths:
        try:
            g = read_pgm(p)
        except (OSError, ValueError, IndexError) as exc:
            raise DataError(f"unreadable glyph file {p}: {exc}") from None
        if g.shape != (28, 28):
            raise DataError(f"{p}: expected 28x28 glyph, got {g.shape}")
        glyphs.append(g)
    return np.stack(glyphs)


@dataclass(frozen=True)
class GlyphSpec:
    grid_n: int = 32
    glyph_dir: str | None = None
    phase_scale: float = math.pi / 2
    seed: int = 0

    def __post_init__(self):
        problems = []
        if not 0 < self.phase_scale <= math.pi:
            problems.append(f"phase_scale must lie in (0, pi], got {self.phase_scale}")
        if self.grid_n < 4:
            problems.append("grid_n must be >= 4")
        if problems:
            raise ConfigError(problems)

    def to_dict(self) -> dict:
        return asdict(self)


def _place_glyph(glyph: np.ndarray, n: int) -> np.ndarray:
    size = max(2, int(round(n * 28 / 32)))
    g = zoom(glyph.astype(np.float64) / 255.0, size / glyph.shape[0], order=1)
    g = np.clip(g, 0.0, 1.0)
    canvas = np.zeros((n, n))
    s = g.shape[0]
    off = (n - s) // 2
    canvas[off:off + s, off:off + s] = g[: n - off, : n - off]
    return canvas


def gen_two_plane_digits(spec: GlyphSpec, count: int, glyphs: np.ndarray | None = None):
    """``count`` two-slice pure-phase objects, each slice one digit.

    Returns (objects, digit_pairs).  ``glyphs`` overrides the glyph source.
    """
    if glyphs is None:
        glyphs = load_glyph_dir(spec.glyph_dir) if spec.glyph_dir else builtin_glyphs()
    objects, labels = [], []
    for i in range(count):
        rng = object_rng(spec.seed, i, PHANTOM)
        pair = rng.integers(0, len(glyphs), size=2)
        slices = [np.exp(1j * spec.phase_scale * _place_glyph(glyphs[d], spec.grid_n))
                  for d in pair]
        objects.append(ObjectModel(np.stack(slices)))
        labels.append(tuple(int(d) for d in pair))
    return objects, labels
