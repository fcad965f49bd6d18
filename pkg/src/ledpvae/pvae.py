"""Physics-informed variational autoencoder.

The encoder is a U-Net-style tower applied to every (counts, pattern) shot
with shared weights.  At each scale the per-shot features are combined by a
softmax-weighted average over shots (weights from a learned per-shot logit),
which makes the result independent of shot order; two 1x1 heads turn the
pooled features into the mean and log-variance of a Gaussian latent at that
scale.  The decoder upsamples from the coarsest latent, concatenating the
latent of each finer scale, and emits log-amplitude and phase for every
object slice.  Its output ``O = exp(a + i*phi)`` is pushed through the known
optics and scored with the Poisson likelihood of the recorded counts; the
decoder is deterministic, so the loss is the single-sample ELBO
``nll + beta * KL(Q(z|M) || N(0, I))``.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .container import read_container, write_container
from .errors import ConfigError, DataError, NumericError
from .optics import OpticalConfig, forward_model, led_shift_pixels
from .optim import Adam, clip_grad_norm
from .seeding import MODEL, TRAIN, stream_rng

log = logging.getLogger(__name__)

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0


@dataclass(frozen=True)
class PvaeArch:
    scales: int = 3
    base_channels: int = 16
    latent_channels: int = 4
    slices: int = 1
    slope: float = 0.1
    pooling: str = "attention"

    def channels(self, s: int) -> int:
        return self.base_channels * 2 ** s

    def problems(self, grid_n: int) -> list:
        out = []
        if self.scales < 1:
            out.append("scales must be >= 1")
        elif grid_n % 2 ** self.scales:
            out.append(f"grid_n={grid_n} is not divisible by 2**scales={2 ** self.scales}")
        if self.base_channels < 1 or self.latent_channels < 1:
            out.append("channel counts must be >= 1")
        if self.slices not in (1, 2):
            out.append("slices must be 1 or 2")
        if self.pooling not in ("attention", "mean"):
            out.append("pooling must be 'attention' or 'mean'")
        return out

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GaussianLatent:
    """Per-scale (mu, logvar) tensors, each (batch, latent_channels, N/2^s, N/2^s)."""

    mu: list
    logvar: list


@dataclass
class PvaeLoss:
    nll: ad.Tensor
    kl: ad.Tensor
    beta: float
    total: ad.Tensor


def _he(rng, shape, gain=2.0):
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(scale=math.sqrt(gain / fan_in), size=shape)


def kl_standard_normal(lat: GaussianLatent, per_item: bool = False) -> ad.Tensor:
    """sum 0.5 * (mu^2 + exp(logvar) - 1 - logvar) over every latent element.

    ``expm1(lv) - lv`` keeps each term exactly nonnegative in floating point.
    """
    total = None
    for mu, lv in zip(lat.mu, lat.logvar):
        term = 0.5 * (mu * mu + (ad.expm1(lv) - lv))
        axes = tuple(range(1, term.ndim)) if per_item else None
        term = ad.sum_(term, axis=axes)
        total = term if total is None else total + term
    return total


def reparameterize(lat: GaussianLatent, rng: np.random.Generator | None, zero_noise: bool = False) -> list:
    """z = mu + exp(logvar / 2) * eps with eps ~ N(0, I) drawn scale by scale."""
    zs = []
    for mu, lv in zip(lat.mu, lat.logvar):
        if zero_noise:
            zs.append(mu)
            continue
        eps = rng.standard_normal(size=mu.shape).astype(mu.dtype, copy=False)
        zs.append(mu + ad.exp(0.5 * lv) * eps)
    return zs


class Pvae:
    def __init__(self, arch: PvaeArch, cfg: OpticalConfig, seed: int = 0, dtype=np.float32):
        problems = arch.problems(cfg.grid_n)
        if problems:
            raise ConfigError(problems)
        self.arch = arch
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.cdtype = np.complex64 if self.dtype == np.float32 else np.complex128
        self.fm = forward_model(cfg, self.cdtype)
        n = cfg.grid_n
        scatter = np.zeros((cfg.n_leds, n * n), dtype=self.dtype)
        for j, led in enumerate(cfg.led_indices):
            dm, dn = led_shift_pixels(led, cfg)
            scatter[j, ((n // 2 + dn) % n) * n + (n // 2 + dm) % n] += 1.0
        self._pattern_scatter = scatter
        self.params = self._init_params(stream_rng(seed, MODEL))

    # -- parameters -------------------------------------------------------

    def _init_params(self, rng) -> dict:
        a = self.arch
        lat, k = a.latent_channels, a.scales
        shapes = {}
        cin = 2
        for s in range(k + 1):
            c = a.channels(s)
            shapes[f"enc{s}.conv0"] = (c, cin, 3, 3)
            shapes[f"enc{s}.conv1"] = (c, c, 3, 3)
            shapes[f"enc{s}.logit"] = (1, c, 1, 1)
            shapes[f"enc{s}.mu"] = (lat, c, 1, 1)
            shapes[f"enc{s}.logvar"] = (lat, c, 1, 1)
            cin = c
        shapes[f"dec{k}.conv0"] = (a.channels(k), lat, 3, 3)
        for s in range(k - 1, -1, -1):
            shapes[f"dec{s}.conv0"] = (a.channels(s), a.channels(s + 1) + lat, 3, 3)
            shapes[f"dec{s}.conv1"] = (a.channels(s), a.channels(s), 3, 3)
        shapes["out"] = (2 * a.slices, a.channels(0), 1, 1)

        params = {}
        for name, shape in shapes.items():
            if name == "out" or name.endswith(".logit"):
                w = np.zeros(shape)
            elif name.endswith((".mu", ".logvar")):
                w = _he(rng, shape, gain=1.0)
            else:
                w = _he(rng, shape, gain=2.0 / (1 + a.slope ** 2))
            params[name + ".w"] = ad.parameter(w.astype(self.dtype))
            params[name + ".b"] = ad.parameter(np.zeros(shape[0], dtype=self.dtype))
        return params

    def weight_arrays(self) -> dict:
        return {f"weights/{k}": p.data for k, p in self.params.items()}

    def load_weight_arrays(self, arrays: dict) -> None:
        for k, p in self.params.items():
            src = np.asarray(arrays[f"weights/{k}"])
            if src.shape != p.data.shape:
                raise ConfigError(f"checkpoint weight {k} has shape {src.shape}, expected {p.data.shape}")
            p.data = src.astype(self.dtype, copy=True)

    def _conv(self, name, x):
        return ad.conv2d(x, self.params[name + ".w"], self.params[name + ".b"])

    def _act(self, x):
        return ad.leaky_relu(x, self.arch.slope)

    # -- encoder ----------------------------------------------------------

    def encoder_inputs(self, counts, patterns) -> np.ndarray:
        """(shots, 2, N, N): counts scaled to unit spatial mean, and the pattern map."""
        counts = np.asarray(counts, dtype=np.float64)
        patterns = np.asarray(patterns, dtype=np.float64)
        n = self.cfg.grid_n
        flat = counts.reshape(-1, n, n)
        mean = flat.mean(axis=(1, 2), keepdims=True)
        norm = np.divide(flat, mean, out=np.zeros_like(flat), where=mean > 0)
        pmap = (patterns.reshape(-1, patterns.shape[-1]).astype(self.dtype) @ self._pattern_scatter)
        return np.stack([norm.astype(self.dtype), pmap.reshape(-1, n, n)], axis=1)

    def encode_shots(self, x):
        """Shared-weight tower over shots: per-scale features and pooling logits."""
        feats, logits = [], []
        h = x
        for s in range(self.arch.scales + 1):
            if s:
                h = ad.avg_down(h)
            h = self._act(self._conv(f"enc{s}.conv0", h))
            h = self._act(self._conv(f"enc{s}.conv1", h))
            feats.append(h)
            logits.append(ad.mean(self._conv(f"enc{s}.logit", h), axis=(1, 2, 3)))
        return feats, logits

    def pool_shots(self, feats, logits, batch: int, shots: int) -> GaussianLatent:
        """Softmax-over-shots weighted average per scale, then the Gaussian heads."""
        mus, lvs = [], []
        for s, (f, lg) in enumerate(zip(feats, logits)):
            _, c, h, w = f.shape
            f5 = ad.reshape(f, (batch, shots, c, h, w))
            if self.arch.pooling == "attention":
                attn = ad.softmax(ad.reshape(lg, (batch, shots)), axis=1)
                pooled = ad.sum_(f5 * ad.reshape(attn, (batch, shots, 1, 1, 1)), axis=1)
            else:
                pooled = ad.mean(f5, axis=1)
            mus.append(self._conv(f"enc{s}.mu", pooled))
            lvs.append(ad.clip(self._conv(f"enc{s}.logvar", pooled), LOGVAR_MIN, LOGVAR_MAX))
        return GaussianLatent(mus, lvs)

    def posterior(self, counts, patterns) -> GaussianLatent:
        """Q(z|M) for a batch: counts (b, n, N, N), patterns (b, n, l)."""
        b, n = np.shape(counts)[:2]
        x = ad.tensor(self.encoder_inputs(counts, patterns))
        feats, logits = self.encode_shots(x)
        return self.pool_shots(feats, logits, b, n)

    # -- decoder ----------------------------------------------------------

    def decode_channels(self, zs) -> ad.Tensor:
        """Raw decoder output (b, 2*slices, N, N): (a, phi) per slice."""
        k = self.arch.scales
        h = self._act(self._conv(f"dec{k}.conv0", zs[k]))
        for s in range(k - 1, -1, -1):
            h = ad.concat([ad.nearest_up(h), zs[s]], axis=1)
            h = self._act(self._conv(f"dec{s}.conv0", h))
            h = self._act(self._conv(f"dec{s}.conv1", h))
        return self._conv("out", h)

    def decode(self, zs) -> ad.Tensor:
        """Complex object slices (b, slices, N, N)."""
        out = self.decode_channels(zs)
        return ad.exp(ad.make_complex(out[:, 0::2], out[:, 1::2]))

    # -- objective --------------------------------------------------------

    def elbo(self, counts, patterns, rng, beta: float = 1.0, zero_noise: bool = False,
             objects=None) -> PvaeLoss:
        """Batch-mean ELBO loss; ``objects`` replaces the decoder output (test hook)."""
        counts = np.asarray(counts)
        lat = self.posterior(counts, patterns)
        zs = reparameterize(lat, rng, zero_noise)
        obj = self.decode(zs) if objects is None else objects
        lam = self.fm.expected(obj, patterns) * self.cfg.photon_budget
        y = counts.astype(lam.dtype)
        nll_map = lam - y * ad.log(ad.clampmin(lam, 1e-8))
        b = counts.shape[0]
        nll = ad.sum_(nll_map) / b
        kl = kl_standard_normal(lat) / b
        total = nll + beta * kl if beta else nll + 0.0 * kl
        return PvaeLoss(nll=nll, kl=kl, beta=beta, total=total)


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 1e-3
    batch: int = 8
    steps: int = 2000
    seed: int = 0
    beta: float = 1.0
    checkpoint_every: int = 0
    dtype: str = "float32"
    # max joint gradient L2 norm per step; 0 disables clipping
    grad_clip: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer"] = "adam"
        return d


@dataclass
class TrainState:
    model: Pvae
    opt: Adam
    rng: np.random.Generator
    step: int = 0
    order: np.ndarray | None = None
    cursor: int = 0
    curve: list = field(default_factory=list)


def new_state(arch: PvaeArch, cfg: OpticalConfig, hyper: TrainHyper) -> TrainState:
    model = Pvae(arch, cfg, seed=hyper.seed, dtype=np.dtype(hyper.dtype))
    opt = Adam(model.params, lr=hyper.lr)
    return TrainState(model=model, opt=opt, rng=stream_rng(hyper.seed, TRAIN))


def _next_batch(state: TrainState, m: int, batch: int) -> np.ndarray:
    take = []
    while len(take) < min(batch, m):
        if state.order is None or state.cursor >= m:
            state.order = state.rng.permutation(m)
            state.cursor = 0
        need = min(batch, m) - len(take)
        chunk = state.order[state.cursor:state.cursor + need]
        state.cursor += len(chunk)
        take.extend(int(i) for i in chunk)
    return np.sort(np.asarray(take))


def train(counts, patterns, arch: PvaeArch, cfg: OpticalConfig, hyper: TrainHyper,
          state: TrainState | None = None, progress=None, checkpoint=None) -> TrainState:
    """Minibatch ELBO training over the object axis of ``counts`` (m, n, N, N).

    Runs until ``hyper.steps`` total steps; passing a restored ``state``
    resumes exactly.  ``checkpoint(state)`` is called every
    ``hyper.checkpoint_every`` steps and before a numeric abort.
    """
    counts = np.asarray(counts)
    patterns = np.asarray(patterns)
    m = counts.shape[0]
    if m < 1:
        raise ConfigError("training needs at least one object")
    state = state or new_state(arch, cfg, hyper)
    model, opt = state.model, state.opt
    while state.step < hyper.steps:
        idx = _next_batch(state, m, hyper.batch)
        loss = model.elbo(counts[idx], patterns[idx], state.rng, beta=hyper.beta)
        value = float(loss.total.data)
        if not math.isfinite(value):
            if checkpoint is not None:
                checkpoint(state)
            raise NumericError(f"non-finite P-VAE loss at step {state.step}")
        opt.zero_grad()
        loss.total.backward()
        if hyper.grad_clip > 0:
            clip_grad_norm(model.params, hyper.grad_clip)
        opt.step()
        state.curve.append((value, float(loss.nll.data), float(loss.kl.data)))
        state.step += 1
        if progress is not None:
            progress(state.step, value)
        if checkpoint is not None and hyper.checkpoint_every and state.step % hyper.checkpoint_every == 0:
            checkpoint(state)
    return state


# ---------------------------------------------------------------------------
# inference


def sample_posterior(model: Pvae, counts, patterns, samples: int, rng=None,
                     zero_noise: bool = False, batch: int = 16, logvar_shift: float = 0.0) -> dict:
    """Draw ``samples`` objects per measurement stack from Q(z|M) then the decoder.

    Returns samples (S, b, slices, N, N) plus pixelwise mean/std of amplitude
    and phase (phase taken from the unwrapped decoder channel) and the complex
    mean used as the point estimate.  ``logvar_shift`` adds a constant to every
    log-variance (used to probe how spread follows posterior width).
    """
    counts = np.asarray(counts)
    patterns = np.asarray(patterns)
    m = counts.shape[0]
    rng = rng if rng is not None else np.random.default_rng(0)
    amp_all, phase_all = [], []
    for start in range(0, m, batch):
        sl = slice(start, min(start + batch, m))
        lat = model.posterior(counts[sl], patterns[sl])
        if logvar_shift:
            lat = GaussianLatent(lat.mu, [ad.tensor(lv.data + logvar_shift) for lv in lat.logvar])
        amps, phases = [], []
        for _ in range(samples):
            out = model.decode_channels(reparameterize(lat, rng, zero_noise)).data
            amps.append(np.exp(out[:, 0::2].astype(np.float64)))
            phases.append(out[:, 1::2].astype(np.float64))
        amp_all.append(np.stack(amps))
        phase_all.append(np.stack(phases))
    amp = np.concatenate(amp_all, axis=1)
    phase = np.concatenate(phase_all, axis=1)
    objs = amp * np.exp(1j * phase)
    return {
        "samples": objs,
        "mean_amp": amp.mean(axis=0),
        "std_amp": amp.std(axis=0),
        "mean_phase": phase.mean(axis=0),
        "std_phase": phase.std(axis=0),
        "mean": objs.mean(axis=0),
    }


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, state: TrainState, hyper: TrainHyper) -> None:
    """Weights, Adam moments, step, batch order and rng state in one container."""
    model = state.model
    rng_json = json.dumps(state.rng.bit_generator.state, sort_keys=True).encode("utf-8")
    arrays = {**model.weight_arrays(), **state.opt.state_arrays(),
              "step": np.array(state.step, dtype=np.int64),
              "rng_state": np.frombuffer(rng_json, dtype=np.uint8),
              "batch_order": np.asarray(state.order if state.order is not None else [], dtype=np.int64),
              "loss_curve": np.asarray(state.curve, dtype=np.float64).reshape(-1, 3)}
    header = {"kind": "checkpoint", "arch": model.arch.to_dict(), "hyper": hyper.to_dict(),
              "config": model.cfg.to_dict(), "batch_cursor": state.cursor}
    write_container(path, header, arrays)


def load_checkpoint(path):
    """Restore (state, arch, hyper, cfg) so that ``train`` resumes bit-exactly."""
    c = read_container(path)
    if c.header.get("kind") != "checkpoint":
        raise DataError(f"{path}: container is not a checkpoint")
    arch = PvaeArch(**c.header["arch"])
    hyper_d = dict(c.header["hyper"])
    hyper_d.pop("optimizer", None)
    hyper = TrainHyper(**hyper_d)
    cfg = OpticalConfig.from_dict(c.header["config"])
    state = new_state(arch, cfg, hyper)
    arrays = c.load_all()
    state.model.load_weight_arrays(arrays)
    step = int(arrays["step"])
    state.opt.load_state_arrays(arrays, step)
    state.step = step
    state.rng.bit_generator.state = json.loads(arrays["rng_state"].tobytes().decode("utf-8"))
    order = arrays["batch_order"]
    state.order = order if order.size else None
    state.cursor = int(c.header["batch_cursor"])
    state.curve = [tuple(r) for r in arrays["loss_curve"].tolist()]
    return state, arch, hyper, cfg
