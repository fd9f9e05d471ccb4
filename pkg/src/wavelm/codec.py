"""Convolutional encoder, EMA vector-quantization bottleneck, and decoder.

The encoder downsamples a waveform by a fixed hop (product of per-stage
strides) into latent rows; each row is snapped to its nearest codeword and
the decoder maps the quantized rows back to audio. Codewords are maintained
as exponential moving averages of their assigned latents instead of by
gradient descent; the encoder trains through a straight-through estimator
plus a commitment penalty.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .checkpoint import CODEC_MAGIC, config_digest, load_checkpoint, save_checkpoint
from .dsp import DatasetManifest, Waveform, read_wav
from .optim import Adam, inverse_sqrt_lr
from .seeding import stage_rng
from .tensor import Tensor

# per-R stride plans covering the 2/4/8 ms grid at 16 kHz
GRID_STRIDES = {2: (2, 2, 2, 4), 4: (2, 4, 4, 2), 8: (4, 4, 4, 2)}
GRID_R_MS = (2, 4, 8)
GRID_CODEBOOK_SIZES = (512, 1024, 2048)

STFT_LOSS_RESOLUTIONS = ((256, 64), (512, 128), (1024, 256))
LOG_STFT_EPS = 1e-5


class CodecError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass(frozen=True)
class CodecConfig:
    stride_factors: tuple = (4, 4, 4, 2)
    base_channels: int = 32
    latent_dim: int = 64
    codebook_size: int = 1024
    residual_blocks: int = 1
    ema_decay: float = 0.99
    commitment_beta: float = 0.25
    dead_code_steps: int = 200
    loss_time_weight: float = 1.0
    loss_freq_weight: float = 1.0
    sample_rate: int = 16000

    def __post_init__(self):
        if not self.stride_factors or any(s < 1 for s in self.stride_factors):
            raise CodecError(f"bad stride_factors {self.stride_factors}")
        if self.codebook_size < 1:
            raise CodecError("codebook_size must be positive")

    @property
    def r_samples(self) -> int:
        return int(np.prod(self.stride_factors))

    @property
    def r_ms(self) -> float:
        return self.r_samples * 1000.0 / self.sample_rate

    def digest(self) -> str:
        return config_digest(asdict(self))


def grid_config(r_ms: int, codebook_size: int, **overrides) -> CodecConfig:
    """Config for one cell of the resolution x vocabulary grid."""
    if r_ms not in GRID_STRIDES:
        raise CodecError(f"r_ms must be one of {sorted(GRID_STRIDES)}, got {r_ms}")
    return CodecConfig(stride_factors=GRID_STRIDES[r_ms],
                       codebook_size=codebook_size, **overrides)


@dataclass
class TokenSequence:
    """Discrete unit ids for one clip, one id per hop of r_samples."""

    tokens: np.ndarray
    r_samples: int
    source_t: int
    k: int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.ndim != 1:
            raise CodecError("tokens must be 1-d")
        expected = -(-self.source_t // self.r_samples)  # ceil(T / R)
        if len(self.tokens) != expected:
            raise CodecError(
                f"token count {len(self.tokens)} != ceil({self.source_t}/"
                f"{self.r_samples}) = {expected}")
        if self.tokens.size and (self.tokens.min() < 0
                                 or self.tokens.max() >= self.k):
            raise CodecError(f"token outside [0, {self.k})")

    def __len__(self):
        return len(self.tokens)


class Codebook:
    """K x d embedding table with EMA accumulators and usage counters.

    Invariant kept by every update: embeddings[k] equals
    ema_embed_sum[k] / max(ema_cluster_size[k], eps).
    """

    def __init__(self, size: int, dim: int, decay: float = 0.99, eps: float = 1e-5,
                 rng: Optional[np.random.Generator] = None):
        self.size = size
        self.dim = dim
        self.decay = decay
        self.eps = eps
        rng = rng or np.random.default_rng(0)
        self.embeddings = rng.normal(0.0, 1.0 / math.sqrt(dim),
                                     size=(size, dim)).astype(np.float32)
        self.ema_cluster_size = np.ones(size, dtype=np.float32)
        self.ema_embed_sum = self.embeddings.copy()
        self.steps_since_use = np.zeros(size, dtype=np.int64)

    def nearest(self, latents: np.ndarray) -> np.ndarray:
        """Nearest codeword per row (squared distance, lowest index on ties)."""
        z = np.asarray(latents, dtype=np.float32)
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise CodecError(f"latents must be [n, {self.dim}], got {z.shape}")
        if not np.all(np.isfinite(z)):
            raise CodecError("NaN or inf in latents")
        e = self.embeddings
        d2 = ((z * z).sum(axis=1, keepdims=True)
              - 2.0 * (z @ e.T)
              + (e * e).sum(axis=1)[None, :])
        return np.argmin(d2, axis=1)

    def lookup(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.size):
            raise CodecError(f"token {int(ids.max())} >= K={self.size}")
        return self.embeddings[ids]

    def ema_update(self, latents: np.ndarray, assignments: np.ndarray):
        z = np.asarray(latents, dtype=np.float32)
        ids = np.asarray(assignments, dtype=np.int64)
        counts = np.bincount(ids, minlength=self.size).astype(np.float32)
        sums = np.zeros_like(self.ema_embed_sum)
        np.add.at(sums, ids, z)
        g = self.decay
        self.ema_cluster_size = g * self.ema_cluster_size + (1.0 - g) * counts
        self.ema_embed_sum = g * self.ema_embed_sum + (1.0 - g) * sums
        self.embeddings = (self.ema_embed_sum
                           / np.maximum(self.ema_cluster_size, self.eps)[:, None])
        used = counts > 0
        self.steps_since_use[used] = 0
        self.steps_since_use[~used] += 1

    def init_from_data(self, latents: np.ndarray, rng: np.random.Generator):
        """Seed codewords from observed latent rows (plus jitter for ties)."""
        z = np.asarray(latents, dtype=np.float32)
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise CodecError(f"latents must be [n, {self.dim}], got {z.shape}")
        picks = rng.integers(0, len(z), size=self.size)
        jitter = rng.normal(0.0, 0.01 * max(float(z.std()), 1e-3),
                            size=(self.size, self.dim)).astype(np.float32)
        self.embeddings = z[picks] + jitter
        self.ema_cluster_size = np.ones(self.size, dtype=np.float32)
        self.ema_embed_sum = self.embeddings.copy()
        self.steps_since_use = np.zeros(self.size, dtype=np.int64)

    def reinit_dead(self, batch_latents: np.ndarray, threshold: int,
                    rng: np.random.Generator) -> int:
        """Reset codes unused for `threshold` updates to random batch latents."""
        dead = np.where(self.steps_since_use >= threshold)[0]
        if dead.size == 0 or len(batch_latents) == 0:
            return 0
        z = np.asarray(batch_latents, dtype=np.float32)
        picks = rng.choice(len(z), size=dead.size, replace=len(z) < dead.size)
        chosen = z[picks] + rng.normal(
            0.0, 0.01 * max(float(z.std()), 1e-3),
            size=(dead.size, self.dim)).astype(np.float32)
        self.embeddings[dead] = chosen
        self.ema_embed_sum[dead] = chosen
        self.ema_cluster_size[dead] = 1.0
        self.steps_since_use[dead] = 0
        return int(dead.size)

    def invariant_holds(self, atol: float = 1e-6) -> bool:
        expected = self.ema_embed_sum / np.maximum(self.ema_cluster_size,
                                                   self.eps)[:, None]
        return bool(np.allclose(self.embeddings, expected, atol=atol))


def quantize(latents: Union[Tensor, np.ndarray], codebook: Codebook,
             beta: float = 0.25):
    """Snap latent rows to codewords.

    Tensor input: returns (ids, straight-through quantized Tensor, commitment
    loss Tensor beta * mean((z - sg(e))^2)). Array input: plain (ids,
    quantized rows, commitment value).
    """
    if isinstance(latents, Tensor):
        z = latents.data
        ids = codebook.nearest(z)
        e = codebook.lookup(ids)
        jump = Tensor(e - z, dtype=z.dtype)  # constant: gradient skips the snap
        q = T.add(latents, jump)
        diff = T.sub(latents, Tensor(e, dtype=z.dtype))
        commit = T.scale(T.mean_all(T.mul(diff, diff)), beta)
        return ids, q, commit
    z = np.asarray(latents, dtype=np.float32)
    ids = codebook.nearest(z)
    e = codebook.lookup(ids)
    commit = beta * float(((z - e) ** 2).mean())
    return ids, e, commit


def ema_update(codebook: Codebook, batch_latents, assignments):
    codebook.ema_update(batch_latents, assignments)


# ---------------------------------------------------------------------------
# network

def stage_widths(cfg: CodecConfig) -> list:
    b = cfg.base_channels
    return [min(b * 2 ** i, 4 * b) for i in range(len(cfg.stride_factors) + 1)]


def _conv_init(rng, c_out, c_in, k):
    std = 1.0 / math.sqrt(c_in * k)
    return rng.normal(0.0, std, size=(c_out, c_in, k)).astype(np.float32)


def init_codec_params(cfg: CodecConfig, rng: np.random.Generator) -> dict:
    widths = stage_widths(cfg)
    p: dict[str, Tensor] = {}

    def par(name, arr):
        p[name] = Tensor(arr, requires_grad=True, name=name)

    def res_stack(prefix, c):
        for j in range(cfg.residual_blocks):
            par(f"{prefix}.r{j}.c1.w", _conv_init(rng, c, c, 3))
            par(f"{prefix}.r{j}.c1.b", np.zeros((c, 1), dtype=np.float32))
            par(f"{prefix}.r{j}.c2.w", _conv_init(rng, c, c, 1))
            par(f"{prefix}.r{j}.c2.b", np.zeros((c, 1), dtype=np.float32))

    def norm(prefix, c):
        par(f"{prefix}.ln.g", np.ones(c, dtype=np.float32))
        par(f"{prefix}.ln.b", np.zeros(c, dtype=np.float32))

    par("enc.in.w", _conv_init(rng, widths[0], 1, 7))
    par("enc.in.b", np.zeros((widths[0], 1), dtype=np.float32))
    norm("enc.in", widths[0])
    for i, s in enumerate(cfg.stride_factors):
        res_stack(f"enc.s{i}", widths[i])
        par(f"enc.s{i}.down.w", _conv_init(rng, widths[i + 1], widths[i], 2 * s))
        par(f"enc.s{i}.down.b", np.zeros((widths[i + 1], 1), dtype=np.float32))
        norm(f"enc.s{i}.down", widths[i + 1])
    par("enc.out.w", _conv_init(rng, cfg.latent_dim, widths[-1], 7))
    par("enc.out.b", np.zeros((cfg.latent_dim, 1), dtype=np.float32))

    par("dec.in.w", _conv_init(rng, widths[-1], cfg.latent_dim, 7))
    par("dec.in.b", np.zeros((widths[-1], 1), dtype=np.float32))
    norm("dec.in", widths[-1])
    for i in reversed(range(len(cfg.stride_factors))):
        s = cfg.stride_factors[i]
        # transposed kernels are laid out [c_in, c_out, k]
        std = 1.0 / math.sqrt(widths[i + 1] * 2 * s)
        par(f"dec.s{i}.up.w",
            rng.normal(0.0, std, size=(widths[i + 1], widths[i], 2 * s))
            .astype(np.float32))
        par(f"dec.s{i}.up.b", np.zeros((widths[i], 1), dtype=np.float32))
        norm(f"dec.s{i}.up", widths[i])
        res_stack(f"dec.s{i}", widths[i])
    par("dec.out.w", _conv_init(rng, 1, widths[0], 7))
    par("dec.out.b", np.zeros((1, 1), dtype=np.float32))
    return p


def _res_block(x, p, prefix):
    h = T.conv1d(x, p[f"{prefix}.c1.w"], stride=1, pad=1)
    h = T.add(h, p[f"{prefix}.c1.b"])
    h = T.gelu(h)
    h = T.conv1d(h, p[f"{prefix}.c2.w"], stride=1, pad=0)
    h = T.add(h, p[f"{prefix}.c2.b"])
    return T.add(x, h)


def _channel_norm(x, p, prefix):
    # layernorm over channels of a [batch, channels, time] activation
    h = T.transpose(x, (0, 2, 1))
    h = T.layernorm(h, p[f"{prefix}.ln.g"], p[f"{prefix}.ln.b"])
    return T.transpose(h, (0, 2, 1))


class Codec:
    """Config + parameters + codebook; the full compression model."""

    def __init__(self, cfg: CodecConfig, params: dict, codebook: Codebook):
        self.cfg = cfg
        self.params = params
        self.codebook = codebook

    @classmethod
    def create(cls, cfg: CodecConfig, seed: int = 0) -> "Codec":
        rng = stage_rng(seed, "codec/init")
        params = init_codec_params(cfg, rng)
        codebook = Codebook(cfg.codebook_size, cfg.latent_dim,
                            decay=cfg.ema_decay,
                            rng=stage_rng(seed, "codec/codebook"))
        return cls(cfg, params, codebook)

    def encode_tensor(self, x: Tensor) -> Tensor:
        """[batch, time] -> [batch, frames, latent_dim]; time must be a
        multiple of r_samples."""
        cfg, p = self.cfg, self.params
        b, t = x.shape
        if t % cfg.r_samples != 0:
            raise CodecError(f"time axis {t} not a multiple of hop {cfg.r_samples}")
        h = T.reshape(x, (b, 1, t))
        h = T.gelu(T.add(T.conv1d(h, p["enc.in.w"], 1, 3), p["enc.in.b"]))
        h = _channel_norm(h, p, "enc.in")
        for i, s in enumerate(cfg.stride_factors):
            for j in range(cfg.residual_blocks):
                h = _res_block(h, p, f"enc.s{i}.r{j}")
            h = T.conv1d(h, p[f"enc.s{i}.down.w"], stride=s, pad=s // 2)
            h = T.gelu(T.add(h, p[f"enc.s{i}.down.b"]))
            h = _channel_norm(h, p, f"enc.s{i}.down")
        h = T.add(T.conv1d(h, p["enc.out.w"], 1, 3), p["enc.out.b"])
        return T.transpose(h, (0, 2, 1))

    def decode_tensor(self, q: Tensor) -> Tensor:
        """[batch, frames, latent_dim] -> [batch, frames * r_samples]."""
        cfg, p = self.cfg, self.params
        b, n_frames, _ = q.shape
        h = T.transpose(q, (0, 2, 1))
        h = T.gelu(T.add(T.conv1d(h, p["dec.in.w"], 1, 3), p["dec.in.b"]))
        h = _channel_norm(h, p, "dec.in")
        for i in reversed(range(len(cfg.stride_factors))):
            s = cfg.stride_factors[i]
            h = T.conv_transpose1d(h, p[f"dec.s{i}.up.w"], stride=s, pad=s // 2)
            h = T.gelu(T.add(h, p[f"dec.s{i}.up.b"]))
            h = _channel_norm(h, p, f"dec.s{i}.up")
            for j in range(cfg.residual_blocks):
                h = _res_block(h, p, f"dec.s{i}.r{j}")
        h = T.add(T.conv1d(h, p["dec.out.w"], 1, 3), p["dec.out.b"])
        return T.reshape(h, (b, n_frames * cfg.r_samples))

    def save(self, path, extra_meta: Optional[dict] = None):
        blobs = {name: t.data for name, t in self.params.items()}
        blobs["codebook.embeddings"] = self.codebook.embeddings
        blobs["codebook.ema_cluster_size"] = self.codebook.ema_cluster_size
        blobs["codebook.ema_embed_sum"] = self.codebook.ema_embed_sum
        meta = {"kind": "codec"}
        if extra_meta:
            meta.update(extra_meta)
        save_checkpoint(path, CODEC_MAGIC, asdict(self.cfg), blobs, meta)

    @classmethod
    def load(cls, path) -> "Codec":
        digest, blobs, meta = load_checkpoint(path, CODEC_MAGIC)
        raw_cfg = dict(meta["config"])
        raw_cfg["stride_factors"] = tuple(raw_cfg["stride_factors"])
        cfg = CodecConfig(**raw_cfg)
        codebook = Codebook(cfg.codebook_size, cfg.latent_dim, decay=cfg.ema_decay)
        codebook.embeddings = blobs.pop("codebook.embeddings").copy()
        codebook.ema_cluster_size = blobs.pop("codebook.ema_cluster_size").copy()
        codebook.ema_embed_sum = blobs.pop("codebook.ema_embed_sum").copy()
        params = {name: Tensor(arr, requires_grad=True, name=name)
                  for name, arr in blobs.items()}
        return cls(cfg, params, codebook)

    def digest(self) -> str:
        return self.cfg.digest()


def pad_to_hop(samples: np.ndarray, r_samples: int) -> np.ndarray:
    """Right-pad with zeros to a whole number of hops."""
    t = len(samples)
    if t == 0:
        raise CodecError("empty waveform")
    rem = t % r_samples
    if rem == 0:
        return np.asarray(samples, dtype=np.float32)
    return np.pad(np.asarray(samples, dtype=np.float32), (0, r_samples - rem))


def encode(w: Waveform, codec: Codec) -> np.ndarray:
    """Latent rows [frames, latent_dim] for one waveform (inference path)."""
    padded = pad_to_hop(w.samples, codec.cfg.r_samples)
    with T.no_grad():
        lat = codec.encode_tensor(Tensor(padded[None, :]))
    return lat.data[0]


def decode(q, codec: Codec) -> Waveform:
    """Waveform from latent rows, token ids, or a TokenSequence.

    Output has frames * r_samples samples and is clipped to [-1, 1]; this is
    the inference path, training reads the raw decoder output.
    """
    if isinstance(q, TokenSequence):
        q = codec.codebook.lookup(q.tokens)
    else:
        q = np.asarray(q)
        if q.ndim == 1 or np.issubdtype(q.dtype, np.integer):
            q = codec.codebook.lookup(q.astype(np.int64))
    if q.ndim != 2 or q.shape[0] < 1:
        raise CodecError(f"decode input must be [frames, dim], got {q.shape}")
    with T.no_grad():
        out = codec.decode_tensor(Tensor(q[None, :, :].astype(np.float32)))
    return Waveform(np.clip(out.data[0], -1.0, 1.0), codec.cfg.sample_rate)


def tokenize_waveform(w: Waveform, codec: Codec) -> TokenSequence:
    latents = encode(w, codec)
    ids, _, _ = quantize(latents, codec.codebook, codec.cfg.commitment_beta)
    return TokenSequence(ids, codec.cfg.r_samples, len(w), codec.cfg.codebook_size)


def reconstruct(w: Waveform, codec: Codec) -> Waveform:
    """encode -> quantize -> decode, truncated back to the source length."""
    seq = tokenize_waveform(w, codec)
    out = decode(seq, codec)
    return Waveform(out.samples[: len(w)], w.sample_rate)


# ---------------------------------------------------------------------------
# loss

_windows: dict = {}


def _hann_const(n: int) -> Tensor:
    if n not in _windows:
        win = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
        _windows[n] = Tensor(win.astype(np.float32))
    return _windows[n]


def _magnitudes(x: Tensor, fft_size: int, hop: int) -> Tensor:
    frames = T.frame(x, fft_size, hop)
    return T.stft_mag(T.mul(frames, _hann_const(fft_size)))


def codec_loss(x, x_hat: Tensor, commit=None, cfg: Optional[CodecConfig] = None):
    """Weighted L1 + multi-resolution spectral loss + commitment.

    Returns (total loss Tensor, per-component float report). x may be a
    plain array; x_hat carries the gradient.
    """
    cfg = cfg or CodecConfig()
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
    if x.shape != x_hat.shape:
        raise CodecError(f"length mismatch after padding: {x.shape} vs {x_hat.shape}")
    l1 = T.l1_distance(x_hat, x)
    sc_total = None
    logmag_total = None
    for fft_size, hop in STFT_LOSS_RESOLUTIONS:
        mag_hat = _magnitudes(x_hat, fft_size, hop)
        mag_ref = _magnitudes(x, fft_size, hop)
        diff = T.sub(mag_hat, mag_ref)
        ref_norm = float(np.sqrt((mag_ref.data.astype(np.float64) ** 2).sum()))
        sc = T.scale(T.sqrt(T.sum_all(T.mul(diff, diff))),
                     1.0 / max(ref_norm, 1e-8))
        lm = T.l1_distance(T.log(mag_hat, eps=LOG_STFT_EPS),
                           T.log(mag_ref, eps=LOG_STFT_EPS))
        sc_total = sc if sc_total is None else T.add(sc_total, sc)
        logmag_total = lm if logmag_total is None else T.add(logmag_total, lm)
    total = T.add(T.scale(l1, cfg.loss_time_weight),
                  T.scale(T.add(sc_total, logmag_total), cfg.loss_freq_weight))
    components = {
        "l1": l1.item(),
        "stft_sc": sc_total.item(),
        "stft_logmag": logmag_total.item(),
        "commit": 0.0,
    }
    if commit is not None:
        if not isinstance(commit, Tensor):
            commit = Tensor(np.asarray(commit, dtype=np.float32))
        total = T.add(total, commit)
        components["commit"] = commit.item()
    components["total"] = total.item()
    return total, components


# ---------------------------------------------------------------------------
# training

@dataclass
class CodecTrainConfig:
    steps: int = 500
    batch_size: int = 8
    crop_samples: int = 4096
    lr: float = 3e-4
    warmup_steps: int = 0
    log_every: int = 50
    snapshot_every: int = 50
    smooth_window: int = 50


@dataclass
class CodecTrainResult:
    codec: Codec
    checkpoint_path: Optional[str]
    loss_history: list = field(default_factory=list)
    steps_per_epoch: int = 1
    final_epoch_code_usage: float = 0.0

    def smoothed(self, window: Optional[int] = None):
        """(initial, final) moving-average total loss."""
        totals = [h["total"] for h in self.loss_history]
        w = min(window or len(totals), len(totals))
        return float(np.mean(totals[:w])), float(np.mean(totals[-w:]))


def _load_train_clips(manifest: DatasetManifest) -> list:
    entries = manifest.split("train")
    if not entries:
        raise CodecError("manifest has no train split")
    return [read_wav(e.path).samples for e in entries]


def train_codec(manifest: DatasetManifest, cfg: CodecConfig,
                train_cfg: CodecTrainConfig, seed: int,
                out_path=None) -> CodecTrainResult:
    """Train on random crops of the manifest's train split.

    Deterministic for a fixed seed. On a non-finite loss the last snapshot is
    persisted (when out_path is given) and TrainingDiverged is raised.
    """
    clips = _load_train_clips(manifest)
    codec = Codec.create(cfg, seed)
    batch_rng = stage_rng(seed, "codec/batches")
    dead_rng = stage_rng(seed, "codec/deadcode")
    opt = Adam([codec.params[k] for k in sorted(codec.params)], lr=train_cfg.lr)

    crop = train_cfg.crop_samples
    if crop % cfg.r_samples != 0:
        crop += cfg.r_samples - crop % cfg.r_samples
    history = []
    snapshot = None
    steps_per_epoch = max(1, math.ceil(len(clips) / train_cfg.batch_size))

    def draw_batch():
        batch = np.zeros((train_cfg.batch_size, crop), dtype=np.float32)
        idx = batch_rng.integers(0, len(clips), size=train_cfg.batch_size)
        for row, ci in enumerate(idx):
            clip = clips[ci]
            if len(clip) <= crop:
                batch[row, :len(clip)] = clip
            else:
                off = int(batch_rng.integers(0, len(clip) - crop + 1))
                batch[row] = clip[off:off + crop]
        return batch

    # seed the codebook from real encoder outputs so early assignments spread
    with T.no_grad():
        warm = codec.encode_tensor(Tensor(draw_batch()))
    codec.codebook.init_from_data(
        warm.data.reshape(-1, cfg.latent_dim), stage_rng(seed, "codec/cb-init"))

    for step in range(1, train_cfg.steps + 1):
        x = Tensor(draw_batch())
        latents = codec.encode_tensor(x)
        b, n_frames, d = latents.shape
        flat = T.reshape(latents, (b * n_frames, d))
        ids, q, commit = quantize(flat, codec.codebook, cfg.commitment_beta)
        x_hat = codec.decode_tensor(T.reshape(q, (b, n_frames, d)))
        loss, components = codec_loss(x, x_hat, commit, cfg)

        if not math.isfinite(components["total"]):
            T.reset_graph()
            path = None
            if out_path is not None and snapshot is not None:
                snapshot.save(out_path, {"train_steps": step - 1, "aborted": True})
                path = str(out_path)
            raise TrainingDiverged(
                f"loss became non-finite at step {step}", checkpoint_path=path)

        T.backward(loss)
        opt.lr = inverse_sqrt_lr(step, train_cfg.lr, train_cfg.warmup_steps)
        opt.step()
        codec.codebook.ema_update(flat.data, ids)
        codec.codebook.reinit_dead(flat.data, cfg.dead_code_steps, dead_rng)

        components["step"] = step
        components["lr"] = opt.lr
        components["codes_used"] = np.unique(ids)
        history.append(components)

        if step % train_cfg.snapshot_every == 0 or step == train_cfg.steps:
            snapshot = Codec(cfg, {k: Tensor(t.data.copy(), requires_grad=True,
                                             name=k)
                                   for k, t in codec.params.items()},
                             _copy_codebook(codec.codebook))

    last_epoch = history[-steps_per_epoch:]
    used = np.unique(np.concatenate([h["codes_used"] for h in last_epoch]))
    usage = used.size / cfg.codebook_size
    for h in history:
        h["codes_used"] = int(h["codes_used"].size)

    path = None
    if out_path is not None:
        codec.save(out_path, {"train_steps": train_cfg.steps, "seed": seed,
                              "final_epoch_code_usage": usage})
        path = str(out_path)
    return CodecTrainResult(codec, path, history, steps_per_epoch, usage)


def _copy_codebook(cb: Codebook) -> Codebook:
    out = Codebook(cb.size, cb.dim, decay=cb.decay, eps=cb.eps)
    out.embeddings = cb.embeddings.copy()
    out.ema_cluster_size = cb.ema_cluster_size.copy()
    out.ema_embed_sum = cb.ema_embed_sum.copy()
    out.steps_since_use = cb.steps_since_use.copy()
    return out
