"""Waveform I/O, spectral features, and the synthetic clip generator.

WAV handling is a minimal RIFF/WAVE PCM16 parser: mono or stereo (downmixed),
little-endian, any sample rate on read, 16 kHz by convention everywhere else.
The generator replaces a real corpus at desk scale with four clip families
whose structure is known, so downstream metrics can be sanity-checked.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .seeding import stage_rng

SAMPLE_RATE = 16000
PCM_SCALE = 32767.0


class WavError(ValueError):
    """Malformed or unsupported WAV content."""


@dataclass
class Waveform:
    """Mono time-domain signal in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise WavError("waveform must be a nonempty 1-d array")
        if not np.all(np.isfinite(self.samples)):
            raise WavError("waveform contains non-finite samples")
        peak = float(np.abs(self.samples).max())
        if peak > 1.0 + 1e-6:
            raise WavError(f"waveform exceeds [-1, 1] (peak {peak:.4f})")

    def __len__(self):
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


def read_wav(path) -> Waveform:
    """Read a RIFF/WAVE PCM16 file; stereo is downmixed by channel averaging."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        (csize,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8:pos + 8 + csize]
        if cid == b"fmt ":
            if csize < 16:
                raise WavError(f"{path}: malformed fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            if len(body) < csize:
                raise WavError(f"{path}: truncated data chunk")
            data = body
        pos += 8 + csize + (csize & 1)  # chunks are word-aligned
    if fmt is None:
        raise WavError(f"{path}: missing fmt chunk")
    audio_format, channels, sample_rate, _, _, bits = fmt
    if audio_format != 1:
        raise WavError(f"{path}: unsupported codec (format tag {audio_format})")
    if bits != 16:
        raise WavError(f"{path}: unsupported sample width ({bits} bits)")
    if channels not in (1, 2):
        raise WavError(f"{path}: unsupported channel count ({channels})")
    if data is None:
        raise WavError(f"{path}: missing data chunk")
    if len(data) == 0:
        raise WavError(f"{path}: zero-length data chunk")
    pcm = np.frombuffer(data[: len(data) - (len(data) % (2 * channels))], dtype="<i2")
    if pcm.size == 0:
        raise WavError(f"{path}: zero-length data chunk")
    samples = pcm.astype(np.float32) / PCM_SCALE
    if channels == 2:
        samples = samples.reshape(-1, 2).mean(axis=1)
    return Waveform(np.clip(samples, -1.0, 1.0), sample_rate)


def write_wav(path, w: Waveform):
    """Write PCM16 mono little-endian."""
    pcm = np.round(np.clip(w.samples, -1.0, 1.0) * PCM_SCALE).astype("<i2")
    body = pcm.tobytes()
    hdr = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(body), b"WAVE",
        b"fmt ", 16, 1, 1, w.sample_rate, w.sample_rate * 2, 2, 16,
        b"data", len(body))
    Path(path).write_bytes(hdr + body)


# ---------------------------------------------------------------------------
# spectral features

@dataclass
class SpectralFrameSet:
    """Per-frame magnitude spectra; frames laid out [num_frames, num_bins]."""

    frames: np.ndarray
    fft_size: int
    hop: int
    window: str

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_bins(self) -> int:
        return self.frames.shape[1]


def num_stft_frames(t: int, fft_size: int, hop: int) -> int:
    return (t - fft_size) // hop + 1


def _window(kind: str, n: int) -> np.ndarray:
    if kind == "hann":
        return (0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)).astype(np.float64)
    if kind == "rect":
        return np.ones(n, dtype=np.float64)
    raise ValueError(f"unknown window kind {kind!r}")


def stft_magnitude(w: Waveform, fft_size: int, hop: int,
                   window: str = "hann") -> SpectralFrameSet:
    """Magnitude of the windowed DFT per frame, no centering, no padding."""
    if fft_size < 2 or (fft_size & (fft_size - 1)) != 0:
        raise ValueError(f"fft_size must be a power of two, got {fft_size}")
    if not (0 < hop <= fft_size):
        raise ValueError(f"hop must be in (0, fft_size], got {hop}")
    t = len(w)
    if t < fft_size:
        raise ValueError(f"waveform length {t} shorter than fft_size {fft_size}")
    n_frames = num_stft_frames(t, fft_size, hop)
    x = w.samples.astype(np.float64)
    idx = np.arange(n_frames)[:, None] * hop + np.arange(fft_size)[None, :]
    frames = x[idx] * _window(window, fft_size)[None, :]
    mags = np.abs(np.fft.rfft(frames, axis=1))
    return SpectralFrameSet(mags, fft_size, hop, window)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, fft_size: int, sample_rate: int) -> np.ndarray:
    """Triangular filters over [0, sr/2], rows [n_mels, fft_size//2 + 1]."""
    if n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    n_bins = fft_size // 2 + 1
    mel_pts = np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    bin_freqs = np.arange(n_bins) * sample_rate / fft_size
    fb = np.zeros((n_mels, n_bins), dtype=np.float64)
    for i in range(n_mels):
        lo, mid, hi = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        up = (bin_freqs - lo) / max(mid - lo, 1e-9)
        down = (hi - bin_freqs) / max(hi - mid, 1e-9)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
    return fb


LOG_MEL_EPS = 1e-5


def log_mel(w: Waveform, n_mels: int, fft_size: int, hop: int) -> np.ndarray:
    """log(eps + mel-filtered power), rows aligned with stft_magnitude frames."""
    spec = stft_magnitude(w, fft_size, hop, window="hann")
    power = spec.frames ** 2
    fb = mel_filterbank(n_mels, fft_size, w.sample_rate)
    return np.log(LOG_MEL_EPS + power @ fb.T)


# ---------------------------------------------------------------------------
# synthetic dataset

CLIP_KINDS = ("sine_mix", "chirp", "am_noise", "harmonic_decay")


@dataclass
class GeneratorConfig:
    duration_s: float = 1.0
    kinds: tuple = CLIP_KINDS
    peak_range: tuple = (0.3, 0.95)
    eval_every: int = 10  # every k-th clip goes to the eval split
    sample_rate: int = SAMPLE_RATE


@dataclass
class ManifestEntry:
    clip_id: str
    path: str
    duration_s: float
    recipe: str
    split: str


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)

    def __post_init__(self):
        ids = [e.clip_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate clip ids in manifest")

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]

    def save(self, path):
        lines = [json.dumps({
            "id": e.clip_id, "path": e.path, "duration_s": e.duration_s,
            "recipe": e.recipe, "split": e.split}) for e in self.entries]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        entries = []
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            entry = ManifestEntry(rec["id"], rec["path"], rec["duration_s"],
                                  rec["recipe"], rec["split"])
            if not Path(entry.path).exists():
                raise FileNotFoundError(f"manifest references missing file {entry.path}")
            entries.append(entry)
        return cls(entries)


def _sine_mix(rng, t):
    n = int(rng.integers(1, 5))
    y = np.zeros_like(t)
    for _ in range(n):
        f = rng.uniform(80.0, 4000.0)
        y += rng.uniform(0.2, 1.0) * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    return y


def _chirp(rng, t):
    f0 = rng.uniform(100.0, 2000.0)
    f1 = rng.uniform(100.0, 4000.0)
    dur = t[-1] if t[-1] > 0 else 1.0
    phase = 2 * np.pi * (f0 * t + (f1 - f0) * t * t / (2 * dur))
    return np.sin(phase + rng.uniform(0, 2 * np.pi))


def _am_noise(rng, t):
    noise = rng.normal(size=t.size)
    fm = rng.uniform(2.0, 20.0)
    env = 0.5 + 0.5 * np.sin(2 * np.pi * fm * t + rng.uniform(0, 2 * np.pi))
    return noise * env


def _harmonic_decay(rng, t):
    f0 = rng.uniform(100.0, 800.0)
    n_h = int(rng.integers(3, 9))
    tau = rng.uniform(0.2, 1.0)
    y = np.zeros_like(t)
    for h in range(1, n_h + 1):
        y += np.sin(2 * np.pi * f0 * h * t + rng.uniform(0, 2 * np.pi)) / h
    return y * np.exp(-t / tau)


_GENERATORS = {
    "sine_mix": _sine_mix,
    "chirp": _chirp,
    "am_noise": _am_noise,
    "harmonic_decay": _harmonic_decay,
}


def synth_clip(recipe: GeneratorConfig, kind: str, rng) -> Waveform:
    n = int(round(recipe.duration_s * recipe.sample_rate))
    t = np.arange(n, dtype=np.float64) / recipe.sample_rate
    y = _GENERATORS[kind](rng, t)
    peak = float(rng.uniform(*recipe.peak_range))
    y = y * (peak / max(np.abs(y).max(), 1e-12))
    return Waveform(y.astype(np.float32), recipe.sample_rate)


def synth_dataset(recipe: GeneratorConfig, n: int, seed: int,
                  out_dir) -> DatasetManifest:
    """Generate n clips plus a manifest; byte-identical for identical seeds."""
    if n <= 0:
        raise ValueError("n must be positive")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create output directory {out}: {e}") from e
    if not out.is_dir():
        raise OSError(f"output path {out} is not a directory")
    entries = []
    for i in range(n):
        rng = stage_rng(seed, f"synth/{i}")
        kind = str(rng.choice(recipe.kinds))
        w = synth_clip(recipe, kind, rng)
        split = "eval" if (recipe.eval_every > 0 and i % recipe.eval_every == 0) \
            else "train"
        clip_id = f"{kind}-{i:05d}"
        path = out / f"{clip_id}.wav"
        write_wav(path, w)
        entries.append(ManifestEntry(clip_id, str(path), w.duration_s, kind, split))
    manifest = DatasetManifest(entries)
    manifest.save(out / "manifest.jsonl")
    return manifest
