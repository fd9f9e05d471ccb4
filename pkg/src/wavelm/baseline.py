"""Log-mel + k-means tokenizer: the naive discrete representation to compare
against the learned codec at the token level."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .checkpoint import KMEANS_MAGIC, config_digest, load_checkpoint, save_checkpoint
from .codec import TokenSequence
from .dsp import Waveform, log_mel
from .seeding import stage_rng


class BaselineError(ValueError):
    pass


@dataclass(frozen=True)
class BaselineFeatureConfig:
    n_mels: int = 64
    fft_size: int = 512
    hop: int = 160  # 10 ms at 16 kHz
    sample_rate: int = 16000

    @property
    def r_samples(self) -> int:
        return self.hop

    def digest(self) -> str:
        return config_digest(asdict(self))


def features_10ms() -> BaselineFeatureConfig:
    return BaselineFeatureConfig(n_mels=64, fft_size=512, hop=160)


def features_2ms() -> BaselineFeatureConfig:
    # smaller window and hop for the high-resolution variant
    return BaselineFeatureConfig(n_mels=32, fft_size=128, hop=32)


class KMeansModel:
    """Centroids plus the feature standardization fitted with them."""

    def __init__(self, centroids: np.ndarray, feature_mean: np.ndarray,
                 feature_std: np.ndarray, feature_digest: str,
                 inertia_history: Optional[list] = None):
        self.centroids = np.asarray(centroids, dtype=np.float64)
        self.feature_mean = np.asarray(feature_mean, dtype=np.float64)
        self.feature_std = np.asarray(feature_std, dtype=np.float64)
        self.feature_digest = feature_digest
        self.inertia_history = list(inertia_history or [])
        if not np.all(np.isfinite(self.centroids)):
            raise BaselineError("non-finite centroids")

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def standardize(self, features: np.ndarray) -> np.ndarray:
        return (np.asarray(features, dtype=np.float64)
                - self.feature_mean) / self.feature_std

    def save(self, path):
        blobs = {"centroids": self.centroids,
                 "feature_mean": self.feature_mean,
                 "feature_std": self.feature_std,
                 "inertia_history": np.asarray(self.inertia_history)}
        save_checkpoint(path, KMEANS_MAGIC, {"feature_digest": self.feature_digest,
                                             "k": self.k},
                        blobs, {"kind": "kmeans"})

    @classmethod
    def load(cls, path) -> "KMeansModel":
        _, blobs, meta = load_checkpoint(path, KMEANS_MAGIC)
        return cls(blobs["centroids"], blobs["feature_mean"], blobs["feature_std"],
                   meta["config"]["feature_digest"],
                   blobs["inertia_history"].tolist())


def _nearest(points: np.ndarray, centroids: np.ndarray):
    """(labels, squared distances) with lowest-index tie-break."""
    d2 = ((points * points).sum(axis=1, keepdims=True)
          - 2.0 * points @ centroids.T
          + (centroids * centroids).sum(axis=1)[None, :])
    labels = np.argmin(d2, axis=1)
    return labels, np.maximum(d2[np.arange(len(points)), labels], 0.0)


def _kmeans_pp_init(points: np.ndarray, k: int, rng) -> np.ndarray:
    n = len(points)
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[rng.integers(n)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[i] = points[rng.integers(n)]
            continue
        r = rng.random() * total
        centroids[i] = points[np.searchsorted(np.cumsum(d2), r).clip(0, n - 1)]
        d2 = np.minimum(d2, ((points - centroids[i]) ** 2).sum(axis=1))
    return centroids


def kmeans_fit(features: np.ndarray, k: int, max_iters: int = 50,
               seed: int = 0, shift_tol: float = 1e-6,
               standardize: bool = True,
               feature_digest: str = "") -> KMeansModel:
    """k-means++ then Lloyd iterations; empty clusters jump to the farthest point.

    Inertia (sum of squared distances to assigned centroids) is recorded per
    iteration and never increases.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise BaselineError(f"features must be [n, d], got {x.shape}")
    n, d = x.shape
    if n < k:
        raise BaselineError(f"need at least k={k} points, got {n}")
    if standardize:
        mean = x.mean(axis=0)
        std = np.maximum(x.std(axis=0), 1e-8)
    else:
        mean = np.zeros(d)
        std = np.ones(d)
    x = (x - mean) / std

    rng = stage_rng(seed, "kmeans/fit")
    centroids = _kmeans_pp_init(x, k, rng)
    inertia_history = []
    for _ in range(max_iters):
        labels, d2 = _nearest(x, centroids)
        # empty clusters restart at the point farthest from its centroid
        counts = np.bincount(labels, minlength=k)
        for empty in np.where(counts == 0)[0]:
            far = int(np.argmax(d2))
            centroids[empty] = x[far]
            labels[far] = empty
            d2[far] = 0.0
            counts = np.bincount(labels, minlength=k)
        inertia_history.append(float(d2.sum()))
        new_centroids = centroids.copy()
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, x)
        nonzero = counts > 0
        new_centroids[nonzero] = sums[nonzero] / counts[nonzero, None]
        shift = float(np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max())
        centroids = new_centroids
        if shift < shift_tol:
            break
    labels, d2 = _nearest(x, centroids)
    inertia_history.append(float(d2.sum()))
    return KMeansModel(centroids, mean, std, feature_digest, inertia_history)


def kmeans_assign(model: KMeansModel, features: np.ndarray) -> np.ndarray:
    """Nearest-centroid token per feature row (after standardization)."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.centroids.shape[1]:
        raise BaselineError(
            f"features must be [n, {model.centroids.shape[1]}], got {x.shape}")
    labels, _ = _nearest(model.standardize(x), model.centroids)
    return labels


def tokenize_baseline(w: Waveform, feature_cfg: BaselineFeatureConfig,
                      model: KMeansModel) -> TokenSequence:
    """log-mel -> k-means tokens; the hop plays the role of the codec hop."""
    if model.feature_digest and model.feature_digest != feature_cfg.digest():
        raise BaselineError("feature config does not match the fitted model")
    feats = log_mel(w, feature_cfg.n_mels, feature_cfg.fft_size, feature_cfg.hop)
    tokens = kmeans_assign(model, feats)
    return TokenSequence(tokens, feature_cfg.hop,
                         source_t=len(tokens) * feature_cfg.hop, k=model.k)


def fit_baseline(manifest, feature_cfg: BaselineFeatureConfig, k: int,
                 seed: int, max_iters: int = 50) -> KMeansModel:
    """Fit k-means on standardized log-mel frames of the manifest train split."""
    from .dsp import read_wav
    frames = []
    for entry in manifest.split("train"):
        w = read_wav(entry.path)
        frames.append(log_mel(w, feature_cfg.n_mels, feature_cfg.fft_size,
                              feature_cfg.hop))
    if not frames:
        raise BaselineError("manifest has no train split")
    return kmeans_fit(np.concatenate(frames, axis=0), k, max_iters=max_iters,
                      seed=seed, feature_digest=feature_cfg.digest())
