"""Evaluation metrics: Frechet distance, recognition accuracy, and the
overall / per-action diversity of synthetic-vs-real feature pairs.

Features come from our own classifier's pooled embedding (trained on real
data), standing in for the pretrained recognizer used by prior work.
Comparisons against published absolute numbers are therefore directional.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .models import ClassifierBundle, encode_dataset

COV_EIG_CLIP = -1e-10   # eigenvalues above this are treated as rounding noise
COV_EIG_ERROR = -1e-6   # below this the covariance is considered invalid


@dataclass
class FeatureStats:
    """Gaussian moments of a feature set: mean vector + covariance matrix."""

    mean: np.ndarray
    cov: np.ndarray
    n: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        d = self.mean.shape[0]
        if self.cov.shape != (d, d):
            raise ValueError(f"cov shape {self.cov.shape} does not match mean dim {d}")
        if self.n < 2:
            raise ValueError(f"need n >= 2 samples, got {self.n}")
        if not np.allclose(self.cov, self.cov.T, atol=1e-12):
            raise ValueError("covariance must be symmetric to 1e-12")


@dataclass
class FeatureSet:
    features: np.ndarray  # (n, d)
    labels: np.ndarray    # (n,)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise ValueError(
                f"features {self.features.shape} do not match labels {self.labels.shape}"
            )

    def __len__(self) -> int:
        return self.features.shape[0]


def extract_features(bundle: ClassifierBundle, ds: Dataset, chunk: int = 256) -> FeatureSet:
    """Pooled pre-head embeddings of every encoded item, deterministic."""
    if not ds.items:
        raise ValueError("cannot extract features from an empty dataset")
    if ds.num_classes != bundle.num_classes:
        raise ValueError(
            f"dataset has {ds.num_classes} classes, extractor was trained with {bundle.num_classes}"
        )
    if ds.num_joints != bundle.num_joints:
        raise ValueError(
            f"dataset has {ds.num_joints} joints, extractor was trained with {bundle.num_joints}"
        )
    images, labels = encode_dataset(ds, bundle.norm)
    feats = []
    with ad.no_grad():
        for start in range(0, images.shape[0], chunk):
            pooled, _ = bundle.model.features_and_logits(images[start : start + chunk])
            feats.append(pooled.data)
    return FeatureSet(np.concatenate(feats, axis=0), labels)


def fit_stats(fs: FeatureSet) -> FeatureStats:
    """Sample mean and unbiased (n-1) covariance, symmetrized."""
    n = len(fs)
    if n < 2:
        raise ValueError(f"need at least 2 samples to fit stats, got {n}")
    mean = fs.features.mean(axis=0)
    centered = fs.features - mean
    cov = centered.T @ centered / (n - 1)
    cov = (cov + cov.T) / 2.0
    return FeatureStats(mean, cov, n)


def _psd_sqrt(cov: np.ndarray, context: str) -> np.ndarray:
    eigvals, eigvecs = np.linalg.eigh(cov)
    if np.any(eigvals < COV_EIG_ERROR):
        raise ValueError(f"{context}: eigenvalue {eigvals.min():.3e} below {COV_EIG_ERROR}; invalid covariance")
    eigvals = np.clip(eigvals, 0.0, None)
    return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T


def fid(a: FeatureStats, b: FeatureStats) -> float:
    """Frechet distance between Gaussian fits:
    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The cross term uses the symmetric product (S_a^(1/2) S_b S_a^(1/2))^(1/2),
    stable for PSD inputs; tiny negative eigenvalues are clipped.
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"feature dims differ: {a.mean.shape[0]} vs {b.mean.shape[0]}")
    sqrt_a = _psd_sqrt(a.cov, "fid: first covariance")
    inner = sqrt_a @ b.cov @ sqrt_a
    inner = (inner + inner.T) / 2.0
    eigvals = np.linalg.eigvalsh(inner)
    if np.any(eigvals < COV_EIG_ERROR):
        raise ValueError(f"fid: cross-term eigenvalue {eigvals.min():.3e} below {COV_EIG_ERROR}")
    trace_sqrt = float(np.sqrt(np.clip(eigvals, 0.0, None)).sum())
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * trace_sqrt)
    if value < -1e-8:
        raise ValueError(f"fid came out {value:.3e} < -1e-8; invalid inputs")
    return max(value, 0.0)


def recognition_accuracy(bundle: ClassifierBundle, ds: Dataset, chunk: int = 256) -> float:
    """Fraction of argmax-correct predictions; ties break toward the lowest class."""
    if not ds.items:
        raise ValueError("cannot evaluate accuracy on an empty dataset")
    images, labels = encode_dataset(ds, bundle.norm)
    correct = 0
    for start in range(0, images.shape[0], chunk):
        logits = bundle.model(images[start : start + chunk])
        correct += int(np.sum(np.argmax(logits, axis=1) == labels[start : start + chunk]))
    return correct / images.shape[0]


def _pair_distance_mean(a: np.ndarray, b: np.ndarray, n_pairs, rng: np.random.Generator | None) -> float:
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("diversity needs non-empty feature sets")
    if n_pairs is None:
        # exhaustive all-pairs mean, the testing oracle mode
        sq = (
            (a * a).sum(axis=1)[:, None]
            + (b * b).sum(axis=1)[None, :]
            - 2.0 * a @ b.T
        )
        return float(np.sqrt(np.clip(sq, 0.0, None)).mean())
    ia = rng.integers(0, a.shape[0], size=n_pairs)
    ib = rng.integers(0, b.shape[0], size=n_pairs)
    return float(np.linalg.norm(a[ia] - b[ib], axis=1).mean())


def overall_diversity(synth: FeatureSet, real: FeatureSet, n_pairs: int | None = 200, seed: int = 0) -> float:
    """Mean L2 distance over uniformly sampled (synthetic, real) feature pairs.

    n_pairs=None switches to the exhaustive all-pairs mean.
    """
    if synth.features.shape[1] != real.features.shape[1]:
        raise ValueError(
            f"feature dims differ: {synth.features.shape[1]} vs {real.features.shape[1]}"
        )
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xD7))) if n_pairs is not None else None
    return _pair_distance_mean(synth.features, real.features, n_pairs, rng)


def per_action_diversity(
    synth: FeatureSet,
    real: FeatureSet,
    n_pairs_per_class: int | None = 200,
    seed: int = 0,
) -> tuple[np.ndarray, float]:
    """overall_diversity restricted to same-class pairs; returns (per-class vector, unweighted mean)."""
    classes = sorted(set(real.labels.tolist()) | set(synth.labels.tolist()))
    values = []
    for k in classes:
        s_mask = synth.labels == k
        r_mask = real.labels == k
        if not np.any(s_mask):
            raise ValueError(f"class {k} missing from the synthetic feature set")
        if not np.any(r_mask):
            raise ValueError(f"class {k} missing from the real feature set")
        rng = (
            np.random.default_rng(np.random.SeedSequence((seed, 0xD8, int(k))))
            if n_pairs_per_class is not None
            else None
        )
        values.append(
            _pair_distance_mean(synth.features[s_mask], real.features[r_mask], n_pairs_per_class, rng)
        )
    values = np.asarray(values)
    return values, float(values.mean())


def write_metrics_report(path, report: dict) -> None:
    """JSON metric report: {fid, accuracy, overall_diversity, per_action_diversity, config, seeds}."""
    with open(path, "w", encoding="utf-8") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")


def metrics_report_csv(path, report: dict) -> None:
    """Flat CSV mirror of the report for sweep tables."""
    rows = [("fid", report["fid"]), ("accuracy", report["accuracy"]),
            ("overall_diversity", report["overall_diversity"])]
    for k, v in enumerate(report["per_action_diversity"]):
        rows.append((f"per_action_diversity_{k}", v))
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "value"])
        for name, value in rows:
            writer.writerow([name, repr(float(value))])
