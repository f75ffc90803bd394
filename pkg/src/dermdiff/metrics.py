"""Fidelity (FID), diversity (MS-SSIM), and group fairness measurement."""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dermdiff.neuralcore import SeedStream

# Canonical 5-scale MS-SSIM weights; the 3-scale default uses the frozen
# renormalized triple below.  5 scales switch in automatically at >= 176 px.
MSSSIM_WEIGHTS_5 = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
MSSSIM_WEIGHTS_3 = (0.2096, 0.4659, 0.3245)
_WIN_SIZE = 11
_WIN_SIGMA = 1.5
_C1 = 0.01**2
_C2 = 0.03**2


@dataclass(frozen=True)
class GaussianStats:
    """Feature mean, covariance and sample count: the FID operand."""

    mean: np.ndarray
    cov: np.ndarray
    n: int


def fit_gaussian(features) -> GaussianStats:
    """Sample mean and unbiased (n-1) covariance, symmetrized."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"features must be (n, dim), got shape {x.shape}")
    n = x.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 feature vectors, got {n}")
    mean = x.mean(axis=0)
    centered = x - mean
    cov = centered.T @ centered / (n - 1)
    cov = (cov + cov.T) / 2.0
    return GaussianStats(mean=mean, cov=cov, n=n)


def _psd_sqrt(mat: np.ndarray, label: str) -> np.ndarray:
    try:
        vals, vecs = np.linalg.eigh(mat)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"eigendecomposition failed for {label}: {exc}") from exc
    if vals.min() < -1e-6:
        warnings.warn(
            f"{label}: eigenvalue {vals.min():.3g} well below zero suggests too few samples; clamping"
        )
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(a: GaussianStats, b: GaussianStats) -> float:
    """Squared Frechet distance between two feature Gaussians.

    ||mu_a - mu_b||^2 + Tr(Ca + Cb - 2 (Ca Cb)^(1/2)), with the cross term
    computed from the symmetric product sqrt(Ca) Cb sqrt(Ca) so a plain
    symmetric eigendecomposition suffices; tiny negative eigenvalues are
    clamped to zero and the result is clamped at zero.
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    diff = a.mean - b.mean
    sa = _psd_sqrt(a.cov, "covariance A")
    inner = sa @ b.cov @ sa
    inner = (inner + inner.T) / 2.0
    try:
        cross_vals = np.linalg.eigvalsh(inner)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"eigendecomposition failed for the FID cross term: {exc}") from exc
    cross = 2.0 * np.sqrt(np.clip(cross_vals, 0.0, None)).sum()
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - cross)
    return max(value, 0.0)


# ---------------------------------------------------------------------------
# MS-SSIM


def _gaussian_window(size: int = _WIN_SIZE, sigma: float = _WIN_SIGMA) -> np.ndarray:
    coords = np.arange(size) - size // 2
    g = np.exp(-(coords**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


_WINDOW = _gaussian_window()


def _to_gray(image: np.ndarray) -> np.ndarray:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        return arr.mean(axis=2)
    if arr.ndim == 2:
        return arr
    raise ValueError(f"expected HxW or HxWxC image, got shape {arr.shape}")


def _filter_valid(x: np.ndarray) -> np.ndarray:
    # Valid-mode 11x11 Gaussian filtering via a sliding window view.
    win = np.lib.stride_tricks.sliding_window_view(x, (_WIN_SIZE, _WIN_SIZE))
    return np.einsum("ijkl,kl->ij", win, _WINDOW, optimize=True)


def _ssim_maps(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Mean luminance term and mean contrast-structure term over valid windows."""
    mu_x = _filter_valid(x)
    mu_y = _filter_valid(y)
    sxx = _filter_valid(x * x) - mu_x * mu_x
    syy = _filter_valid(y * y) - mu_y * mu_y
    sxy = _filter_valid(x * y) - mu_x * mu_y
    lum = (2 * mu_x * mu_y + _C1) / (mu_x**2 + mu_y**2 + _C1)
    cs = (2 * sxy + _C2) / (sxx + syy + _C2)
    return float(lum.mean()), float(cs.mean())


def _downsample(x: np.ndarray) -> np.ndarray:
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    return x[:h, :w].reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def default_scales(min_side: int) -> int:
    """Scale count fitting an image: 5 at >= 176 px, else up to 3."""
    target = 5 if min_side >= 176 else 3
    while target > 1 and min_side < _WIN_SIZE * 2 ** (target - 1):
        target -= 1
    return target


def msssim_weights(scales: int) -> tuple:
    if scales == 5:
        return MSSSIM_WEIGHTS_5
    if scales == 3:
        return MSSSIM_WEIGHTS_3
    partial = np.array(MSSSIM_WEIGHTS_5[:scales])
    return tuple(partial / partial.sum())


def ms_ssim(x, y, scales: int | None = None, weights=None) -> float:
    """Multi-scale structural similarity in [0, 1] for unit-range images.

    Contrast-structure terms are collected at every scale (2x average-pool
    downsampling in between); the luminance term enters at the coarsest scale
    only.  Terms are clamped at zero before the weighted-exponent product so
    fractional powers stay real.
    """
    gx, gy = _to_gray(x), _to_gray(y)
    if gx.shape != gy.shape:
        raise ValueError(f"image shapes differ: {gx.shape} vs {gy.shape}")
    min_side = min(gx.shape)
    if scales is None:
        scales = default_scales(min_side)
    scales = int(scales)
    if scales < 1:
        raise ValueError("scales must be >= 1")
    needed = _WIN_SIZE * 2 ** (scales - 1)
    if min_side < needed:
        raise ValueError(
            f"image min side {min_side} too small for {scales} scales; needs >= {needed} px"
        )
    if weights is None:
        weights = msssim_weights(scales)
    weights = tuple(float(w) for w in weights)
    if len(weights) != scales:
        raise ValueError(f"{len(weights)} weights for {scales} scales")
    value = 1.0
    for level in range(scales):
        lum, cs = _ssim_maps(gx, gy)
        if level < scales - 1:
            value *= max(cs, 0.0) ** weights[level]
            gx, gy = _downsample(gx), _downsample(gy)
        else:
            value *= max(lum * cs, 0.0) ** weights[level]
    return float(value)


def mean_pairwise_msssim(images, n_pairs: int, seed: int, scales: int | None = None) -> float:
    """Mean MS-SSIM over seeded random unordered distinct pairs of images."""
    images = list(images)
    if len(images) < 2:
        raise ValueError(f"need at least 2 images, got {len(images)}")
    if n_pairs < 1:
        raise ValueError(f"n_pairs must be >= 1, got {n_pairs}")
    n = len(images)
    rng = SeedStream(seed).child("msssim-pairs").generator()
    total = 0.0
    for _ in range(n_pairs):
        k = int(rng.integers(0, n * (n - 1) // 2))
        # decode the k-th unordered pair (i < j)
        i = 0
        row = n - 1
        while k >= row:
            k -= row
            row -= 1
            i += 1
        j = i + 1 + k
        total += ms_ssim(images[i], images[j], scales=scales)
    return total / n_pairs


# ---------------------------------------------------------------------------
# fairness


@dataclass
class GroupRates:
    n: int
    accuracy: float
    tpr: float | None
    fpr: float | None
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0


@dataclass
class FairnessReport:
    per_group: dict  # group -> GroupRates
    accuracy_parity_gap: float
    equal_opportunity_gap: float | None
    equalized_odds_gap: float | None
    flags: list = field(default_factory=list)


def fairness_metrics(log_rows, positive_label: str = "malignant") -> FairnessReport:
    """Group fairness gaps from a prediction log.

    accuracy parity = max - min group accuracy; equal opportunity = max - min
    TPR; equalized odds = max(TPR gap, FPR gap).  Rate-based gaps are flagged
    undefined when some group lacks a positive or a negative example.
    """
    if not log_rows:
        raise ValueError("prediction log is empty")
    by_group: dict[str, list] = {}
    for row in log_rows:
        by_group.setdefault(row["group"], []).append(row)
    per_group = {}
    for group in sorted(by_group):
        rows = by_group[group]
        tp = fp = tn = fn = 0
        for row in rows:
            truth_pos = row["true_label"] == positive_label
            pred_pos = row["predicted_label"] == positive_label
            if truth_pos and pred_pos:
                tp += 1
            elif truth_pos:
                fn += 1
            elif pred_pos:
                fp += 1
            else:
                tn += 1
        n = len(rows)
        acc = (tp + tn) / n
        tpr = tp / (tp + fn) if (tp + fn) else None
        fpr = fp / (fp + tn) if (fp + tn) else None
        per_group[group] = GroupRates(n=n, accuracy=acc, tpr=tpr, fpr=fpr,
                                      tp=tp, fp=fp, tn=tn, fn=fn)
    accs = [g.accuracy for g in per_group.values()]
    acc_gap = max(accs) - min(accs)
    flags = []
    tprs = [g.tpr for g in per_group.values()]
    fprs = [g.fpr for g in per_group.values()]
    if any(v is None for v in tprs):
        eo_gap = None
        flags.append("equal opportunity undefined: a group has no positives")
    else:
        eo_gap = max(tprs) - min(tprs)
    if eo_gap is None or any(v is None for v in fprs):
        eq_odds = None
        if any(v is None for v in fprs):
            flags.append("equalized odds undefined: a group has no negatives")
        elif eo_gap is None:
            flags.append("equalized odds undefined: TPR gap undefined")
    else:
        eq_odds = max(eo_gap, max(fprs) - min(fprs))
    return FairnessReport(
        per_group=per_group,
        accuracy_parity_gap=acc_gap,
        equal_opportunity_gap=eo_gap,
        equalized_odds_gap=eq_odds,
        flags=flags,
    )


# ---------------------------------------------------------------------------
# report row writers


def write_fid_row(path, set_a: str, set_b: str, stats_a: GaussianStats, stats_b: GaussianStats,
                  extractor_hash: str, value: float) -> Path:
    """FID report CSV: compared_set_a,compared_set_b,n_a,n_b,feature_dim,extractor_hash,fid."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not path.exists()
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(["compared_set_a", "compared_set_b", "n_a", "n_b",
                             "feature_dim", "extractor_hash", "fid"])
        writer.writerow([set_a, set_b, stats_a.n, stats_b.n, len(stats_a.mean),
                         extractor_hash, f"{value:.6f}"])
    return path


def write_fairness_report(path, report: FairnessReport) -> Path:
    """Fairness CSV: one row per group plus a gaps row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    def fmt(v):
        return "--" if v is None else f"{v:.4f}"

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group", "n", "accuracy", "tpr", "fpr"])
        for group, rates in report.per_group.items():
            writer.writerow([group, rates.n, f"{rates.accuracy:.4f}", fmt(rates.tpr), fmt(rates.fpr)])
        writer.writerow(["gaps", "",
                         f"{report.accuracy_parity_gap:.4f}",
                         fmt(report.equal_opportunity_gap),
                         fmt(report.equalized_odds_gap)])
    return path
