"""Reconstruction and codebook diagnostics, plus plain-text exports.

All exports start with the line `# pocketllm-export v1` followed by a
comma-separated column-name row and data rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EXPORT_HEADER = "# pocketllm-export v1"


@dataclass
class LayerMetrics:
    """Scalar quality summary for one reconstructed layer.

    vq_sum / vq_mean are None when the latent vectors are unavailable
    (e.g. when verifying from an artifact, whose encoder is discarded).
    """

    mse_mean: float
    mse_top100: float
    rmse: float
    frobenius_rel_err: float
    vq_sum: float | None = None
    vq_mean: float | None = None


def subvector_sq_errors(s, s_hat):
    """Per-subvector squared L2 reconstruction errors."""
    s = np.asarray(s, dtype=np.float64)
    s_hat = np.asarray(s_hat, dtype=np.float64)
    if s.shape != s_hat.shape:
        raise ValueError(f"shape mismatch: {s.shape} vs {s_hat.shape}")
    diff = s - s_hat
    return (diff * diff).sum(axis=1)


def top_error_sum(errors, top=100):
    """Sum of the `top` largest entries (all of them when fewer exist)."""
    errors = np.asarray(errors, dtype=np.float64)
    if errors.size <= top:
        return float(errors.sum())
    part = np.partition(errors, errors.size - top)
    return float(part[errors.size - top :].sum())


def layer_metrics(s, s_hat, z=None, z_q=None):
    """All scalar diagnostics for one layer's subvectors."""
    per = subvector_sq_errors(s, s_hat)
    s = np.asarray(s, dtype=np.float64)
    denom = float(np.sum(s * s))
    rel = float(np.sqrt(per.sum() / denom)) if denom > 0 else float(np.sqrt(per.sum()))
    vq_sum = vq_mean = None
    if z is not None and z_q is not None:
        zerr = subvector_sq_errors(z, z_q)
        vq_sum = float(zerr.sum())
        vq_mean = float(zerr.mean())
    return LayerMetrics(
        mse_mean=float(per.mean()),
        mse_top100=top_error_sum(per),
        rmse=float(np.sqrt(per.sum())),
        frobenius_rel_err=rel,
        vq_sum=vq_sum,
        vq_mean=vq_mean,
    )


def weight_histogram(w, coverage=0.999, bins=100):
    """Fixed-width histogram of the central `coverage` quantile range.

    Trimming is symmetric: (1-coverage)/2 probability mass is dropped on
    each side before binning. Returns (bin_centers, counts).
    """
    if not 0.0 < coverage <= 1.0:
        raise ValueError(f"coverage must be in (0, 1], got {coverage}")
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    flat = np.asarray(w, dtype=np.float64).ravel()
    if flat.size == 0:
        raise ValueError("empty weight matrix")
    if coverage < 1.0:
        tail = (1.0 - coverage) / 2.0
        lo, hi = np.quantile(flat, [tail, 1.0 - tail])
        flat = flat[(flat >= lo) & (flat <= hi)]
    else:
        lo, hi = float(flat.min()), float(flat.max())
    if lo == hi:
        return np.array([lo]), np.array([flat.size], dtype=np.int64)
    counts, edges = np.histogram(flat, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    return centers, counts.astype(np.int64)


def _fmt(v):
    return repr(float(v))


def histogram_table(centers, counts):
    lines = [EXPORT_HEADER, "bin_center,count"]
    for c, n in zip(centers, counts):
        lines.append(f"{_fmt(c)},{int(n)}")
    return "\n".join(lines) + "\n"


def export_reconstruction(w, w_hat, row0=0, col0=0, n_rows=8, n_cols=8):
    """Paired (original, reconstructed) values for a window, as CSV text."""
    w = np.asarray(w)
    w_hat = np.asarray(w_hat)
    if w.shape != w_hat.shape:
        raise ValueError(f"shape mismatch: {w.shape} vs {w_hat.shape}")
    if row0 < 0 or col0 < 0 or row0 + n_rows > w.shape[0] or col0 + n_cols > w.shape[1]:
        raise ValueError(
            f"window [{row0}:{row0 + n_rows}, {col0}:{col0 + n_cols}] "
            f"out of bounds for shape {w.shape}"
        )
    lines = [EXPORT_HEADER, "row,col,original,reconstructed"]
    for i in range(row0, row0 + n_rows):
        for j in range(col0, col0 + n_cols):
            lines.append(f"{i},{j},{_fmt(w[i, j])},{_fmt(w_hat[i, j])}")
    return "\n".join(lines) + "\n"
