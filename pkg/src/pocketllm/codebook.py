"""Learned codebook: nearest-neighbor assignment, straight-through routing,
quantization loss, and dead-codeword refresh.

Assignment follows brute-force semantics: every latent row is compared
against every codeword with the squared L2 distance accumulated in
float64 element order, ties resolved to the lowest codeword index. The
numba kernel below implements exactly that loop; set POCKETLLM_NO_NUMBA=1
to force the pure-numpy fallback.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

try:
    if os.environ.get("POCKETLLM_NO_NUMBA"):
        raise ImportError("numba disabled by POCKETLLM_NO_NUMBA")
    import numba

    @numba.njit(parallel=True, cache=True)
    def _assign_kernel(z, c):  # pragma: no cover - exercised via assign_nearest
        n = z.shape[0]
        d = z.shape[1]
        k = c.shape[0]
        idx = np.empty(n, dtype=np.int64)
        for i in numba.prange(n):
            best = 0
            best_d = np.inf
            for j in range(k):
                s = 0.0
                for t in range(d):
                    diff = z[i, t] - c[j, t]
                    s += diff * diff
                if s < best_d:
                    best_d = s
                    best = j
            idx[i] = best
        return idx

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - environment dependent
    _HAVE_NUMBA = False


@dataclass
class Codebook:
    """K latent codewords of width d."""

    vectors: np.ndarray
    seed: int = 0

    @property
    def k(self):
        return self.vectors.shape[0]

    @property
    def d(self):
        return self.vectors.shape[1]

    def validate(self):
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 1:
            raise ValueError(f"codebook must be a non-empty 2-D array, got {self.vectors.shape}")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("codebook contains non-finite entries")
        return self


@dataclass
class AssignmentResult:
    """Nearest-codeword lookup: quantized rows and their codeword indices."""

    quantized: np.ndarray
    indices: np.ndarray


def init_codebook(k, d, seed, latents=None):
    """Draw K codewords from a per-dimension normal fit of the latents.

    With no latents (or degenerate ones) falls back to the standard
    normal. Deterministic given the seed.
    """
    if k < 1 or d < 1:
        raise ValueError(f"codebook size {k} and width {d} must be >= 1")
    rng = np.random.default_rng(seed)
    if latents is not None and len(latents) > 0:
        latents = np.asarray(latents, dtype=np.float64)
        mu = latents.mean(axis=0)
        sigma = latents.std(axis=0)
    else:
        mu = np.zeros(d)
        sigma = np.ones(d)
    vectors = rng.normal(0.0, 1.0, (k, d)) * sigma + mu
    return Codebook(vectors=vectors, seed=seed)


def _assign_numpy(z, c, chunk=4096):
    n = z.shape[0]
    idx = np.empty(n, dtype=np.int64)
    for a in range(0, n, chunk):
        diff = z[a : a + chunk, None, :] - c[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        idx[a : a + chunk] = np.argmin(d2, axis=1)
    return idx


def assign_nearest(z, codebook):
    """Map every latent row to its nearest codeword (ties -> lowest index)."""
    vectors = codebook.vectors if isinstance(codebook, Codebook) else np.asarray(codebook)
    z = np.asarray(z)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ValueError(f"latent batch must be a non-empty 2-D array, got shape {z.shape}")
    if z.shape[1] != vectors.shape[1]:
        raise ValueError(
            f"latent width {z.shape[1]} does not match codeword width {vectors.shape[1]}"
        )
    zc = np.ascontiguousarray(z, dtype=np.float64)
    cc = np.ascontiguousarray(vectors, dtype=np.float64)
    if _HAVE_NUMBA:
        idx = _assign_kernel(zc, cc)
    else:
        idx = _assign_numpy(zc, cc)
    return AssignmentResult(quantized=vectors[idx], indices=idx)


def ste_route(upstream):
    """Straight-through estimator: the lookup has an identity Jacobian.

    The gradient arriving at the quantized rows is handed to the latent
    rows unchanged; the codebook receives nothing through this path.
    """
    return upstream


def vq_loss(z, quantized, indices=None, n_codewords=None):
    """Sum of squared latent-to-codeword distances plus its gradients.

    Returns (loss, grad_z, grad_codebook). grad_codebook is the symmetric
    pull scattered into the selected codewords; it is None unless both
    indices and n_codewords are given.
    """
    z = np.asarray(z, dtype=np.float64)
    quantized = np.asarray(quantized, dtype=np.float64)
    if z.shape != quantized.shape:
        raise ValueError(f"shape mismatch: {z.shape} vs {quantized.shape}")
    resid = z - quantized
    loss = float(np.sum(resid * resid))
    grad_z = 2.0 * resid
    grad_c = None
    if indices is not None and n_codewords is not None:
        grad_c = np.zeros((n_codewords, z.shape[1]))
        np.add.at(grad_c, np.asarray(indices), -2.0 * resid)
    return loss, grad_z, grad_c


def usage_counts(indices, k):
    """Assignments per codeword over one epoch."""
    return np.bincount(np.asarray(indices, dtype=np.int64), minlength=k)


def refresh_dead_codewords(vectors, counts, latents, rng):
    """Re-seed never-used codewords with randomly sampled latent rows.

    Returns (new_vectors, n_refreshed); used codewords are untouched.
    """
    vectors = np.asarray(vectors)
    counts = np.asarray(counts)
    dead = np.flatnonzero(counts == 0)
    if dead.size == 0:
        return vectors, 0
    latents = np.asarray(latents)
    picks = rng.integers(0, latents.shape[0], size=dead.size)
    out = vectors.copy()
    out[dead] = latents[picks]
    return out, int(dead.size)


def lloyd_recenter(vectors, z, indices):
    """Move every used codeword to the mean of its assigned latents."""
    vectors = np.asarray(vectors)
    k = vectors.shape[0]
    counts = usage_counts(indices, k)
    sums = np.zeros_like(vectors)
    np.add.at(sums, np.asarray(indices), np.asarray(z))
    out = vectors.copy()
    used = counts > 0
    out[used] = sums[used] / counts[used, None]
    return out
