"""Single-codebook quantization: nearest-entry assignment, the
straight-through pass, the two stop-gradient distance terms, and usage
accounting.

Distances are squared Euclidean, computed from explicit differences (not
the expanded dot-product form) so that exact ties stay exact and break
toward the lowest index. Loss terms use the mean over every element of
the feature block.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, gather_rows, mse_loss, stop_gradient, straight_through
from . import tensor_io

CODEBOOK_MAGIC = b"DVQC"


class Codebook:
    """K learnable code vectors of dimension d plus assignment counters.

    ``window_counts`` reset at epoch boundaries; ``counts`` accumulate for
    the life of the run and feed the final utilization report.
    """

    def __init__(self, n_entries: int, dim: int, rng: np.random.Generator | None = None,
                 entries: np.ndarray | None = None):
        if n_entries < 1 or dim < 1:
            raise ValueError(f"codebook needs K >= 1 and d >= 1, got K={n_entries}, d={dim}")
        if entries is not None:
            entries = np.asarray(entries, dtype=np.float64)
            if entries.shape != (n_entries, dim):
                raise ShapeError(f"entries shape {entries.shape} != ({n_entries}, {dim})")
        elif rng is not None:
            entries = rng.uniform(-1.0 / n_entries, 1.0 / n_entries, size=(n_entries, dim))
        else:
            entries = np.zeros((n_entries, dim))
        self.entries = Tensor(entries, requires_grad=True, op="codebook")
        self.n_entries = n_entries
        self.dim = dim
        self.counts = np.zeros(n_entries, dtype=np.uint64)
        self.window_counts = np.zeros(n_entries, dtype=np.uint64)
        self.total_assignments = 0
        self.window_total = 0

    def record(self, indices: np.ndarray):
        binned = np.bincount(indices, minlength=self.n_entries).astype(np.uint64)
        self.counts += binned
        self.window_counts += binned
        self.total_assignments += int(indices.size)
        self.window_total += int(indices.size)

    def reset_window(self):
        self.window_counts[:] = 0
        self.window_total = 0


@dataclass
class QuantizationResult:
    z_q: Tensor                 # (N, d); forward = selected entries, backward = pass-through
    indices: np.ndarray         # (N,) int64
    codebook_term: Tensor       # scalar
    commitment_term: Tensor     # scalar


def nearest_indices(features, entries) -> np.ndarray:
    """Index of the closest entry per feature row; ties go to the lowest index."""
    f = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
    e = entries.data if isinstance(entries, Tensor) else np.asarray(entries, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] < 1:
        raise ValueError(f"codebook entries must be a non-empty (K, d) table, got {e.shape}")
    if f.ndim != 2 or f.shape[1] != e.shape[1]:
        raise ShapeError(f"feature dim mismatch: features {f.shape} vs entries {e.shape}")
    diff = f[:, None, :] - e[None, :, :]
    dist = np.einsum("nkd,nkd->nk", diff, diff)
    return np.argmin(dist, axis=1).astype(np.int64)


def vq_terms(features: Tensor, z_q_values: Tensor, beta: float) -> tuple[Tensor, Tensor]:
    """The two stop-gradient distance terms.

    codebook_term pulls the quantized values toward frozen features;
    commitment_term (weighted by beta) pulls features toward frozen
    quantized values.
    """
    features, z_q_values = _as_pair(features, z_q_values)
    codebook_term = mse_loss(stop_gradient(features), z_q_values)
    commitment_term = beta * mse_loss(stop_gradient(z_q_values), features)
    return codebook_term, commitment_term


def _as_pair(a, b):
    from .autodiff import as_tensor

    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"vq_terms: shapes differ, {a.shape} vs {b.shape}")
    return a, b


def quantize_st(features: Tensor, cb: Codebook, beta: float = 0.25,
                entries: Tensor | None = None, update_usage: bool = True) -> QuantizationResult:
    """Quantize feature rows against a codebook with a straight-through backward.

    ``entries`` overrides the lookup table (e.g. refined entries) while the
    codebook still owns the learnable parameters and the usage counters.
    The decoder-path gradient on ``z_q`` lands on ``features`` unchanged;
    entries train only through ``codebook_term``.
    """
    table = cb.entries if entries is None else entries
    if features.shape[-1] != cb.dim:
        raise ShapeError(f"feature dim {features.shape} does not match codebook dim {cb.dim}")
    idx = nearest_indices(features, table)
    selected = gather_rows(table, idx)
    z_q = straight_through(features, selected)
    codebook_term = mse_loss(stop_gradient(features), selected)
    commitment_term = beta * mse_loss(stop_gradient(selected), features)
    if update_usage:
        cb.record(idx)
    return QuantizationResult(z_q=z_q, indices=idx, codebook_term=codebook_term,
                              commitment_term=commitment_term)


def usage_stats(cb: Codebook, window: bool = False) -> tuple[float, float]:
    """(perplexity, active_fraction) of the assignment histogram.

    Perplexity is exp of the assignment entropy (0 when nothing was
    assigned); active_fraction is the share of entries used at least once.
    """
    counts = cb.window_counts if window else cb.counts
    total = cb.window_total if window else cb.total_assignments
    active = float(np.count_nonzero(counts)) / cb.n_entries
    if total == 0:
        return 0.0, active
    p = counts.astype(np.float64) / total
    nz = p[p > 0]
    entropy = -(nz * np.log(nz)).sum()
    return float(np.exp(entropy)), active


def dump_codebook(cb: Codebook, path: str):
    """Write magic, K, d, the entries dump, then cumulative counts as u64[K]."""
    payload = CODEBOOK_MAGIC + struct.pack("<II", cb.n_entries, cb.dim)
    payload += tensor_io.array_to_bytes(cb.entries.data)
    payload += cb.counts.astype("<u8").tobytes()
    tensor_io.atomic_write_bytes(path, payload)


def load_codebook(path: str) -> Codebook:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CODEBOOK_MAGIC:
        raise ValueError(f"bad codebook dump magic {blob[:4]!r}")
    k, d = struct.unpack_from("<II", blob, 4)
    entries, pos = tensor_io.bytes_to_array(blob, 12)
    counts = np.frombuffer(blob[pos : pos + 8 * k], dtype="<u8").astype(np.uint64)
    cb = Codebook(k, d, entries=entries)
    cb.counts = counts.copy()
    cb.total_assignments = int(counts.sum())
    return cb
