"""Reconstruction metrics, codebook-utilization reporting, and a
closed-form Gaussian Fréchet distance.

The Fréchet distance here acts on pluggable feature sets (latents or
downsampled pixels); it is NOT Inception-FID and its values are not
comparable to Inception-based numbers. Images are assumed to live in
[0, 1]; PSNR uses peak 1.0 and returns +inf for identical inputs
(serialized as the string "inf").
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor_io
from .codebook import Codebook, usage_stats


def _check_same_shape(x, x_hat, what):
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"{what}: shapes differ, {x.shape} vs {x_hat.shape}")
    return x, x_hat


def psnr(x, x_hat, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE) in dB; +inf when the images coincide."""
    x, x_hat = _check_same_shape(x, x_hat, "psnr")
    if peak <= 0:
        raise ValueError(f"psnr peak must be positive, got {peak}")
    mse = float(((x - x_hat) ** 2).mean())
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


def l1_metric(x, x_hat) -> float:
    x, x_hat = _check_same_shape(x, x_hat, "l1_metric")
    return float(np.abs(x - x_hat).mean())


def l2_metric(x, x_hat) -> float:
    x, x_hat = _check_same_shape(x, x_hat, "l2_metric")
    return float(((x - x_hat) ** 2).mean())


def compression_ratio(input_shape, latent_hw) -> float:
    """Input element count over latent token count (256x256x3 -> 16x16 gives 768)."""
    n_in = 1
    for v in input_shape:
        n_in *= v
    h, w = latent_hw
    return n_in / (h * w)


# -- Gaussian Fréchet distance ---------------------------------------------------


def _sym_floor(cov):
    cov = np.atleast_2d(np.asarray(cov, dtype=np.float64))
    return (cov + cov.T) / 2.0


def _psd_sqrt(m):
    w, u = np.linalg.eigh(m)
    w = np.clip(w, 0.0, None)
    return (u * np.sqrt(w)) @ u.T


def frechet_gaussian(mu1, cov1, mu2, cov2) -> float:
    """Squared Fréchet distance between two Gaussians.

    Covariances are symmetrized with eigenvalues floored at zero; the cross
    term uses the eigendecomposition of the symmetrized product
    sqrt(C1) C2 sqrt(C1), whose trace equals tr((C1 C2)^1/2).
    """
    mu1 = np.atleast_1d(np.asarray(mu1, dtype=np.float64))
    mu2 = np.atleast_1d(np.asarray(mu2, dtype=np.float64))
    c1 = _sym_floor(cov1)
    c2 = _sym_floor(cov2)
    if mu1.shape != mu2.shape or c1.shape != c2.shape or c1.shape[0] != mu1.shape[0]:
        raise ValueError(
            f"frechet_gaussian: dimension mismatch mu {mu1.shape}/{mu2.shape} "
            f"cov {c1.shape}/{c2.shape}"
        )
    a = _psd_sqrt(c1)
    inner = _sym_floor(a @ c2 @ a)
    w = np.clip(np.linalg.eigvalsh(inner), 0.0, None)
    tr_sqrt = float(np.sqrt(w).sum())
    d2 = float(((mu1 - mu2) ** 2).sum() + np.trace(c1) + np.trace(c2) - 2.0 * tr_sqrt)
    return max(d2, 0.0)


def gaussian_stats(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean and covariance of row-wise feature vectors."""
    features = np.asarray(features, dtype=np.float64)
    mu = features.mean(axis=0)
    centered = features - mu
    cov = centered.T @ centered / max(features.shape[0] - 1, 1)
    return mu, cov


# -- utilization reporting --------------------------------------------------------


@dataclass
class CodebookSeries:
    name: str
    n_entries: int
    counts: list
    total_assignments: int
    perplexity: float
    active_fraction: float


@dataclass
class UtilizationReport:
    series: list
    step: int
    config_hash: str

    def validate(self):
        for s in self.series:
            if sum(s.counts) != s.total_assignments:
                raise ValueError(f"series {s.name}: histogram sums to {sum(s.counts)}, "
                                 f"not {s.total_assignments}")
            if not 0.0 <= s.active_fraction <= 1.0:
                raise ValueError(f"series {s.name}: active_fraction {s.active_fraction}")


def series_from_codebook(name: str, cb: Codebook) -> CodebookSeries:
    perp, active = usage_stats(cb)
    return CodebookSeries(name=name, n_entries=cb.n_entries,
                          counts=[int(v) for v in cb.counts],
                          total_assignments=cb.total_assignments,
                          perplexity=perp, active_fraction=active)


def emit_utilization(report: UtilizationReport, path_stem: str) -> tuple[str, str]:
    """Write ``<stem>.json`` and ``<stem>.csv``; returns both paths."""
    report.validate()
    json_path = f"{path_stem}.json"
    csv_path = f"{path_stem}.csv"
    blob = {
        "step": report.step,
        "config_hash": report.config_hash,
        "series": [
            {
                "name": s.name,
                "n_entries": s.n_entries,
                "total_assignments": s.total_assignments,
                "perplexity": s.perplexity,
                "active_fraction": s.active_fraction,
                "counts": s.counts,
            }
            for s in report.series
        ],
    }
    tensor_io.atomic_write_bytes(json_path, json.dumps(blob, indent=1).encode())
    lines = ["codebook,entry_id,count"]
    for s in report.series:
        for k, c in enumerate(s.counts):
            lines.append(f"{s.name},{k},{c}")
    tensor_io.atomic_write_bytes(csv_path, ("\n".join(lines) + "\n").encode())
    return json_path, csv_path


def load_utilization(json_path: str) -> UtilizationReport:
    with open(json_path, "rb") as f:
        blob = json.loads(f.read())
    series = [CodebookSeries(name=s["name"], n_entries=s["n_entries"], counts=list(s["counts"]),
                             total_assignments=s["total_assignments"], perplexity=s["perplexity"],
                             active_fraction=s["active_fraction"])
              for s in blob["series"]]
    return UtilizationReport(series=series, step=blob["step"], config_hash=blob["config_hash"])


def sanitize_for_json(obj):
    """Replace non-finite floats with strings so files stay strict JSON."""
    if isinstance(obj, dict):
        return {k: sanitize_for_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [sanitize_for_json(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if np.isinf(v):
            return "inf" if v > 0 else "-inf"
        if np.isnan(v):
            return "nan"
        return v
    if isinstance(obj, np.integer):
        return int(obj)
    return obj
