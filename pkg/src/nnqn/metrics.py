"""Error measures shared by the command-line reports and the test suites."""

from __future__ import annotations

import numpy as np

from .mesh import Mesh


def relative_errors(pred, true, k: int | None = None) -> np.ndarray:
    """Per-row ``||pred - true|| / ||true||`` over the first ``k`` columns (all by default)."""
    pred = np.atleast_2d(np.asarray(pred, dtype=float))
    true = np.atleast_2d(np.asarray(true, dtype=float))
    if pred.shape != true.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {true.shape}")
    k = true.shape[1] if k is None else min(k, true.shape[1])
    return np.linalg.norm(pred[:, :k] - true[:, :k], axis=1) / np.linalg.norm(true[:, :k], axis=1)


def singular_value_errors(pred, true, top: int = 32) -> dict:
    """Median relative error over the leading ``top`` singular values and over all of them."""
    return {f"median_rel_err_top{top}": float(np.median(relative_errors(pred, true, top))),
            "median_rel_err_all": float(np.median(relative_errors(pred, true)))}


def pearson(a, b) -> float:
    return float(np.corrcoef(np.asarray(a, dtype=float), np.asarray(b, dtype=float))[0, 1])


def background_mask(truth) -> np.ndarray:
    """Elements carrying the most common value of a piecewise-constant field."""
    truth = np.asarray(truth, dtype=float)
    values, counts = np.unique(truth, return_counts=True)
    return truth == values[counts.argmax()]


def background_variance(sigma, truth) -> float:
    sigma = np.asarray(sigma, dtype=float)
    return float(np.var(sigma[background_mask(truth)]))


def anomaly_centroid(mesh: Mesh, sigma, level: float = 0.5) -> np.ndarray:
    """Area-weighted centroid of the elements deviating from the median value.

    Only elements whose deviation reaches ``level`` times the largest
    deviation take part (half maximum by default), weighted by area times
    deviation.
    """
    sigma = np.asarray(sigma, dtype=float)
    dev = np.abs(sigma - np.median(sigma))
    if dev.max() == 0:
        raise ValueError("field has no anomaly")
    keep = dev >= level * dev.max()
    w = mesh.areas[keep] * dev[keep]
    centres = mesh.nodes[mesh.elements[keep]].mean(axis=1)
    return (w[:, None] * centres).sum(axis=0) / w.sum()


def domain_diameter(mesh: Mesh) -> float:
    b = mesh.nodes[np.unique(mesh.boundary_edges)]
    return float(np.max(np.linalg.norm(b[:, None, :] - b[None, :, :], axis=2)))


def reconstruction_metrics(mesh: Mesh, sigma, truth) -> dict:
    sigma = np.asarray(sigma, dtype=float)
    truth = np.asarray(truth, dtype=float)
    out = {"relative_error": float(np.linalg.norm(sigma - truth) / np.linalg.norm(truth)),
           "background_variance": background_variance(sigma, truth)}
    if np.ptp(truth) > 0 and np.ptp(sigma) > 0:
        shift = np.linalg.norm(anomaly_centroid(mesh, sigma) - anomaly_centroid(mesh, truth))
        out["centroid_error_fraction"] = float(shift / domain_diameter(mesh))
        out["correlation_with_truth"] = pearson(sigma, truth)
    return out
