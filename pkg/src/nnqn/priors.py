"""Regularization terms and noise weighting for the regularized Gauss-Newton step."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh, element_adjacency_laplacian

TV = "tv"
LAPLACIAN = "laplacian"


@dataclass(frozen=True)
class Regularizer:
    kind: str
    weight: float
    beta: float = 1e-4

    def __post_init__(self):
        if self.kind not in (TV, LAPLACIAN):
            raise ValueError(f"unknown regularizer kind {self.kind!r}")
        if not self.weight > 0:
            raise ValueError("regularization weight must be positive")
        if self.kind == TV and not self.beta > 0:
            raise ValueError("TV smoothing beta must be positive")

    @classmethod
    def from_config(cls, cfg: dict) -> "Regularizer":
        return cls(cfg["kind"], float(cfg["weight"]), float(cfg.get("beta", 1e-4)))

    def to_config(self) -> dict:
        return {"kind": self.kind, "weight": self.weight, "beta": self.beta}


def edge_difference_operator(mesh: Mesh) -> tuple[sp.csr_matrix, np.ndarray]:
    """Signed incidence matrix D (F x E) of interior edges and the edge lengths."""
    pairs, lengths = mesh.interior_edges
    f = len(pairs)
    rows = np.repeat(np.arange(f), 2)
    cols = pairs.ravel()
    vals = np.tile([1.0, -1.0], f)
    return sp.csr_matrix((vals, (rows, cols)), shape=(f, mesh.n_elements)), lengths


def tv_value_and_gradient(mesh: Mesh, sigma, reg: Regularizer):
    """Smoothed total variation over interior edges.

    ``R = w * sum_e l_e * sqrt(d_e^2 + beta)`` with ``d = D sigma``. The
    curvature returned is the lagged-diffusivity matrix ``w * D^T diag(l / s) D``.
    """
    if reg.kind != TV:
        raise ValueError("expected a TV regularizer")
    D, lengths = edge_difference_operator(mesh)
    d = D @ np.asarray(sigma, dtype=float)
    s = np.sqrt(d * d + reg.beta)
    value = reg.weight * float(lengths @ s)
    grad = reg.weight * (D.T @ (lengths * d / s))
    curvature = reg.weight * (D.T @ sp.diags(lengths / s) @ D)
    return value, grad, curvature.tocsr()


def laplacian_value_and_gradient(mesh: Mesh, sigma, sigma_ref, reg: Regularizer,
                                 laplacian: sp.spmatrix | None = None):
    """Quadratic smoothness ``w * ||L (sigma - sigma_ref)||^2`` on the element graph."""
    if reg.kind != LAPLACIAN:
        raise ValueError("expected a Laplacian regularizer")
    L = element_adjacency_laplacian(mesh) if laplacian is None else laplacian
    delta = np.asarray(sigma, dtype=float) - np.asarray(sigma_ref, dtype=float)
    Ld = L @ delta
    LtL = (L.T @ L).tocsr()
    return reg.weight * float(Ld @ Ld), 2 * reg.weight * (L.T @ Ld), 2 * reg.weight * LtL


def regularization_terms(mesh: Mesh, sigma, reg: Regularizer, sigma_ref=None, laplacian=None):
    if reg.kind == TV:
        return tv_value_and_gradient(mesh, sigma, reg)
    if sigma_ref is None:
        raise ValueError("the Laplacian prior needs a reference conductivity")
    return laplacian_value_and_gradient(mesh, sigma, sigma_ref, reg, laplacian)


@dataclass(frozen=True, eq=False)
class NoiseWeighting:
    """Diagonal noise weighting.

    ``W = diag(1 / std^2)`` enters the step; ``L_e = diag(std)`` is its
    covariance factor, ``L_e^T L_e = W^{-1}``. Both are stored as vectors.
    """

    std: np.ndarray

    @property
    def W(self) -> np.ndarray:
        return 1.0 / self.std**2

    @property
    def L_e(self) -> np.ndarray:
        return self.std

    def whiten(self, residual) -> np.ndarray:
        """``L_e^{-1} r``, whose squared norm is ``r^T W r``."""
        return np.asarray(residual) / self.std


def build_noise_weighting(noise_std) -> NoiseWeighting:
    std = np.array(noise_std, dtype=float).ravel()
    if std.size == 0 or not np.all(np.isfinite(std)) or np.any(std <= 0):
        raise ValueError("noise standard deviations must be finite and positive")
    std.setflags(write=False)
    return NoiseWeighting(std)
