"""
Random conductivity fields and the (model output, singular values) training set.

A field is ``sigma_exp + G^{-1} r`` with ``r`` white Gaussian and
``G = I + (ell / h)^2 L`` built on the element adjacency graph, so the solve
acts as a smoothing kernel with correlation length of roughly ``ell``.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .forward import CEMProblem, ForwardError, jacobian_adjoint, jacobian_perturbation, solve_forward
from .mesh import Mesh, element_adjacency_laplacian


@dataclass(frozen=True)
class FieldSamplerConfig:
    sigma_exp: float = 1.0
    kernel_length_scale: float = 2.0
    amplitude_std: float = 1.0
    lower_bound: float | None = None
    rng_seed: int = 0

    def __post_init__(self):
        if self.lower_bound is None:
            object.__setattr__(self, "lower_bound", 0.1 * self.sigma_exp)
        if not self.sigma_exp > self.lower_bound > 0:
            raise ValueError("need sigma_exp > lower_bound > 0")
        if not self.kernel_length_scale > 0:
            raise ValueError("kernel_length_scale must be positive")
        if not self.amplitude_std >= 0:
            raise ValueError("amplitude_std must be non-negative")


class _Smoother:
    def __init__(self, mesh: Mesh, length_scale: float):
        L = element_adjacency_laplacian(mesh)
        c = (length_scale / mesh.mean_element_diameter) ** 2
        G = sp.identity(mesh.n_elements, format="csc") + c * L.tocsc()
        self.G = G
        self._lu = spla.splu(G)

    def apply_inverse(self, r: np.ndarray) -> np.ndarray:
        return self._lu.solve(r)


@lru_cache(maxsize=8)
def _smoother(mesh: Mesh, length_scale: float) -> _Smoother:
    return _Smoother(mesh, length_scale)


def _sample(mesh: Mesh, config: FieldSamplerConfig, rng: np.random.Generator) -> np.ndarray:
    r = config.amplitude_std * rng.standard_normal(mesh.n_elements)
    field_ = config.sigma_exp + _smoother(mesh, config.kernel_length_scale).apply_inverse(r)
    return np.maximum(field_, config.lower_bound)


def sample_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for sample ``index`` so results do not depend on scheduling."""
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


def sample_conductivity(mesh: Mesh, config: FieldSamplerConfig, index: int = 0) -> np.ndarray:
    return _sample(mesh, config, sample_rng(config.rng_seed, index))


def smoothed_field_std(mesh: Mesh, config: FieldSamplerConfig) -> float:
    """Mean pointwise std of ``G^{-1} r`` before clamping (exact, via the diagonal of G^{-2})."""
    sm = _smoother(mesh, config.kernel_length_scale)
    Ginv = np.linalg.inv(sm.G.toarray())
    return float(config.amplitude_std * np.sqrt((Ginv**2).sum(axis=1)).mean())


def amplitude_for_field_std(mesh: Mesh, target_std: float, length_scale: float) -> float:
    """``amplitude_std`` giving a smoothed field of mean pointwise std ``target_std``."""
    unit = smoothed_field_std(mesh, FieldSamplerConfig(kernel_length_scale=length_scale,
                                                       amplitude_std=1.0))
    return target_std / unit


@dataclass
class TrainingSet:
    inputs: np.ndarray
    targets: np.ndarray
    train_idx: np.ndarray
    val_idx: np.ndarray
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError("inputs and targets must have the same number of rows")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def m(self) -> int:
        return self.inputs.shape[1]

    def train(self):
        return self.inputs[self.train_idx], self.targets[self.train_idx]

    def validation(self):
        return self.inputs[self.val_idx], self.targets[self.val_idx]


def singular_value_targets(J: np.ndarray, m: int) -> np.ndarray:
    s = np.linalg.svd(J, compute_uv=False)
    out = np.zeros(m)
    out[: min(m, s.size)] = s[:m]
    return out


def build_dataset(problem: CEMProblem, config: FieldSamplerConfig, n_train: int, n_val: int,
                  threads: int = 1, jacobian: str = "adjoint",
                  include_anchor: bool = True) -> TrainingSet:
    """Draw ``n_train + n_val`` fields; record ``A(sigma)`` and the sorted singular values of J.

    With ``include_anchor`` the first training sample is the homogeneous
    field ``sigma_exp``, the point the solvers linearize at.
    """
    if jacobian not in ("adjoint", "perturbation"):
        raise ValueError(f"unknown Jacobian mode {jacobian!r}")
    if n_train < 1 or n_val < 1:
        raise ValueError("need at least one training and one validation sample")
    n = n_train + n_val
    m = problem.n_measurements
    mesh = problem.mesh
    _smoother(mesh, config.kernel_length_scale)  # build the shared factorization once

    def one(i):
        if include_anchor and i == 0:
            sigma = np.full(mesh.n_elements, config.sigma_exp)
        else:
            sigma = sample_conductivity(mesh, config, i)
        try:
            sol = solve_forward(problem, sigma)
            if jacobian == "adjoint":
                J = jacobian_adjoint(problem, solution=sol)
            else:
                J = jacobian_perturbation(problem, sigma)
        except ForwardError as exc:
            raise ForwardError(f"sample {i}: {exc}") from exc
        return sol.measurements, singular_value_targets(J, m)

    inputs = np.empty((n, m))
    targets = np.empty((n, m))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = pool.map(one, range(n))
            for i, (x, y) in enumerate(results):
                inputs[i], targets[i] = x, y
    else:
        for i in range(n):
            inputs[i], targets[i] = one(i)
    meta = {"sampler": {"sigma_exp": config.sigma_exp,
                        "kernel_length_scale": config.kernel_length_scale,
                        "amplitude_std": config.amplitude_std,
                        "lower_bound": config.lower_bound},
            "n_elements": mesh.n_elements, "jacobian": jacobian,
            "anchor_sample": 0 if include_anchor else None}
    return TrainingSet(inputs, targets, np.arange(n_train), np.arange(n_train, n),
                       config.rng_seed, meta)


_DATASET_MAGIC = b"NNQD"


def save_dataset(path, data: TrainingSet) -> None:
    """Binary container: magic, u64 header length, JSON header, inputs then targets (f64, row-major)."""
    header = {"n": data.n, "m": data.m, "seed": data.seed,
              "split": {"train": data.train_idx.tolist(), "val": data.val_idx.tolist()},
              "meta": data.meta}
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(_DATASET_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(data.inputs, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(data.targets, dtype="<f8").tobytes())


def load_dataset(path) -> TrainingSet:
    raw = Path(path).read_bytes()
    if raw[:4] != _DATASET_MAGIC or len(raw) < 12:
        raise ValueError(f"{path} is not a dataset file")
    (hlen,) = struct.unpack("<Q", raw[4:12])
    try:
        header = json.loads(raw[12:12 + hlen])
        n, m = int(header["n"]), int(header["m"])
    except (ValueError, KeyError) as exc:
        raise ValueError(f"corrupt dataset header in {path}") from exc
    payload = raw[12 + hlen:]
    if len(payload) != 2 * n * m * 8:
        raise ValueError(f"dataset payload has {len(payload)} bytes, header implies {2 * n * m * 8}")
    arr = np.frombuffer(payload, dtype="<f8").reshape(2, n, m).astype(float)
    split = header["split"]
    return TrainingSet(arr[0].copy(), arr[1].copy(), np.array(split["train"], dtype=int),
                       np.array(split["val"], dtype=int), int(header["seed"]), header.get("meta", {}))


def export_dataset_csv(path, data: TrainingSet) -> None:
    m = data.m
    cols = [f"input_{i}" for i in range(m)] + [f"target_{i}" for i in range(m)]
    split = np.zeros(data.n, dtype=int)
    split[data.val_idx] = 1
    table = np.column_stack([split, data.inputs, data.targets])
    np.savetxt(path, table, delimiter=",", header="is_validation," + ",".join(cols),
               comments="", fmt="%.17g")
