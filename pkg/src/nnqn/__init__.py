"""Learned-singular-value quasi-Newton reconstruction for electrical impedance tomography."""

from .forward import CEMProblem, MeasurementFrame, add_noise, forward_map, jacobian_adjoint, jacobian_perturbation
from .mesh import ElectrodeLayout, Mesh, build_disk_mesh, build_square_mesh, load_mesh, save_mesh
from .mlp import MLP, TrainingConfig, load_weights, save_weights, train
from .phantoms import Inclusion, Phantom
from .priors import NoiseWeighting, Regularizer, build_noise_weighting
from .sampler import FieldSamplerConfig, TrainingSet, build_dataset, load_dataset, save_dataset
from .solvers import (InverseProblem, SolverTrace, compare_methods, homogeneous_estimate,
                      run_broyden, run_gauss_newton, run_nnqn, thin_svd)

__version__ = "0.1.0"

__all__ = [
    "CEMProblem",
    "MeasurementFrame",
    "add_noise",
    "forward_map",
    "jacobian_adjoint",
    "jacobian_perturbation",
    "ElectrodeLayout",
    "Mesh",
    "build_disk_mesh",
    "build_square_mesh",
    "load_mesh",
    "save_mesh",
    "MLP",
    "TrainingConfig",
    "load_weights",
    "save_weights",
    "train",
    "Inclusion",
    "Phantom",
    "NoiseWeighting",
    "Regularizer",
    "build_noise_weighting",
    "FieldSamplerConfig",
    "TrainingSet",
    "build_dataset",
    "load_dataset",
    "save_dataset",
    "InverseProblem",
    "SolverTrace",
    "compare_methods",
    "homogeneous_estimate",
    "run_broyden",
    "run_gauss_newton",
    "run_nnqn",
    "thin_svd",
]
