"""Quantitative MRI parameter maps under a noncentral-chi noise model."""

__version__ = "0.1.0"

from .distributions import Family, NoiseModel, chi_logpdf, gaussian_logpdf, ncchi_logpdf, ncchi_mean
from .forward_model import AcquisitionSettings, VoxelParams, signal
from .map_fit import FitProblem, ParameterMaps, SolverSettings, Status, fit_maps
from .noise_em import EMConfig, NoiseFit, fit_noise
from .crossval import loeo, predict_echo
from .synthetic import PhantomSpec, default_phantom, default_protocol, simulate_acquisition
from .volume_io import EchoVolume, read_volume, write_volume

__all__ = [
    "Family", "NoiseModel", "chi_logpdf", "gaussian_logpdf", "ncchi_logpdf", "ncchi_mean",
    "AcquisitionSettings", "VoxelParams", "signal",
    "FitProblem", "ParameterMaps", "SolverSettings", "Status", "fit_maps",
    "EMConfig", "NoiseFit", "fit_noise",
    "loeo", "predict_echo",
    "PhantomSpec", "default_phantom", "default_protocol", "simulate_acquisition",
    "EchoVolume", "read_volume", "write_volume",
]
