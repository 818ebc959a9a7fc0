"""Spectral analysis and acceleration of EM for univariate Gaussian mixtures."""

from .accelerators import GeoState, Method, MethodConfig, locate_fixed_point, run_method
from .bench import BenchmarkReport, ScenarioConfig, TrialRow, builtin_scenarios, run_benchmark
from .diagnostics import EnergyDecomposition, RateFit, energy_decompose, fit_rate
from .em_core import DegenerateParameterError, EmProblem, RunResult, StopRule, fixed_point, run_em
from .gmm import Dataset, GmmParams, GmmProblem, generate_dataset
from .spectral import FisherTriple, RelaxationAnalysis, fisher_triple, jacobian_fd, relaxation_analysis
from .synthetic import LinearEmProblem

__all__ = [
    "BenchmarkReport", "Dataset", "DegenerateParameterError", "EmProblem", "EnergyDecomposition",
    "FisherTriple", "GeoState", "GmmParams", "GmmProblem", "LinearEmProblem", "Method", "MethodConfig", "RateFit",
    "RelaxationAnalysis", "RunResult", "ScenarioConfig", "StopRule", "TrialRow", "builtin_scenarios",
    "energy_decompose", "fisher_triple", "fit_rate", "fixed_point", "generate_dataset", "jacobian_fd", "locate_fixed_point",
    "relaxation_analysis", "run_benchmark", "run_em", "run_method",
]
