"""Entanglement transfer in an open network of three fiber-coupled cavities."""

__version__ = "0.1.0"

from .hilbert import DensityMatrix, HilbertSpace, Kind, Operator, StateVector, SubsystemLabel, label
from .model import GHZ, ModelParams, PureSchmidt, Werner, build_hamiltonian, build_jump_channels, initial_state
from .entanglement import ClassLabel, classify, tripartite_negativity, witness_values
from .observables import SERIES_NAMES
from .evolve import EvolutionOptions, EvolutionRecord, Method, TimeGrid, evolve
from .experiments import ScenarioConfig, SwitchOffPolicy

__all__ = [
    "ClassLabel", "DensityMatrix", "EvolutionOptions", "EvolutionRecord", "GHZ", "HilbertSpace", "Kind",
    "Method", "ModelParams", "Operator", "PureSchmidt", "SERIES_NAMES", "ScenarioConfig", "StateVector",
    "SubsystemLabel", "SwitchOffPolicy", "TimeGrid", "Werner", "build_hamiltonian", "build_jump_channels",
    "classify", "evolve", "initial_state", "label", "tripartite_negativity", "witness_values",
]
