"""Live-stream CTR modelling under delayed feedback: simulation, label assembly, training, evaluation."""

from .labels import ReportPolicy, TrainingSample, assemble
from .sim import TASKS, SimConfig, simulate

__all__ = ["TASKS", "ReportPolicy", "SimConfig", "TrainingSample", "assemble", "simulate"]
__version__ = "0.1.0"
