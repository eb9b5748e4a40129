"""smfuse: a cycle-approximate GPU simulator with runtime fusion and
splitting of neighbouring SMs, driven by a logistic scalability predictor."""

from .gpu import GpuConfig
from .harness import RunReport, compare_schemes, run, sweep_scaling
from .predictor import MetricVector, PredictorModel, default_model
from .workload import KernelSpec, generate_kernel

__all__ = ["GpuConfig", "RunReport", "compare_schemes", "run", "sweep_scaling",
           "MetricVector", "PredictorModel", "default_model", "KernelSpec", "generate_kernel"]
__version__ = "0.1.0"
