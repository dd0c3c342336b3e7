"""
Distributed Hybrid Rendering with Soft Shadows

This package provides a CPU-scale distributed hybrid renderer:
- RenderServer: ray traces shadow visibility and ambient occlusion, filters and streams them
- ThinClient: rasterizes locally, predicts late server buffers and composes the final frame
- run_sim / run_local / run_reference: the simulated, transport-free and oracle run modes
- run_suite: the benchmark suites (bandwidth, latency, frame size, AO parameters)
"""

from .config import Config, load_config
from .errors import ConfigError, DecodeError, DhrError, DimensionMismatchError, SceneError, SuiteError
from .pipeline import RenderServer, ThinClient, run_client, run_local, run_reference, run_sim, serve
from .suites import SUITES, run_suite

__version__ = "1.0.0"

__all__ = [
    "Config",
    "ConfigError",
    "DecodeError",
    "DhrError",
    "DimensionMismatchError",
    "RenderServer",
    "SUITES",
    "SceneError",
    "SuiteError",
    "ThinClient",
    "load_config",
    "run_client",
    "run_local",
    "run_reference",
    "run_sim",
    "run_suite",
    "serve",
]
