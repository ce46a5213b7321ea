"""driftmeta: meta-learned forecasting with data/label adapters and task inference
for streaming regression under concept drift."""

from . import adapters, autodiff, meta, metrics, models, stream, taskinfer

__version__ = "0.1.0"

__all__ = ["adapters", "autodiff", "meta", "metrics", "models", "stream", "taskinfer", "__version__"]
