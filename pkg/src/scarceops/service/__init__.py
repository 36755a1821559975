from .app import create_app
from .monitor import (
    EMBEDDING_DRIFT,
    PERFORMANCE_DROP,
    Alert,
    MetricPoint,
    MonitorConfig,
    MonitorState,
    Sample,
    check_drift,
    default_detector,
)
from .runtime import CTConfig, Deployment, ServingRuntime, normalize_image

__all__ = [
    "Alert",
    "CTConfig",
    "Deployment",
    "EMBEDDING_DRIFT",
    "MetricPoint",
    "MonitorConfig",
    "MonitorState",
    "PERFORMANCE_DROP",
    "Sample",
    "ServingRuntime",
    "check_drift",
    "create_app",
    "default_detector",
    "normalize_image",
]
