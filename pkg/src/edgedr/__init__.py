"""Integer-quantized CNN inference engine and edge-deployment profiler
for diabetic retinopathy screening models."""

from .builders import (
    build_custom_dnn,
    build_mobilenet,
    build_shufflenet,
    build_squeezenet,
)
from .dataset import AugmentSpec, LabeledImage, augment, load_dataset, preprocess, split
from .graph import DRLabel, ModelGraph, classify, execute, validate
from .metrics import ClassificationReport, evaluate
from .model_io import load_model, save_model
from .profiler import (
    DeviceProfile,
    count_macs,
    estimate_latency,
    estimate_rom,
    fit_device_profiles,
    paper_profiles,
    plan_memory,
)
from .quantizer import calibrate, fidelity_report, quantize_graph
from .tensor import QuantParams, RangeObservation, Tensor, dequantize, quantize

__version__ = "0.1.0"

__all__ = [
    "AugmentSpec",
    "ClassificationReport",
    "DRLabel",
    "DeviceProfile",
    "LabeledImage",
    "ModelGraph",
    "QuantParams",
    "RangeObservation",
    "Tensor",
    "augment",
    "build_custom_dnn",
    "build_mobilenet",
    "build_shufflenet",
    "build_squeezenet",
    "calibrate",
    "classify",
    "count_macs",
    "dequantize",
    "estimate_latency",
    "estimate_rom",
    "evaluate",
    "execute",
    "fidelity_report",
    "fit_device_profiles",
    "load_dataset",
    "load_model",
    "paper_profiles",
    "plan_memory",
    "preprocess",
    "quantize",
    "quantize_graph",
    "save_model",
    "split",
    "validate",
]
