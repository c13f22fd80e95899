"""Lightweight wafer-map defect classification and segmentation.

A small shared-encoder CNN (one encoder, a segmentation decoder, a
classifier head, and a contrastive projection head) built on an
in-package numpy autodiff core. See the README for the training
pipeline and CLI.
"""

__version__ = "0.1.0"

from .data import (CLASS_DEFS, CLASS_NAMES, NUM_CLASSES, WaferDataset,
                   WaferMap, WaferSample, derive_mask, generate_wafer_map,
                   make_dataset, preprocess, split_dataset)
from .errors import (ArchiveError, CheckpointError, ConfigError, DataError,
                     QuantError, ShapeError, TapeError, WscnError)
from .gradcheck import check_gradients
from .model import (ForwardOutput, WscnConfig, WscnModel, build_model,
                    count_flops, count_params, encode, forward, freeze_encoder,
                    load_model, save_model, unfreeze_encoder)
from .quant import (QuantizedModel, QuantParams, export_quantized,
                    load_quantized, quantize_model, quantized_forward)
from .tensor import Tape, Tensor, backward
from .train import Adam, PlateauSchedule, TrainConfig, evaluate, fit

__all__ = [
    "__version__",
    "Adam", "ArchiveError", "CheckpointError", "ConfigError", "CLASS_DEFS",
    "CLASS_NAMES", "DataError", "ForwardOutput", "NUM_CLASSES",
    "PlateauSchedule", "QuantError", "QuantParams", "QuantizedModel",
    "ShapeError", "Tape", "TapeError", "Tensor", "TrainConfig",
    "WaferDataset", "WaferMap", "WaferSample", "WscnConfig", "WscnError",
    "WscnModel", "backward", "build_model", "check_gradients", "count_flops",
    "count_params", "derive_mask", "encode", "evaluate", "export_quantized",
    "fit", "forward", "freeze_encoder", "generate_wafer_map", "load_model",
    "load_quantized", "make_dataset", "preprocess", "quantize_model",
    "quantized_forward", "save_model", "split_dataset", "unfreeze_encoder",
]
