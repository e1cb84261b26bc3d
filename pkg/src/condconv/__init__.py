"""Per-example conditionally parameterized convolutions.

A small NHWC tensor/autodiff engine, conditional convolution layers with two
equivalent execution strategies, an exact multiply-add cost model, a
MobileNetV1-family model builder, a seeded training harness, and routing
weight analysis tools.
"""

from .tensor import Tensor, ShapeError, precision, inference_mode, gradients
from .layers import (
    ConvKind,
    ExecutionStrategy,
    ExpertBank,
    route,
    combine_kernels,
    condconv_forward,
    condconv_fc,
    select_strategy,
    expert_dropout,
)
from .errors import ConfigError, DataFormatError, CheckpointError, TrainingDiverged
from .routers import RouterConfig, make_router, bind_shared_routers
from .modelspec import LayerDef, ModelSpec, validate
from .costmodel import LayerCost, conv_madds, condconv_madds, model_madds
from .zoo import Model, build_model, build_mobilenet_v1, build_toy_cnn
from .data import Dataset, load_dataset, save_dataset, synthetic_blobs, split_train_val
from .training import TrainConfig, train, evaluate, mixup
from .checkpoint import save_checkpoint, load_checkpoint
from .analysis import (
    RoutingTrace,
    collect_trace,
    per_class_mean,
    routing_histogram,
    class_specificity_by_depth,
    top_classes_per_expert,
)

__version__ = "0.1.0"
