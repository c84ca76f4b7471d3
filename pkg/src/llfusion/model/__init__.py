from .engine import Parameter, ParameterStore, Tensor, attention, backward
from .network import (
    ABLATION_MODES,
    FusionNet,
    ModelConfig,
    cross_attention,
    effective_fused,
    fused_width,
    illumination_estimator,
    init_param_store,
    light_up,
    num_parameters,
    parameter_shapes,
    pca_reduce_t,
    reconstruct,
    self_attention,
)
from .pca import PcaProjection, pca_fit, pca_reduce, random_orthonormal_projection
from .checkpoint import AdamState, Checkpoint, load_checkpoint, save_checkpoint

__all__ = [
    "ABLATION_MODES", "AdamState", "Checkpoint", "FusionNet", "ModelConfig",
    "Parameter", "ParameterStore", "PcaProjection", "Tensor", "attention",
    "backward", "cross_attention", "effective_fused", "fused_width",
    "illumination_estimator",
    "init_param_store", "light_up", "load_checkpoint", "num_parameters",
    "parameter_shapes", "pca_fit", "pca_reduce", "pca_reduce_t",
    "random_orthonormal_projection", "reconstruct", "save_checkpoint",
    "self_attention",
]
