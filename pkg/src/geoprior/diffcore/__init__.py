from . import tensor as T
from .checkpoint import load_checkpoint, load_store, save_checkpoint, save_store
from .gradcheck import EvaluationError, GradReport, check_gradients
from .nn import Linear, MlpBlock, ParamStore, ResNetFC, forward_mlp
from .optim import ConfigError, adamw_step
from .tensor import ContractError, DimensionError, Tensor, as_tensor, backward

__all__ = [
    "T", "Tensor", "as_tensor", "backward", "ContractError", "DimensionError",
    "ParamStore", "Linear", "MlpBlock", "ResNetFC", "forward_mlp",
    "adamw_step", "ConfigError", "check_gradients", "GradReport", "EvaluationError",
    "save_checkpoint", "load_checkpoint", "save_store", "load_store",
]
