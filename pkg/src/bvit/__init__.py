"""Single-block recurrent vision transformers on a small numpy autodiff core."""

__version__ = "0.1.0"

from .model import ModelConfig, VisionTransformer, count_flops, count_params, imagenet_config  # noqa: E402
from .tensor import Tensor, no_grad  # noqa: E402

__all__ = ["ModelConfig", "Tensor", "VisionTransformer", "count_flops", "count_params", "imagenet_config", "no_grad"]
