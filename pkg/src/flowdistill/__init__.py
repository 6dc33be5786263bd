"""flowdistill: joint self-distillation representation learning and
flow-matching generation over frame-level feature sequences."""

__version__ = "0.1.0"

from .autodiff import Tensor, backward, no_grad, tensor  # noqa: F401
from .model import JointModel, ModelConfig  # noqa: F401
from .trainer import TrainConfig, TrainerState, train  # noqa: F401
