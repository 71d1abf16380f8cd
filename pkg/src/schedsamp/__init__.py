"""Two-pass scheduled sampling for transformer sequence-to-sequence models."""

from .autodiff import Tensor, backward, detach, grad_check, no_grad
from .mixing import MixStrategy, build_second_pass_inputs
from .scheduling import TeacherForcingSchedule, learning_rate, tf_probability
from .transformer import Transformer, TransformerConfig

__all__ = [
    "MixStrategy",
    "TeacherForcingSchedule",
    "Tensor",
    "Transformer",
    "TransformerConfig",
    "backward",
    "build_second_pass_inputs",
    "detach",
    "grad_check",
    "learning_rate",
    "no_grad",
    "tf_probability",
]
