"""Desk-scale recursive visual-explanation lab."""

__version__ = "0.1.0"

from .autodiff import Tensor, dtype_scope, no_grad  # noqa: F401
from .model import ModelConfig, ModelParams, init_params, set_freezing  # noqa: F401
from .nncore import ParamTensor, OptimizerState  # noqa: F401
from .revise import ReviseConfig, ReviseTrace, revise_infer  # noqa: F401
from .scenegen import DatasetConfig, generate_dataset  # noqa: F401
from .text import Vocab, build_vocab, format_prompt, format_target, parse_output  # noqa: F401
