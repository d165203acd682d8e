"""Minimal dense-tensor engine: reverse-mode autodiff, AdamW, checkpoints."""
from .tensor import (
    BroadcastError,
    GraphConsumedError,
    NonFiniteError,
    Tape,
    Tensor,
    as_tensor,
    backward,
    default_dtype,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    set_default_dtype,
    set_finite_check,
)
from . import ops
from .ops import (
    add,
    attention_core,
    concat,
    cross_entropy,
    div,
    drop_path,
    dropout,
    exp,
    flip,
    gelu,
    getitem,
    grid_resample,
    layernorm,
    linear,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    sigmoid,
    silu,
    softmax,
    sub,
    tanh,
    transpose,
    unfold3x3,
)
from .optim import AdamW, AdamWState, adamw_step
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import check_gradients, numerical_grad

__all__ = [name for name in dir() if not name.startswith("_")]
