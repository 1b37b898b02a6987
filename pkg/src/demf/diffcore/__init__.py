"""Minimal reverse-mode differentiation over numpy arrays."""

from .checkpoint import CheckpointMismatch, load_checkpoint, read_checkpoint, save_checkpoint
from .gradcheck import GradReport, grad_check
from .nn import LayerNorm, Linear, Module, Parameter
from .optim import AdamW, MissingGrad
from .rng import make_rng
from .tensor import (
    NonScalarLoss,
    ShapeMismatch,
    Tensor,
    add,
    as_tensor,
    concat,
    conv2d,
    default_dtype,
    div,
    dropout,
    exp,
    get_default_dtype,
    getitem,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    relu,
    reshape,
    set_default_dtype,
    softmax,
    stack,
    sub,
    tabs,
    transpose,
    tsum,
)
