"""Minimal reverse-mode autodiff on numpy arrays, sized for small MLPs."""
from nriuq.autodiff.tensor import (
    AutogradError,
    ShapeError,
    Tensor,
    as_tensor,
    batch_norm,
    broadcast_to,
    concat,
    elu,
    exp,
    grad,
    log,
    log_softmax,
    matmul,
    mean,
    no_grad,
    reshape,
    softmax,
    softplus,
    sqrt,
    square,
    stack,
    swapaxes,
    take,
    tsum,
)
from nriuq.autodiff.nn import MLP, BatchNorm, Linear, Module, Parameter
from nriuq.autodiff.optim import Adam, AdamState, adam_step, lr_schedule
from nriuq.autodiff.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
