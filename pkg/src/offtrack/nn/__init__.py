"""Minimal differentiable kernel: tensors with reverse-mode autodiff,
linear/norm/pooling/attention layers, Adam with a one-cycle schedule,
finite-difference gradient checking, and binary checkpoints."""

from offtrack.nn.autograd import (Tensor, bce_with_logits, concat,
                                  cross_entropy_with_logits, logsumexp,
                                  masked_softmax, no_grad, parameter)
from offtrack.nn.checkpoint import (CheckpointError, load_checkpoint,
                                    save_checkpoint)
from offtrack.nn.gradcheck import grad_check
from offtrack.nn.layers import (D_MODEL, ENCODER_INPUT_WIDTHS, AttentionBlock,
                                BatchNorm, Linear, Module, PointNetEncoder,
                                PointNetValueEncoder)
from offtrack.nn.optim import Adam, one_cycle_lr

__all__ = [
    "Tensor", "no_grad", "parameter", "concat", "masked_softmax", "logsumexp",
    "cross_entropy_with_logits", "bce_with_logits",
    "Module", "Linear", "BatchNorm", "PointNetEncoder", "PointNetValueEncoder",
    "AttentionBlock", "D_MODEL", "ENCODER_INPUT_WIDTHS",
    "Adam", "one_cycle_lr", "grad_check",
    "save_checkpoint", "load_checkpoint", "CheckpointError",
]
