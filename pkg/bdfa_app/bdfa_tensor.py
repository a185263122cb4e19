#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
Tensor substrate for the toolkit.

Values, gradients and the autodiff tape come from torch; this module pins the
precision, validates shapes and finiteness per op and owns the one-shot
backward contract the attack and distillation loops rely on.
"""

import logging

import torch
import torch.nn.functional as F

from bdfa_errors import BackwardError, NonFiniteError, ShapeError

logger = logging.getLogger(__name__)

Tensor = torch.Tensor

PRECISIONS = {"float32": torch.float32, "float64": torch.float64}

_BACKWARD_DONE = "_bdfa_backward_done"


def set_precision(name: str):
    """Selects 32-bit (runs) or 64-bit (gradient verification) floats for every new tensor."""
    if name not in PRECISIONS:
        raise ValueError("precision must be one of %s, got %r" % (sorted(PRECISIONS), name))
    torch.set_default_dtype(PRECISIONS[name])


def get_dtype():
    return torch.get_default_dtype()


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    dtype = dtype or get_dtype()
    value = torch.as_tensor(data, dtype=dtype).clone()
    if value.numel() == 0:
        raise ShapeError("tensor: empty shape %s" % (list(value.shape),))
    value.requires_grad_(requires_grad)
    return value


def make_generator(seed: int) -> torch.Generator:
    generator = torch.Generator()
    generator.manual_seed(int(seed))
    return generator


def _dims(*tensors):
    return ", ".join(str(list(t.shape)) for t in tensors)


def _require_ndim(op, value, ndim, name="input"):
    if value.dim() != ndim:
        raise ShapeError("%s: %s must be %d-d, got %s" % (op, name, ndim, list(value.shape)))


def _check_finite(op, tensors):
    for value in tensors:
        if value.is_floating_point() and not bool(torch.isfinite(value.detach()).all()):
            raise NonFiniteError("%s: non-finite input of shape %s" % (op, list(value.shape)))


def _matmul(a, b):
    _require_ndim("matmul", a, 2, "a")
    _require_ndim("matmul", b, 2, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul: inner dims differ %s" % _dims(a, b))
    return a @ b


def _linear(x, weight, bias=None):
    _require_ndim("linear", x, 2)
    _require_ndim("linear", weight, 2, "weight")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            "linear: features %d != weight fan-in %d (%s)" % (x.shape[1], weight.shape[1], _dims(x, weight))
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError("linear: bias %s does not match %d outputs" % (list(bias.shape), weight.shape[0]))
    return F.linear(x, weight, bias)


def _conv2d(x, weight, bias=None, stride=1, pad=0):
    _require_ndim("conv2d", x, 4)
    _require_ndim("conv2d", weight, 4, "weight")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            "conv2d: input channels %d != kernel channels %d (%s)" % (x.shape[1], weight.shape[1], _dims(x, weight))
        )
    out_h = (x.shape[2] + 2 * pad - weight.shape[2]) // stride + 1
    out_w = (x.shape[3] + 2 * pad - weight.shape[3]) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError("conv2d: kernel %s larger than padded input %s" % (list(weight.shape[2:]), list(x.shape[2:])))
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError("conv2d: bias %s does not match %d filters" % (list(bias.shape), weight.shape[0]))
    return F.conv2d(x, weight, bias, stride=stride, padding=pad)


def channel_stats(x):
    """Per-channel mean and population variance over (N, H, W)."""
    _require_ndim("channel_stats", x, 4)
    mean = x.mean(dim=(0, 2, 3))
    var = x.var(dim=(0, 2, 3), unbiased=False)
    return mean, var


def _batchnorm2d(x, gamma, beta, mean=None, var=None, eps=1e-5):
    # mean/var omitted -> batch statistics, gradient flows through them.
    _require_ndim("batchnorm2d", x, 4)
    channels = x.shape[1]
    for name, value in (("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)):
        if value is not None and value.shape != (channels,):
            raise ShapeError("batchnorm2d: %s %s does not match %d channels" % (name, list(value.shape), channels))
    if mean is None or var is None:
        mean, var = channel_stats(x)
    shape = (1, channels, 1, 1)
    normalized = (x - mean.view(shape)) / torch.sqrt(var.view(shape) + eps)
    return normalized * gamma.view(shape) + beta.view(shape)


def _relu(x):
    return torch.relu(x)


def _pool_checks(op, x, kernel, stride):
    _require_ndim(op, x, 4)
    if kernel < 1 or stride < 1 or x.shape[2] < kernel or x.shape[3] < kernel:
        raise ShapeError("%s: kernel %d stride %d invalid for %s" % (op, kernel, stride, list(x.shape)))


def _maxpool2d(x, kernel=2, stride=None):
    stride = stride or kernel
    _pool_checks("maxpool2d", x, kernel, stride)
    return F.max_pool2d(x, kernel, stride)


def _avgpool2d(x, kernel=2, stride=None):
    stride = stride or kernel
    _pool_checks("avgpool2d", x, kernel, stride)
    return F.avg_pool2d(x, kernel, stride)


def _add(a, b):
    if a.shape != b.shape:
        raise ShapeError("add: %s" % _dims(a, b))
    return a + b


def _mul(a, b):
    if a.shape != b.shape:
        raise ShapeError("mul: %s" % _dims(a, b))
    return a * b


def _flatten(x):
    if x.dim() < 2:
        raise ShapeError("flatten: need a batch dimension, got %s" % list(x.shape))
    return x.reshape(x.shape[0], -1)


def _softmax_cross_entropy(logits, labels):
    labels = torch.as_tensor(labels, dtype=torch.int64)
    if logits.dim() == 1:
        logits = logits.unsqueeze(0)
        labels = labels.reshape(1)
    _require_ndim("softmax_cross_entropy", logits, 2, "logits")
    if labels.shape != (logits.shape[0],):
        raise ShapeError("softmax_cross_entropy: labels %s for logits %s" % (list(labels.shape), list(logits.shape)))
    num_classes = logits.shape[1]
    outside = (labels < 0) | (labels >= num_classes)
    if bool(outside.any()):
        raise ShapeError("softmax_cross_entropy: label outside [0, %d): %s" % (num_classes, labels[outside].tolist()))
    return F.cross_entropy(logits, labels)


def _mse(y, target):
    if y.shape != target.shape:
        raise ShapeError("mse: %s" % _dims(y, target))
    return torch.mean((y - target) ** 2)


def _scale(x, factor=1.0):
    return x * factor


def _sum(x):
    return x.sum()


def _mean(x):
    return x.mean()


OPS = {
    "matmul": _matmul,
    "linear": _linear,
    "conv2d": _conv2d,
    "batchnorm2d": _batchnorm2d,
    "relu": _relu,
    "maxpool2d": _maxpool2d,
    "avgpool2d": _avgpool2d,
    "add": _add,
    "mul": _mul,
    "flatten": _flatten,
    "softmax_cross_entropy": _softmax_cross_entropy,
    "mse": _mse,
    "scale": _scale,
    "sum": _sum,
    "mean": _mean,
}


def forward_op(op: str, *inputs, **params) -> Tensor:
    """
    Runs one named op on validated inputs. The torch tape records the node
    whenever an input requires grad; a fresh tape is built on every call.

    Raises:
        ShapeError: shapes violate the op's rule (message names op and dims).
        NonFiniteError: any floating input holds NaN/Inf.
    """
    if op not in OPS:
        raise ValueError("unknown op %r" % op)
    tensors = [value for value in list(inputs) + list(params.values()) if isinstance(value, torch.Tensor)]
    _check_finite(op, tensors)
    return OPS[op](*inputs, **params)


def backward(loss: Tensor):
    """
    Populates .grad of every requires_grad leaf reachable from loss.

    A loss tensor can be differentiated once; a second call raises instead of
    silently accumulating into existing gradients.
    """
    if not isinstance(loss, torch.Tensor) or loss.numel() != 1:
        shape = list(loss.shape) if isinstance(loss, torch.Tensor) else type(loss).__name__
        raise BackwardError("backward: loss must be a scalar, got %s" % (shape,))
    if not loss.requires_grad:
        raise BackwardError("backward: loss is not on the tape")
    if getattr(loss, _BACKWARD_DONE, False):
        raise BackwardError("backward: already called for this loss; rerun the forward pass")
    if not bool(torch.isfinite(loss.detach()).all()):
        raise NonFiniteError("backward: loss is %s" % loss.item())
    loss.reshape(()).backward()
    setattr(loss, _BACKWARD_DONE, True)


def zero_grad(tensors):
    for value in tensors:
        value.grad = None
