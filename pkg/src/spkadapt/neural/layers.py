"""Layer inventory shared by both acoustic models and the LM.

Tensors are plain ``torch.Tensor`` objects; autograd supplies the backward
pass. Parameters are initialised from a per-parameter seed derived from the
model seed and the parameter name, so two models that share parameter names
share initial values regardless of what other parameters exist.
"""

import math
import zlib

import torch
from torch import nn

from .._validation import ValidationError

LEAKY_SLOPE = 0.01
BN_MOMENTUM = 0.1  # torch convention: running = 0.9 * running + 0.1 * batch
BN_EPS = 1e-5
DEFAULT_DROPOUT = 0.1


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN/Inf."""


def param_seed(seed, name):
    return (seed * 1_000_003 + zlib.crc32(name.encode())) % (2**63)


def init_parameters(module, seed):
    """Fan-in scaled uniform init for matrices, zeros for biases, ones for norm gains."""
    with torch.no_grad():
        for name, p in module.named_parameters():
            leaf = name.rsplit(".", 1)[-1]
            gen = torch.Generator().manual_seed(param_seed(seed, name))
            if p.dim() > 1:
                fan_in = p[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                p.copy_(torch.empty(p.shape, dtype=torch.float64).uniform_(-bound, bound, generator=gen))
            elif leaf == "weight":
                p.fill_(1.0)
            else:
                p.zero_()
    return module


class ConcatLinear(nn.Module):
    """Linear layer over ``[x || s]`` with the speaker columns held separately.

    ``weight`` covers the first ``in_features`` inputs and is named exactly as
    in a plain :class:`torch.nn.Linear`; ``speaker_weight`` covers the
    appended ``extra_features`` columns. With ``speaker_weight`` zeroed the
    output equals the plain layer bit for bit.
    """

    def __init__(self, in_features, out_features, extra_features=0, bias=True):
        super().__init__()
        self.in_features = in_features
        self.extra_features = extra_features
        self.weight = nn.Parameter(torch.empty(out_features, in_features))
        self.bias = nn.Parameter(torch.zeros(out_features)) if bias else None
        if extra_features:
            self.speaker_weight = nn.Parameter(torch.empty(out_features, extra_features))
        else:
            self.register_parameter("speaker_weight", None)

    def forward(self, x):
        width = self.in_features + self.extra_features
        if x.shape[-1] != width:
            raise ValidationError(f"expected input width {width}, got {x.shape[-1]}")
        if self.speaker_weight is None:
            return nn.functional.linear(x, self.weight, self.bias)
        # a strided slice can take a different BLAS path and round differently
        y = nn.functional.linear(x[..., : self.in_features].contiguous(), self.weight, self.bias)
        return y + nn.functional.linear(x[..., self.in_features:], self.speaker_weight)


class MaskedBatchNorm(nn.Module):
    """Batch norm over feature channels using only the valid (unpadded) frames."""

    def __init__(self, dim, momentum=BN_MOMENTUM, eps=BN_EPS):
        super().__init__()
        self.bn = nn.BatchNorm1d(dim, momentum=momentum, eps=eps)

    def forward(self, x, mask=None):
        """``x``: (..., dim); ``mask``: bool (...) marking valid frames."""
        if mask is None:
            flat = x.reshape(-1, x.shape[-1])
            return self.bn(flat).reshape(x.shape)
        out = torch.zeros_like(x)
        out[mask] = self.bn(x[mask])
        return out


class LogSoftmax(nn.Module):
    def forward(self, x):
        return torch.log_softmax(x, dim=-1)


class Softmax(nn.Module):
    def forward(self, x):
        return torch.softmax(x, dim=-1)


class TimeConv1d(nn.Module):
    """Conv over time on (batch, time, channels) tensors."""

    def __init__(self, c_in, c_out, kernel, stride=1, padding=0):
        super().__init__()
        self.conv = nn.Conv1d(c_in, c_out, kernel, stride=stride, padding=padding)

    def forward(self, x):
        return self.conv(x.transpose(1, 2)).transpose(1, 2)

    def output_length(self, n):
        c = self.conv
        return (n + 2 * c.padding[0] - c.kernel_size[0]) // c.stride[0] + 1


def build_layer(kind, dim_in=None, dim_out=None, **kw):
    """Construct one layer of the inventory by name."""
    if kind == "linear":
        return ConcatLinear(dim_in, dim_out, kw.get("extra", 0))
    if kind == "conv1d":
        return TimeConv1d(dim_in, dim_out, kw.get("kernel", 3), kw.get("stride", 1), kw.get("padding", 0))
    if kind == "batchnorm":
        return MaskedBatchNorm(dim_in)
    if kind == "layernorm":
        return nn.LayerNorm(dim_in, eps=kw.get("eps", 1e-5))
    if kind == "dropout":
        return nn.Dropout(kw.get("p", DEFAULT_DROPOUT))
    if kind == "leakyrelu":
        return nn.LeakyReLU(kw.get("slope", LEAKY_SLOPE))
    if kind == "gelu":
        return nn.GELU()
    if kind == "softmax":
        return Softmax()
    if kind == "logsoftmax":
        return LogSoftmax()
    if kind == "embedding":
        return nn.Embedding(dim_in, dim_out)
    raise ValidationError(f"unknown layer kind {kind!r}")


LAYER_KINDS = (
    "linear", "conv1d", "batchnorm", "layernorm", "dropout",
    "leakyrelu", "gelu", "softmax", "logsoftmax", "embedding",
)


def layer_forward_backward(layer, x, grad_output=None):
    """Run ``layer`` forward and backpropagate ``grad_output`` (ones by default).

    Returns ``(output, input_grad)``; parameter gradients accumulate on the layer.
    Integer inputs (embedding lookups) yield ``input_grad=None``.
    """
    differentiable = x.is_floating_point()
    x = x.detach().clone().requires_grad_(differentiable)
    y = layer(x)
    if grad_output is None:
        grad_output = torch.ones_like(y)
    if grad_output.shape != y.shape:
        raise ValidationError(f"grad_output shape {tuple(grad_output.shape)} != output {tuple(y.shape)}")
    y.backward(grad_output)
    return y.detach(), (x.grad if differentiable else None)


def check_finite(tensor, what):
    if not torch.isfinite(tensor).all():
        raise NonFiniteError(f"non-finite values in {what}")
