"""The eight candidate operators, instantiated as small sub-networks.

Kind order is load-bearing: it indexes the columns of the architecture
parameter matrices and the serialized mnemonic strings.  Convolutional
operators follow the relu -> conv -> batchnorm composition; separable
convolutions stack that block twice; pooling stays parameter-free.
"""

from __future__ import annotations

import enum

import numpy as np

from . import tensor as tc
from .errors import ConfigurationError


class CandidateOpKind(enum.IntEnum):
    Conv3 = 0
    SpeConv3 = 1
    DilConv3 = 2
    MaxPool3 = 3
    AvgPool3 = 4
    SkipConnect = 5
    SeConnect = 6
    Zero = 7


OP_NAMES = tuple(k.name for k in CandidateOpKind)
SE_RATIO = 4


def kind_from_name(name):
    try:
        return CandidateOpKind[name]
    except KeyError:
        raise ConfigurationError(f"unknown operator name {name!r}") from None


def uniform_init(rng, shape, fan_in, dtype):
    limit = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class BatchNorm:
    """Per-channel affine normalization with running statistics."""

    def __init__(self, C, name, dtype):
        self.scale = tc.Parameter(np.ones(C, dtype=dtype), f"{name}.scale")
        self.shift = tc.Parameter(np.zeros(C, dtype=dtype), f"{name}.shift")
        self.running_mean = np.zeros(C, dtype=dtype)
        self.running_var = np.ones(C, dtype=dtype)

    def __call__(self, x, train):
        return tc.batchnorm2d(
            x,
            self.scale.tensor,
            self.shift.tensor,
            self.running_mean,
            self.running_var,
            training=train,
        )

    def params(self):
        return [self.scale, self.shift]


class ReluConvBN:
    """relu -> conv -> batchnorm, the shared convolutional composition."""

    def __init__(
        self,
        C_in,
        C_out,
        kernel,
        stride,
        padding,
        name,
        rng,
        dtype,
        dilation=1,
        groups=1,
        relu_first=True,
    ):
        kh = kw = kernel
        fan_in = (C_in // groups) * kh * kw
        self.weight = tc.Parameter(
            uniform_init(rng, (C_out, C_in // groups, kh, kw), fan_in, dtype),
            f"{name}.weight",
        )
        self.bn = BatchNorm(C_out, f"{name}.bn", dtype)
        self.stride = (stride, stride)
        self.padding = (padding, padding)
        self.dilation = (dilation, dilation)
        self.groups = groups
        self.relu_first = relu_first

    def __call__(self, x, train):
        h = tc.relu(x) if self.relu_first else x
        h = tc.conv2d(
            h,
            self.weight.tensor,
            stride=self.stride,
            padding=self.padding,
            dilation=self.dilation,
            groups=self.groups,
        )
        return self.bn(h, train)

    def params(self):
        return [self.weight] + self.bn.params()


class _SepBlock:
    """relu -> depthwise conv -> 1x1 pointwise conv -> batchnorm."""

    def __init__(self, C, stride, padding, dilation, name, rng, dtype):
        self.dw = tc.Parameter(
            uniform_init(rng, (C, 1, 3, 3), 9, dtype), f"{name}.dw"
        )
        self.pw = tc.Parameter(
            uniform_init(rng, (C, C, 1, 1), C, dtype), f"{name}.pw"
        )
        self.bn = BatchNorm(C, f"{name}.bn", dtype)
        self.C = C
        self.stride = (stride, stride)
        self.padding = (padding, padding)
        self.dilation = (dilation, dilation)

    def __call__(self, x, train):
        h = tc.relu(x)
        h = tc.conv2d(
            h,
            self.dw.tensor,
            stride=self.stride,
            padding=self.padding,
            dilation=self.dilation,
            groups=self.C,
        )
        h = tc.conv2d(h, self.pw.tensor)
        return self.bn(h, train)

    def params(self):
        return [self.dw, self.pw] + self.bn.params()


class Op:
    """Base candidate operator: fixed (kind, stride, channels) after build."""

    def __init__(self, kind, C, stride):
        self.kind = kind
        self.C = C
        self.stride = stride

    def params(self):
        return []

    def __call__(self, x, train=False):
        raise NotImplementedError


class Conv3Op(Op):
    def __init__(self, C, stride, name, rng, dtype):
        super().__init__(CandidateOpKind.Conv3, C, stride)
        self.block = ReluConvBN(C, C, 3, stride, 1, name, rng, dtype)

    def __call__(self, x, train=False):
        return self.block(x, train)

    def params(self):
        return self.block.params()


class SepConv3Op(Op):
    """Separable convolution applied twice; only the first block strides."""

    def __init__(self, C, stride, name, rng, dtype):
        super().__init__(CandidateOpKind.SpeConv3, C, stride)
        self.block1 = _SepBlock(C, stride, 1, 1, f"{name}.b1", rng, dtype)
        self.block2 = _SepBlock(C, 1, 1, 1, f"{name}.b2", rng, dtype)

    def __call__(self, x, train=False):
        return self.block2(self.block1(x, train), train)

    def params(self):
        return self.block1.params() + self.block2.params()


class DilConv3Op(Op):
    """Dilated separable convolution, applied once by default.

    ``twice=True`` switches to the stacked reading for ablations.
    """

    def __init__(self, C, stride, name, rng, dtype, twice=False):
        super().__init__(CandidateOpKind.DilConv3, C, stride)
        self.block1 = _SepBlock(C, stride, 2, 2, f"{name}.b1", rng, dtype)
        self.block2 = (
            _SepBlock(C, 1, 2, 2, f"{name}.b2", rng, dtype) if twice else None
        )

    def __call__(self, x, train=False):
        h = self.block1(x, train)
        if self.block2 is not None:
            h = self.block2(h, train)
        return h

    def params(self):
        out = self.block1.params()
        if self.block2 is not None:
            out += self.block2.params()
        return out


class PoolOp(Op):
    def __init__(self, kind, C, stride):
        super().__init__(kind, C, stride)
        self.mode = "max" if kind is CandidateOpKind.MaxPool3 else "average"

    def __call__(self, x, train=False):
        return tc.pool2d(x, self.mode, stride=(self.stride, self.stride))


class FactorizedReduce:
    """Stride-2 downsampling for parameter-free operators.

    Two 1x1 stride-2 convolutions of half width each, the second applied
    to the input shifted by one cell in both spatial axes, concatenated on
    channels and normalized.  The shift path zero-fills the far edge so
    both paths agree on output size for odd inputs too.
    """

    def __init__(self, C_in, C_out, name, rng, dtype):
        if C_out % 2 != 0:
            raise ConfigurationError(
                f"factorized reduce needs an even channel count to split, got {C_out}"
            )
        half = C_out // 2
        self.conv1 = tc.Parameter(
            uniform_init(rng, (half, C_in, 1, 1), C_in, dtype), f"{name}.conv1"
        )
        self.conv2 = tc.Parameter(
            uniform_init(rng, (half, C_in, 1, 1), C_in, dtype), f"{name}.conv2"
        )
        self.bn = BatchNorm(C_out, f"{name}.bn", dtype)

    def __call__(self, x, train):
        h = tc.relu(x)
        a = tc.conv2d(h, self.conv1.tensor, stride=(2, 2))
        b = tc.conv2d(tc.shift_spatial(h), self.conv2.tensor, stride=(2, 2))
        return self.bn(tc.channel_concat([a, b]), train)

    def params(self):
        return [self.conv1, self.conv2] + self.bn.params()


class SkipConnectOp(Op):
    def __init__(self, C, stride, name, rng, dtype):
        super().__init__(CandidateOpKind.SkipConnect, C, stride)
        self.reduce = (
            FactorizedReduce(C, C, name, rng, dtype) if stride == 2 else None
        )

    def __call__(self, x, train=False):
        if self.reduce is None:
            return x
        return self.reduce(x, train)

    def params(self):
        return [] if self.reduce is None else self.reduce.params()


class SeConnectOp(Op):
    """Squeeze-and-excitation gate over channels.

    Global average over (frames, joints), a two-layer bottleneck with a
    sigmoid gate, then channelwise rescale of the input.  At stride 2 the
    input passes through a factorized reduce first and the gate acts on
    the reduced tensor.
    """

    def __init__(self, C, stride, name, rng, dtype, ratio=SE_RATIO):
        super().__init__(CandidateOpKind.SeConnect, C, stride)
        hidden = max(1, C // ratio)
        self.reduce = (
            FactorizedReduce(C, C, f"{name}.reduce", rng, dtype)
            if stride == 2
            else None
        )
        self.w1 = tc.Parameter(
            uniform_init(rng, (hidden, C), C, dtype), f"{name}.fc1.weight"
        )
        self.b1 = tc.Parameter(np.zeros(hidden, dtype=dtype), f"{name}.fc1.bias")
        self.w2 = tc.Parameter(
            uniform_init(rng, (C, hidden), hidden, dtype), f"{name}.fc2.weight"
        )
        self.b2 = tc.Parameter(np.zeros(C, dtype=dtype), f"{name}.fc2.bias")

    def __call__(self, x, train=False):
        h = x if self.reduce is None else self.reduce(x, train)
        squeezed = tc.global_avg_spatial(h)
        z = tc.relu(tc.linear(squeezed, self.w1.tensor, self.b1.tensor))
        gate = tc.sigmoid(tc.linear(z, self.w2.tensor, self.b2.tensor))
        return tc.scale_channels(h, gate)

    def params(self):
        base = [self.w1, self.b1, self.w2, self.b2]
        return base if self.reduce is None else self.reduce.params() + base


class ZeroOp(Op):
    def __init__(self, C, stride):
        super().__init__(CandidateOpKind.Zero, C, stride)

    def __call__(self, x, train=False):
        return tc.zeros_like_strided(x, self.stride)


def build_op(kind, C, stride, rng, name=None, dtype=None, dilconv_twice=False):
    """Instantiate one candidate operator at the given width and stride."""
    if C < 1:
        raise ConfigurationError(f"channel count must be >= 1, got {C}")
    if stride not in (1, 2):
        raise ConfigurationError(f"stride must be 1 or 2, got {stride}")
    if dtype is None:
        dtype = tc.DEFAULT_DTYPE
    if name is None:
        name = kind.name
    if kind is CandidateOpKind.Conv3:
        return Conv3Op(C, stride, name, rng, dtype)
    if kind is CandidateOpKind.SpeConv3:
        return SepConv3Op(C, stride, name, rng, dtype)
    if kind is CandidateOpKind.DilConv3:
        return DilConv3Op(C, stride, name, rng, dtype, twice=dilconv_twice)
    if kind in (CandidateOpKind.MaxPool3, CandidateOpKind.AvgPool3):
        return PoolOp(kind, C, stride)
    if kind is CandidateOpKind.SkipConnect:
        return SkipConnectOp(C, stride, name, rng, dtype)
    if kind is CandidateOpKind.SeConnect:
        return SeConnectOp(C, stride, name, rng, dtype)
    if kind is CandidateOpKind.Zero:
        return ZeroOp(C, stride)
    raise ConfigurationError(f"unknown operator kind {kind!r}")


def op_param_count(kind, C, stride, se_ratio=SE_RATIO, dilconv_twice=False):
    """Exact parameter-element count of one operator instance."""
    bn = 2 * C
    sep_block = 9 * C + C * C + bn
    fact_reduce = C * C + bn
    if kind is CandidateOpKind.Conv3:
        return 9 * C * C + bn
    if kind is CandidateOpKind.SpeConv3:
        return 2 * sep_block
    if kind is CandidateOpKind.DilConv3:
        return sep_block * (2 if dilconv_twice else 1)
    if kind in (CandidateOpKind.MaxPool3, CandidateOpKind.AvgPool3, CandidateOpKind.Zero):
        return 0
    if kind is CandidateOpKind.SkipConnect:
        return 0 if stride == 1 else fact_reduce
    if kind is CandidateOpKind.SeConnect:
        hidden = max(1, C // se_ratio)
        se = C * hidden + hidden + hidden * C + C
        return se if stride == 1 else se + fact_reduce
    raise ConfigurationError(f"unknown operator kind {kind!r}")


def has_batchnorm(kind, stride):
    """Whether the operator's composition runs through train-mode batchnorm."""
    if kind in (
        CandidateOpKind.Conv3,
        CandidateOpKind.SpeConv3,
        CandidateOpKind.DilConv3,
    ):
        return True
    if kind in (CandidateOpKind.SkipConnect, CandidateOpKind.SeConnect):
        return stride == 2
    return False
