"""Pose Attention Block: channel (ACAM) and spatial (SpAM) gates from pose features.

All functional ops accept an unbatched ``(C, H, W)`` map or a batched
``(B, C, H, W)`` one and never modify their inputs.
"""

import enum
import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import InvalidInputError, ShapeError


class AttentionOrder(str, enum.Enum):
    CHANNEL_THEN_SPATIAL = "channel_then_spatial"
    SPATIAL_THEN_CHANNEL = "spatial_then_channel"


class SpamVariant(str, enum.Enum):
    # 3x3 conv, stride 2, no padding (the default head)
    CONV3_STRIDE2 = "conv3_stride2"
    # 1x1 conv followed by a 3x3/stride-2 max pool
    CONV1_MAXPOOL = "conv1_maxpool"


def uniform_fan_in_(tensor, fan_in, generator):
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        tensor.uniform_(-bound, bound, generator=generator)
    return tensor


class Mlp(nn.Module):
    """Two affine layers with a ReLU in between."""

    def __init__(self, input_dim, output_dim, hidden_dim=128, dtype=torch.float32):
        super().__init__()
        if min(input_dim, output_dim, hidden_dim) < 1:
            raise ShapeError("MLP dimensions must be positive")
        self.input_dim = input_dim
        self.hidden_dim = hidden_dim
        self.output_dim = output_dim
        self.w1 = nn.Parameter(torch.zeros(hidden_dim, input_dim, dtype=dtype))
        self.b1 = nn.Parameter(torch.zeros(hidden_dim, dtype=dtype))
        self.w2 = nn.Parameter(torch.zeros(output_dim, hidden_dim, dtype=dtype))
        self.b2 = nn.Parameter(torch.zeros(output_dim, dtype=dtype))

    def reset_parameters(self, generator):
        uniform_fan_in_(self.w1, self.input_dim, generator)
        uniform_fan_in_(self.b1, self.input_dim, generator)
        uniform_fan_in_(self.w2, self.hidden_dim, generator)
        uniform_fan_in_(self.b2, self.hidden_dim, generator)

    def forward(self, v):
        if v.shape[-1] != self.input_dim:
            raise ShapeError(f"MLP expects {self.input_dim} inputs, got {v.shape[-1]}")
        h = torch.relu(v @ self.w1.T + self.b1)
        return h @ self.w2.T + self.b2


class SpatialConv(nn.Module):
    """Single-output convolution over the stacked (avg, max) descriptors."""

    def __init__(self, kernel_size=3, stride=2, dtype=torch.float32):
        super().__init__()
        self.kernel_size = kernel_size
        self.stride = stride
        self.w = nn.Parameter(torch.zeros(1, 2, kernel_size, kernel_size, dtype=dtype))
        self.b = nn.Parameter(torch.zeros(1, dtype=dtype))

    def reset_parameters(self, generator):
        fan_in = 2 * self.kernel_size * self.kernel_size
        uniform_fan_in_(self.w, fan_in, generator)
        uniform_fan_in_(self.b, fan_in, generator)

    def output_size(self, size):
        return (size - self.kernel_size) // self.stride + 1


class SpatialHead(nn.Module):
    """Holds the conv parameters of one SpAM variant (named ``spam.conv.*``)."""

    def __init__(self, variant=SpamVariant.CONV3_STRIDE2, dtype=torch.float32):
        super().__init__()
        self.variant = SpamVariant(variant)
        if self.variant is SpamVariant.CONV3_STRIDE2:
            self.conv = SpatialConv(3, 2, dtype=dtype)
        else:
            self.conv = SpatialConv(1, 1, dtype=dtype)

    def output_size(self, size):
        if self.variant is SpamVariant.CONV3_STRIDE2:
            return self.conv.output_size(size)
        return (size - 3) // 2 + 1


def _batched(x):
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise ShapeError(f"expected a (C, H, W) or (B, C, H, W) map, got shape {tuple(x.shape)}")


def global_pool_stats(x):
    """Per-channel mean and max over the full spatial extent."""
    if x.dim() < 3 or x.shape[-1] == 0 or x.shape[-2] == 0 or x.shape[-3] == 0:
        raise InvalidInputError(f"cannot pool a map of shape {tuple(x.shape)}")
    flat = x.flatten(start_dim=-2)
    return flat.mean(dim=-1), flat.amax(dim=-1)


def acam_forward(x, mlp1):
    """Channel attention map ``sigmoid(MLP1(avg) + MLP1(max))``."""
    if x.dim() >= 3 and x.shape[-3] != mlp1.input_dim:
        raise ShapeError(
            f"pose map has {x.shape[-3]} channels but MLP1 expects {mlp1.input_dim}"
        )
    avg, mx = global_pool_stats(x)
    return torch.sigmoid(mlp1(avg) + mlp1(mx))


def spam_channel_refine(x, mlp2):
    """Gate every channel of ``x`` by ``sigmoid(MLP2(avg) + MLP2(max))``."""
    if mlp2.input_dim != mlp2.output_dim:
        raise ShapeError("MLP2 must map channels back onto themselves")
    if x.dim() >= 3 and x.shape[-3] != mlp2.input_dim:
        raise ShapeError(
            f"pose map has {x.shape[-3]} channels but MLP2 expects {mlp2.input_dim}"
        )
    avg, mx = global_pool_stats(x)
    gate = torch.sigmoid(mlp2(avg) + mlp2(mx))
    return gate[..., None, None] * x


def spam_forward(x, mlp2, head):
    """Spatial attention map computed from the channel-refined pose features.

    ``head`` is a :class:`SpatialHead` (or a bare :class:`SpatialConv`, which is
    treated as the 3x3/stride-2 variant).
    """
    if isinstance(head, SpatialConv):
        conv, variant = head, SpamVariant.CONV3_STRIDE2
    else:
        conv, variant = head.conv, head.variant
    xb, squeeze = _batched(x)
    k = conv.kernel_size if variant is SpamVariant.CONV3_STRIDE2 else 3
    if xb.shape[-1] < k or xb.shape[-2] < k:
        raise InvalidInputError(
            f"spatial extent {tuple(xb.shape[-2:])} is smaller than the {k}x{k} window"
        )
    refined = spam_channel_refine(xb, mlp2)
    desc = torch.stack([refined.mean(dim=1), refined.amax(dim=1)], dim=1)
    out = F.conv2d(desc, conv.w, conv.b, stride=conv.stride)
    if variant is SpamVariant.CONV1_MAXPOOL:
        out = F.max_pool2d(out, kernel_size=3, stride=2)
    ms = torch.sigmoid(out[:, 0])
    return ms[0] if squeeze else ms


def apply_pab(f, mc, ms, order=AttentionOrder.CHANNEL_THEN_SPATIAL):
    """Scale ``f[c, h, w]`` by ``mc[c] * ms[h, w]``."""
    order = AttentionOrder(order)
    if f.dim() < 3:
        raise ShapeError(f"target map must be (C, H, W) or batched, got {tuple(f.shape)}")
    if mc.shape[-1] != f.shape[-3]:
        raise ShapeError(f"channel map length {mc.shape[-1]} != target channels {f.shape[-3]}")
    if tuple(ms.shape[-2:]) != tuple(f.shape[-2:]):
        raise ShapeError(
            f"spatial map {tuple(ms.shape[-2:])} != target spatial dims {tuple(f.shape[-2:])}"
        )
    channel = mc[..., :, None, None]
    spatial = ms[..., None, :, :]
    if order is AttentionOrder.CHANNEL_THEN_SPATIAL:
        return (f * channel) * spatial
    return (f * spatial) * channel


class PoseAttentionBlock(nn.Module):
    """ACAM + SpAM over a pose map, applied to a target feature map.

    Parameters are named ``mlp1.*``, ``mlp2.*`` and ``spam.conv.*``.
    """

    def __init__(
        self,
        pose_channels,
        target_channels,
        hidden_dim=128,
        spam_variant=SpamVariant.CONV3_STRIDE2,
        order=AttentionOrder.CHANNEL_THEN_SPATIAL,
        dtype=torch.float32,
    ):
        super().__init__()
        self.order = AttentionOrder(order)
        self.mlp1 = Mlp(pose_channels, target_channels, hidden_dim, dtype=dtype)
        self.mlp2 = Mlp(pose_channels, pose_channels, hidden_dim, dtype=dtype)
        self.spam = SpatialHead(spam_variant, dtype=dtype)

    def reset_parameters(self, generator):
        self.mlp1.reset_parameters(generator)
        self.mlp2.reset_parameters(generator)
        self.spam.conv.reset_parameters(generator)

    def maps(self, pose_x):
        return acam_forward(pose_x, self.mlp1), spam_forward(pose_x, self.mlp2, self.spam)

    def forward(self, f, pose_x):
        mc, ms = self.maps(pose_x)
        return apply_pab(f, mc, ms, self.order)
