"""Coupled frontal/profile embedding network with PAB injection on the profile side."""

import dataclasses
from collections import OrderedDict

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .attention import (
    AttentionOrder,
    PoseAttentionBlock,
    SpamVariant,
    apply_pab,
    uniform_fan_in_,
)
from .data import FRONTAL_THRESHOLD
from .errors import (
    ConfigError,
    ContractError,
    InvalidInputError,
    ProviderStateError,
    ShapeError,
)
from .pose import ConvStage, conv_stack_size

EMBEDDING_DIMS = (128, 256, 512)

# Reference layout of the original model; the desk defaults below are smaller.
PAPER_TARGET_SHAPE = (1792, 3, 3)
PAPER_POSE_SHAPE = (2048, 7, 7)
PAPER_EMBEDDING_DIM = 512


@dataclasses.dataclass
class BackboneConfig:
    image_size: int = 64
    stage_channels: tuple = (16, 32, 48, 64)
    embedding_dim: int = 512
    # one flag per stage; frozen stages are excluded from training
    frozen_prefix: tuple = None
    pose_stage_channels: tuple = (8, 16, 32)
    pab_hidden_dim: int = 128

    def __post_init__(self):
        self.stage_channels = tuple(self.stage_channels)
        self.pose_stage_channels = tuple(self.pose_stage_channels)
        if self.frozen_prefix is None:
            self.frozen_prefix = (True,) * len(self.stage_channels)
        self.frozen_prefix = tuple(bool(v) for v in self.frozen_prefix)
        if not self.stage_channels or any(int(c) < 1 for c in self.stage_channels):
            raise ConfigError("backbone.stage_channels", "need at least one positive width")
        if not self.pose_stage_channels or any(int(c) < 1 for c in self.pose_stage_channels):
            raise ConfigError("backbone.pose_stage_channels", "need at least one positive width")
        if len(self.frozen_prefix) != len(self.stage_channels):
            raise ConfigError("backbone.frozen_prefix", "need one flag per stage")
        if self.embedding_dim not in EMBEDDING_DIMS:
            raise ConfigError("backbone.embedding_dim", f"must be one of {EMBEDDING_DIMS}")
        if self.pab_hidden_dim < 1:
            raise ConfigError("backbone.pab_hidden_dim", "must be positive")
        if conv_stack_size(self.image_size, len(self.stage_channels)) < 1:
            raise ConfigError("backbone.image_size", "too small for the stage count")
        if conv_stack_size(self.image_size, len(self.pose_stage_channels)) < 3:
            raise ConfigError("backbone.image_size", "pose map would be smaller than 3x3")

    @property
    def target_shape(self):
        side = conv_stack_size(self.image_size, len(self.stage_channels))
        return (self.stage_channels[-1], side, side)

    @property
    def pose_shape(self):
        side = conv_stack_size(self.image_size, len(self.pose_stage_channels))
        return (self.pose_stage_channels[-1], side, side)


@dataclasses.dataclass
class ImageSample:
    pixels: np.ndarray
    identity: str
    yaw_degrees: float
    view: str
    key: str = ""

    def __post_init__(self):
        if self.view not in ("frontal", "profile"):
            raise InvalidInputError(f"unknown view {self.view!r}")
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[0] != 3 or px.shape[1] != px.shape[2]:
            raise ShapeError(f"pixels must be 3 x S x S, got {px.shape}")
        if px.size and (px.min() < 0 or px.max() > 1):
            raise InvalidInputError("pixels must be normalized to [0, 1]")

    @classmethod
    def from_record(cls, pixels, record, threshold=FRONTAL_THRESHOLD):
        view = "frontal" if record.is_frontal(threshold) else "profile"
        return cls(pixels, record.identity, record.yaw_degrees, view, record.image_path)

    def tensor(self, dtype=torch.float32):
        return torch.as_tensor(np.asarray(self.pixels), dtype=dtype)[None]


class Projection(nn.Module):
    def __init__(self, in_dim, out_dim, dtype=torch.float32):
        super().__init__()
        self.w = nn.Parameter(torch.zeros(out_dim, in_dim, dtype=dtype))
        self.b = nn.Parameter(torch.zeros(out_dim, dtype=dtype))

    def reset_parameters(self, generator):
        uniform_fan_in_(self.w, self.w.shape[1], generator)
        uniform_fan_in_(self.b, self.w.shape[1], generator)

    def forward(self, v):
        return v @ self.w.T + self.b


class Backbone(nn.Module):
    """Shared convolutional prefix producing the penultimate ``C_t x H_t x W_t`` map."""

    def __init__(self, config, dtype=torch.float32):
        super().__init__()
        chans = (3,) + config.stage_channels
        for i, (a, b) in enumerate(zip(chans[:-1], chans[1:])):
            self.add_module(f"stage{i}", ConvStage(a, b, dtype=dtype))
        self.n_stages = len(config.stage_channels)
        # frozen output normalizer, fitted after pretraining
        self.scale = nn.Parameter(torch.ones(1, dtype=dtype), requires_grad=False)

    def stages(self):
        return [getattr(self, f"stage{i}") for i in range(self.n_stages)]

    def reset_parameters(self, generator):
        for stage in self.stages():
            stage.reset_parameters(generator)

    def forward(self, images):
        x = images
        for stage in self.stages():
            x = stage(x)
        return x * self.scale

    def fit_scale(self, images, batch=256):
        """Set ``scale`` so pooled features have unit mean norm on ``images``."""
        x = torch.as_tensor(images, dtype=self.scale.dtype)
        with torch.no_grad():
            self.scale.fill_(1.0)
            norms = torch.cat([
                self(x[i:i + batch]).mean(dim=(-2, -1)).norm(dim=1) for i in range(0, len(x), batch)
            ])
            mean = float(norms.mean())
            if mean > 0:
                self.scale.fill_(1.0 / mean)
        return float(self.scale)

    def pretrain(self, images, labels, steps=600, batch_size=64, lr=3e-3, seed=0):
        """Identity classification through a throwaway linear head.

        Stands in for large-corpus face pretraining; returns the loss history.
        """
        from .train import Adam

        labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
        n_classes = int(labels.max()) + 1
        dtype = self.stage0.w.dtype
        g = torch.Generator().manual_seed(int(seed))
        c_t = self.stages()[-1].w.shape[0]
        head_w = uniform_fan_in_(torch.zeros(n_classes, c_t, dtype=dtype), c_t, g)
        head_b = torch.zeros(n_classes, dtype=dtype)
        params = OrderedDict(self.named_parameters())
        params["head.w"] = head_w
        params["head.b"] = head_b
        for p in params.values():
            p.requires_grad_(True)
        opt = Adam(params, lr=lr, beta1=0.9)
        rng = np.random.default_rng(seed)
        x = torch.as_tensor(images, dtype=dtype)
        history = []
        for _ in range(steps):
            idx = torch.as_tensor(rng.integers(len(x), size=batch_size))
            logits = self(x[idx]).mean(dim=(-2, -1)) @ head_w.T + head_b
            loss = F.cross_entropy(logits, labels[idx])
            grads = torch.autograd.grad(loss, list(params.values()))
            opt.step(dict(zip(params, grads)))
            history.append(loss.item())
        for p in self.parameters():
            p.requires_grad_(False)
        self.fit_scale(x)
        return history


class CoupledNetwork(nn.Module):
    """Frontal and profile branches sharing the backbone prefix.

    Each branch global-average-pools the penultimate map and applies its own
    linear projection to the embedding space. The profile branch multiplies
    the penultimate map by the PAB maps first (when attention is enabled).
    """

    def __init__(
        self,
        config,
        attention_enabled=True,
        attention_order=AttentionOrder.CHANNEL_THEN_SPATIAL,
        spam_variant=SpamVariant.CONV3_STRIDE2,
        dtype=torch.float32,
    ):
        super().__init__()
        self.config = config
        c_t = config.target_shape[0]
        self.backbone = Backbone(config, dtype=dtype)
        self.frontal_proj = Projection(c_t, config.embedding_dim, dtype=dtype)
        self.profile_proj = Projection(c_t, config.embedding_dim, dtype=dtype)
        self.pab = None
        if attention_enabled:
            self.pab = PoseAttentionBlock(
                config.pose_shape[0],
                c_t,
                config.pab_hidden_dim,
                spam_variant=spam_variant,
                order=attention_order,
                dtype=dtype,
            )
            head_side = self.pab.spam.output_size(config.pose_shape[1])
            if (head_side, head_side) != config.target_shape[1:]:
                raise ShapeError(
                    f"spatial map {head_side}x{head_side} does not match target "
                    f"{config.target_shape[1]}x{config.target_shape[2]}"
                )
        for stage, frozen in zip(self.backbone.stages(), config.frozen_prefix):
            stage.requires_grad_(not frozen)

    def reset_parameters(self, seed):
        g = torch.Generator().manual_seed(int(seed))
        self.backbone.reset_parameters(g)
        self.frontal_proj.reset_parameters(g)
        self.profile_proj.reset_parameters(g)
        if self.pab is not None:
            self.pab.reset_parameters(g)
        return self

    @property
    def prefix_frozen(self):
        return all(self.config.frozen_prefix)

    def features(self, images):
        return self.backbone(images)

    def embed_frontal_features(self, f):
        return self.frontal_proj(f.mean(dim=(-2, -1)))

    def attention_maps(self, pose_x):
        if self.pab is None:
            raise ShapeError("network was built without a PAB")
        if tuple(pose_x.shape[-3:]) != self.config.pose_shape:
            raise ShapeError(
                f"pose features {tuple(pose_x.shape[-3:])} do not match the PAB "
                f"layout {self.config.pose_shape}"
            )
        return self.pab.maps(pose_x)

    def embed_profile_features(self, f, pose_x=None, maps=None):
        """Profile embedding from penultimate features.

        ``maps`` overrides the PAB output with a precomputed ``(M_c, M_s)``.
        """
        if maps is None and self.pab is not None:
            if pose_x is None:
                raise ShapeError("profile branch with PAB needs pose features")
            maps = self.attention_maps(pose_x)
        if maps is not None:
            order = self.pab.order if self.pab is not None else AttentionOrder.CHANNEL_THEN_SPATIAL
            f = apply_pab(f, maps[0], maps[1], order)
        return self.profile_proj(f.mean(dim=(-2, -1)))


def encode_frontal(img, net):
    if img.view != "frontal":
        raise ContractError(f"frontal branch got a {img.view} sample ({img.key or img.identity})")
    x = img.tensor(net.frontal_proj.w.dtype)
    return net.embed_frontal_features(net.features(x))[0]


def pose_features(img, provider):
    if not provider.ready:
        raise ProviderStateError("pose provider is not initialized")
    return provider(img.tensor(), keys=[img.key])[0]


def encode_profile(img, provider, net, maps=None):
    if img.view != "profile":
        raise ContractError(f"profile branch got a {img.view} sample ({img.key or img.identity})")
    x = img.tensor(net.profile_proj.w.dtype)
    f = net.features(x)
    pose_x = None
    if net.pab is not None and maps is None:
        pose_x = pose_features(img, provider).to(f.dtype)[None]
    return net.embed_profile_features(f, pose_x, maps)[0]


def encode(img, provider, net):
    if img.view == "frontal":
        return encode_frontal(img, net)
    return encode_profile(img, provider, net)


def all_parameters(net, provider=None):
    """Every named parameter, the provider's under a ``pose.`` prefix."""
    params = OrderedDict(net.named_parameters())
    if provider is not None:
        for name, p in provider.named_parameters():
            params[f"pose.{name}"] = p
    return params


def trainable_parameters(net):
    """Parameters the embedding trainer may update.

    Both projections, all PAB parameters and any backbone stage whose freeze
    flag is off. The pose provider is never included.
    """
    out = OrderedDict()
    for name, p in net.named_parameters():
        if name == "backbone.scale":
            continue
        if name.startswith("backbone."):
            stage = int(name.split(".")[1][len("stage"):])
            if net.config.frozen_prefix[stage]:
                continue
        out[name] = p
    return out
