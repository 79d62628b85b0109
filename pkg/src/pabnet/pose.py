"""Frozen pose-feature providers.

A provider maps images to a ``C_p x H_p x W_p`` feature map and is never
updated by the embedding trainer.
"""

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .attention import uniform_fan_in_
from .errors import FormatError, ProviderStateError, ShapeError


class PoseFeatureProvider:
    """Interface: ``provider(images, keys=None) -> (B, C_p, H_p, W_p)`` tensor."""

    feature_shape = None

    @property
    def ready(self):
        return True

    def __call__(self, images, keys=None):
        raise NotImplementedError

    def named_parameters(self):
        return iter(())


class ConvStage(nn.Module):
    """3x3 / stride-2 / unpadded convolution followed by a ReLU."""

    def __init__(self, in_channels, out_channels, dtype=torch.float32):
        super().__init__()
        self.w = nn.Parameter(torch.zeros(out_channels, in_channels, 3, 3, dtype=dtype))
        self.b = nn.Parameter(torch.zeros(out_channels, dtype=dtype))

    def reset_parameters(self, generator):
        fan_in = self.w.shape[1] * 9
        uniform_fan_in_(self.w, fan_in, generator)
        uniform_fan_in_(self.b, fan_in, generator)

    def forward(self, x):
        return torch.relu(F.conv2d(x, self.w, self.b, stride=2))


def conv_stack_size(image_size, n_stages):
    size = image_size
    for _ in range(n_stages):
        size = (size - 3) // 2 + 1
    return size


class SyntheticPoseProvider(nn.Module, PoseFeatureProvider):
    """Small conv net regressing yaw; serves its last conv map once frozen.

    Use :meth:`pretrain` (or load a checkpoint) before calling it.
    """

    def __init__(self, image_size=64, stage_channels=(8, 16, 32), dtype=torch.float32):
        nn.Module.__init__(self)
        chans = (3,) + tuple(stage_channels)
        self.stages = nn.ModuleList(
            ConvStage(a, b, dtype=dtype) for a, b in zip(chans[:-1], chans[1:])
        )
        side = conv_stack_size(image_size, len(stage_channels))
        if side < 1:
            raise ShapeError(f"image size {image_size} too small for {len(stage_channels)} stages")
        self.image_size = image_size
        self.feature_shape = (chans[-1], side, side)
        self.head_w = nn.Parameter(torch.zeros(1, chans[-1], dtype=dtype))
        self.head_b = nn.Parameter(torch.zeros(1, dtype=dtype))
        self._ready = False

    @property
    def ready(self):
        return self._ready

    def reset_parameters(self, generator):
        for stage in self.stages:
            stage.reset_parameters(generator)
        uniform_fan_in_(self.head_w, self.head_w.shape[1], generator)
        uniform_fan_in_(self.head_b, self.head_w.shape[1], generator)

    def feature_map(self, images):
        x = images
        for stage in self.stages:
            x = stage(x)
        return x

    def predict_yaw(self, images):
        """Yaw in units of 90 degrees."""
        pooled = self.feature_map(images).mean(dim=(-2, -1))
        return (pooled @ self.head_w.T + self.head_b)[:, 0]

    def pretrain(self, images, yaws, steps=300, batch_size=64, lr=3e-3, seed=0):
        """Fit the yaw regressor with Adam, then freeze. Returns the loss history."""
        from .train import Adam

        images = torch.as_tensor(images, dtype=self.head_w.dtype)
        target = torch.as_tensor(np.asarray(yaws) / 90.0, dtype=self.head_w.dtype)
        params = dict(self.named_parameters())
        opt = Adam(params, lr=lr, beta1=0.9)
        rng = np.random.default_rng(seed)
        history = []
        for _ in range(steps):
            idx = torch.as_tensor(rng.integers(len(images), size=batch_size))
            loss = ((self.predict_yaw(images[idx]) - target[idx]) ** 2).mean()
            grads = torch.autograd.grad(loss, list(params.values()))
            opt.step(dict(zip(params, grads)))
            history.append(loss.item())
        self.freeze()
        return history

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self._ready = True

    def __call__(self, images, keys=None):
        if not self._ready:
            raise ProviderStateError("pose provider used before pretraining or loading")
        with torch.no_grad():
            return self.feature_map(images)


class FilePoseProvider(PoseFeatureProvider):
    """Serves feature maps exported by an external pose network.

    ``path`` is an ``.npz`` archive holding one ``(C, H, W)`` array per sample,
    keyed by the manifest image path.
    """

    def __init__(self, path=None, arrays=None):
        self._maps = None
        if path is not None:
            with np.load(path) as archive:
                self._maps = {k: archive[k] for k in archive.files}
        elif arrays is not None:
            self._maps = dict(arrays)
        if self._maps is not None:
            shapes = {np.shape(v) for v in self._maps.values()}
            if len(shapes) != 1 or len(next(iter(shapes))) != 3:
                raise FormatError(f"pose feature archive has inconsistent shapes {sorted(shapes)}")
            self.feature_shape = next(iter(shapes))

    @property
    def ready(self):
        return self._maps is not None

    def __call__(self, images, keys=None):
        if self._maps is None:
            raise ProviderStateError("file pose provider has no feature archive loaded")
        if keys is None:
            raise ProviderStateError("file pose provider needs sample keys")
        try:
            maps = [self._maps[k] for k in keys]
        except KeyError as exc:
            raise FormatError(f"no pose features for sample {exc.args[0]!r}") from exc
        dtype = images.dtype if isinstance(images, torch.Tensor) else torch.float32
        return torch.as_tensor(np.stack(maps), dtype=dtype)
