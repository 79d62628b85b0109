"""Adam, the pair-based training loop, and finite-difference gradient checks."""

import dataclasses
import math

import numpy as np
import torch

from .attention import AttentionOrder, PoseAttentionBlock, SpamVariant, apply_pab
from .data import (
    DEFAULT_YAW_GRID,
    FRONTAL_THRESHOLD,
    GENUINE,
    SynthConfig,
    generate_synthetic,
    sample_balanced_pairs,
    to_float,
)
from .errors import ConfigError, DivergenceError, InvalidInputError, SamplingError, ShapeError
from .loss import IMPOSTOR_FORMS, batch_loss, contrastive_pair_loss, euclidean_distance
from .network import CoupledNetwork, all_parameters, trainable_parameters
from .pose import SyntheticPoseProvider


@dataclasses.dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-3
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    margin: float = 1.0
    steps: int = 500
    seed: int = 0
    attention_enabled: bool = True
    attention_order: str = AttentionOrder.CHANNEL_THEN_SPATIAL.value
    spam_variant: str = SpamVariant.CONV3_STRIDE2.value
    impostor_form: str = "eq4"
    frontal_threshold: float = FRONTAL_THRESHOLD
    # yaw-regression pretraining of the synthetic pose provider
    pose_pretrain_steps: int = 300
    pose_pretrain_lr: float = 3e-3
    # identity pretraining of the frozen prefix on disjoint synthetic identities
    backbone_pretrain_steps: int = 600
    backbone_pretrain_identities: int = 100
    backbone_pretrain_max_yaw: float = 45.0
    backbone_pretrain_lr: float = 3e-3
    # fixed pair set scored at the end of every epoch
    eval_pairs: int = 256

    def __post_init__(self):
        if not isinstance(self.batch_size, int) or self.batch_size < 2 or self.batch_size % 2:
            raise ConfigError("train.batch_size", "must be a positive even integer")
        if self.learning_rate < 0:
            raise ConfigError("train.learning_rate", "must be non-negative")
        if not 0 <= self.adam_beta1 < 1:
            raise ConfigError("train.adam_beta1", "must lie in [0, 1)")
        if not 0 <= self.adam_beta2 < 1:
            raise ConfigError("train.adam_beta2", "must lie in [0, 1)")
        if self.adam_epsilon <= 0:
            raise ConfigError("train.adam_epsilon", "must be positive")
        if self.margin <= 0:
            raise ConfigError("train.margin", "must be positive")
        if not isinstance(self.steps, int) or self.steps < 0:
            raise ConfigError("train.steps", "must be a non-negative integer")
        if self.impostor_form not in IMPOSTOR_FORMS:
            raise ConfigError("train.impostor_form", f"must be one of {IMPOSTOR_FORMS}")
        try:
            AttentionOrder(self.attention_order)
        except ValueError:
            raise ConfigError("train.attention_order", f"unknown order {self.attention_order!r}")
        try:
            SpamVariant(self.spam_variant)
        except ValueError:
            raise ConfigError("train.spam_variant", f"unknown variant {self.spam_variant!r}")
        if not 0 <= self.frontal_threshold < 90:
            raise ConfigError("train.frontal_threshold", "must lie in [0, 90)")
        if self.pose_pretrain_steps < 0:
            raise ConfigError("train.pose_pretrain_steps", "must be non-negative")
        if self.backbone_pretrain_steps < 0:
            raise ConfigError("train.backbone_pretrain_steps", "must be non-negative")
        if self.backbone_pretrain_identities < 2:
            raise ConfigError("train.backbone_pretrain_identities", "need at least 2 identities")
        if not 0 <= self.backbone_pretrain_max_yaw <= 90:
            raise ConfigError("train.backbone_pretrain_max_yaw", "must lie in [0, 90]")
        if self.eval_pairs < 2 or self.eval_pairs % 2:
            raise ConfigError("train.eval_pairs", "must be a positive even integer")


def set_deterministic(enabled=True):
    """Single-threaded, deterministic torch kernels."""
    if enabled:
        torch.set_num_threads(1)
    torch.use_deterministic_algorithms(enabled)


# ---------------------------------------------------------------------------
# Adam


def adam_init(params):
    return {
        "t": 0,
        "m": {k: torch.zeros_like(p) for k, p in params.items()},
        "v": {k: torch.zeros_like(p) for k, p in params.items()},
    }


def adam_step(params, grads, state, lr=1e-3, beta1=0.5, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place on ``params`` and ``state``."""
    if set(grads) != set(params):
        raise ShapeError("gradient names do not match parameter names")
    state["t"] += 1
    t = state["t"]
    c1 = 1 - beta1**t
    c2 = 1 - beta2**t
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeError(f"{name}: gradient {tuple(g.shape)} vs parameter {tuple(p.shape)}")
            m = state["m"][name]
            v = state["v"][name]
            m.mul_(beta1).add_(g, alpha=1 - beta1)
            v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + eps))
    return params, state


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.5, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = adam_init(params)

    def step(self, grads):
        adam_step(self.params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)


# ---------------------------------------------------------------------------
# training


@dataclasses.dataclass
class TrainLog:
    losses: list
    epochs: list
    config: dict
    seed: int

    def smoothed(self, window=50):
        arr = np.asarray(self.losses, dtype=np.float64)
        if len(arr) < window:
            raise InvalidInputError(f"need at least {window} steps, have {len(arr)}")
        kernel = np.ones(window) / window
        return np.convolve(arr, kernel, mode="valid")


@dataclasses.dataclass
class TrainResult:
    net: CoupledNetwork
    provider: object
    log: TrainLog


def build_provider(backbone_config, train_config, images, yaws):
    provider = SyntheticPoseProvider(backbone_config.image_size, backbone_config.pose_stage_channels)
    provider.reset_parameters(torch.Generator().manual_seed(train_config.seed + 1))
    provider.pretrain(
        to_float(images),
        yaws,
        steps=train_config.pose_pretrain_steps,
        lr=train_config.pose_pretrain_lr,
        seed=train_config.seed + 1,
    )
    return provider


# identities for prefix pretraining come from a separate seed space
PRETRAIN_SEED_OFFSET = 100_003


def pretraining_corpus(backbone_config, train_config):
    grid = tuple(y for y in DEFAULT_YAW_GRID if abs(y) <= train_config.backbone_pretrain_max_yaw)
    synth = SynthConfig(
        n_identities=train_config.backbone_pretrain_identities,
        yaw_grid=grid or (0,),
        image_size=backbone_config.image_size,
        illumination_levels=(0.8, 1.0, 1.2),
        seed=PRETRAIN_SEED_OFFSET + train_config.seed,
    )
    images, records = generate_synthetic(synth)
    names = sorted({r.identity for r in records})
    lookup = {n: i for i, n in enumerate(names)}
    return images, [lookup[r.identity] for r in records]


def build_network(backbone_config, train_config):
    """Fresh network; the frozen prefix is pretrained when configured."""
    net = CoupledNetwork(
        backbone_config,
        attention_enabled=train_config.attention_enabled,
        attention_order=train_config.attention_order,
        spam_variant=train_config.spam_variant,
    )
    net.reset_parameters(train_config.seed)
    if train_config.backbone_pretrain_steps > 0:
        images, labels = pretraining_corpus(backbone_config, train_config)
        net.backbone.pretrain(
            to_float(images),
            labels,
            steps=train_config.backbone_pretrain_steps,
            lr=train_config.backbone_pretrain_lr,
            seed=train_config.seed + 2,
        )
        for stage, frozen in zip(net.backbone.stages(), backbone_config.frozen_prefix):
            stage.requires_grad_(not frozen)
    return net


class FeatureCache:
    """Frozen-prefix and pose features for every image, computed once."""

    def __init__(self, net, provider, images, records, batch=256):
        x = torch.as_tensor(to_float(images))
        keys = [r.image_path for r in records]
        self.live = not net.prefix_frozen
        self.images = x
        feats, poses = [], []
        with torch.no_grad():
            for i in range(0, len(x), batch):
                if not self.live:
                    feats.append(net.features(x[i:i + batch]))
                if net.pab is not None:
                    poses.append(provider(x[i:i + batch], keys[i:i + batch]))
        self.features = torch.cat(feats) if feats else None
        self.pose = torch.cat(poses) if poses else None
        self.net = net

    def prefix(self, idx):
        if self.live:
            return self.net.features(self.images[idx])
        return self.features[idx]

    def pose_maps(self, idx):
        return None if self.pose is None else self.pose[idx]


def _pair_arrays(pairs):
    p = torch.as_tensor([q.profile for q in pairs])
    f = torch.as_tensor([q.frontal for q in pairs])
    y = torch.as_tensor([float(q.label) for q in pairs])
    return p, f, y


def pair_loss(net, cache, pairs, config):
    p, f, y = _pair_arrays(pairs)
    z_p = net.embed_profile_features(cache.prefix(p), cache.pose_maps(p))
    z_f = net.embed_frontal_features(cache.prefix(f))
    return batch_loss(z_p, z_f, y, config.margin, config.impostor_form), z_p, z_f, y


def _evaluate(net, cache, pairs, config):
    with torch.no_grad():
        loss, z_p, z_f, y = pair_loss(net, cache, pairs, config)
        d = euclidean_distance(z_p, z_f)
    gen = d[y == GENUINE]
    imp = d[y != GENUINE]
    return {
        "loss": float(loss),
        "genuine_distance": float(gen.mean()),
        "impostor_distance": float(imp.mean()),
    }


def train(config, backbone_config, images, records, net=None, provider=None):
    """Optimize the trainable parameters with balanced pair batches.

    ``images`` is the uint8 ``(N, 3, S, S)`` array aligned with ``records``;
    only records tagged ``split == "train"`` are sampled. When ``net`` or
    ``provider`` are omitted they are built from the configs and seed (the
    synthetic provider is pretrained on the training images and frozen).
    """
    train_idx = [i for i, r in enumerate(records) if r.split == "train"]
    if not train_idx:
        raise SamplingError("no records with split 'train'")
    train_records = [records[i] for i in train_idx]
    train_images = images[train_idx]
    if provider is None and config.attention_enabled:
        provider = build_provider(
            backbone_config, config, train_images, [r.yaw_degrees for r in train_records]
        )
    if net is None:
        net = build_network(backbone_config, config)
    params = trainable_parameters(net)
    for p in params.values():
        p.requires_grad_(True)
    cache = FeatureCache(net, provider, train_images, train_records)

    n_profile = sum(not r.is_frontal(config.frontal_threshold) for r in train_records)
    steps_per_epoch = max(1, math.ceil(n_profile / config.batch_size))
    eval_set = sample_balanced_pairs(
        train_records, config.eval_pairs, [config.seed, 7919], config.frontal_threshold
    )
    opt = Adam(
        params, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_epsilon
    )
    names = list(params)
    losses, epochs = [], [dict(epoch=0, step=0, **_evaluate(net, cache, eval_set, config))]
    last_finite = None
    step = 0
    epoch = 0
    while step < config.steps:
        epoch += 1
        for b in range(steps_per_epoch):
            if step >= config.steps:
                break
            batch = sample_balanced_pairs(
                train_records, config.batch_size, [config.seed, epoch, b], config.frontal_threshold
            )
            loss = pair_loss(net, cache, batch, config)[0]
            value = loss.item()
            if not math.isfinite(value):
                raise DivergenceError(step, last_finite)
            grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
            opt.step({
                n: torch.zeros_like(params[n]) if g is None else g for n, g in zip(names, grads)
            })
            losses.append(value)
            last_finite = value
            step += 1
        epochs.append(dict(epoch=epoch, step=step, **_evaluate(net, cache, eval_set, config)))
    for p in params.values():
        p.requires_grad_(False)
    log = TrainLog(losses, epochs, dataclasses.asdict(config), config.seed)
    return TrainResult(net, provider, log)


def embed_records(net, provider, images, records, frontal_threshold=FRONTAL_THRESHOLD, batch=256):
    """Embed every record with the branch matching its view; returns ``(N, D)`` float32."""
    x = torch.as_tensor(to_float(images))
    keys = [r.image_path for r in records]
    frontal = np.array([r.is_frontal(frontal_threshold) for r in records])
    out = np.zeros((len(records), net.config.embedding_dim), dtype=np.float32)
    with torch.no_grad():
        for i in range(0, len(records), batch):
            sl = slice(i, i + batch)
            f = net.features(x[sl])
            z_f = net.embed_frontal_features(f)
            pose = provider(x[sl], keys[sl]) if net.pab is not None else None
            z_p = net.embed_profile_features(f, pose)
            mask = torch.as_tensor(frontal[sl])[:, None]
            out[sl] = torch.where(mask, z_f, z_p).numpy()
    return out


# ---------------------------------------------------------------------------
# gradient checks

GRADCHECK_THRESHOLDS = {"loss": 1e-5, "pab": 1e-4}
GRADCHECK_EPS = {"loss": 1e-6, "pab": 1e-5}


@dataclasses.dataclass
class GradCheckReport:
    component: str
    max_rel_error: float
    worst_parameter: str
    threshold: float
    n_checked: int

    @property
    def passed(self):
        return math.isfinite(self.max_rel_error) and self.max_rel_error < self.threshold


def relative_error(analytic, numeric, floor=1e-8):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(fn, params, eps):
    """Compare autograd against central differences for every parameter entry.

    ``fn()`` must return a scalar tensor computed from the tensors in
    ``params`` (a name -> tensor mapping). Returns ``(max_rel_error, worst_name,
    n_checked)``.
    """
    tensors = list(params.values())
    for t in tensors:
        t.requires_grad_(True)
    analytic = torch.autograd.grad(fn(), tensors, allow_unused=True)
    worst, worst_name, count = 0.0, "", 0
    with torch.no_grad():
        for (name, t), g in zip(params.items(), analytic):
            g = torch.zeros_like(t) if g is None else g
            if not torch.isfinite(g).all():
                return math.inf, name, count
            flat = t.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = fn().item()
                flat[i] = orig - eps
                down = fn().item()
                flat[i] = orig
                numeric = (up - down) / (2 * eps)
                err = relative_error(g.view(-1)[i].item(), numeric)
                if not math.isfinite(numeric):
                    err = math.inf
                count += 1
                if err > worst or not math.isfinite(err):
                    worst, worst_name = err, f"{name}[{i}]"
    return worst, worst_name, count


def _pab_instance(size, seed):
    channels = size.get("channels", 4)
    side = size.get("side", 5)
    hidden = size.get("hidden", 3)
    g = torch.Generator().manual_seed(seed)
    pab = PoseAttentionBlock(channels, channels, hidden, dtype=torch.float64)
    pab.reset_parameters(g)
    pose_x = torch.randn(channels, side, side, generator=g, dtype=torch.float64)
    out_side = pab.spam.output_size(side)
    f = torch.randn(channels, out_side, out_side, generator=g, dtype=torch.float64)
    readout = torch.randn(channels, out_side, out_side, generator=g, dtype=torch.float64)
    params = dict(pab.named_parameters())

    def fn():
        mc, ms = pab.maps(pose_x)
        return (apply_pab(f, mc, ms) * readout).sum()

    return fn, params


def _loss_instance(size, seed, impostor_form="eq4", margin=1.0):
    dim = size.get("dim", 8)
    n = size.get("pairs", 6)
    rng = np.random.default_rng(seed)
    z_p = rng.normal(size=(n, dim))
    direction = rng.normal(size=(n, dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    # keep every distance well away from the kinks at 0 and m
    dist = rng.uniform(0.2, 0.8, size=(n, 1)) * margin
    z_f = z_p + direction * dist
    y = torch.as_tensor(np.arange(n) % 2, dtype=torch.float64)
    params = {
        "z_p": torch.tensor(z_p, dtype=torch.float64),
        "z_f": torch.tensor(z_f, dtype=torch.float64),
    }

    def fn():
        return contrastive_pair_loss(params["z_p"], params["z_f"], y, margin, impostor_form).sum()

    return fn, params


def grad_check(component, size=None, seed=0):
    """Finite-difference check of one component on a tiny double-precision instance."""
    size = dict(size or {})
    if component == "pab":
        fn, params = _pab_instance(size, seed)
    elif component == "loss":
        fn, params = _loss_instance(size, seed)
    else:
        raise ConfigError("component", f"unknown component {component!r} (use 'loss' or 'pab')")
    err, worst, n = check_gradients(fn, params, GRADCHECK_EPS[component])
    return GradCheckReport(component, err, worst, GRADCHECK_THRESHOLDS[component], n)


def snapshot(net, provider=None):
    return {k: v.detach().clone() for k, v in all_parameters(net, provider).items()}


def changed_parameters(before, net, provider=None):
    after = all_parameters(net, provider)
    return {k for k, v in after.items() if not torch.equal(v.detach(), before[k])}
