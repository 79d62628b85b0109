"""Model persistence and the verification / identification / k-fold protocols."""

import dataclasses
from collections import OrderedDict

import numpy as np

from . import metrics
from .config import from_dict
from .data import (
    FRONTAL_THRESHOLD,
    YAW_BUCKETS,
    ManifestRecord,
    sample_fold_pairs,
    split_folds,
    yaw_bucket,
)
from .errors import FormatError, ProtocolError
from .formats import assign_parameters, load_checkpoint, save_checkpoint
from .network import CoupledNetwork, all_parameters, trainable_parameters
from .pose import FilePoseProvider, SyntheticPoseProvider
from .train import build_network, build_provider, embed_records, train


def save_model(path, net, provider, run_config, meta=None):
    params = all_parameters(net, provider if isinstance(provider, SyntheticPoseProvider) else None)
    save_checkpoint(path, params, run_config.to_dict(), trainable_parameters(net), meta)


def load_model(path, pose_features=None):
    """Rebuild ``(net, provider, run_config)`` from a checkpoint.

    A network with a PAB needs pose features: either the synthetic provider
    stored in the checkpoint or an external ``.npz`` archive.
    """
    header, arrays = load_checkpoint(path)
    cfg = from_dict(header["config"])
    has_pab = any(k.startswith("pab.") for k in arrays)
    if has_pab != cfg.train.attention_enabled:
        raise FormatError(f"{path}: PAB parameters disagree with train.attention_enabled")
    net = CoupledNetwork(
        cfg.backbone,
        attention_enabled=cfg.train.attention_enabled,
        attention_order=cfg.train.attention_order,
        spam_variant=cfg.train.spam_variant,
    )
    assign_parameters(OrderedDict(net.named_parameters()), arrays)
    for p in net.parameters():
        p.requires_grad_(False)
    provider = None
    if pose_features is not None:
        provider = FilePoseProvider(pose_features)
    elif any(k.startswith("pose.") for k in arrays):
        provider = SyntheticPoseProvider(cfg.backbone.image_size, cfg.backbone.pose_stage_channels)
        assign_parameters(OrderedDict(provider.named_parameters()), arrays, prefix="pose.")
        provider.freeze()
    elif has_pab:
        raise FormatError(f"{path}: network has a PAB but no pose provider is available")
    if provider is not None and has_pab:
        if tuple(provider.feature_shape) != tuple(cfg.backbone.pose_shape):
            raise FormatError(
                f"pose features {tuple(provider.feature_shape)} do not match the PAB "
                f"layout {cfg.backbone.pose_shape}"
            )
    return net, provider, cfg


def samples_to_records(samples):
    return [ManifestRecord(s[0], s[1], s[2]) for s in samples]


def _score_matrix(a, b, metric):
    if metric == "cosine":
        return metrics.cosine_matrix(a, b)
    if metric == "euclidean":
        return metrics.euclidean_score_matrix(a, b)
    raise ProtocolError(f"unknown score metric {metric!r}")


def verify(samples, emb, far_targets=(0.01, 0.001), n_bins=40, bucket=None,
           metric="cosine", frontal_threshold=FRONTAL_THRESHOLD):
    """All profile-versus-frontal comparisons, optionally restricted to one yaw bucket.

    Returns ``(summary_rows, roc, histogram)``.
    """
    frontal = [i for i, s in enumerate(samples) if abs(s[2]) <= frontal_threshold]
    profile = [i for i, s in enumerate(samples) if abs(s[2]) > frontal_threshold]
    if bucket is not None:
        profile = [i for i in profile if yaw_bucket(samples[i][2]) == bucket]
    if not frontal or not profile:
        raise ProtocolError("verification needs at least one frontal and one profile sample")
    sims = _score_matrix(emb[profile], emb[frontal], metric)
    same = np.array([[samples[p][1] == samples[f][1] for f in frontal] for p in profile])
    scores = metrics.ScoreSet(sims[same], sims[~same])
    if scores.genuine.size == 0 or scores.impostor.size == 0:
        raise ProtocolError("verification produced an empty genuine or impostor class")
    rows = [
        ("n_genuine", int(scores.genuine.size)),
        ("n_impostor", int(scores.impostor.size)),
        ("eer", metrics.eer(scores)),
    ]
    rows += [(f"gar@far={t:g}", metrics.gar_at_far(scores, t)) for t in far_targets]
    rows += [
        ("genuine_mean", float(scores.genuine.mean())),
        ("impostor_mean", float(scores.impostor.mean())),
    ]
    roc = metrics.roc_curve(scores)
    lo, hi = (-1.0, 1.0) if metric == "cosine" else (float(sims.min()), float(sims.max()))
    hist = metrics.similarity_histogram(scores, n_bins, lo, hi if hi > lo else lo + 1.0)
    return rows, roc, hist


def pick_gallery(samples):
    """One sample per identity: the one with the smallest |yaw| (first on ties)."""
    best = {}
    for i, (_, ident, yaw) in enumerate(samples):
        if ident not in best or abs(yaw) < abs(samples[best[ident]][2]):
            best[ident] = i
    return sorted(best.values())


def identify(samples, emb, k=5, metric="cosine"):
    """Closed-set identification of every non-gallery sample.

    Returns ``(cmc, bucket_rows)``, where the bucket rows give rank-1 accuracy
    for each yaw bucket.
    """
    gallery = pick_gallery(samples)
    gallery_set = set(gallery)
    probes = [i for i in range(len(samples)) if i not in gallery_set]
    if not probes:
        raise ProtocolError("no probe samples remain once the gallery is chosen")
    k = min(k, len(gallery))
    cmc = metrics.rank_k_identification(
        emb[probes], [samples[i][1] for i in probes],
        emb[gallery], [samples[i][1] for i in gallery], k, metric,
    )
    buckets = np.array([yaw_bucket(samples[i][2]) for i in probes])
    rows = []
    for b in sorted(YAW_BUCKETS, reverse=True):
        mask = buckets == b
        rank1 = float(np.mean(cmc.ranks[mask] == 0)) if mask.any() else float("nan")
        rows.append((b, int(mask.sum()), rank1))
    return cmc, rows


def format_mean_std(values, scale=100.0):
    mean, std = metrics.kfold_stats(values)
    return f"{scale * mean:.2f}({scale * std:.2f})"


def folds(samples, emb, k=10, pairs_per_fold=70, seed=0, metric="cosine",
          frontal_threshold=FRONTAL_THRESHOLD):
    """k-fold verification: threshold tuned on the other folds, accuracy and EER per fold.

    Returns ``(fold_rows, summary_row, dropped)``.
    """
    records = samples_to_records(samples)
    pairs = sample_fold_pairs(records, k, pairs_per_fold, seed, frontal_threshold)
    split = split_folds(pairs, records, k, seed)
    fold_scores = []
    for fold in split.folds:
        p = np.array([q.profile for q in fold])
        f = np.array([q.frontal for q in fold])
        if metric == "cosine":
            s = metrics.cosine_similarity(emb[p], emb[f])
        else:
            s = -np.linalg.norm(emb[p].astype(np.float64) - emb[f], axis=1)
        labels = np.array([q.label for q in fold])
        fold_scores.append(metrics.ScoreSet(s[labels == 0], s[labels == 1]))
    rows, accs, eers = [], [], []
    for i, scores in enumerate(fold_scores):
        others = [s for j, s in enumerate(fold_scores) if j != i]
        pooled = metrics.ScoreSet(
            np.concatenate([s.genuine for s in others]),
            np.concatenate([s.impostor for s in others]),
        )
        thr = metrics.best_threshold(pooled)
        acc = metrics.verification_accuracy(scores, thr)
        e = metrics.eer(scores)
        accs.append(acc)
        eers.append(e)
        rows.append((i + 1, int(scores.genuine.size), int(scores.impostor.size), thr, acc, e))
    summary = (format_mean_std(accs), format_mean_std(eers))
    return rows, summary, split.dropped


def cosine_gap(net, provider, images, records, bucket=90, frontal_threshold=FRONTAL_THRESHOLD):
    """Mean genuine minus mean impostor cosine for profiles in ``bucket`` against frontals."""
    emb = embed_records(net, provider, images, records, frontal_threshold)
    samples = [(r.image_path, r.identity, r.yaw_degrees) for r in records]
    rows = dict(verify(samples, emb, bucket=bucket, frontal_threshold=frontal_threshold)[0])
    return rows["genuine_mean"] - rows["impostor_mean"]


def ablation(run_config, images, records, seeds, bucket=90):
    """Train with and without the PAB under identical seeds and budgets.

    Both runs of a seed share the pretrained prefix, the projection
    initialization and the batch sequence; only the attention differs. The
    gap is measured on held-out records when the dataset has a test split.
    Returns rows ``(seed, attention, final_loss, gap)`` where ``final_loss``
    is the mean of the last 50 step losses.
    """
    bb = run_config.backbone
    held = [i for i, r in enumerate(records) if r.split != "train"]
    if not held:
        held = list(range(len(records)))
    eval_images, eval_records = images[held], [records[i] for i in held]
    train_idx = [i for i, r in enumerate(records) if r.split == "train"]
    rows = []
    for seed in seeds:
        cfg = dataclasses.replace(run_config.train, seed=seed, attention_enabled=True)
        base = build_network(bb, cfg)
        provider = build_provider(
            bb, cfg, images[train_idx], [records[i].yaw_degrees for i in train_idx]
        )
        for attention in (True, False):
            tc = dataclasses.replace(cfg, attention_enabled=attention)
            net = CoupledNetwork(
                bb, attention_enabled=attention,
                attention_order=tc.attention_order, spam_variant=tc.spam_variant,
            )
            net.reset_parameters(seed)
            net.backbone.load_state_dict(base.backbone.state_dict())
            result = train(tc, bb, images, records, net=net, provider=provider)
            final = float(np.mean(result.log.losses[-50:]))
            gap = cosine_gap(result.net, provider, eval_images, eval_records, bucket,
                             tc.frontal_threshold)
            rows.append((seed, attention, final, gap))
    return rows
