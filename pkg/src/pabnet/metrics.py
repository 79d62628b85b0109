"""Verification and identification metrics over similarity scores.

Higher scores mean "more likely the same identity" throughout.
"""

import dataclasses

import numpy as np

from .errors import InvalidInputError, ProtocolError


@dataclasses.dataclass
class ScoreSet:
    genuine: np.ndarray
    impostor: np.ndarray

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=np.float64).ravel()
        self.impostor = np.asarray(self.impostor, dtype=np.float64).ravel()
        if not (np.isfinite(self.genuine).all() and np.isfinite(self.impostor).all()):
            raise InvalidInputError("scores must be finite")

    def require_both(self):
        if self.genuine.size == 0 or self.impostor.size == 0:
            raise InvalidInputError("need at least one genuine and one impostor score")


@dataclasses.dataclass
class RocCurve:
    """Operating points ordered by increasing threshold.

    The final point uses threshold ``+inf`` (nothing accepted).
    """

    thresholds: np.ndarray
    far: np.ndarray
    gar: np.ndarray

    @property
    def frr(self):
        return 1.0 - self.gar

    def rows(self):
        return list(zip(self.thresholds.tolist(), self.far.tolist(), self.gar.tolist()))


def cosine_similarity(z1, z2):
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    n1 = np.linalg.norm(z1, axis=-1)
    n2 = np.linalg.norm(z2, axis=-1)
    if np.any(n1 == 0) or np.any(n2 == 0):
        raise InvalidInputError("cosine similarity is undefined for a zero vector")
    return np.clip(np.sum(z1 * z2, axis=-1) / (n1 * n2), -1.0, 1.0)


def cosine_matrix(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    if np.any(na == 0) or np.any(nb == 0):
        raise InvalidInputError("cosine similarity is undefined for a zero vector")
    return np.clip((a / na) @ (b / nb).T, -1.0, 1.0)


def euclidean_score_matrix(a, b):
    """Negated Euclidean distances, so that larger still means more similar."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return -np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)


def rates_at(scores, threshold):
    """``(FAR, GAR)`` when accepting every score ``>= threshold``."""
    scores.require_both()
    return (
        float(np.mean(scores.impostor >= threshold)),
        float(np.mean(scores.genuine >= threshold)),
    )


def roc_curve(scores):
    scores.require_both()
    thresholds = np.unique(np.concatenate([scores.genuine, scores.impostor]))
    gen = np.sort(scores.genuine)
    imp = np.sort(scores.impostor)
    # count of scores >= t via the left insertion point; dividing the count
    # (not 1 - rejected/n) keeps rates like 1/10 exact for the FAR < target test
    gar = (gen.size - np.searchsorted(gen, thresholds, side="left")) / gen.size
    far = (imp.size - np.searchsorted(imp, thresholds, side="left")) / imp.size
    return RocCurve(
        np.append(thresholds, np.inf), np.append(far, 0.0), np.append(gar, 0.0)
    )


def eer(scores):
    """Equal error rate, linearly interpolated between the bracketing sweep points."""
    roc = roc_curve(scores)
    diff = roc.far - roc.frr
    # diff starts at FAR(min) - 0 >= 0 and ends at 0 - 1 < 0
    i = int(np.argmax(diff <= 0))
    if diff[i] == 0 or i == 0:
        return float(roc.far[i])
    a, b = diff[i - 1], diff[i]
    alpha = a / (a - b)
    return float(roc.far[i - 1] + alpha * (roc.far[i] - roc.far[i - 1]))


def gar_at_far(scores, far_target):
    """Best GAR over thresholds whose FAR stays strictly below ``far_target``.

    Step interpolation: no credit is given between sweep points. Returns 0
    when no threshold qualifies.
    """
    if not 0 < far_target < 1:
        raise InvalidInputError(f"far_target must lie in (0, 1), got {far_target}")
    roc = roc_curve(scores)
    ok = roc.far < far_target
    return float(roc.gar[ok].max()) if ok.any() else 0.0


@dataclasses.dataclass
class CmcCurve:
    accuracy: np.ndarray
    # rank (0-based) of the true identity for every probe
    ranks: np.ndarray
    # probes whose true match tied with at least one other gallery entry
    ties: int = 0

    def at(self, k):
        return float(self.accuracy[k - 1])


def rank_k_identification(probe_emb, probe_labels, gallery_emb, gallery_labels, k, metric="cosine"):
    """Cumulative match characteristic up to rank ``k``.

    Gallery entries are ranked by descending score; ties keep gallery order.
    """
    gallery_labels = list(gallery_labels)
    probe_labels = list(probe_labels)
    if k < 1:
        raise InvalidInputError("k must be at least 1")
    if len(set(gallery_labels)) != len(gallery_labels):
        raise ProtocolError("gallery labels must be unique")
    index = {g: i for i, g in enumerate(gallery_labels)}
    missing = sorted({p for p in probe_labels if p not in index})
    if missing:
        raise ProtocolError(f"probe identities absent from gallery: {missing[:5]}")
    if not probe_labels:
        raise ProtocolError("no probes to identify")
    if metric == "cosine":
        sims = cosine_matrix(probe_emb, gallery_emb)
    else:
        sims = euclidean_score_matrix(probe_emb, gallery_emb)
    order = np.argsort(-sims, axis=1, kind="stable")
    truth = np.array([index[p] for p in probe_labels])
    ranks = np.argmax(order == truth[:, None], axis=1)
    true_scores = sims[np.arange(len(truth)), truth]
    ties = int(np.sum(np.sum(sims == true_scores[:, None], axis=1) > 1))
    accuracy = np.array([np.mean(ranks < r) for r in range(1, k + 1)])
    return CmcCurve(accuracy, ranks, ties)


def kfold_stats(values):
    """Mean and sample standard deviation (``n - 1`` divisor; NaN for one value)."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise InvalidInputError("no fold values")
    std = float(np.std(arr, ddof=1)) if arr.size > 1 else float("nan")
    return float(np.mean(arr)), std


def similarity_histogram(scores, n_bins=40, lo=-1.0, hi=1.0):
    """Per-class normalized counts over equal-width bins on ``[lo, hi]``.

    Returns ``(edges, genuine_density, impostor_density)``; each density sums
    to 1 for a non-empty class.
    """
    if n_bins < 2:
        raise InvalidInputError("need at least 2 bins")
    edges = np.linspace(lo, hi, n_bins + 1)

    def density(x):
        counts, _ = np.histogram(np.clip(x, lo, hi), bins=edges)
        return counts / counts.sum() if counts.sum() else counts.astype(np.float64)

    return edges, density(scores.genuine), density(scores.impostor)


def best_threshold(scores):
    """Threshold maximizing verification accuracy on balanced-or-not score sets."""
    roc = roc_curve(scores)
    n_g, n_i = scores.genuine.size, scores.impostor.size
    acc = (roc.gar * n_g + (1 - roc.far) * n_i) / (n_g + n_i)
    return float(roc.thresholds[int(np.argmax(acc))])


def verification_accuracy(scores, threshold):
    n = scores.genuine.size + scores.impostor.size
    correct = np.sum(scores.genuine >= threshold) + np.sum(scores.impostor < threshold)
    return float(correct / n)
