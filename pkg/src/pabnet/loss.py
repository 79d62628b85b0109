"""Class-specific contrastive loss between profile and frontal embeddings.

Label convention: ``Y = 0`` for a genuine pair (same identity), ``Y = 1`` for
an impostor pair.
"""

import torch

from .errors import InvalidInputError, ShapeError

IMPOSTOR_FORMS = ("eq4", "eq7")


def _as_tensor(z):
    if isinstance(z, torch.Tensor):
        return z
    return torch.as_tensor(z, dtype=torch.float64)


def _squared_distance(z_p, z_f):
    z_p, z_f = _as_tensor(z_p), _as_tensor(z_f)
    if z_p.shape[-1] != z_f.shape[-1]:
        raise ShapeError(f"embedding dims differ: {z_p.shape[-1]} vs {z_f.shape[-1]}")
    return ((z_p - z_f) ** 2).sum(dim=-1)


def _safe_sqrt(sq):
    # d sqrt / dx is infinite at 0; route zeros through a constant branch.
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


def euclidean_distance(z_p, z_f):
    """``||z_p - z_f||_2`` along the last axis."""
    return _safe_sqrt(_squared_distance(z_p, z_f))


def contrastive_pair_loss(z_p, z_f, y, margin=1.0, impostor_form="eq4"):
    """Per-pair contrastive loss.

    ``impostor_form="eq4"`` uses ``0.5 * max(0, m - D)**2`` for impostors;
    ``"eq7"`` uses the literal ``0.5 * max(0, m - D**2)`` variant.
    """
    if margin <= 0:
        raise InvalidInputError(f"margin must be positive, got {margin}")
    if impostor_form not in IMPOSTOR_FORMS:
        raise InvalidInputError(f"unknown impostor form {impostor_form!r}")
    sq = _squared_distance(z_p, z_f)
    y = torch.as_tensor(y, dtype=sq.dtype)
    genuine = 0.5 * sq
    if impostor_form == "eq4":
        impostor = 0.5 * torch.clamp(margin - _safe_sqrt(sq), min=0.0) ** 2
    else:
        impostor = 0.5 * torch.clamp(margin - sq, min=0.0)
    return (1 - y) * genuine + y * impostor


def batch_loss(z_p, z_f, y, margin=1.0, impostor_form="eq4"):
    """Mean contrastive loss over a batch of pairs (rows of ``z_p``/``z_f``)."""
    z_p, z_f = _as_tensor(z_p), _as_tensor(z_f)
    if z_p.dim() != 2 or z_p.shape[0] == 0:
        raise InvalidInputError("pair batch must be a non-empty (N, D) array")
    if z_p.shape != z_f.shape:
        raise ShapeError(f"batch shapes differ: {tuple(z_p.shape)} vs {tuple(z_f.shape)}")
    return contrastive_pair_loss(z_p, z_f, y, margin, impostor_form).mean()


def exhaustive_loss(z_p, z_f, ids_p, ids_f, margin=1.0, impostor_form="eq4"):
    """Average over all ``N_p * N_f`` profile/frontal combinations.

    The label of each combination is derived from the identity lists.
    """
    z_p, z_f = _as_tensor(z_p), _as_tensor(z_f)
    if z_p.shape[0] == 0 or z_f.shape[0] == 0:
        raise InvalidInputError("exhaustive loss needs at least one sample per side")
    if len(ids_p) != z_p.shape[0] or len(ids_f) != z_f.shape[0]:
        raise ShapeError("identity lists must match the embedding counts")
    y = torch.tensor(
        [[float(a != b) for b in ids_f] for a in ids_p], dtype=z_p.dtype
    )
    per = contrastive_pair_loss(z_p[:, None, :], z_f[None, :, :], y, margin, impostor_form)
    return per.mean()
