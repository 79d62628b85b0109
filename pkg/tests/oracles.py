"""Slow loop-based reference implementations used as test oracles.

Everything here works on plain numpy arrays / Python floats and shares no
code with the package.
"""

import math

import numpy as np


def sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def mlp(v, w1, b1, w2, b2):
    hidden = []
    for j in range(w1.shape[0]):
        s = b1[j]
        for i in range(w1.shape[1]):
            s += w1[j, i] * v[i]
        hidden.append(max(s, 0.0))
    out = []
    for k in range(w2.shape[0]):
        s = b2[k]
        for j in range(w2.shape[1]):
            s += w2[k, j] * hidden[j]
        out.append(s)
    return np.array(out)


def pool(x):
    c, h, w = x.shape
    avg = np.zeros(c)
    mx = np.zeros(c)
    for ch in range(c):
        total, best = 0.0, -math.inf
        for i in range(h):
            for j in range(w):
                total += x[ch, i, j]
                best = max(best, x[ch, i, j])
        avg[ch] = total / (h * w)
        mx[ch] = best
    return avg, mx


def acam(x, p):
    avg, mx = pool(x)
    a = mlp(avg, *p)
    b = mlp(mx, *p)
    return np.array([sigmoid(a[k] + b[k]) for k in range(len(a))])


def channel_refine(x, p):
    gate = acam(x, p)
    out = np.zeros_like(x)
    c, h, w = x.shape
    for ch in range(c):
        for i in range(h):
            for j in range(w):
                out[ch, i, j] = gate[ch] * x[ch, i, j]
    return out


def conv2d_single(desc, w, b, stride):
    """``desc`` (2, H, W), ``w`` (2, k, k): valid cross-correlation."""
    _, h, wd = desc.shape
    k = w.shape[-1]
    oh = (h - k) // stride + 1
    ow = (wd - k) // stride + 1
    out = np.zeros((oh, ow))
    for oi in range(oh):
        for oj in range(ow):
            s = b
            for c in range(2):
                for di in range(k):
                    for dj in range(k):
                        s += w[c, di, dj] * desc[c, oi * stride + di, oj * stride + dj]
            out[oi, oj] = s
    return out


def maxpool(x, k, stride):
    h, w = x.shape
    oh, ow = (h - k) // stride + 1, (w - k) // stride + 1
    out = np.zeros((oh, ow))
    for i in range(oh):
        for j in range(ow):
            out[i, j] = max(
                x[i * stride + a, j * stride + b] for a in range(k) for b in range(k)
            )
    return out


def spam(x, p, conv_w, conv_b, variant="conv3_stride2"):
    r = channel_refine(x, p)
    c, h, w = r.shape
    desc = np.zeros((2, h, w))
    for i in range(h):
        for j in range(w):
            vals = [r[ch, i, j] for ch in range(c)]
            desc[0, i, j] = sum(vals) / c
            desc[1, i, j] = max(vals)
    if variant == "conv3_stride2":
        pre = conv2d_single(desc, conv_w[0], conv_b[0], 2)
    else:
        pre = maxpool(conv2d_single(desc, conv_w[0], conv_b[0], 1), 3, 2)
    return np.vectorize(sigmoid)(pre)


def apply_maps(f, mc, ms):
    out = np.zeros_like(f)
    c, h, w = f.shape
    for ch in range(c):
        for i in range(h):
            for j in range(w):
                out[ch, i, j] = f[ch, i, j] * mc[ch] * ms[i, j]
    return out


# ---------------------------------------------------------------------------
# metrics


def rates(genuine, impostor, t):
    far = sum(s >= t for s in impostor) / len(impostor)
    gar = sum(s >= t for s in genuine) / len(genuine)
    return far, gar


def sweep(genuine, impostor):
    """Every candidate threshold (all scores plus +inf) with its (FAR, FRR, GAR)."""
    out = []
    for t in sorted(set(genuine) | set(impostor)) + [math.inf]:
        far, gar = rates(genuine, impostor, t)
        out.append((t, far, 1.0 - gar, gar))
    return out


def eer_bracket(genuine, impostor):
    """Bounds ``[lo, hi]`` that any EER estimate within one sweep step must lie in.

    Taken at the pair of consecutive thresholds where FAR - FRR changes sign.
    """
    pts = sweep(genuine, impostor)
    for (t0, far0, frr0, _), (t1, far1, frr1, _) in zip(pts, pts[1:]):
        if far0 - frr0 >= 0 and far1 - frr1 <= 0:
            vals = [far0, far1, frr0, frr1]
            return min(vals), max(vals)
    raise AssertionError("no crossing")


def min_abs_gap(genuine, impostor):
    return min(abs(far - frr) for _, far, frr, _ in sweep(genuine, impostor))


def gar_at(genuine, impostor, target):
    best = 0.0
    for _, far, _, gar in sweep(genuine, impostor):
        if far < target:
            best = max(best, gar)
    return best


def cmc(probe, probe_labels, gallery, gallery_labels, k):
    """Sort every probe's full similarity list (cosine) and find the true match."""
    hits = [0] * k
    for v, lab in zip(probe, probe_labels):
        scored = []
        for idx, (g, glab) in enumerate(zip(gallery, gallery_labels)):
            cos = sum(a * b for a, b in zip(v, g)) / (
                math.sqrt(sum(a * a for a in v)) * math.sqrt(sum(b * b for b in g))
            )
            scored.append((-cos, idx, glab))
        scored.sort()
        rank = [s[2] for s in scored].index(lab)
        for r in range(rank, k):
            hits[r] += 1
    return [h / len(probe) for h in hits]


# ---------------------------------------------------------------------------
# optimizer


def scalar_adam(grads, lr=1e-3, beta1=0.5, beta2=0.999, eps=1e-8, x0=0.0):
    """Trajectory ``[(x, m, v), ...]`` after each step for a scalar parameter."""
    x, m, v = x0, 0.0, 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        x = x - lr * m_hat / (math.sqrt(v_hat) + eps)
        out.append((x, m, v))
    return out
