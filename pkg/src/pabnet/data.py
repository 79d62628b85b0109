"""Manifests, synthetic pose-varied faces, balanced pair sampling and folds."""

import dataclasses
import json
import math
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, FormatError, ProtocolError, SamplingError

MANIFEST_HEADER = "#pab-manifest-v1"
DEFAULT_YAW_GRID = (0, -15, 15, -30, 30, -45, 45, -60, 60, -75, 75, -90, 90)
YAW_BUCKETS = (15, 30, 45, 60, 75, 90)
FRONTAL_THRESHOLD = 15.0

GENUINE = 0
IMPOSTOR = 1


@dataclasses.dataclass(frozen=True)
class ManifestRecord:
    image_path: str
    identity: str
    yaw_degrees: float
    split: str = "train"

    def __post_init__(self):
        if not self.identity:
            raise FormatError(f"empty identity for {self.image_path!r}")
        if not -90.0 <= self.yaw_degrees <= 90.0:
            raise FormatError(f"yaw {self.yaw_degrees} outside [-90, 90] for {self.image_path!r}")

    def is_frontal(self, threshold=FRONTAL_THRESHOLD):
        return abs(self.yaw_degrees) <= threshold


@dataclasses.dataclass(frozen=True)
class Pair:
    """Indices into a record list plus the pair label (0 genuine, 1 impostor)."""

    profile: int
    frontal: int
    label: int


@dataclasses.dataclass
class SynthConfig:
    n_identities: int = 10
    yaw_grid: tuple = DEFAULT_YAW_GRID
    image_size: int = 64
    illumination_levels: tuple = (1.0,)
    # rendered as split "test"; empty means no held-out renderings
    test_illumination_levels: tuple = ()
    noise_std: float = 0.01
    seed: int = 0

    def __post_init__(self):
        self.yaw_grid = tuple(self.yaw_grid)
        self.illumination_levels = tuple(float(v) for v in self.illumination_levels)
        self.test_illumination_levels = tuple(float(v) for v in self.test_illumination_levels)
        if not isinstance(self.n_identities, int) or self.n_identities < 1:
            raise ConfigError("synth.n_identities", "must be a positive integer")
        if not self.yaw_grid:
            raise ConfigError("synth.yaw_grid", "must not be empty")
        for yaw in self.yaw_grid:
            if not isinstance(yaw, (int, float)) or not -90 <= yaw <= 90:
                raise ConfigError("synth.yaw_grid", f"entry {yaw!r} outside [-90, 90]")
        if len(set(self.yaw_grid)) != len(self.yaw_grid):
            raise ConfigError("synth.yaw_grid", "entries must be unique")
        if not isinstance(self.image_size, int) or self.image_size < 16:
            raise ConfigError("synth.image_size", "must be an integer >= 16")
        if not self.illumination_levels:
            raise ConfigError("synth.illumination_levels", "must not be empty")
        for key in ("illumination_levels", "test_illumination_levels"):
            if any(not 0 < v <= 2 for v in getattr(self, key)):
                raise ConfigError(f"synth.{key}", "levels must lie in (0, 2]")
        if self.noise_std < 0:
            raise ConfigError("synth.noise_std", "must be non-negative")


# ---------------------------------------------------------------------------
# synthetic renderer


class _Identity:
    """Random low-frequency texture plus landmark blobs on the face plane."""

    def __init__(self, rng):
        self.skin = rng.uniform(0.45, 0.75, size=3)
        # hair is nearly shared so it carries little identity information
        self.hair = 0.2 + rng.uniform(-0.02, 0.02, size=3)
        n_waves = 5
        self.freq = rng.uniform(-0.7, 0.7, size=(n_waves, 2))
        self.phase = rng.uniform(0, 2 * np.pi, size=n_waves)
        self.amp = rng.uniform(-0.08, 0.08, size=(n_waves, 3))
        base = np.array([[-0.4, -0.25], [0.4, -0.25], [0.0, 0.12], [0.0, 0.5]])
        self.blob_xy = base + rng.uniform(-0.12, 0.12, size=base.shape)
        self.blob_sigma = rng.uniform(0.1, 0.2, size=len(base))
        self.blob_color = rng.uniform(-0.4, 0.25, size=(len(base), 3))

    def texture(self, u, v):
        out = np.broadcast_to(self.skin, u.shape + (3,)).copy()
        arg = 2 * np.pi * (self.freq[:, 0, None, None] * u + self.freq[:, 1, None, None] * v)
        waves = np.cos(arg + self.phase[:, None, None])
        out += np.einsum("kyx,kc->yxc", waves, self.amp)
        for (bx, by), s, col in zip(self.blob_xy, self.blob_sigma, self.blob_color):
            g = np.exp(-((u - bx) ** 2 + (v - by) ** 2) / (2 * s * s))
            out += g[..., None] * col
        return out


def _render(identity, yaw_degrees, illumination, size, noise, rng):
    theta = math.radians(yaw_degrees)
    coords = (np.arange(size) + 0.5) / size * 2 - 1
    y, x = np.meshgrid(coords * 1.1, coords * 1.1, indexing="ij")
    head = x**2 + (y / 1.05) ** 2 <= 1.0
    xc = np.clip(x, -1.0, 1.0)
    # horizontal foreshortening: face texture wrapped on a cylinder seen from yaw
    u = (np.arcsin(xc) - theta) / (np.pi / 2)
    # projective shear: the side turning away shrinks vertically
    v = y * (1.0 + 0.25 * math.sin(theta) * xc)
    face = head & (np.abs(u) <= 1.0)
    img = np.zeros((size, size, 3))
    img[head] = identity.hair
    img[face] = identity.texture(u[face][None], v[face][None])[0]
    shade = 0.75 + 0.25 * np.sqrt(np.clip(1 - xc**2, 0, 1))
    img *= (illumination * shade * head)[..., None]
    if noise > 0:
        img += rng.normal(0.0, noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    # quantize to 8 bits so in-memory pixels equal the decoded image files
    return (np.round(img * 255).astype(np.uint8)).transpose(2, 0, 1)


def generate_synthetic(config):
    """Render every identity at every yaw and illumination level.

    Returns ``(images, records)`` where ``images`` is a uint8 array of shape
    ``(N, 3, S, S)`` aligned with ``records``.
    """
    if not isinstance(config, SynthConfig):
        raise ConfigError("synth", "expected a SynthConfig")
    images, records = [], []
    width = max(3, len(str(config.n_identities - 1)))
    levels = [(lvl, "train") for lvl in config.illumination_levels]
    levels += [(lvl, "test") for lvl in config.test_illumination_levels]
    for i in range(config.n_identities):
        ident = _Identity(np.random.default_rng([config.seed, i]))
        name = f"id{i:0{width}d}"
        for li, (level, split) in enumerate(levels):
            for yaw in config.yaw_grid:
                noise_rng = np.random.default_rng([config.seed, i, li, int(round(yaw)) + 90])
                images.append(
                    _render(ident, yaw, level, config.image_size, config.noise_std, noise_rng)
                )
                path = f"{name}/{name}_y{int(round(yaw)):+03d}_l{li}.png"
                records.append(ManifestRecord(path, name, float(yaw), split))
    return np.stack(images), records


def to_float(images):
    """uint8 ``(..., 3, S, S)`` pixels to float32 in [0, 1]."""
    return images.astype(np.float32) / 255.0


def save_images(images, records, root):
    root = Path(root)
    for img, rec in zip(images, records):
        path = root / rec.image_path
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.ascontiguousarray(img.transpose(1, 2, 0))).save(path, format="PNG")


def load_images(records, root):
    root = Path(root)
    out = []
    for rec in records:
        path = root / rec.image_path
        try:
            with Image.open(path) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
        except OSError as exc:
            raise FormatError(f"cannot read image {path}: {exc}") from exc
        out.append(arr.transpose(2, 0, 1))
    sizes = {a.shape for a in out}
    if len(sizes) > 1:
        raise FormatError(f"images have mixed shapes: {sorted(sizes)}")
    return np.stack(out)


# ---------------------------------------------------------------------------
# manifest


def write_manifest(path, records, config=None):
    lines = [MANIFEST_HEADER]
    if config is not None:
        lines.append("#config\t" + json.dumps(config, sort_keys=True, separators=(",", ":")))
    for r in records:
        for field in (r.image_path, r.identity, r.split):
            if "\t" in field or "\n" in field:
                raise FormatError(f"field {field!r} contains a tab or newline")
        lines.append(f"{r.image_path}\t{r.identity}\t{r.yaw_degrees!r}\t{r.split}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path):
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or lines[0].strip() != MANIFEST_HEADER:
        raise FormatError(f"{path}: missing {MANIFEST_HEADER} header")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise FormatError(f"{path}:{lineno}: expected 4 tab-separated fields")
        try:
            yaw = float(parts[2])
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: bad yaw {parts[2]!r}") from exc
        records.append(ManifestRecord(parts[0], parts[1], yaw, parts[3]))
    return records


# ---------------------------------------------------------------------------
# pairs and folds


def yaw_bucket(yaw):
    """Nearest of the +-15..+-90 bucket centres; ties go to the larger bucket."""
    a = abs(yaw)
    return min(YAW_BUCKETS, key=lambda c: (abs(a - c), -c))


def bucket_by_yaw(records):
    buckets = {b: [] for b in YAW_BUCKETS}
    for r in records:
        buckets[yaw_bucket(r.yaw_degrees)].append(r)
    return buckets


def _views_by_identity(records, threshold):
    frontal, profile = {}, {}
    for idx, r in enumerate(records):
        (frontal if r.is_frontal(threshold) else profile).setdefault(r.identity, []).append(idx)
    return frontal, profile


def sample_balanced_pairs(records, n_pairs, seed, frontal_threshold=FRONTAL_THRESHOLD):
    """Draw ``n_pairs / 2`` genuine and ``n_pairs / 2`` impostor pairs.

    Sampling is with replacement. The profile member always has
    ``|yaw| > frontal_threshold`` and the frontal member ``|yaw| <= frontal_threshold``.
    """
    if n_pairs <= 0 or n_pairs % 2:
        raise SamplingError(f"n_pairs must be a positive even number, got {n_pairs}")
    frontal, profile = _views_by_identity(records, frontal_threshold)
    both = sorted(set(frontal) & set(profile))
    if len(both) < 2:
        raise SamplingError("need at least 2 identities with both frontal and profile views")
    rng = np.random.default_rng(seed)
    half = n_pairs // 2
    pairs = []
    for k in range(n_pairs):
        label = GENUINE if k < half else IMPOSTOR
        ident = both[rng.integers(len(both))]
        p = profile[ident][rng.integers(len(profile[ident]))]
        if label == GENUINE:
            other = ident
        else:
            other = _other_identity(both, ident, int(rng.integers(len(both) - 1)))
        f = frontal[other][rng.integers(len(frontal[other]))]
        pairs.append(Pair(int(p), int(f), label))
    order = rng.permutation(n_pairs)
    return [pairs[i] for i in order]


def _other_identity(identities, ident, j):
    # j is uniform over len-1 slots; skip over ident's own position
    pos = identities.index(ident)
    return identities[j if j < pos else j + 1]


@dataclasses.dataclass
class FoldSplit:
    folds: list
    dropped: int = 0

    @property
    def k(self):
        return len(self.folds)


class _UnionFind:
    def __init__(self):
        self.parent = {}

    def find(self, a):
        self.parent.setdefault(a, a)
        while self.parent[a] != a:
            self.parent[a] = self.parent[self.parent[a]]
            a = self.parent[a]
        return a

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def split_folds(pairs, records, k, seed, balanced=True):
    """Partition pairs into ``k`` identity-disjoint folds.

    Identities linked by any pair must share a fold, so the linked groups are
    distributed greedily across folds. Folds are then trimmed to a common size
    (and to equal genuine/impostor counts when ``balanced``); the number of
    trimmed pairs is stored in ``FoldSplit.dropped``.
    """
    if k < 2:
        raise ProtocolError(f"need at least 2 folds, got {k}")
    uf = _UnionFind()
    for p in pairs:
        uf.union(records[p.profile].identity, records[p.frontal].identity)
    groups = {}
    for p in pairs:
        groups.setdefault(uf.find(records[p.profile].identity), []).append(p)
    if len(groups) < k:
        raise ProtocolError(
            f"only {len(groups)} identity-disjoint groups for {k} folds"
        )
    rng = np.random.default_rng(seed)
    keys = sorted(groups)
    keys = [keys[i] for i in rng.permutation(len(keys))]
    keys.sort(key=lambda g: -len(groups[g]))
    folds = [[] for _ in range(k)]
    for g in keys:
        target = min(range(k), key=lambda i: (len(folds[i]), i))
        folds[target].extend(groups[g])
    if balanced:
        per_label = min(
            min(sum(p.label == GENUINE for p in f), sum(p.label == IMPOSTOR for p in f))
            for f in folds
        )
        trimmed = []
        for f in folds:
            gen = [p for p in f if p.label == GENUINE][:per_label]
            imp = [p for p in f if p.label == IMPOSTOR][:per_label]
            trimmed.append(gen + imp)
    else:
        size = min(len(f) for f in folds)
        trimmed = [f[:size] for f in folds]
    dropped = len(pairs) - sum(len(f) for f in trimmed)
    if any(len(f) == 0 for f in trimmed):
        raise ProtocolError("a fold ended up empty after balancing")
    return FoldSplit(trimmed, dropped)


def sample_fold_pairs(records, k, pairs_per_fold, seed, frontal_threshold=FRONTAL_THRESHOLD):
    """Balanced pairs drawn inside ``k`` disjoint identity groups.

    The result splits into ``k`` identity-disjoint folds without any loss.
    """
    frontal, profile = _views_by_identity(records, frontal_threshold)
    both = sorted(set(frontal) & set(profile))
    if len(both) < 2 * k:
        raise ProtocolError(
            f"{len(both)} identities with both views cannot fill {k} folds (need {2 * k})"
        )
    rng = np.random.default_rng(seed)
    shuffled = [both[i] for i in rng.permutation(len(both))]
    pairs = []
    for g in range(k):
        members = set(shuffled[g::k])
        sub = [i for i, r in enumerate(records) if r.identity in members]
        local = sample_balanced_pairs(
            [records[i] for i in sub], pairs_per_fold, int(rng.integers(2**31)), frontal_threshold
        )
        pairs.extend(Pair(sub[p.profile], sub[p.frontal], p.label) for p in local)
    return pairs
