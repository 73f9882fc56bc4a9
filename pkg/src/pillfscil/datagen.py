"""Synthetic pill images, virtual-class generation and feature files.

Images are float64 arrays of shape ``(n, H, W, 3)`` with values in [0, 1],
drawn on a neutral gray background so that hue rotation leaves the
background untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from scipy import ndimage

from .numerics import InvalidInputError

SHAPES = ("circle", "ellipse", "capsule")
ASPECT = {"circle": 1.0, "ellipse": 0.62, "capsule": 0.42}
BACKGROUND = 0.3


class FeatureFileError(ValueError):
    pass


@dataclass(frozen=True)
class PillClassSpec:
    shape: str
    color: tuple
    scale: float
    texture_seed: int

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise InvalidInputError(f"unknown shape {self.shape!r}")
        if not all(0.0 <= c <= 1.0 for c in self.color):
            raise InvalidInputError(f"color {self.color} outside [0, 1]")
        if not 0.3 <= self.scale <= 0.9:
            raise InvalidInputError(f"scale {self.scale} outside [0.3, 0.9]")


@dataclass
class JitterConfig:
    position: float = 0.12
    rotation: bool = True
    brightness: float = 0.12
    noise: float = 0.06
    scale: float = 0.06
    distractor_prob: float = 0.25

    @classmethod
    def none(cls):
        return cls(0.0, False, 0.0, 0.0, 0.0, 0.0)


@dataclass
class ImageSet:
    pixels: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.pixels.shape[0] != self.labels.shape[0]:
            raise InvalidInputError("pixels and labels disagree on sample count")

    def __len__(self):
        return self.labels.shape[0]

    @property
    def image_shape(self):
        return self.pixels.shape[1:]

    def flat(self):
        return self.pixels.reshape(len(self), -1)

    def subset(self, mask_or_idx):
        return ImageSet(self.pixels[mask_or_idx], self.labels[mask_or_idx])

    @staticmethod
    def concat(sets):
        sets = [s for s in sets if len(s)]
        return ImageSet(np.concatenate([s.pixels for s in sets]), np.concatenate([s.labels for s in sets]))


@dataclass
class FeatureDataset:
    features: np.ndarray
    labels: np.ndarray
    provenance: str = "synthetic-backbone"
    n_classes: int | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise InvalidInputError("features must be (n, d) with one label per row")
        if self.n_classes is None:
            self.n_classes = int(self.labels.max()) + 1 if self.labels.size else 0

    def __len__(self):
        return self.labels.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]


def random_class_specs(n_classes, rng, hue_clusters=0, hue_spread=0.03):
    """Random distinct class specs.

    With ``hue_clusters > 0`` hues are drawn near a few evenly spaced anchors,
    so many classes share almost the same color (small inter-class variation).
    """
    specs = []
    for i in range(n_classes):
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        if hue_clusters > 0:
            anchor = int(rng.integers(hue_clusters)) / hue_clusters
            hue = float(np.mod(anchor + rng.normal(0.0, hue_spread), 1.0))
        else:
            hue = rng.uniform()
        hsv = np.array([hue, rng.uniform(0.35, 0.9), rng.uniform(0.55, 1.0)])
        color = tuple(float(c) for c in hsv_to_rgb(hsv))
        scale = float(rng.uniform(0.45, 0.85))
        specs.append(PillClassSpec(shape, color, scale, int(rng.integers(2**31))))
    return specs


def _sample_params(spec, jitter, rng):
    """All per-image random choices, drawn serially from ``rng``."""
    p = {
        "dx": rng.uniform(-1, 1) * jitter.position,
        "dy": rng.uniform(-1, 1) * jitter.position,
        "theta": rng.uniform(0, math.pi) if jitter.rotation else 0.0,
        "gain": 1.0 + rng.uniform(-1, 1) * jitter.brightness,
        "scale": 1.0 + rng.uniform(-1, 1) * jitter.scale,
        "noise_seed": int(rng.integers(2**31)),
        "distractor": None,
    }
    if jitter.distractor_prob > 0 and rng.uniform() < jitter.distractor_prob:
        ang = rng.uniform(0, 2 * math.pi)
        hsv = np.array([rng.uniform(), rng.uniform(0.2, 0.9), rng.uniform(0.5, 1.0)])
        p["distractor"] = (ang, rng.uniform(0.25, 0.45), tuple(hsv_to_rgb(hsv)))
    return p


def _texture(spec, u, v):
    t = np.random.default_rng(spec.texture_seed)
    fu, fv = t.uniform(2.0, 7.0, size=2)
    phase = t.uniform(0, 2 * math.pi)
    amp = t.uniform(0.03, 0.08)
    return amp * np.sin(fu * u + fv * v + phase)


def render_pill(spec, size, params, noise=0.0):
    """Render one image of ``spec`` with the per-image ``params``."""
    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    img = np.full((size, size, 3), BACKGROUND)
    px = 2.0 / size

    if params["distractor"] is not None:
        ang, r, col = params["distractor"]
        reach = spec.scale * 0.9
        cx = params["dx"] + math.cos(ang) * reach
        cy = params["dy"] + math.sin(ang) * reach
        sdf = np.hypot(xx - cx, yy - cy) - r
        m = np.clip(0.5 - sdf / px, 0.0, 1.0)[..., None]
        img = img * (1 - m) + np.asarray(col) * 0.9 * m

    a = spec.scale * params["scale"]
    b = a * ASPECT[spec.shape]
    c, s = math.cos(params["theta"]), math.sin(params["theta"])
    u = (xx - params["dx"]) * c + (yy - params["dy"]) * s
    v = -(xx - params["dx"]) * s + (yy - params["dy"]) * c
    if spec.shape == "circle":
        sdf = np.hypot(u, v) - a
        rad = np.hypot(u, v) / a
    elif spec.shape == "ellipse":
        q = np.hypot(u / a, v / b)
        sdf = (q - 1.0) * b
        rad = q
    else:
        half = a - b
        du = np.maximum(np.abs(u) - half, 0.0)
        sdf = np.hypot(du, v) - b
        rad = np.hypot(du, v) / b
    mask = np.clip(0.5 - sdf / px, 0.0, 1.0)[..., None]
    shade = (0.82 + 0.18 * np.clip(1.0 - rad**2, 0.0, 1.0) + _texture(spec, u, v))[..., None]
    pill = np.asarray(spec.color) * shade * params["gain"]
    img = img * (1 - mask) + pill * mask
    if noise > 0:
        img = img + np.random.default_rng(params["noise_seed"]).normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_dataset(class_specs, per_class_train, per_class_test, jitter, rng, image_size=32):
    """Render train and test sets for every class in ``class_specs``.

    ``per_class_train`` may be an int or one count per class. Labels are the
    indices into ``class_specs``. The output is a pure function of the specs,
    counts, jitter and the state of ``rng``.
    """
    n = len(class_specs)
    if n < 1:
        raise InvalidInputError("need at least one class")
    train_counts = np.broadcast_to(np.asarray(per_class_train), (n,))
    test_counts = np.broadcast_to(np.asarray(per_class_test), (n,))
    if np.any(train_counts < 0) or np.any(test_counts < 0):
        raise InvalidInputError("per-class counts must be non-negative")

    def render(counts):
        total = int(counts.sum())
        pixels = np.empty((total, image_size, image_size, 3))
        labels = np.empty(total, dtype=np.int64)
        k = 0
        for label, (spec, cnt) in enumerate(zip(class_specs, counts)):
            for _ in range(int(cnt)):
                params = _sample_params(spec, jitter, rng)
                pixels[k] = render_pill(spec, image_size, params, jitter.noise)
                labels[k] = label
                k += 1
        return ImageSet(pixels, labels)

    return render(train_counts), render(test_counts)


@dataclass(frozen=True)
class VirtualTransform:
    hue_degrees: float
    scale: float
    source_class: int
    virtual_label: int

    def __post_init__(self):
        if not 60.0 <= self.hue_degrees <= 300.0:
            raise InvalidInputError("hue rotation must lie in [60, 300] degrees")
        if not (0.6 <= self.scale <= 0.9 or 1.1 <= self.scale <= 1.4):
            raise InvalidInputError("scale factor must lie in [0.6, 0.9] or [1.1, 1.4]")

    def apply(self, pixels):
        return rescale_about_center(rotate_hue(pixels, self.hue_degrees), self.scale)


def rotate_hue(pixels, degrees):
    hsv = rgb_to_hsv(np.clip(pixels, 0.0, 1.0))
    hsv[..., 0] = np.mod(hsv[..., 0] + degrees / 360.0, 1.0)
    return np.clip(hsv_to_rgb(hsv), 0.0, 1.0)


def rescale_about_center(pixels, factor, fill=BACKGROUND):
    """Bilinear zoom by ``factor`` about the image center, keeping the size."""
    single = pixels.ndim == 3
    batch = pixels[None] if single else pixels
    h, w = batch.shape[1:3]
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    # affine_transform maps output coords to input coords
    inv = np.eye(2) / factor
    offset = center - inv @ center
    out = np.empty_like(batch)
    for i in range(batch.shape[0]):
        for ch in range(batch.shape[3]):
            out[i, :, :, ch] = ndimage.affine_transform(
                batch[i, :, :, ch], inv, offset=offset, order=1, mode="constant", cval=fill)
    out = np.clip(out, 0.0, 1.0)
    return out[0] if single else out


def draw_virtual_transforms(n_real, fold, rng):
    transforms = []
    for k in range(1, fold + 1):
        for c in range(n_real):
            while True:
                hue = float(rng.uniform(60.0, 300.0))
                lo, hi = (0.6, 0.9) if rng.uniform() < 0.5 else (1.1, 1.4)
                scale = float(rng.uniform(lo, hi))
                t = VirtualTransform(hue, scale, c, c + k * n_real)
                if all((t.hue_degrees, t.scale) != (o.hue_degrees, o.scale) for o in transforms):
                    break
            transforms.append(t)
    return transforms


def generate_virtual_classes(train, fold, rng, n_real=None):
    """Append ``fold`` virtual copies of every real class to ``train``.

    Returns ``(augmented_set, transforms)``; real samples are left untouched.
    """
    if fold not in (0, 1, 2):
        raise InvalidInputError(f"fold must be 0, 1 or 2, got {fold}")
    if n_real is None:
        n_real = int(train.labels.max()) + 1
    if fold == 0:
        return ImageSet(train.pixels, train.labels), []
    transforms = draw_virtual_transforms(n_real, fold, rng)
    parts = [train]
    for t in transforms:
        src = train.subset(train.labels == t.source_class)
        parts.append(ImageSet(t.apply(src.pixels), np.full(len(src), t.virtual_label)))
    return ImageSet.concat(parts), transforms


def extract_features(backbone, images, batch_size=1024, n_classes=None):
    if len(images) == 0:
        return FeatureDataset(np.zeros((0, backbone.output_dim)), np.zeros(0, dtype=np.int64),
                              n_classes=n_classes or 0)
    flat = images.flat()
    if flat.shape[1] != backbone.input_dim:
        raise InvalidInputError(f"image length {flat.shape[1]} != backbone input {backbone.input_dim}")
    feats = np.concatenate([backbone.forward(flat[i:i + batch_size])
                            for i in range(0, flat.shape[0], batch_size)])
    return FeatureDataset(feats, images.labels, n_classes=n_classes)


def save_feature_file(dataset, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"d={dataset.dim},classes={dataset.n_classes}\n")
        for f, y in zip(dataset.features, dataset.labels):
            fh.write(",".join([str(int(y))] + [repr(float(v)) for v in f]) + "\n")


def load_feature_file(path):
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise FeatureFileError("line 1: missing header")
    try:
        fields = dict(kv.split("=", 1) for kv in lines[0].strip().split(","))
        dim = int(fields["d"])
        n_classes = int(fields["classes"])
    except (ValueError, KeyError) as exc:
        raise FeatureFileError(f"line 1: malformed header {lines[0]!r}") from exc
    if dim <= 0 or n_classes < 0:
        raise FeatureFileError(f"line 1: invalid header values d={dim}, classes={n_classes}")
    feats = np.empty((len(lines) - 1, dim))
    labels = np.empty(len(lines) - 1, dtype=np.int64)
    for i, line in enumerate(lines[1:]):
        lineno = i + 2
        parts = line.split(",")
        if len(parts) != dim + 1:
            raise FeatureFileError(f"line {lineno} (record {i}): expected {dim} values, got {len(parts) - 1}")
        try:
            labels[i] = int(parts[0])
            feats[i] = [float(p) for p in parts[1:]]
        except ValueError as exc:
            raise FeatureFileError(f"line {lineno} (record {i}): {exc}") from exc
        if not np.all(np.isfinite(feats[i])):
            raise FeatureFileError(f"line {lineno} (record {i}): non-finite value")
        if not 0 <= labels[i] < max(n_classes, 1):
            raise FeatureFileError(f"line {lineno} (record {i}): label {labels[i]} outside [0, {n_classes})")
    if labels.size and set(np.unique(labels).tolist()) != set(range(int(labels.max()) + 1)):
        raise FeatureFileError("labels do not form a contiguous 0-based range")
    return FeatureDataset(feats, labels, provenance="external-file", n_classes=n_classes)
