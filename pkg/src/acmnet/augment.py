"""Appearance augmentations, geometric transform groups and view batches."""

import enum
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from acmnet import _kernels
from acmnet.errors import DegenerateBatchError, ParameterError

# Application order and probabilities.
APPEARANCE_PROBABILITIES = {
    "planckian_jitter": 0.8,
    "color_jiggle": 0.5,
    "plasma_brightness": 0.5,
    "plasma_contrast": 0.3,
    "grayscale": 0.3,
    "box_blur": 0.5,
    "channel_shuffle": 0.5,
    "motion_blur": 0.3,
    "solarize": 0.5,
}
APPEARANCE_KINDS = tuple(APPEARANCE_PROBABILITIES)

PLASMA_AMPLITUDE = 0.3
PLASMA_OCTAVES = 3
LUMA = np.array([0.299, 0.587, 0.114])


def derive_seed(*parts):
    """Mix integers into one 64-bit seed, independent of call order elsewhere."""
    ss = np.random.SeedSequence([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts])
    return int(ss.generate_state(1, np.uint64)[0])


# ---------------------------------------------------------------------------
# appearance descriptors
# ---------------------------------------------------------------------------


@dataclass
class TransformRecord:
    kind: str
    applied: bool
    params: dict


@dataclass
class AppearanceTransformDescriptor:
    rng_seed: int
    transforms: list

    def to_json(self):
        return json.dumps({
            "rng_seed": self.rng_seed,
            "transforms": [
                {"kind": t.kind, "applied": t.applied, "params": t.params} for t in self.transforms
            ],
        })

    @classmethod
    def from_json(cls, text):
        raw = json.loads(text)
        recs = [TransformRecord(t["kind"], bool(t["applied"]), dict(t["params"]))
                for t in raw["transforms"]]
        for r in recs:
            if r.kind not in APPEARANCE_PROBABILITIES:
                raise ParameterError(f"unknown appearance transform {r.kind!r}")
        return cls(int(raw["rng_seed"]), recs)

    def applied_kinds(self):
        return [t.kind for t in self.transforms if t.applied]


def _sample_params(kind, rng):
    if kind == "planckian_jitter":
        return {"temperature": float(rng.uniform(3000.0, 15000.0))}
    if kind == "color_jiggle":
        return {
            "brightness": float(rng.uniform(0.8, 1.2)),
            "contrast": float(rng.uniform(0.8, 1.2)),
            "saturation": float(rng.uniform(0.8, 1.2)),
            "hue": float(rng.uniform(-0.1, 0.1)),
        }
    if kind in ("plasma_brightness", "plasma_contrast"):
        return {"noise_seed": int(rng.integers(0, 2**31)), "amplitude": PLASMA_AMPLITUDE}
    if kind == "grayscale":
        return {}
    if kind == "box_blur":
        return {"size": 3}
    if kind == "channel_shuffle":
        return {"perm": [int(v) for v in rng.permutation(3)]}
    if kind == "motion_blur":
        return {"length": 5, "angle": float(rng.uniform(0.0, 180.0))}
    if kind == "solarize":
        return {"threshold": float(rng.uniform(0.4, 0.6))}
    raise ParameterError(f"unknown appearance transform {kind!r}")


def sample_appearance_transform(rng_seed):
    """Draw the on/off flag of each transform, then its parameters.

    Parameters are drawn even for transforms that end up off, so the
    random stream consumed per kind never depends on earlier flags.
    """
    rng = np.random.default_rng(int(rng_seed) & 0xFFFFFFFFFFFFFFFF)
    flags = rng.random(len(APPEARANCE_KINDS))
    recs = []
    for kind, u in zip(APPEARANCE_KINDS, flags):
        recs.append(TransformRecord(kind, bool(u < APPEARANCE_PROBABILITIES[kind]),
                                    _sample_params(kind, rng)))
    return AppearanceTransformDescriptor(int(rng_seed), recs)


def identity_descriptor():
    d = sample_appearance_transform(0)
    for t in d.transforms:
        t.applied = False
    return d


def only(kind, **params):
    """Descriptor that applies a single transform (defaults filled from seed 0)."""
    d = identity_descriptor()
    for t in d.transforms:
        if t.kind == kind:
            t.applied = True
            t.params.update(params)
            return d
    raise ParameterError(f"unknown appearance transform {kind!r}")


# ---------------------------------------------------------------------------
# pixel operations
# ---------------------------------------------------------------------------


def blackbody_rgb(temperature):
    """Approximate sRGB colour of a blackbody, channels in [0, 255]."""
    t = temperature / 100.0
    if t <= 66:
        r = 255.0
        g = 99.4708025861 * np.log(t) - 161.1195681661
    else:
        r = 329.698727446 * (t - 60) ** -0.1332047592
        g = 288.1221695283 * (t - 60) ** -0.0755148492
    if t >= 66:
        b = 255.0
    elif t <= 19:
        b = 0.0
    else:
        b = 138.5177312231 * np.log(t - 10) - 305.0447927307
    return np.clip(np.array([r, g, b]), 0.0, 255.0)


def _gray(x):
    return np.tensordot(LUMA.astype(x.dtype), x, axes=(0, 0))


def _hue_rotate(x, shift):
    # rotation of the chroma plane in YIQ space
    to_yiq = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
    ang = 2 * np.pi * shift
    rot = np.array([[1, 0, 0], [0, np.cos(ang), -np.sin(ang)], [0, np.sin(ang), np.cos(ang)]])
    m = np.linalg.inv(to_yiq) @ rot @ to_yiq
    return np.tensordot(m.astype(x.dtype), x, axes=(1, 0))


def value_noise(shape, seed, octaves=PLASMA_OCTAVES):
    """Smooth field in [-1, 1]: sum of bilinearly upsampled random grids."""
    h, w = shape
    rng = np.random.default_rng(seed)
    field_ = np.zeros((h, w))
    total = 0.0
    for o in range(1, octaves + 1):
        g = 2**o + 1
        grid = rng.uniform(-1.0, 1.0, size=(1, g, g))
        rr = (np.arange(h) + 0.5) / h * (g - 1)
        cc = (np.arange(w) + 0.5) / w * (g - 1)
        src_r, src_c = np.meshgrid(rr, cc, indexing="ij")
        amp = 0.5 ** (o - 1)
        field_ += amp * _kernels.bilinear_sample(grid, src_r, src_c)[0]
        total += amp
    return field_ / total


def motion_kernel(length, angle_deg):
    """Normalized line kernel through the centre; symmetric under 180 degrees."""
    size = length if length % 2 else length + 1
    c = size // 2
    k = np.zeros((size, size))
    th = np.deg2rad(angle_deg)
    for t in np.linspace(-(length - 1) / 2, (length - 1) / 2, 4 * length + 1):
        r = c - t * np.sin(th)
        q = c + t * np.cos(th)
        r0, q0 = int(np.floor(r)), int(np.floor(q))
        fr, fq = r - r0, q - q0
        for dr, wr in ((0, 1 - fr), (1, fr)):
            for dq, wq in ((0, 1 - fq), (1, fq)):
                rr, qq = r0 + dr, q0 + dq
                if 0 <= rr < size and 0 <= qq < size:
                    k[rr, qq] += wr * wq
    return k / k.sum()


def _apply_one(x, kind, p):
    dt = x.dtype
    if kind == "planckian_jitter":
        gains = blackbody_rgb(p["temperature"]) / blackbody_rgb(6500.0)
        x = x * gains.astype(dt)[:, None, None]
    elif kind == "color_jiggle":
        x = x * dt.type(p["brightness"])
        m = _gray(x).mean()
        x = (x - m) * dt.type(p["contrast"]) + m
        g = _gray(x)[None]
        x = g + dt.type(p["saturation"]) * (x - g)
        x = _hue_rotate(x, p["hue"])
    elif kind == "plasma_brightness":
        f = value_noise(x.shape[1:], p["noise_seed"])
        x = x * (1.0 + p["amplitude"] * f).astype(dt)
    elif kind == "plasma_contrast":
        f = value_noise(x.shape[1:], p["noise_seed"])
        m = x.mean(axis=(1, 2), keepdims=True)
        x = (x - m) * (1.0 + p["amplitude"] * f).astype(dt) + m
    elif kind == "grayscale":
        x = np.repeat(_gray(x)[None], x.shape[0], axis=0)
    elif kind == "box_blur":
        s = p["size"]
        x = _kernels.filter2d(np.ascontiguousarray(x), np.full((s, s), 1.0 / (s * s), dtype=dt))
    elif kind == "channel_shuffle":
        x = x[list(p["perm"])]
    elif kind == "motion_blur":
        k = motion_kernel(p["length"], p["angle"]).astype(dt)
        x = _kernels.filter2d(np.ascontiguousarray(x), k)
    elif kind == "solarize":
        x = np.where(x >= p["threshold"], 1.0 - x, x)
    else:
        raise ParameterError(f"unknown appearance transform {kind!r}")
    return np.clip(x, 0.0, 1.0).astype(dt, copy=False)


def apply_appearance_transform(image, desc):
    """Apply the transforms marked ``applied`` in descriptor order. Pixel-level only."""
    x = np.asarray(image)
    if x.ndim != 3 or x.shape[0] != 3:
        raise ParameterError(f"expected a (3, H, W) image, got {x.shape}")
    out = x
    for t in desc.transforms:
        if t.applied:
            out = _apply_one(out, t.kind, t.params)
    return out if out is not x else x.copy()


# ---------------------------------------------------------------------------
# geometric groups
# ---------------------------------------------------------------------------


def rotate90(image, k):
    """Counter-clockwise quarter turns: ``out[r, c] = in[c, H - 1 - r]`` for k = 1."""
    image = np.asarray(image)
    h, w = image.shape[-2:]
    if h != w:
        raise ParameterError(f"rotate90 needs a square image, got {h}x{w}")
    return np.ascontiguousarray(np.rot90(image, int(k) % 4, axes=(-2, -1)))


class GroupKind(str, enum.Enum):
    C4_ROTATIONS = "c4"
    ROTATIONS_2D = "rotations_2d"
    AFFINE_2D = "affine_2d"
    PROJECTIVE_2D = "projective_2d"


def _rotation_matrix(deg):
    # y axis points down, so this turns content counter-clockwise on screen
    a = np.deg2rad(deg)
    return np.array([[np.cos(a), np.sin(a), 0.0], [-np.sin(a), np.cos(a), 0.0], [0.0, 0.0, 1.0]])


def _affine(a, b, tx, c, d, ty):
    return np.array([[a, b, tx], [c, d, ty], [0.0, 0.0, 1.0]])


def _projective(h11, h12, h13, h21, h22, h23, h31, h32):
    return np.array([[h11, h12, h13], [h21, h22, h23], [h31, h32, 1.0]])


# Four representatives per non-cyclic group, identity first. Matrices act on
# centred coordinates in [-1, 1]^2 and send input content to output position.
GROUP_ELEMENTS = {
    GroupKind.C4_ROTATIONS: [{"k": k} for k in range(4)],
    GroupKind.ROTATIONS_2D: [{"angle": a} for a in (0.0, 45.0, 135.0, 225.0)],
    GroupKind.AFFINE_2D: [
        {"affine": [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]},
        {"affine": [1.0, 0.4, 0.0, 0.0, 1.0, 0.0]},
        {"affine": [1.25, 0.0, 0.1, 0.0, 0.8, -0.1]},
        {"affine": [0.9, -0.3, 0.0, 0.35, 0.95, 0.05]},
    ],
    GroupKind.PROJECTIVE_2D: [
        {"homography": [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]},
        {"homography": [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.3, 0.0]},
        {"homography": [1.0, 0.1, 0.0, 0.0, 1.0, 0.0, 0.0, 0.3]},
        {"homography": [0.9, 0.0, 0.05, 0.1, 1.0, 0.0, -0.2, 0.2]},
    ],
}


@dataclass
class TransformGroup:
    kind: GroupKind = GroupKind.C4_ROTATIONS
    elements: list = field(default=None)

    def __post_init__(self):
        self.kind = GroupKind(self.kind)
        if self.elements is None:
            self.elements = [dict(e) for e in GROUP_ELEMENTS[self.kind]]

    @property
    def class_count(self):
        return len(self.elements)

    def matrix(self, label):
        e = self.elements[label]
        if "k" in e:
            return _rotation_matrix(90.0 * e["k"])
        if "angle" in e:
            return _rotation_matrix(e["angle"])
        if "affine" in e:
            return _affine(*e["affine"])
        return _projective(*e["homography"])


def compose(m_first, m_second):
    """Matrix of applying ``m_first`` then ``m_second``, normalized so [2, 2] = 1."""
    m = m_second @ m_first
    return m / m[2, 2]


def warp(image, matrix):
    """Bilinear warp with zero padding; ``matrix`` maps input to output position."""
    image = np.asarray(image)
    c, h, w = image.shape
    inv = np.linalg.inv(matrix)
    ys = (np.arange(h) + 0.5) / h * 2.0 - 1.0
    xs = (np.arange(w) + 0.5) / w * 2.0 - 1.0
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), np.ones(gx.size)])
    src = inv @ pts
    sx = src[0] / src[2]
    sy = src[1] / src[2]
    src_c = ((sx + 1.0) * w / 2.0 - 0.5).reshape(h, w)
    src_r = ((sy + 1.0) * h / 2.0 - 0.5).reshape(h, w)
    out = _kernels.bilinear_sample(np.ascontiguousarray(image), src_r, src_c)
    return out.astype(image.dtype, copy=False)


def apply_group_element(image, group, label):
    if group.kind is GroupKind.C4_ROTATIONS:
        return rotate90(image, group.elements[label]["k"])
    return warp(image, group.matrix(label))


def sample_group_element(group, rng_seed):
    """Uniform draw over the group's elements; returns ``(params, label)``."""
    rng = np.random.default_rng(int(rng_seed) & 0xFFFFFFFFFFFFFFFF)
    label = int(rng.integers(0, group.class_count))
    return dict(group.elements[label]), label


# ---------------------------------------------------------------------------
# view batches
# ---------------------------------------------------------------------------


@dataclass
class ViewBatch:
    contrastive: np.ndarray  # (2N, C, H, W): x_{1,0}, x_{1,1}, x_{2,0}, ...
    predictive: np.ndarray  # (K*N, C, H, W): every group element of each x_{i,0}
    labels: np.ndarray  # (K*N,)
    source_indices: np.ndarray  # (N,)
    descriptors: list  # N appearance descriptors


def build_view_batch(images, rng_seed, group=None, source_indices=None, jobs=1,
                     contrastive=True, predictive=True):
    """Contrastive and predictive sub-batches for one training step.

    Each image's appearance seed is ``derive_seed(rng_seed, i)``, so the
    result does not depend on ``jobs``.
    """
    group = group or TransformGroup()
    images = [np.asarray(x) for x in images]
    n = len(images)
    if n < 2:
        raise DegenerateBatchError(
            f"a view batch needs N >= 2 images (got {n}): the NT-Xent denominator "
            "is empty when only one place is in the batch"
        )
    if source_indices is None:
        source_indices = np.arange(n)
    shape = images[0].shape
    dtype = images[0].dtype

    descs = [sample_appearance_transform(derive_seed(rng_seed, i)) for i in range(n)]
    if contrastive:
        if jobs > 1:
            with ThreadPoolExecutor(jobs) as pool:
                views = list(pool.map(apply_appearance_transform, images, descs))
        else:
            views = [apply_appearance_transform(x, d) for x, d in zip(images, descs)]
        cb = np.empty((2 * n,) + shape, dtype=dtype)
        for i in range(n):
            cb[2 * i] = images[i]
            cb[2 * i + 1] = views[i]
    else:
        cb = np.empty((0,) + shape, dtype=dtype)

    k = group.class_count
    if predictive:
        pb = np.empty((k * n,) + shape, dtype=dtype)
        for i in range(n):
            for lab in range(k):
                pb[k * i + lab] = apply_group_element(images[i], group, lab)
        labels = np.tile(np.arange(k), n)
    else:
        pb = np.empty((0,) + shape, dtype=dtype)
        labels = np.empty(0, dtype=np.int64)
    return ViewBatch(cb, pb, labels, np.asarray(source_indices), descs)

