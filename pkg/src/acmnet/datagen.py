"""Synthetic place traverses and manifest-based dataset directories.

A traverse is a long horizontal strip of coloured primitives (buildings,
boxes, discs, triangles) over a sky/ground backdrop. Place ``i`` is the unit
window starting at ``i * WINDOW_STEP`` along the strip, so neighbouring
places overlap and the frame tolerance window of recall@N means something.
A condition only changes pixel statistics (tint, brightness, contrast,
noise); geometry is fixed by ``(place_id, layout_seed)``.
"""

import colorsys
import json
import math
import os
import zlib
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from acmnet.errors import LoadError, ParameterError

WINDOW_STEP = 1.0 / 3.0
HORIZON = 0.62
SHAPE_KINDS = ("building", "box", "disc", "triangle")
MANIFEST = "manifest.json"


@dataclass(frozen=True)
class Primitive:
    kind: str
    x: float  # centre, window-relative, in [0, 1)
    y: float  # centre, 0 = top
    scale: float
    aspect: float
    hue: float


@dataclass(frozen=True)
class PlaceSpec:
    place_id: int
    layout_seed: int
    geometry_params: tuple


@dataclass(frozen=True)
class ConditionSpec:
    condition_id: str
    global_tint: tuple = (0.0, 0.0, 0.0)
    brightness_shift: float = 0.0
    contrast_scale: float = 1.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        tint = tuple(float(t) for t in self.global_tint)
        object.__setattr__(self, "global_tint", tint)
        if len(tint) != 3 or any(abs(t) > 0.5 for t in tint):
            raise ParameterError("global_tint must be a 3-vector in [-0.5, 0.5]")
        if abs(self.brightness_shift) > 0.4:
            raise ParameterError("brightness_shift must lie in [-0.4, 0.4]")
        if not 0.5 <= self.contrast_scale <= 1.5:
            raise ParameterError("contrast_scale must lie in [0.5, 1.5]")
        if self.noise_sigma < 0:
            raise ParameterError("noise_sigma must be >= 0")


REFERENCE = ConditionSpec("reference")

# Stand-ins for seasonal / illumination shifts, strongest first after the
# reference. ``generate-data --conditions n`` takes the first n.
PRESET_CONDITIONS = (
    REFERENCE,
    ConditionSpec("cond-1", (-0.08, 0.02, 0.18), 0.12, 0.6, 0.03),
    ConditionSpec("cond-2", (0.06, 0.0, -0.12), -0.28, 0.55, 0.05),
    ConditionSpec("cond-3", (0.22, 0.04, -0.16), -0.05, 0.8, 0.02),
)


@dataclass
class Pose:
    t: np.ndarray  # (3,) metres
    q: np.ndarray  # (4,) unit quaternion, w first

    def __eq__(self, other):
        return (
            isinstance(other, Pose)
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.q, other.q)
        )


@dataclass
class Frame:
    sequence_id: str
    frame_index: int
    condition_id: str
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    file: str = None
    pose: Pose = None

    def __eq__(self, other):
        return (
            isinstance(other, Frame)
            and (self.sequence_id, self.frame_index, self.condition_id)
            == (other.sequence_id, other.frame_index, other.condition_id)
            and self.image.dtype == other.image.dtype
            and np.array_equal(self.image, other.image)
            and self.pose == other.pose
        )


@dataclass
class Dataset:
    frames: list
    correspondence: dict  # query frame_index -> reference frame_index
    reference_sequence: str
    places: list = field(default_factory=list, compare=False)

    def sequence_ids(self):
        seen = []
        for f in self.frames:
            if f.sequence_id not in seen:
                seen.append(f.sequence_id)
        return seen

    def sequence(self, sequence_id):
        return [f for f in self.frames if f.sequence_id == sequence_id]

    def reference_frames(self):
        return self.sequence(self.reference_sequence)

    def query_frames(self, sequence_id=None):
        if sequence_id is not None:
            return self.sequence(sequence_id)
        return [f for f in self.frames if f.sequence_id != self.reference_sequence]

    @property
    def has_poses(self):
        return all(f.pose is not None for f in self.frames)

    def __len__(self):
        return len(self.frames)


# ---------------------------------------------------------------------------
# layout
# ---------------------------------------------------------------------------


def _segment_primitives(layout_seed, segment):
    """Primitives whose centres fall in strip interval [segment, segment + 1)."""
    rng = np.random.default_rng([layout_seed & 0xFFFFFFFFFFFFFFFF, segment])
    prims = []
    for _ in range(int(rng.integers(2, 4))):
        w = rng.uniform(0.08, 0.22)
        h = rng.uniform(0.15, 0.5)
        prims.append(("building", segment + rng.uniform(0, 1), HORIZON - h / 2, w, h / w,
                      rng.uniform(0, 1)))
    for _ in range(int(rng.integers(3, 6))):
        kind = SHAPE_KINDS[1 + int(rng.integers(0, 3))]
        y = rng.uniform(0.08, 0.92)
        prims.append((kind, segment + rng.uniform(0, 1), y, rng.uniform(0.06, 0.2),
                      rng.uniform(0.6, 1.6), rng.uniform(0, 1)))
    # left-to-right x order within a segment keeps painter's order stable
    return sorted(prims, key=lambda p: p[1])


def place_spec(place_id, layout_seed):
    """Geometry of one place: primitives centred inside its window."""
    if place_id < 0:
        raise ParameterError("place_id must be >= 0")
    start = place_id * WINDOW_STEP
    prims = []
    for seg in range(int(math.floor(start)), int(math.floor(start + 1.0)) + 1):
        for kind, x, y, s, a, hue in _segment_primitives(layout_seed, seg):
            rel = x - start
            if 0.0 <= rel < 1.0:
                prims.append(Primitive(kind, float(rel), float(np.clip(y, 0, 1)), float(s),
                                       float(a), float(hue)))
    return PlaceSpec(place_id, layout_seed, tuple(prims))


def render_place(spec, image_size):
    """Float64 (3, S, S) rendering of a place under the reference condition."""
    s = image_size
    coords = (np.arange(s) + 0.5) / s
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    img = np.empty((3, s, s))
    sky = yy < HORIZON
    for c, (top, bottom) in enumerate(((0.45, 0.75), (0.6, 0.85), (0.85, 0.95))):
        img[c] = np.where(sky, top + (bottom - top) * yy / HORIZON, 0.0)
    for c, g in enumerate((0.38, 0.34, 0.28)):
        img[c] = np.where(sky, img[c], g - 0.15 * (yy - HORIZON))
    for p in spec.geometry_params:
        rgb = colorsys.hsv_to_rgb(p.hue, 0.65, 0.85)
        hw = p.scale / 2
        hh = p.scale * p.aspect / 2
        dx = xx - p.x
        dy = yy - p.y
        if p.kind in ("building", "box"):
            mask = (np.abs(dx) <= hw) & (np.abs(dy) <= hh)
            if p.kind == "building":
                # window rows make buildings orientation-bearing
                rows = (np.floor((dy + hh) / max(p.scale * 0.35, 1e-3)) % 2 == 1)
                inner = mask & rows & (np.abs(dx) <= hw * 0.6)
        elif p.kind == "disc":
            mask = (dx / hw) ** 2 + (dy / hh) ** 2 <= 1.0
        else:
            # upright triangle: apex at top
            frac = (dy + hh) / (2 * hh)
            mask = (frac >= 0) & (frac <= 1) & (np.abs(dx) <= hw * frac)
        for c in range(3):
            img[c][mask] = rgb[c]
            if p.kind == "building":
                img[c][inner] = rgb[c] * 0.45
    return img


def apply_condition(img, condition, rng=None, clip=True):
    out = (img - 0.5) * condition.contrast_scale + 0.5 + condition.brightness_shift
    out = out + np.asarray(condition.global_tint)[:, None, None]
    if condition.noise_sigma > 0:
        if rng is None:
            raise ParameterError("a generator is required when noise_sigma > 0")
        out = out + rng.normal(0.0, condition.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0) if clip else out


def invert_condition(img, condition):
    """Undo the deterministic part of :func:`apply_condition` (no noise, no clip)."""
    out = img - np.asarray(condition.global_tint)[:, None, None] - condition.brightness_shift
    return (out - 0.5) / condition.contrast_scale + 0.5


def quantize(img):
    """Round to 8-bit levels and return float32, matching a PNG round trip."""
    return to_float(np.round(np.clip(img, 0, 1) * 255).astype(np.uint8))


def to_float(u8):
    return u8.astype(np.float32) / np.float32(255.0)


def generate_synthetic_traverse(num_places, conditions, image_size, seed):
    """One sequence per condition; frame ``i`` of every sequence is place ``i``.

    The first condition is the reference sequence; every other sequence is a
    query sequence with ground truth ``i -> i``.
    """
    if num_places < 1:
        raise ParameterError(f"num_places must be >= 1, got {num_places}")
    if image_size < 16:
        raise ParameterError(f"image_size must be >= 16, got {image_size}")
    conditions = list(conditions)
    if not conditions:
        raise ParameterError("at least one condition is required")
    ids = [c.condition_id for c in conditions]
    if len(set(ids)) != len(ids):
        raise ParameterError(f"duplicate condition ids: {ids}")

    places = [place_spec(i, seed) for i in range(num_places)]
    renders = [render_place(p, image_size) for p in places]
    frames = []
    for cond in conditions:
        tag = zlib.crc32(cond.condition_id.encode("utf-8"))
        for p, base in zip(places, renders):
            rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, p.place_id, tag])
            img = quantize(apply_condition(base, cond, rng))
            pose = Pose(np.array([float(p.place_id), 0.0, 0.0]), np.array([1.0, 0.0, 0.0, 0.0]))
            frames.append(Frame(cond.condition_id, p.place_id, cond.condition_id, img, None, pose))
    correspondence = {i: i for i in range(num_places)} if len(conditions) > 1 else {}
    return Dataset(frames, correspondence, conditions[0].condition_id, places)


# ---------------------------------------------------------------------------
# directory format
# ---------------------------------------------------------------------------


def save_dataset(dataset, path):
    os.makedirs(os.path.join(path, "images"), exist_ok=True)
    sequences = []
    for seq in dataset.sequence_ids():
        os.makedirs(os.path.join(path, "images", seq), exist_ok=True)
        entries = []
        for f in dataset.sequence(seq):
            rel = f"images/{seq}/{f.frame_index:06d}.png"
            u8 = np.round(np.clip(f.image, 0, 1) * 255).astype(np.uint8)
            Image.fromarray(u8.transpose(1, 2, 0), mode="RGB").save(os.path.join(path, rel))
            f.file = rel
            entry = {"frame_index": int(f.frame_index), "condition_id": f.condition_id, "file": rel}
            if f.pose is not None:
                entry["pose"] = {"t": [float(v) for v in f.pose.t], "q": [float(v) for v in f.pose.q]}
            entries.append(entry)
        sequences.append({"sequence_id": seq, "frames": entries})
    manifest = {
        "sequences": sequences,
        "correspondence": [
            {"query_frame": int(q), "reference_frame": int(r)}
            for q, r in sorted(dataset.correspondence.items())
        ],
        "reference_sequence": dataset.reference_sequence,
    }
    with open(os.path.join(path, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=1)
    return path


def _parse_pose(raw, where):
    try:
        t = np.asarray(raw["t"], dtype=np.float64)
        q = np.asarray(raw["q"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise LoadError(f"{where}: malformed pose ({exc})") from exc
    if t.shape != (3,) or q.shape != (4,):
        raise LoadError(f"{where}: pose needs t[3] and q[4]")
    norm = float(np.linalg.norm(q))
    if not 0.999 <= norm <= 1.001:
        raise LoadError(f"{where}: quaternion norm {norm:.6f} outside [0.999, 1.001]")
    if norm != 1.0:
        q = q / norm
    return Pose(t, q)


def load_image(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return to_float(arr.transpose(2, 0, 1).copy())


def load_dataset(path):
    mpath = os.path.join(path, MANIFEST)
    if not os.path.isfile(mpath):
        raise LoadError(f"missing manifest: {mpath}")
    try:
        with open(mpath) as fh:
            manifest = json.load(fh)
        sequences = manifest["sequences"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise LoadError(f"{mpath}: unreadable manifest ({exc})") from exc

    frames = []
    for seq in sequences:
        seq_id = str(seq["sequence_id"])
        last = None
        for entry in seq["frames"]:
            idx = int(entry["frame_index"])
            where = f"sequence {seq_id!r} frame {idx}"
            if last is not None and idx == last:
                raise LoadError(f"{where}: duplicate frame_index")
            if last is not None and idx < last:
                raise LoadError(f"{where}: frame_index not strictly increasing")
            last = idx
            fpath = os.path.join(path, entry["file"])
            if not os.path.isfile(fpath):
                raise LoadError(f"{where}: image file not found: {entry['file']}")
            try:
                img = load_image(fpath)
            except OSError as exc:
                raise LoadError(f"{where}: unreadable image {entry['file']} ({exc})") from exc
            pose = _parse_pose(entry["pose"], where) if "pose" in entry else None
            frames.append(Frame(seq_id, idx, str(entry.get("condition_id", seq_id)), img,
                                entry["file"], pose))
    if not frames:
        raise LoadError(f"{mpath}: no frames")

    ids = [str(s["sequence_id"]) for s in sequences]
    ref = str(manifest.get("reference_sequence", ids[0]))
    if ref not in ids:
        raise LoadError(f"reference_sequence {ref!r} not among {ids}")

    correspondence = {}
    for c in manifest.get("correspondence", []):
        q, r = int(c["query_frame"]), int(c["reference_frame"])
        if q in correspondence:
            raise LoadError(f"query frame {q} has more than one correspondence")
        correspondence[q] = r
    ref_idx = {f.frame_index for f in frames if f.sequence_id == ref}
    for f in frames:
        if f.sequence_id != ref and f.frame_index not in correspondence:
            raise LoadError(f"query frame {f.frame_index} ({f.sequence_id}) has no correspondence")
    missing = sorted(set(correspondence.values()) - ref_idx)
    if missing:
        raise LoadError(f"correspondence points at unknown reference frames {missing[:5]}")
    return Dataset(frames, correspondence, ref)
