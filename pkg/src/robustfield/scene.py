"""Synthetic scenes with transient distractors.

A scene is a handful of static primitives (stand-ins for a sofa, a lamp and
a bookshelf) plus a pool of distractor templates that get re-placed at random
in every cluttered training frame. Frames are ray traced with Lambertian
shading and one point light; the tracer also reports which pixels a
distractor touched (directly or through its shadow), which gives an exact
oracle mask.

Random streams for poses, clutter choice and placement are independent, so
changing ``clutter_fraction`` keeps every camera pose fixed.
"""

from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import _serialize
from .camera import CameraModel, hemisphere_eye, make_camera
from .imageio import read_ppm, write_ppm

logger = logging.getLogger(__name__)

T_MIN = 1e-9
SHADOW_OFFSET = 1e-6
MAX_PLACEMENT_ATTEMPTS = 10_000
FORMAT_NAME = "robustfield-dataset"
FORMAT_VERSION = 1


class GenerationError(RuntimeError):
    pass


class DatasetError(ValueError):
    pass


class Shape(str, enum.Enum):
    SPHERE = "sphere"
    BOX = "box"


class Difficulty(str, enum.Enum):
    EASY = "easy"
    MEDIUM = "medium"
    HARD = "hard"
    CUSTOM = "custom"


class Split(str, enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass(frozen=True)
class Primitive:
    shape: Shape
    center: tuple
    albedo: tuple
    radius: float = 0.0
    half_extents: tuple = (0.0, 0.0, 0.0)
    is_distractor: bool = False

    def __post_init__(self):
        object.__setattr__(self, "shape", Shape(self.shape))
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "albedo", tuple(float(v) for v in self.albedo))
        object.__setattr__(self, "half_extents", tuple(float(v) for v in self.half_extents))
        object.__setattr__(self, "radius", float(self.radius))
        if self.shape is Shape.SPHERE and not self.radius > 0:
            raise ValueError("sphere radius must be > 0")
        if self.shape is Shape.BOX and not min(self.half_extents) > 0:
            raise ValueError("box half extents must be > 0")
        if not all(0.0 <= a <= 1.0 for a in self.albedo):
            raise ValueError("albedo must lie in [0, 1]")

    @property
    def extent(self):
        """Half size along each axis."""
        if self.shape is Shape.SPHERE:
            return np.full(3, self.radius)
        return np.asarray(self.half_extents)

    def aabb(self):
        c = np.asarray(self.center)
        return c - self.extent, c + self.extent

    def moved(self, center):
        return replace(self, center=tuple(float(v) for v in center))

    def to_dict(self):
        d = {"shape": self.shape.value, "center": list(self.center), "albedo": list(self.albedo),
             "is_distractor": self.is_distractor}
        if self.shape is Shape.SPHERE:
            d["radius"] = self.radius
        else:
            d["half_extents"] = list(self.half_extents)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(shape=d["shape"], center=d["center"], albedo=d["albedo"],
                   radius=d.get("radius", 0.0), half_extents=d.get("half_extents", (0.0, 0.0, 0.0)),
                   is_distractor=bool(d.get("is_distractor", False)))


def primitives_overlap(a: Primitive, b: Primitive, margin=0.0):
    ca, cb = np.asarray(a.center), np.asarray(b.center)
    if a.shape is Shape.SPHERE and b.shape is Shape.SPHERE:
        return np.linalg.norm(ca - cb) < a.radius + b.radius + margin
    if a.shape is Shape.BOX and b.shape is Shape.BOX:
        return bool(np.all(np.abs(ca - cb) < a.extent + b.extent + margin))
    sphere, box = (a, b) if a.shape is Shape.SPHERE else (b, a)
    lo, hi = box.aabb()
    c = np.asarray(sphere.center)
    return np.linalg.norm(c - np.clip(c, lo, hi)) < sphere.radius + margin


@dataclass
class SceneSpec:
    bounds: tuple
    statics: list
    distractor_pool: list
    difficulty: Difficulty = Difficulty.CUSTOM
    light_position: tuple = (2.0, 1.5, 3.5)
    ambient: float = 0.3
    background: tuple = (0.8, 0.82, 0.88)
    clutter_fraction: float = 1.0
    seed: int = 0
    shadows: bool = True
    camera_radius: float = 4.2
    fov_deg: float = 36.0
    elevation_range_deg: tuple = (15.0, 65.0)

    def __post_init__(self):
        self.difficulty = Difficulty(self.difficulty)
        self.bounds = (tuple(float(v) for v in self.bounds[0]), tuple(float(v) for v in self.bounds[1]))
        self.background = tuple(float(v) for v in self.background)
        self.light_position = tuple(float(v) for v in self.light_position)
        self.elevation_range_deg = tuple(float(v) for v in self.elevation_range_deg)
        self.statics = [p if isinstance(p, Primitive) else Primitive.from_dict(p) for p in self.statics]
        self.distractor_pool = [p if isinstance(p, Primitive) else Primitive.from_dict(p)
                                for p in self.distractor_pool]
        self.validate()

    def validate(self):
        lo, hi = (np.asarray(b) for b in self.bounds)
        if not np.all(hi > lo):
            raise ValueError("scene bounds are degenerate")
        if not self.statics:
            raise ValueError("a scene needs at least one static primitive")
        if not 0.0 <= self.clutter_fraction <= 1.0:
            raise ValueError(f"clutter_fraction must be in [0, 1], got {self.clutter_fraction}")
        if not 0.0 <= self.ambient <= 1.0:
            raise ValueError("ambient fraction must be in [0, 1]")
        for p in self.statics:
            plo, phi = p.aabb()
            if np.any(plo <= lo) or np.any(phi >= hi):
                raise ValueError(f"static primitive at {p.center} is not strictly inside the bounds")
        for p in self.distractor_pool:
            if np.any(2 * p.extent >= hi - lo):
                raise ValueError("distractor template does not fit inside the bounds")

    @property
    def static_centroid(self):
        return np.mean([p.center for p in self.statics], axis=0)

    @property
    def diagonal(self):
        return float(np.linalg.norm(np.subtract(self.bounds[1], self.bounds[0])))

    def with_(self, **kw):
        return replace(self, **kw)

    def to_dict(self):
        return {
            "bounds": [list(self.bounds[0]), list(self.bounds[1])],
            "statics": [p.to_dict() for p in self.statics],
            "distractor_pool": [p.to_dict() for p in self.distractor_pool],
            "difficulty": self.difficulty.value,
            "light_position": list(self.light_position),
            "ambient": self.ambient,
            "background": list(self.background),
            "clutter_fraction": self.clutter_fraction,
            "seed": self.seed,
            "shadows": self.shadows,
            "camera_radius": self.camera_radius,
            "fov_deg": self.fov_deg,
            "elevation_range_deg": list(self.elevation_range_deg),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["bounds"] = (tuple(d["bounds"][0]), tuple(d["bounds"][1]))
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


# fixed stand-ins for the sofa, lamp and bookshelf
STATICS = (
    Primitive(Shape.BOX, (0.0, 0.45, -0.55), (0.72, 0.3, 0.24), half_extents=(0.7, 0.3, 0.28)),
    Primitive(Shape.SPHERE, (0.6, -0.4, -0.1), (0.95, 0.8, 0.3), radius=0.38),
    Primitive(Shape.BOX, (-0.55, -0.45, -0.05), (0.3, 0.5, 0.78), half_extents=(0.22, 0.22, 0.75)),
)

# (count, characteristic size) per preset
PRESETS = {
    Difficulty.EASY: (1, 0.3),
    Difficulty.MEDIUM: (3, 0.36),
    Difficulty.HARD: (6, 0.4),
}

DISTRACTOR_PALETTE = (
    (0.15, 0.75, 0.2), (0.85, 0.15, 0.65), (0.1, 0.25, 0.55),
    (0.95, 0.45, 0.05), (0.2, 0.8, 0.8), (0.5, 0.15, 0.1),
)


def build_scene(difficulty="easy", seed=0, *, clutter_fraction=1.0, shadows=None,
                n_distractors=None, distractor_size=None):
    """Preset scene for a difficulty level. ``custom`` needs explicit counts."""
    difficulty = Difficulty(str(getattr(difficulty, "value", difficulty)).lower())
    if difficulty is Difficulty.CUSTOM:
        if n_distractors is None or distractor_size is None:
            raise ValueError("custom difficulty needs n_distractors and distractor_size")
        count, size = int(n_distractors), float(distractor_size)
    else:
        count, size = PRESETS[difficulty]
        count = count if n_distractors is None else int(n_distractors)
        size = size if distractor_size is None else float(distractor_size)
    if shadows is None:
        shadows = difficulty is not Difficulty.EASY

    rng = np.random.default_rng(seed)
    pool = []
    for k in range(count):
        albedo = DISTRACTOR_PALETTE[(k + int(rng.integers(len(DISTRACTOR_PALETTE)))) % len(DISTRACTOR_PALETTE)]
        scale = size * rng.uniform(0.85, 1.15)
        if k % 2 == 0:
            pool.append(Primitive(Shape.SPHERE, (0, 0, 0), albedo, radius=scale, is_distractor=True))
        else:
            aspect = rng.uniform(0.7, 1.0, size=3)
            pool.append(Primitive(Shape.BOX, (0, 0, 0), albedo, half_extents=tuple(scale * aspect),
                                  is_distractor=True))
    return SceneSpec(bounds=((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5)), statics=list(STATICS),
                     distractor_pool=pool, difficulty=difficulty, clutter_fraction=clutter_fraction,
                     seed=int(seed), shadows=bool(shadows))


# --------------------------------------------------------------------------
# ray tracing


def _intersect(prim: Primitive, o, d):
    """Nearest hit distance > T_MIN per ray, ``inf`` on a miss."""
    c = np.asarray(prim.center)
    if prim.shape is Shape.SPHERE:
        oc = o - c
        b = np.einsum("ij,ij->i", oc, d)
        cc = np.einsum("ij,ij->i", oc, oc) - prim.radius ** 2
        disc = b * b - cc
        hit = disc >= 0
        root = np.sqrt(np.where(hit, disc, 0.0))
        t0, t1 = -b - root, -b + root
        t = np.where(t0 > T_MIN, t0, np.where(t1 > T_MIN, t1, np.inf))
        return np.where(hit, t, np.inf)
    lo, hi = c - prim.extent, c + prim.extent
    safe = np.where(np.abs(d) < 1e-15, np.where(d < 0, -1e-15, 1e-15), d)
    ta, tb = (lo - o) / safe, (hi - o) / safe
    tnear = np.minimum(ta, tb).max(axis=1)
    tfar = np.maximum(ta, tb).min(axis=1)
    t = np.where(tnear > T_MIN, tnear, np.where(tfar > T_MIN, tfar, np.inf))
    return np.where(tnear <= tfar, t, np.inf)


def _normal(prim: Primitive, p):
    c = np.asarray(prim.center)
    if prim.shape is Shape.SPHERE:
        return (p - c) / prim.radius
    q = (p - c) / prim.extent
    axis = np.argmax(np.abs(q), axis=1)
    n = np.zeros_like(p)
    n[np.arange(len(p)), axis] = np.sign(q[np.arange(len(p)), axis])
    return n


def _first_hit(prims, o, d):
    if not prims:
        return np.full(len(o), np.inf), np.full(len(o), -1)
    ts = np.stack([_intersect(p, o, d) for p in prims])
    idx = np.argmin(ts, axis=0)
    t = ts[idx, np.arange(len(o))]
    return t, np.where(np.isfinite(t), idx, -1)


def _blocked(prims, o, d, dist):
    out = np.zeros(len(o), dtype=bool)
    for p in prims:
        out |= _intersect(p, o, d) < dist
    return out


def trace_rays(scene: SceneSpec, distractors, origins, directions):
    """Shade rays against statics plus placed ``distractors``.

    Returns ``(rgb, distractor_flag, t_hit)``. A pixel is flagged when its
    first hit is a distractor, or (with shadows on) when a distractor is the
    only thing between a lit static surface and the light.
    """
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    prims = list(scene.statics) + list(distractors)
    n_static = len(scene.statics)
    t, idx = _first_hit(prims, o, d)
    rgb = np.tile(np.asarray(scene.background), (len(o), 1))
    flag = np.zeros(len(o), dtype=bool)
    hit = idx >= 0
    if not np.any(hit):
        return rgb, flag, t

    light = np.asarray(scene.light_position)
    p = o[hit] + t[hit, None] * d[hit]
    n = np.empty_like(p)
    albedo = np.empty_like(p)
    hit_idx = idx[hit]
    for k, prim in enumerate(prims):
        sel = hit_idx == k
        if np.any(sel):
            n[sel] = _normal(prim, p[sel])
            albedo[sel] = prim.albedo
    to_light = light - p
    dist = np.linalg.norm(to_light, axis=1)
    ldir = to_light / dist[:, None]
    ndotl = np.maximum(0.0, np.einsum("ij,ij->i", n, ldir))
    lit = ndotl > 0
    so = p + SHADOW_OFFSET * n
    static_block = np.zeros(len(p), dtype=bool)
    dist_block = np.zeros(len(p), dtype=bool)
    if np.any(lit):
        static_block[lit] = _blocked(prims[:n_static], so[lit], ldir[lit], dist[lit])
        if scene.shadows and distractors:
            dist_block[lit] = _blocked(prims[n_static:], so[lit], ldir[lit], dist[lit])
    shadow = ~(static_block | dist_block)
    shade = scene.ambient + (1.0 - scene.ambient) * ndotl * shadow
    rgb[hit] = albedo * shade[:, None]
    first_distractor = hit_idx >= n_static
    flag[hit] = first_distractor | (lit & ~static_block & dist_block)
    return rgb, flag, t


def trace_reference_pixel(scene: SceneSpec, distractors, camera: CameraModel, pixel):
    """Ground-truth color and distractor flag at continuous pixel ``(u, v)``."""
    camera.validate()
    u, v = pixel
    if not (0 <= u <= camera.width and 0 <= v <= camera.height):
        raise ValueError(f"pixel {pixel} is outside the {camera.width}x{camera.height} image")
    dc = np.array([(u - camera.cx) / camera.fx, -(v - camera.cy) / camera.fy, -1.0])
    dw = camera.rotation @ dc
    dw /= np.linalg.norm(dw)
    rgb, flag, _ = trace_rays(scene, distractors, camera.position[None], dw[None])
    return rgb[0], int(flag[0])


def render_reference(scene: SceneSpec, distractors, camera: CameraModel):
    """Full-frame float image ``(H, W, 3)`` and boolean distractor mask."""
    camera.validate()
    d = camera.pixel_directions().reshape(-1, 3)
    o = np.broadcast_to(camera.position, d.shape)
    rgb, flag, _ = trace_rays(scene, distractors, o, d)
    h, w = camera.height, camera.width
    return rgb.reshape(h, w, 3), flag.reshape(h, w)


# --------------------------------------------------------------------------
# datasets


@dataclass
class FrameRecord:
    index: int
    camera: CameraModel
    image: np.ndarray
    split: Split
    oracle_mask: np.ndarray | None = None

    def __post_init__(self):
        self.split = Split(self.split)

    def validate(self):
        try:
            self.camera.validate()
        except ValueError as exc:
            raise DatasetError(f"frame {self.index}: {exc}") from None
        shape = (self.camera.height, self.camera.width)
        if self.image.shape != shape + (3,):
            raise DatasetError(f"frame {self.index}: image shape {self.image.shape} does not match camera {shape}")
        if self.oracle_mask is not None and self.oracle_mask.shape != shape:
            raise DatasetError(f"frame {self.index}: mask shape {self.oracle_mask.shape} does not match image {shape}")
        return self


@dataclass
class Dataset:
    spec: SceneSpec
    frames: list
    manifest: dict = field(default_factory=dict)

    @property
    def train_frames(self):
        return [f for f in self.frames if f.split is Split.TRAIN]

    @property
    def eval_frames(self):
        return [f for f in self.frames if f.split is Split.EVAL]


def _streams(seed):
    # independent children: train poses, eval poses, clutter selection, placement
    return np.random.SeedSequence(int(seed)).spawn(4)


def sample_cameras(spec: SceneSpec, n, image_size, seed_seq):
    rng = np.random.default_rng(seed_seq)
    lo, hi = np.radians(spec.elevation_range_deg)
    center = spec.static_centroid
    cams = []
    for _ in range(n):
        az = rng.uniform(0.0, 2 * np.pi)
        el = rng.uniform(lo, hi)
        cams.append(make_camera(hemisphere_eye(center, spec.camera_radius, az, el), center,
                                image_size, spec.fov_deg))
    return cams


def place_distractors(spec: SceneSpec, rng, margin=0.02):
    """Rejection-sample a position for every template in the pool."""
    lo, hi = (np.asarray(b) for b in spec.bounds)
    placed, k, stalled = [], 0, 0
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        if k == len(spec.distractor_pool):
            return placed
        template = spec.distractor_pool[k]
        ext = template.extent + margin
        cand = template.moved(rng.uniform(lo + ext, hi - ext))
        if not any(primitives_overlap(cand, other, margin) for other in spec.statics + placed):
            placed.append(cand)
            k, stalled = k + 1, 0
        else:
            stalled += 1
            if stalled > 200:
                # earlier placements boxed this one in: start the frame over
                placed, k, stalled = [], 0, 0
    if k == len(spec.distractor_pool):
        return placed
    raise GenerationError(f"could not place distractors after {MAX_PLACEMENT_ATTEMPTS} attempts")


def generate_dataset(spec: SceneSpec, n_train=60, n_eval=20, image_size=96, out_path=None) -> Dataset:
    """Render a train/eval dataset; writes it to ``out_path`` when given."""
    if n_train <= 0 or n_eval <= 0 or image_size <= 0:
        raise ValueError("n_train, n_eval and image_size must be positive")
    s_train, s_eval, s_clutter, s_place = _streams(spec.seed)
    train_cams = sample_cameras(spec, n_train, image_size, s_train)
    eval_cams = sample_cameras(spec, n_eval, image_size, s_eval)

    n_cluttered = int(round(spec.clutter_fraction * n_train)) if spec.distractor_pool else 0
    order = np.random.default_rng(s_clutter).permutation(n_train)
    cluttered = sorted(int(i) for i in order[:n_cluttered])
    place_seqs = s_place.spawn(n_train)

    frames, placements, occupancy = [], {}, []
    for i, cam in enumerate(train_cams):
        placed = place_distractors(spec, np.random.default_rng(place_seqs[i])) if i in cluttered else []
        rgb, flag = render_reference(spec, placed, cam)
        frames.append(FrameRecord(i, cam, _quantize(rgb), Split.TRAIN, flag))
        if placed:
            placements[str(i)] = [p.to_dict() for p in placed]
            occupancy.append(float(flag.mean()))
    for j, cam in enumerate(eval_cams):
        rgb, _ = render_reference(spec, [], cam)
        frames.append(FrameRecord(n_train + j, cam, _quantize(rgb), Split.EVAL))

    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "scene": spec.to_dict(),
        "seeds": {"scene": int(spec.seed)},
        "image_size": int(image_size),
        "n_train": int(n_train),
        "n_eval": int(n_eval),
        "splits": {"train": list(range(n_train)), "eval": list(range(n_train, n_train + n_eval))},
        "cluttered_frames": cluttered,
        "distractor_occupancy": float(np.mean(occupancy)) if occupancy else 0.0,
        "placements": placements,
    }
    ds = Dataset(spec, frames, manifest)
    if out_path is not None:
        write_dataset(ds, out_path)
    return ds


def _quantize(rgb):
    return np.rint(np.clip(rgb, 0.0, 1.0) * 255.0) / 255.0


def write_dataset(ds: Dataset, path):
    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    (path / "masks").mkdir(parents=True, exist_ok=True)
    _serialize.dump(ds.manifest, path / "manifest.json")
    cams = []
    for f in ds.frames:
        cams.append({"frame": f.index, "split": f.split.value, **f.camera.to_dict()})
        write_ppm(path / "images" / f"frame_{f.index:04d}.ppm", f.image)
        if f.oracle_mask is not None:
            write_ppm(path / "masks" / f"frame_{f.index:04d}.ppm", np.where(f.oracle_mask, 1.0, 0.0))
    _serialize.dump({"frames": cams}, path / "cameras.json")
    return path


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        cam_doc = json.loads((path / "cameras.json").read_text())
    except FileNotFoundError as exc:
        raise DatasetError(f"missing dataset file: {exc.filename}") from None
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed dataset metadata: {exc}") from None
    if manifest.get("format") != FORMAT_NAME:
        raise DatasetError(f"{path}: manifest is not a {FORMAT_NAME} manifest")
    try:
        spec = SceneSpec.from_dict(manifest["scene"])
        entries = cam_doc["frames"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed manifest: {exc}") from None

    frames = []
    for e in entries:
        idx = int(e["frame"])
        try:
            cam = CameraModel.from_dict(e)
        except (KeyError, ValueError) as exc:
            raise DatasetError(f"frame {idx}: bad camera entry ({exc})") from None
        img_path = path / "images" / f"frame_{idx:04d}.ppm"
        if not img_path.exists():
            raise DatasetError(f"frame {idx}: missing image {img_path}")
        image = read_ppm(img_path).astype(np.float64) / 255.0
        mask = None
        split = Split(e["split"])
        mask_path = path / "masks" / f"frame_{idx:04d}.ppm"
        if split is Split.TRAIN:
            if not mask_path.exists():
                raise DatasetError(f"frame {idx}: missing oracle mask {mask_path}")
            mask = read_ppm(mask_path)[..., 0] > 127
        frames.append(FrameRecord(idx, cam, image, split, mask).validate())

    ds = Dataset(spec, frames, manifest)
    if not ds.train_frames:
        raise DatasetError("empty train split")
    if not ds.eval_frames:
        raise DatasetError("empty eval split")
    return ds
