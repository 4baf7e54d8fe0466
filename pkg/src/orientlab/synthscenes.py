"""Procedural SDF scenes and the multi-view dataset builder.

Eight classes ({sphere, box, torus, cone} x {red, blue}) stand in for text
prompts; the class id is the prompt token. Every scene carries two fixed
off-axis beacon spheres so that camera azimuth is unambiguous in the images
even for rotationally symmetric shapes. Scenes are rendered by sphere
tracing with Lambertian shading under a fixed directional light.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import ppm
from .camera import DEFAULT_FOV_V_DEG, pixel_rays
from .errors import InvalidConfig, IoError
from .quatpose import CameraPose, pose_from_json, pose_from_spherical, pose_to_json

KINDS = ("sphere", "box", "torus", "cone")
COLORS = {"red": (0.85, 0.12, 0.10), "blue": (0.12, 0.25, 0.88)}
CLASS_NAMES = tuple(f"{kind}_{color}" for kind in KINDS for color in COLORS)

BACKGROUND = (0.72, 0.72, 0.72)
LIGHT_DIR = (1.0, 1.0, 1.0)
AMBIENT = 0.2

# Azimuth landmarks shared by every scene: a dark beacon on +x, a yellow one
# on +y. Their image positions encode the camera azimuth.
_BEACONS = (
    (("sphere"), (0.55, 0.0, 0.40), (0.16,), (0.05, 0.05, 0.05)),
    (("sphere"), (0.0, 0.55, 0.40), (0.16,), (0.97, 0.90, 0.20)),
)

MAX_STEPS = 128
HIT_EPS = 1e-4


@dataclass(frozen=True)
class Primitive:
    kind: str          # sphere | box | torus | cone
    center: tuple      # (x, y, z)
    params: tuple      # sphere: (r,); box: (hx, hy, hz); torus: (R, r); cone: (half_h, r_base)
    albedo: tuple      # rgb in [0, 1]

    def bounding_radius(self) -> float:
        if self.kind == "sphere":
            return self.params[0]
        if self.kind == "box":
            return math.sqrt(sum(p * p for p in self.params))
        if self.kind == "torus":
            return self.params[0] + self.params[1]
        if self.kind == "cone":
            return math.sqrt(self.params[0] ** 2 + self.params[1] ** 2)
        raise InvalidConfig(f"unknown primitive kind {self.kind!r}")


@dataclass(frozen=True)
class SceneSpec:
    class_id: int
    primitives: tuple
    background: tuple = BACKGROUND

    def __post_init__(self):
        for prim in self.primitives:
            reach = np.linalg.norm(prim.center) + prim.bounding_radius()
            if reach > 1.0:
                raise InvalidConfig(f"primitive {prim.kind} extends outside the unit sphere ({reach:.3f})")
        for ch in self.background:
            if not 0.0 <= ch <= 1.0:
                raise InvalidConfig("background channels must be in [0, 1]")


def make_scene(class_id: int, rng: np.random.Generator) -> SceneSpec:
    """Scene instance for a class: jittered main primitive plus the beacons."""
    n_classes = len(CLASS_NAMES)
    if not 0 <= class_id < n_classes:
        raise InvalidConfig(f"class_id {class_id} outside [0, {n_classes})")
    kind = KINDS[class_id // 2]
    albedo = list(COLORS.values())[class_id % 2]
    s = rng.uniform(0.85, 1.10)
    cx, cy = rng.uniform(-0.06, 0.06, size=2)
    if kind == "sphere":
        params = (0.32 * s,)
    elif kind == "box":
        # flat slab: silhouette and face shading separate it from the sphere
        # even at 16x16
        params = (0.40 * s, 0.30 * s, 0.12 * s)
    elif kind == "torus":
        params = (0.30 * s, 0.12 * s)
    else:
        params = (0.30 * s, 0.30 * s)
    prims = [Primitive(kind, (float(cx), float(cy), 0.0), tuple(float(p) for p in params), albedo)]
    for bkind, center, bparams, balbedo in _BEACONS:
        prims.append(Primitive(bkind, center, bparams, balbedo))
    return SceneSpec(class_id, tuple(prims))


# ---------------------------------------------------------------------------
# signed distance functions
# ---------------------------------------------------------------------------

def _sd_sphere(p, params):
    return np.linalg.norm(p, axis=1) - params[0]


def _sd_box(p, params):
    q = np.abs(p) - np.asarray(params)
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(np.max(q, axis=1), 0.0)
    return outside + inside


def _sd_torus(p, params):
    ring = np.linalg.norm(p[:, :2], axis=1) - params[0]
    return np.sqrt(ring * ring + p[:, 2] * p[:, 2]) - params[1]


def _sd_cone(p, params):
    # capped cone along z, apex up: radius r_base at z=-h, 0 at z=+h
    half_h, r_base = params
    r_top = 0.0
    qx = np.linalg.norm(p[:, :2], axis=1)
    qy = p[:, 2]
    k1 = np.array([r_top, half_h])
    k2 = np.array([r_top - r_base, 2.0 * half_h])
    ca_x = qx - np.minimum(qx, np.where(qy < 0.0, r_base, r_top))
    ca_y = np.abs(qy) - half_h
    t = np.clip(((k1[0] - qx) * k2[0] + (k1[1] - qy) * k2[1]) / (k2 @ k2), 0.0, 1.0)
    cb_x = qx - k1[0] + t * k2[0]
    cb_y = qy - k1[1] + t * k2[1]
    sign = np.where((cb_x < 0.0) & (ca_y < 0.0), -1.0, 1.0)
    d2 = np.minimum(ca_x * ca_x + ca_y * ca_y, cb_x * cb_x + cb_y * cb_y)
    return sign * np.sqrt(d2)


_SDF = {"sphere": _sd_sphere, "box": _sd_box, "torus": _sd_torus, "cone": _sd_cone}


def sdf_primitive(prim: Primitive, pts: np.ndarray) -> np.ndarray:
    local = np.asarray(pts, dtype=np.float64).reshape(-1, 3) - np.asarray(prim.center)
    return _SDF[prim.kind](local, prim.params)


def sdf_eval_batch(scene: SceneSpec, pts: np.ndarray) -> np.ndarray:
    """Union (min) distance over the scene's primitives; negative inside."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    d = sdf_primitive(scene.primitives[0], pts)
    for prim in scene.primitives[1:]:
        d = np.minimum(d, sdf_primitive(prim, pts))
    return d


def sdf_eval(scene: SceneSpec, p) -> float:
    return float(sdf_eval_batch(scene, np.asarray(p, dtype=np.float64).reshape(1, 3))[0])


def _scene_normals(scene: SceneSpec, pts: np.ndarray, h: float = 1e-4) -> np.ndarray:
    grad = np.empty_like(pts)
    for axis in range(3):
        off = np.zeros(3)
        off[axis] = h
        grad[:, axis] = sdf_eval_batch(scene, pts + off) - sdf_eval_batch(scene, pts - off)
    norms = np.linalg.norm(grad, axis=1, keepdims=True)
    return grad / np.maximum(norms, 1e-12)


def _nearest_albedo(scene: SceneSpec, pts: np.ndarray) -> np.ndarray:
    dists = np.stack([sdf_primitive(prim, pts) for prim in scene.primitives], axis=1)
    idx = np.argmin(dists, axis=1)
    albedos = np.array([prim.albedo for prim in scene.primitives])
    return albedos[idx]


# ---------------------------------------------------------------------------
# sphere-traced rendering
# ---------------------------------------------------------------------------

def render_view(
    scene: SceneSpec,
    pose: CameraPose,
    resolution,
    fov_v_deg: float = DEFAULT_FOV_V_DEG,
    light=LIGHT_DIR,
) -> np.ndarray:
    """Render an (H, W, 3) float image in [0, 1].

    Primary rays are sphere traced (at most MAX_STEPS steps, hit threshold
    HIT_EPS); hits shade as albedo * (AMBIENT + (1 - AMBIENT) * max(0, n.l))
    with the directional light normalized; misses return the background.
    """
    if isinstance(resolution, int):
        h = w = resolution
    else:
        h, w = resolution
    if h < 8 or w < 8:
        raise InvalidConfig("resolution must be at least 8x8")
    origins, dirs = pixel_rays(pose, h, w, fov_v_deg)
    n_rays = origins.shape[0]
    t = np.zeros(n_rays)
    hit = np.zeros(n_rays, dtype=bool)
    active = np.ones(n_rays, dtype=bool)
    t_far = float(np.linalg.norm(pose.position)) + 2.0
    for _ in range(MAX_STEPS):
        if not active.any():
            break
        pts = origins[active] + t[active, None] * dirs[active]
        d = sdf_eval_batch(scene, pts)
        newly_hit = d < HIT_EPS
        idx = np.flatnonzero(active)
        hit[idx[newly_hit]] = True
        t[idx] += d
        still = ~newly_hit & (t[idx] <= t_far)
        active[idx] = still

    img = np.tile(np.asarray(scene.background, dtype=np.float64), (n_rays, 1))
    if hit.any():
        pts = origins[hit] + t[hit, None] * dirs[hit]
        normals = _scene_normals(scene, pts)
        lvec = np.asarray(light, dtype=np.float64)
        lvec = lvec / np.linalg.norm(lvec)
        diffuse = np.maximum(normals @ lvec, 0.0)
        shade = AMBIENT + (1.0 - AMBIENT) * diffuse
        img[hit] = _nearest_albedo(scene, pts) * shade[:, None]
    return np.clip(img, 0.0, 1.0).reshape(h, w, 3)


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

@dataclass
class MultiViewDataset:
    manifest: dict
    frames: np.ndarray          # (N, H, W, 3) uint8
    poses: list                 # CameraPose per frame
    labels: np.ndarray          # (N,) int class ids
    scenes: list = field(default_factory=list)  # SceneSpec per scene index

    @property
    def float_frames(self) -> np.ndarray:
        return self.frames.astype(np.float64) / 255.0


def frame_name(scene_idx: int, view_idx: int) -> str:
    return f"frame_{scene_idx:04d}_{view_idx:03d}.ppm"


def worker_count() -> int:
    """Worker pool size; the ORIENT_THREADS env var caps it."""
    cap = os.environ.get("ORIENT_THREADS")
    workers = min(4, os.cpu_count() or 1)
    if cap:
        workers = max(1, min(workers, int(cap)))
    return workers


def build_dataset(
    out_dir,
    classes: int = 8,
    scenes_per_class: int = 4,
    views_per_scene: int = 16,
    resolution: int = 16,
    seed: int = 0,
    radius: float = 2.0,
    elevation_deg=(10.0, 40.0),
) -> MultiViewDataset:
    """Generate, render, and persist a dataset; deterministic given the seed.

    Views per scene sit at uniform azimuths 2*pi*j/k with per-view elevation
    jitter drawn from elevation_deg. Frames land on disk as binary PPMs named
    frame_{scene:04}_{view:03}.ppm next to manifest/poses/labels JSON.
    """
    if min(classes, scenes_per_class, views_per_scene) < 1:
        raise InvalidConfig("all dataset counts must be >= 1")
    if classes > len(CLASS_NAMES):
        raise InvalidConfig(f"at most {len(CLASS_NAMES)} classes are defined")
    rng = np.random.default_rng(seed)
    scenes = []
    for class_id in range(classes):
        for _ in range(scenes_per_class):
            scenes.append(make_scene(class_id, rng))
    # draw all pose jitter up front so rendering order cannot perturb the rng
    el_lo, el_hi = (math.radians(e) for e in elevation_deg)
    poses = []
    labels = []
    for scene_idx, scene in enumerate(scenes):
        els = rng.uniform(el_lo, el_hi, size=views_per_scene)
        for view_idx in range(views_per_scene):
            az = 2.0 * math.pi * view_idx / views_per_scene
            poses.append(pose_from_spherical(az, float(els[view_idx]), radius))
            labels.append(scene.class_id)

    jobs = [(i, scenes[i // views_per_scene], poses[i]) for i in range(len(poses))]

    def _render(job):
        _, scene, pose = job
        return ppm.to_u8(render_view(scene, pose, resolution))

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rendered = list(pool.map(_render, jobs))
    else:
        rendered = [_render(j) for j in jobs]
    frames = np.stack(rendered, axis=0)

    manifest = {
        "classes": classes,
        "class_names": list(CLASS_NAMES[:classes]),
        "scenes_per_class": scenes_per_class,
        "views_per_scene": views_per_scene,
        "resolution": resolution,
        "seed": seed,
        "radius": radius,
        "elevation_deg": list(elevation_deg),
        "frame_count": len(poses),
    }
    dataset = MultiViewDataset(manifest, frames, poses, np.asarray(labels, dtype=np.int64), scenes)
    save_dataset(out_dir, dataset)
    return dataset


def save_dataset(out_dir, dataset: MultiViewDataset) -> None:
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create dataset directory {out_dir}: {exc}") from exc
    views = dataset.manifest["views_per_scene"]
    for i in range(dataset.frames.shape[0]):
        path = os.path.join(out_dir, frame_name(i // views, i % views))
        ppm.write_ppm(path, dataset.frames[i])
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(dataset.manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "poses.json"), "w") as fh:
        fh.write("[\n" + ",\n".join(pose_to_json(p) for p in dataset.poses) + "\n]\n")
    with open(os.path.join(out_dir, "labels.json"), "w") as fh:
        json.dump([int(v) for v in dataset.labels], fh)
        fh.write("\n")


def load_dataset(path) -> MultiViewDataset:
    try:
        with open(os.path.join(path, "manifest.json")) as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read dataset manifest in {path}: {exc}") from exc
    views = manifest["views_per_scene"]
    count = manifest["frame_count"]
    frames = np.stack(
        [ppm.read_ppm(os.path.join(path, frame_name(i // views, i % views))) for i in range(count)]
    )
    with open(os.path.join(path, "poses.json")) as fh:
        entries = json.load(fh)
    poses = [pose_from_json(json.dumps(e)) for e in entries]
    with open(os.path.join(path, "labels.json")) as fh:
        labels = np.asarray(json.load(fh), dtype=np.int64)
    return MultiViewDataset(manifest, frames, poses, labels)
