"""Synthetic ray-cast scenes with analytic depth, and the scene directory layout.

Scene directory::

    cameras.json     {"cameras": [...]}; optional per-camera "near"/"far"
    scene.json       generator description plus "train" / "test" view ids
    images/<id>.png
    depths/<id>.npy  float64 camera-space depth, 0 where nothing is hit
    matches.jsonl    see ``raysplat.matching``
    lpips.json       optional {view id: LPIPS} sidecar used by ``eval``
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, DegenerateGeometry
from .geometry import Camera, load_cameras, look_at, pixel_rays, save_cameras
from .imageio import read_image, write_image
from .matching import MatchSet, load_matches, save_matches, synth_matches


@dataclass
class Plane:
    """A checkerboard rectangle centered at ``point`` spanned by ``u_axis`` and ``normal x u_axis``."""

    point: tuple = (0.0, 0.0, 4.0)
    normal: tuple = (0.0, 0.0, -1.0)
    u_axis: tuple = (1.0, 0.0, 0.0)
    half_extent: tuple | None = None  # (half width, half height); None for unbounded
    checker: float = 4.0  # squares per world unit
    color_a: tuple = (0.9, 0.8, 0.2)
    color_b: tuple = (0.1, 0.3, 0.7)


def box_planes(center, size, checker: float = 4.0, colors=((0.9, 0.3, 0.2), (0.2, 0.6, 0.3))) -> list[Plane]:
    """Six outward-facing faces of an axis-aligned box."""
    c = np.asarray(center, dtype=np.float64)
    h = np.asarray(size, dtype=np.float64) / 2.0
    faces = []
    for ax in range(3):
        u_ax = (ax + 1) % 3
        v_ax = (ax + 2) % 3
        for sign in (-1.0, 1.0):
            n = np.zeros(3)
            n[ax] = sign
            u = np.zeros(3)
            u[u_ax] = 1.0
            # the face's second axis is normal x u, which is +-e[v_ax]
            faces.append(Plane(tuple(c + h[ax] * n), tuple(n), tuple(u),
                               (h[u_ax], h[v_ax]), checker, colors[0], colors[1]))
    return faces


@dataclass
class SceneParams:
    planes: list = field(default_factory=lambda: [Plane()])
    num_views: int = 2
    width: int = 64
    height: int = 64
    focal: float = 60.0
    rig: str = "arc"  # "arc" around the target, or "forward" (cameras translate sideways)
    radius: float = 4.0
    spread_deg: float = 20.0  # total arc angle (arc) or baseline in world units x 10 (forward)
    target: tuple = (0.0, 0.0, 4.0)
    held_out: bool = False
    supersample: int = 2
    background: tuple = (0.0, 0.0, 0.0)
    near: float = 1.0
    far: float = 10.0
    seed: int = 0


@dataclass
class SyntheticScene:
    cameras: list[Camera]
    images: list[np.ndarray]
    depths: list[np.ndarray]
    description: dict
    train_ids: list[str]
    test_ids: list[str]

    def camera(self, view_id: str) -> Camera:
        return self.cameras[self.ids.index(view_id)]

    @property
    def ids(self) -> list[str]:
        return [c.id for c in self.cameras]


def _plane_frame(pl: Plane):
    n = np.asarray(pl.normal, dtype=np.float64)
    nn = np.linalg.norm(n)
    if nn < 1e-12:
        raise DegenerateGeometry("plane normal has zero length")
    n = n / nn
    u = np.asarray(pl.u_axis, dtype=np.float64)
    u = u - n * (u @ n)
    un = np.linalg.norm(u)
    if un < 1e-9:
        raise DegenerateGeometry("plane u_axis is parallel to its normal")
    u = u / un
    return np.asarray(pl.point, dtype=np.float64), n, u, np.cross(n, u)


def ray_cast(planes, origin: np.ndarray, dirs: np.ndarray, background=(0.0, 0.0, 0.0)):
    """Nearest plane hit along each ray; returns (ray parameter, rgb), parameter inf on miss."""
    n_rays = len(dirs)
    best = np.full(n_rays, np.inf)
    rgb = np.tile(np.asarray(background, dtype=np.float64), (n_rays, 1))
    for pl in planes:
        P, n, u, v = _plane_frame(pl)
        den = dirs @ n
        num = (P - origin) @ n
        if abs(num) < 1e-12:
            raise DegenerateGeometry("camera center lies on a plane")
        with np.errstate(divide="ignore", invalid="ignore"):
            s = num / den
        hit = np.isfinite(s) & (s > 1e-9)
        X = origin + s[:, None] * dirs
        a = (X - P) @ u
        b = (X - P) @ v
        if pl.half_extent is not None:
            hit &= (np.abs(a) <= pl.half_extent[0]) & (np.abs(b) <= pl.half_extent[1])
        closer = hit & (s < best)
        best[closer] = s[closer]
        parity = (np.floor(a * pl.checker) + np.floor(b * pl.checker)).astype(np.int64) % 2 == 0
        col = np.where(parity[:, None], np.asarray(pl.color_a), np.asarray(pl.color_b))
        rgb[closer] = col[closer]
    return best, rgb


def render_view(planes, camera: Camera, supersample: int = 1, background=(0.0, 0.0, 0.0)):
    """Ground-truth (image, depth) of a plane scene; depth is camera-space z at pixel centers."""
    W, H = camera.width, camera.height
    vs, us = np.mgrid[0:H, 0:W]
    p = np.stack([us.ravel(), vs.ravel()], axis=1).astype(np.float64)
    rays = pixel_rays(camera, p)  # third camera coordinate is 1, so ray parameter = depth
    s, _ = ray_cast(planes, camera.center, rays, background)
    depth = np.where(np.isfinite(s), s, 0.0).reshape(H, W)
    k = max(1, int(supersample))
    offs = (np.arange(k) + 0.5) / k - 0.5
    acc = np.zeros((H * W, 3))
    for oy in offs:
        for ox in offs:
            _, rgb = ray_cast(planes, camera.center, pixel_rays(camera, p + [ox, oy]), background)
            acc += rgb
    return (acc / k**2).reshape(H, W, 3), depth


def make_cameras(params: SceneParams) -> tuple[list[Camera], list[str], list[str]]:
    n = params.num_views + (1 if params.held_out else 0)
    if params.num_views < 1:
        raise DegenerateGeometry("need at least one view")
    K = np.array([[params.focal, 0, (params.width - 1) / 2],
                  [0, params.focal, (params.height - 1) / 2],
                  [0, 0, 1.0]])
    target = np.asarray(params.target, dtype=np.float64)
    # training views evenly over [-1, 1]; the held-out view sits halfway between the first two
    ts = list(np.linspace(-1.0, 1.0, params.num_views)) if params.num_views > 1 else [0.0]
    if params.held_out:
        ts.append(0.5 * (ts[0] + ts[1]) if len(ts) > 1 else 0.25)
    cams = []
    for k, tk in enumerate(ts):
        if params.rig == "arc":
            ang = np.deg2rad(params.spread_deg) / 2.0 * tk
            center = target + params.radius * np.array([np.sin(ang), 0.0, -np.cos(ang)])
            R = look_at(center, target)
        elif params.rig == "forward":
            center = target + np.array([params.spread_deg / 10.0 / 2.0 * tk, 0.0, -params.radius])
            R = np.eye(3)
        else:
            raise DataError(f"unknown camera rig {params.rig!r}")
        cams.append(Camera(K, R, center, params.width, params.height, id=str(k), near=params.near, far=params.far))
    ids = [c.id for c in cams]
    train = ids[: params.num_views]
    test = ids[params.num_views :]
    assert len(cams) == n
    return cams, train, test


def make_plane_scene(params: SceneParams | None = None) -> SyntheticScene:
    params = params or SceneParams()
    if not params.planes:
        raise DegenerateGeometry("scene has no planes")
    cams, train, test = make_cameras(params)
    images, depths = [], []
    for cam in cams:
        img, d = render_view(params.planes, cam, params.supersample, params.background)
        if not np.any(d > 0):
            raise DegenerateGeometry(f"view {cam.id} sees no surface")
        images.append(img)
        depths.append(d)
    desc = asdict(params)
    desc["planes"] = [asdict(p) for p in params.planes]
    return SyntheticScene(cams, images, depths, desc, train, test)


def tilted_plane(angle_deg: float = 30.0, depth: float = 4.0, checker: float = 4.0) -> Plane:
    """Unbounded plane through (0, 0, depth) rotated by ``angle_deg`` about the world y axis."""
    a = np.deg2rad(angle_deg)
    return Plane((0.0, 0.0, depth), (np.sin(a), 0.0, -np.cos(a)), (np.cos(a), 0.0, np.sin(a)), None, checker)


def scene_matches(scene: SyntheticScene, count_per_pair: int, noise_px: float = 0.0,
                  outlier_rate: float = 0.0, seed: int = 0, views=None) -> MatchSet:
    """Ground-truth matches over all unordered pairs of training views."""
    rng = np.random.default_rng(seed)
    ids = list(views) if views is not None else scene.train_ids
    sets = []
    for a in range(len(ids)):
        for b in range(a + 1, len(ids)):
            ia, ib = scene.ids.index(ids[a]), scene.ids.index(ids[b])
            sets.append(synth_matches(scene.depths[ia], scene.cameras[ia], scene.cameras[ib], count_per_pair,
                                      noise_px, outlier_rate, rng, gt_depth_j=scene.depths[ib]))
    return MatchSet.concat(sets)


# --- scene directory IO ---------------------------------------------------------


@dataclass
class SceneData:
    """A scene as loaded from disk; depths and lpips are optional."""

    root: Path
    cameras: list[Camera]
    images: dict[str, np.ndarray]
    matches: MatchSet
    train_ids: list[str]
    test_ids: list[str]
    depths: dict[str, np.ndarray] = field(default_factory=dict)
    lpips: dict[str, float] = field(default_factory=dict)
    description: dict = field(default_factory=dict)

    def camera(self, view_id: str) -> Camera:
        for c in self.cameras:
            if c.id == view_id:
                return c
        raise KeyError(view_id)

    def train_cameras(self) -> list[Camera]:
        return [self.camera(v) for v in self.train_ids]


def write_scene_dir(root, scene: SyntheticScene, matches: MatchSet | None = None, extra: dict | None = None) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "depths").mkdir(exist_ok=True)
    save_cameras(root / "cameras.json", scene.cameras)
    for cam, img, d in zip(scene.cameras, scene.images, scene.depths):
        write_image(root / "images" / f"{cam.id}.png", img)
        np.save(root / "depths" / f"{cam.id}.npy", d)
    meta = {"description": scene.description, "train": scene.train_ids, "test": scene.test_ids}
    if extra:
        meta.update(extra)
    (root / "scene.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    if matches is not None:
        save_matches(root / "matches.jsonl", matches)
    return root


def read_scene_dir(root, require_matches: bool = True) -> SceneData:
    root = Path(root)
    cam_path = root / "cameras.json"
    if not cam_path.exists():
        raise DataError(f"missing camera file: expected {cam_path}")
    cameras = load_cameras(cam_path)
    ids = [c.id for c in cameras]
    meta = {}
    if (root / "scene.json").exists():
        meta = json.loads((root / "scene.json").read_text())
    train = [str(v) for v in meta.get("train", ids)]
    test = [str(v) for v in meta.get("test", [])]
    for v in train + test:
        if v not in ids:
            raise DataError(f"scene.json lists unknown view id {v!r}")
    images = {}
    for v in train + test:
        p = root / "images" / f"{v}.png"
        if not p.exists():
            p = root / "images" / f"{v}.ppm"
        if not p.exists():
            raise DataError(f"missing image for view {v}: expected {root / 'images' / (v + '.png')}")
        img = read_image(p)
        cam = cameras[ids.index(v)]
        if img.shape[:2] != (cam.height, cam.width):
            raise DataError(f"image {p} is {img.shape[1]}x{img.shape[0]}, camera says {cam.width}x{cam.height}")
        images[v] = img
    mpath = root / "matches.jsonl"
    if mpath.exists():
        matches = load_matches(mpath, cameras)
    elif require_matches:
        raise DataError(f"missing matches file: expected {mpath}")
    else:
        matches = MatchSet()
    depths = {}
    for v in ids:
        p = root / "depths" / f"{v}.npy"
        if p.exists():
            depths[v] = np.load(p)
    lpips = {}
    if (root / "lpips.json").exists():
        lpips = {str(k): float(x) for k, x in json.loads((root / "lpips.json").read_text()).items()}
    return SceneData(root, cameras, images, matches, train, test, depths, lpips, meta.get("description", {}))
