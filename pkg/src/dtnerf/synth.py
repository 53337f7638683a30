"""Analytic talking-blob scene, its oracle renderer and dataset emission.

The scene is a smooth ellipsoidal head with an ellipsoidal mouth whose
vertical radius grows with |audio| and two eye discs that fade to skin color
as the blink scalar goes to 1. Everything here is numpy float64 and shares no
code with the learned renderer, so the oracle can cross-check it.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .renderer import Camera, look_at

DATASET_VERSION = 1
LANDMARK_NAMES = ("mouth_left", "mouth_right", "lip_upper", "lip_lower", "eye_left", "eye_right")


@dataclass
class SceneParams:
    head_center: tuple = (0.5, 0.5, 0.5)
    head_radii: tuple = (0.30, 0.38, 0.30)
    head_peak: float = 40.0
    head_falloff: float = 0.15
    mouth_center: tuple = (0.5, 0.34, 0.74)
    mouth_radii: tuple = (0.10, 0.025, 0.07)
    mouth_gain: float = 0.05
    mouth_peak: float = 80.0
    mouth_falloff: float = 0.3
    eye_centers: tuple = ((0.39, 0.60), (0.61, 0.60))
    eye_radius: float = 0.045
    eye_edge: float = 0.015
    blink_darkening: float = 1.0
    skin_rgb: tuple = (0.85, 0.62, 0.50)
    skin_gradient: float = 0.15
    mouth_rgb: tuple = (0.45, 0.08, 0.10)
    eye_rgb: tuple = (0.95, 0.95, 0.95)
    camera_distance: float = 2.0
    focal_per_pixel: float = 2.15

    def __post_init__(self):
        for name in ("head_center", "head_radii", "mouth_center", "mouth_radii", "skin_rgb", "mouth_rgb", "eye_rgb"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        self.eye_centers = tuple(tuple(float(v) for v in c) for c in self.eye_centers)
        if self.mouth_gain < 0:
            raise ValueError("mouth gain must be non-negative")
        for rgb in (self.skin_rgb, self.mouth_rgb, self.eye_rgb):
            if min(rgb) < 0 or max(rgb) > 1:
                raise ValueError("scene colors must lie in [0, 1]")
        lo, hi = self.head_support_box()
        if (lo < 0).any() or (hi > 1).any():
            raise ValueError("head must lie inside the unit cube")

    def mouth_radii_at(self, a: float) -> np.ndarray:
        rx, ry, rz = self.mouth_radii
        return np.array([rx, ry + self.mouth_gain * abs(a), rz])

    def head_support_box(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.array(self.head_center)
        r = np.array(self.head_radii)
        return c - r, c + r

    def mouth_box(self, margin: float = 0.03) -> tuple[list, list]:
        """Axis-aligned box holding the mouth at its widest opening (|a| = 1)."""
        c = np.array(self.mouth_center)
        r = self.mouth_radii_at(1.0) + margin
        lo = np.clip(c - r, 0.0, 1.0)
        hi = np.clip(c + r, 0.0, 1.0)
        return lo.tolist(), hi.tolist()

    def to_dict(self) -> dict:
        return asdict(self)


def _smooth_falloff(rho: np.ndarray, width: float) -> np.ndarray:
    """1 for rho <= 1 - width, 0 for rho >= 1, quintic smoothstep between."""
    s = np.clip((1.0 - rho) / width, 0.0, 1.0)
    return s * s * s * (s * (6 * s - 15) + 10)


def _ellipsoid_rho(x: np.ndarray, center, radii) -> np.ndarray:
    q = (x - np.asarray(center)) / np.asarray(radii)
    return np.sqrt((q * q).sum(axis=-1))


def eye_indicator(params: SceneParams, x: np.ndarray) -> np.ndarray:
    """Smooth 0..1 membership of the eye discs (cylinders along z, front half only)."""
    m = np.zeros(x.shape[:-1])
    for ex, ey in params.eye_centers:
        r = np.hypot(x[..., 0] - ex, x[..., 1] - ey)
        m = np.maximum(m, _smooth_falloff(r / params.eye_radius, params.eye_edge / params.eye_radius))
    front = _smooth_falloff(np.clip(1.0 - (x[..., 2] - 0.5) / 0.1, 0.0, None), 1.0)
    return m * front


def scene_density_color(params: SceneParams, x: np.ndarray, a: float, e: float,
                        parts: bool = False):
    """Closed-form density (...,) and color (..., 3) at points x (..., 3)."""
    x = np.asarray(x, dtype=np.float64)
    sig_h = params.head_peak * _smooth_falloff(_ellipsoid_rho(x, params.head_center, params.head_radii),
                                               params.head_falloff)
    sig_m = params.mouth_peak * _smooth_falloff(
        _ellipsoid_rho(x, params.mouth_center, params.mouth_radii_at(a)), params.mouth_falloff)
    skin = np.asarray(params.skin_rgb) + params.skin_gradient * (x[..., 1:2] - 0.5)
    skin = np.clip(skin, 0.0, 1.0)
    eye = eye_indicator(params, x)[..., None]
    head_c = skin + eye * (1.0 - params.blink_darkening * e) * (np.asarray(params.eye_rgb) - skin)
    sigma = sig_h + sig_m
    with np.errstate(invalid="ignore", divide="ignore"):
        frac_m = np.where(sigma > 0, sig_m / sigma, 0.0)[..., None]
    color = (1 - frac_m) * head_c + frac_m * np.asarray(params.mouth_rgb)
    if parts:
        return sigma, color, {"eye": eye[..., 0], "mouth_frac": frac_m[..., 0]}
    return sigma, color


def _ray_ellipsoid(origins, dirs, center, radii) -> tuple[np.ndarray, np.ndarray]:
    """Entry / exit distances of rays against an ellipsoid; exit < entry on a miss."""
    r = np.asarray(radii)
    o = (origins - np.asarray(center)) / r
    d = dirs / r
    A = (d * d).sum(-1)
    B = 2 * (o * d).sum(-1)
    C = (o * o).sum(-1) - 1.0
    disc = B * B - 4 * A * C
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0 = (-B - sq) / (2 * A)
    t1 = (-B + sq) / (2 * A)
    miss = disc <= 0
    t0 = np.where(miss, 1.0, t0)
    t1 = np.where(miss, 0.0, t1)
    return t0, t1


def camera_rays(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel (H*W, 3) origins and unit directions, row-major, through pixel centers."""
    py, px = np.mgrid[0:camera.height, 0:camera.width]
    dc = np.stack([(px.ravel() + 0.5 - camera.width / 2) / camera.focal,
                   -(py.ravel() + 0.5 - camera.height / 2) / camera.focal,
                   -np.ones(px.size)], axis=-1)
    d = dc @ camera.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return np.broadcast_to(camera.position, d.shape).copy(), d


def oracle_composite_rays(params: SceneParams, origins: np.ndarray, dirs: np.ndarray, a: float, e: float,
                          steps_per_ray: int, block: int = 128, with_eye: bool = False):
    """Midpoint-rule compositing of the analytic field over each ray's support interval.

    Density vanishes outside the head and mouth ellipsoids, so integrating over
    the union of their chords is exact. Returns colors (R, 3), alpha (R,) and,
    optionally, the accumulated eye-disc weight (R,).
    """
    if steps_per_ray < 256:
        raise ValueError("oracle needs at least 256 steps per ray")
    h0, h1 = _ray_ellipsoid(origins, dirs, params.head_center, params.head_radii)
    m0, m1 = _ray_ellipsoid(origins, dirs, params.mouth_center, params.mouth_radii_at(a))
    head_hit = h1 > h0
    mouth_hit = m1 > m0
    t0 = np.where(head_hit, h0, np.inf)
    t0 = np.minimum(t0, np.where(mouth_hit, m0, np.inf))
    t1 = np.where(head_hit, h1, -np.inf)
    t1 = np.maximum(t1, np.where(mouth_hit, m1, -np.inf))
    hit = t1 > t0
    rgb = np.zeros((len(origins), 3))
    alpha = np.zeros(len(origins))
    eye_w = np.zeros(len(origins))
    if not hit.any():
        return (rgb, alpha, eye_w) if with_eye else (rgb, alpha)

    o, d = origins[hit], dirs[hit]
    t0, t1 = np.maximum(t0[hit], 0.0), t1[hit]
    step = (t1 - t0) / steps_per_ray
    log_T = np.zeros(len(o))
    acc_c = np.zeros((len(o), 3))
    acc_eye = np.zeros(len(o))
    for s in range(0, steps_per_ray, block):
        k = np.arange(s, min(s + block, steps_per_ray))
        t = t0[:, None] + (k[None, :] + 0.5) * step[:, None]
        pts = o[:, None, :] + t[..., None] * d[:, None, :]
        sig, col, parts = scene_density_color(params, pts, a, e, parts=True)
        od = sig * step[:, None]
        # running transmittance: exp of minus optical depth before each step
        before = log_T[:, None] - np.concatenate([np.zeros((len(o), 1)), np.cumsum(od, axis=1)[:, :-1]], axis=1)
        w = np.exp(before) * (1.0 - np.exp(-od))
        acc_c += (w[..., None] * col).sum(axis=1)
        acc_eye += (w * parts["eye"]).sum(axis=1)
        log_T = log_T - od.sum(axis=1)
    rgb[hit] = acc_c
    alpha[hit] = 1.0 - np.exp(log_T)
    eye_w[hit] = acc_eye
    return (rgb, alpha, eye_w) if with_eye else (rgb, alpha)


def marker_points(params: SceneParams, a: float) -> dict[str, np.ndarray]:
    """3-D landmark markers on the visible surface."""
    c = np.array(params.mouth_center)
    rx, ry, rz = params.mouth_radii_at(a)
    hc = np.array(params.head_center)
    hr = np.array(params.head_radii)
    pts = {
        "mouth_left": c + [-0.8 * rx, 0.0, 0.5 * rz],
        "mouth_right": c + [0.8 * rx, 0.0, 0.5 * rz],
        "lip_upper": c + [0.0, 0.8 * ry, 0.6 * rz],
        "lip_lower": c + [0.0, -0.8 * ry, 0.6 * rz],
    }
    for name, (ex, ey) in zip(("eye_left", "eye_right"), params.eye_centers):
        q = 0.95 ** 2 - ((ex - hc[0]) / hr[0]) ** 2 - ((ey - hc[1]) / hr[1]) ** 2
        pts[name] = np.array([ex, ey, hc[2] + hr[2] * np.sqrt(q)])
    return pts


@dataclass
class OracleFrame:
    image: np.ndarray        # (H, W, 3) float64 in [0, 1]
    face_mask: np.ndarray    # (H, W) bool
    mouth_mask: np.ndarray   # (H, W) bool
    landmarks: dict          # name -> (x, y) pixel coordinates
    eye_weight: np.ndarray = field(default=None)  # (H, W) eye-disc contribution


def oracle_render(params: SceneParams, camera: Camera, a: float, e: float, steps_per_ray: int = 1024,
                  background=(0.0, 0.0, 0.0)) -> OracleFrame:
    """Ground-truth image, silhouette masks and projected landmarks for one frame."""
    origins, dirs = camera_rays(camera)
    rgb, alpha, eye_w = oracle_composite_rays(params, origins, dirs, a, e, steps_per_ray, with_eye=True)
    rgb = rgb + (1.0 - alpha)[:, None] * np.asarray(background)
    h0, h1 = _ray_ellipsoid(origins, dirs, params.head_center, params.head_radii)
    m0, m1 = _ray_ellipsoid(origins, dirs, params.mouth_center, params.mouth_radii_at(a))
    face = h1 > h0
    mouth = (m1 > m0) & face
    shape = (camera.height, camera.width)
    lms = {name: camera.project(p) for name, p in marker_points(params, a).items()}
    return OracleFrame(rgb.reshape(*shape, 3), face.reshape(shape), mouth.reshape(shape),
                       {k: (float(v[0]), float(v[1])) for k, v in lms.items()}, eye_w.reshape(shape))


# --------------------------------------------------------------------------
# dataset


def audio_signal(n_frames: int, seed: int) -> np.ndarray:
    """Pseudo-speech driver: three seeded sinusoids at syllable-like rates, clipped to [-1, 1]."""
    rng = np.random.default_rng(seed)
    t = np.arange(n_frames) / 25.0
    freqs = rng.uniform(0.4, 3.0, size=3)
    amps = rng.uniform(0.3, 0.6, size=3)
    phases = rng.uniform(0, 2 * np.pi, size=3)
    a = (amps[:, None] * np.sin(2 * np.pi * freqs[:, None] * t[None, :] + phases[:, None])).sum(0)
    return np.clip(a, -1.0, 1.0)


def blink_signal(n_frames: int, seed: int) -> np.ndarray:
    """Sparse triangular blink pulses (about one per 2-3 seconds), values in [0, 1]."""
    rng = np.random.default_rng(seed + 1)
    e = np.zeros(n_frames)
    f = int(rng.integers(10, 40))
    while f < n_frames:
        half = int(rng.integers(2, 4))
        for k in range(-half, half + 1):
            if 0 <= f + k < n_frames:
                e[f + k] = max(e[f + k], 1.0 - abs(k) / (half + 1))
        f += int(rng.integers(40, 75))
    return e


def orbit_camera(params: SceneParams, index: int, n_frames: int, resolution: int,
                 orbit_deg: float) -> Camera:
    """Camera on a slow yaw/pitch orbit within +-orbit_deg of frontal, looking at the head center."""
    phase = index / max(n_frames, 1)
    yaw = np.deg2rad(orbit_deg) * np.sin(2 * np.pi * 2.0 * phase)
    pitch = 0.5 * np.deg2rad(orbit_deg) * np.sin(2 * np.pi * 3.0 * phase + 0.7)
    c = np.array(params.head_center)
    pos = c + params.camera_distance * np.array(
        [np.sin(yaw) * np.cos(pitch), np.sin(pitch), np.cos(yaw) * np.cos(pitch)])
    return Camera(pos, look_at(pos, c), params.focal_per_pixel * resolution, resolution, resolution)


def _to_png(img: np.ndarray, path: Path) -> None:
    arr = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, optimize=False)


def _render_frame(args) -> dict:
    params, index, n_frames, resolution, orbit_deg, steps, a, e, out_dir = args
    cam = orbit_camera(params, index, n_frames, resolution, orbit_deg)
    fr = oracle_render(params, cam, a, e, steps)
    out = Path(out_dir)
    names = {k: f"{k}/{index:04d}.png" for k in ("images", "face_masks", "mouth_masks")}
    _to_png(fr.image, out / names["images"])
    _to_png(np.repeat(fr.face_mask[..., None], 3, -1).astype(float), out / names["face_masks"])
    _to_png(np.repeat(fr.mouth_mask[..., None], 3, -1).astype(float), out / names["mouth_masks"])
    return {
        "index": index,
        "image": names["images"],
        "face_mask": names["face_masks"],
        "mouth_mask": names["mouth_masks"],
        "audio": float(a),
        "blink": float(e),
        "camera": cam.to_dict(),
        "landmarks": [{"name": k, "x": v[0], "y": v[1]} for k, v in fr.landmarks.items()],
    }


def gen_dataset(params: SceneParams, n_frames: int, resolution: int, orbit_deg: float, seed: int,
                out_dir: str | Path, steps_per_ray: int = 512, holdout_every: int = 10,
                workers: int = 1) -> dict:
    """Render a synthetic talking-blob sequence to ``out_dir`` and write ``dataset.json``."""
    if n_frames < 2:
        raise ValueError("need at least two frames")
    out = Path(out_dir)
    if not out.parent.exists():
        raise FileNotFoundError(f"parent directory of {out} does not exist")
    for sub in ("images", "face_masks", "mouth_masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    audio = audio_signal(n_frames, seed)
    blink = blink_signal(n_frames, seed)
    jobs = [(params, i, n_frames, resolution, orbit_deg, steps_per_ray, audio[i], blink[i], str(out))
            for i in range(n_frames)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            frames = list(ex.map(_render_frame, jobs))
    else:
        frames = [_render_frame(j) for j in jobs]
    holdout = [i for i in range(n_frames) if i % holdout_every == holdout_every - 1]
    if not holdout:
        holdout = [n_frames - 1]
    train = [i for i in range(n_frames) if i not in set(holdout)]
    lo, hi = params.mouth_box()
    manifest = {
        "version": DATASET_VERSION,
        "resolution": resolution,
        "seed": seed,
        "steps_per_ray": steps_per_ray,
        "mouth_box": {"lo": lo, "hi": hi},
        "scene": params.to_dict(),
        "frames": frames,
        "split": {"train": train, "holdout": holdout},
    }
    with open(out / "dataset.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return manifest


# --------------------------------------------------------------------------
# loading


@dataclass
class Dataset:
    root: Path
    manifest: dict
    images: np.ndarray       # (F, H, W, 3) float32 in [0, 1]
    face_masks: np.ndarray   # (F, H, W) bool
    mouth_masks: np.ndarray  # (F, H, W) bool
    audio: np.ndarray
    blink: np.ndarray
    cameras: list
    landmarks: list          # per frame: name -> (x, y)

    @property
    def resolution(self) -> int:
        return int(self.manifest["resolution"])

    @property
    def mouth_box(self) -> tuple[list, list]:
        mb = self.manifest["mouth_box"]
        return mb["lo"], mb["hi"]

    @property
    def scene(self) -> SceneParams:
        return SceneParams(**self.manifest["scene"])

    @property
    def train_ids(self) -> list[int]:
        return list(self.manifest["split"]["train"])

    @property
    def holdout_ids(self) -> list[int]:
        return list(self.manifest["split"]["holdout"])

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(self.manifest, sort_keys=True).encode())
        h.update(np.ascontiguousarray(self.images).tobytes())
        return h.hexdigest()[:16]


def _read_png(path: Path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    with open(root / "dataset.json") as fh:
        manifest = json.load(fh)
    if manifest.get("version") != DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {manifest.get('version')!r}")
    frames = sorted(manifest["frames"], key=lambda f: f["index"])
    res = int(manifest["resolution"])
    images = np.stack([_read_png(root / f["image"]) for f in frames])
    face = np.stack([_read_png(root / f["face_mask"])[..., 0] > 0.5 for f in frames])
    mouth = np.stack([_read_png(root / f["mouth_mask"])[..., 0] > 0.5 for f in frames])
    cams = [Camera.from_dict(f["camera"], res, res) for f in frames]
    lms = [{lm["name"]: (lm["x"], lm["y"]) for lm in f["landmarks"]} for f in frames]
    return Dataset(root, manifest, images, face, mouth,
                   np.array([f["audio"] for f in frames]), np.array([f["blink"] for f in frames]), cams, lms)


def dir_hash(root: str | Path) -> str:
    """sha256 over every file's relative path and bytes, in sorted order."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
