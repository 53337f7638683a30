"""Pinhole rays, stratified sampling, exponential compositing and mouth/face fusion."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch

FUSE_EPS = 1e-8


@dataclass
class Camera:
    """Pinhole camera. Rotation columns are the camera right, up and backward axes in world space."""

    position: np.ndarray
    rotation: np.ndarray
    focal: float
    width: int
    height: int

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        if self.focal <= 0:
            raise ValueError("focal length must be positive")
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation is not orthonormal")

    def to_dict(self) -> dict:
        return {"position": self.position.tolist(), "rotation": self.rotation.tolist(), "focal": self.focal}

    @classmethod
    def from_dict(cls, d: dict, width: int, height: int) -> "Camera":
        return cls(np.array(d["position"]), np.array(d["rotation"]), float(d["focal"]), width, height)

    def project(self, points: np.ndarray) -> np.ndarray:
        """World points (..., 3) to pixel coordinates (..., 2); pixel (i, j) centers sit at integers."""
        pc = (np.asarray(points, dtype=np.float64) - self.position) @ self.rotation
        depth = -pc[..., 2]
        px = self.focal * pc[..., 0] / depth + self.width / 2 - 0.5
        py = -self.focal * pc[..., 1] / depth + self.height / 2 - 0.5
        return np.stack([px, py], axis=-1)


def look_at(position, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    position = np.asarray(position, dtype=np.float64)
    back = position - np.asarray(target, dtype=np.float64)
    back /= np.linalg.norm(back)
    right = np.cross(up, back)
    right /= np.linalg.norm(right)
    true_up = np.cross(back, right)
    return np.stack([right, true_up, back], axis=1)


@dataclass
class Rays:
    origins: torch.Tensor   # (R, 3)
    dirs: torch.Tensor      # (R, 3), unit
    near: torch.Tensor      # (R,)
    far: torch.Tensor       # (R,)
    hit: torch.Tensor       # (R,) bool; False marks background rays

    def __len__(self) -> int:
        return self.origins.shape[0]

    def subset(self, idx) -> "Rays":
        return Rays(self.origins[idx], self.dirs[idx], self.near[idx], self.far[idx], self.hit[idx])


def box_intersect(origins: np.ndarray, dirs: np.ndarray, lo=0.0, hi=1.0) -> tuple[np.ndarray, np.ndarray]:
    """Slab test against an axis-aligned box; returns (t_enter, t_exit), t_enter clipped at 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=-1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=-1)
    return np.maximum(tmin, 0.0), tmax


def generate_rays(camera: Camera, pixels: np.ndarray, dtype=torch.float32) -> Rays:
    """Rays through the centers of ``pixels`` (P, 2) given as (px, py) integer columns/rows."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    if ((pixels < 0) | (pixels >= [camera.width, camera.height])).any():
        raise ValueError("pixel outside the image")
    cam_dirs = np.stack([
        (pixels[:, 0] + 0.5 - camera.width / 2) / camera.focal,
        -(pixels[:, 1] + 0.5 - camera.height / 2) / camera.focal,
        -np.ones(len(pixels)),
    ], axis=-1)
    dirs = cam_dirs @ camera.rotation.T
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.position, dirs.shape).copy()
    near, far = box_intersect(origins, dirs)
    hit = far > near
    return Rays(torch.tensor(origins, dtype=dtype), torch.tensor(dirs, dtype=dtype),
                torch.tensor(near, dtype=dtype), torch.tensor(far, dtype=dtype), torch.tensor(hit))


def generate_ray(camera: Camera, pixel: tuple[int, int], dtype=torch.float64) -> Rays:
    return generate_rays(camera, np.array([pixel]), dtype)


def image_pixels(width: int, height: int) -> np.ndarray:
    """All (px, py) pairs in row-major order."""
    py, px = np.mgrid[0:height, 0:width]
    return np.stack([px.ravel(), py.ravel()], axis=-1)


def sample_points(near: torch.Tensor, far: torch.Tensor, n: int, stratified: bool = False,
                  generator: Optional[torch.Generator] = None) -> tuple[torch.Tensor, torch.Tensor]:
    """N bins partition [near, far]; bin midpoints, or one uniform draw per bin when stratified.

    Returns t (R, N) ascending and intervals delta (R, N) with delta_i = t_{i+1} - t_i and
    the last one far - t_N.
    """
    if n < 1:
        raise ValueError("need at least one sample per ray")
    near = near[:, None]
    far = far[:, None]
    width = (far - near) / n
    k = torch.arange(n, dtype=near.dtype)[None, :]
    if stratified:
        u = torch.rand(near.shape[0], n, generator=generator, dtype=torch.float64).to(near.dtype)
    else:
        u = torch.full((1, n), 0.5, dtype=near.dtype)
    t = near + (k + u) * width
    delta = torch.cat([t[:, 1:] - t[:, :-1], far - t[:, -1:]], dim=1)
    return t, delta


def composite(sigma: torch.Tensor, color: torch.Tensor, delta: torch.Tensor,
              background: Optional[torch.Tensor] = None) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Exponential compositing of piecewise-constant samples.

    sigma, delta: (R, N); color: (R, N, 3). Returns pixel colors (R, 3), weights (R, N)
    and final transmittance (R,).
    """
    tau = sigma * delta
    acc = torch.cumsum(tau, dim=1)
    # transmittance before each sample
    trans = torch.exp(-torch.cat([torch.zeros_like(acc[:, :1]), acc[:, :-1]], dim=1))
    weights = trans * -torch.expm1(-tau)
    t_final = torch.exp(-acc[:, -1])
    rgb = (weights[..., None] * color).sum(dim=1)
    if background is not None:
        rgb = rgb + t_final[:, None] * background
    return rgb, weights, t_final


def fuse_point(sigma1, c1, sigma2, c2, mode: str = "weighted"):
    """Add two densities and blend their colors by density.

    When both densities fall below FUSE_EPS the colors are averaged. A branch
    with exactly zero density hands over the other color unchanged, so an absent
    branch leaves renders bit-identical. ``raw_sum`` adds the colors literally.
    """
    sigma = sigma1 + sigma2
    if mode == "raw_sum":
        return sigma, c1 + c2
    s1 = sigma1[..., None]
    s2 = sigma2[..., None]
    blended = (s1 * c1 + s2 * c2) / (s1 + s2 + FUSE_EPS)
    both_thin = ((sigma1 < FUSE_EPS) & (sigma2 < FUSE_EPS))[..., None]
    c = torch.where(both_thin, 0.5 * (c1 + c2), blended)
    only1 = ((sigma2 == 0) & (sigma1 > 0))[..., None]
    only2 = ((sigma1 == 0) & (sigma2 > 0))[..., None]
    c = torch.where(only1, c1, torch.where(only2, c2, c))
    return sigma, c


# field_fn(x (R, N, 3), d (R, 3), ray_index (R,)) -> list of per-branch (sigma, color)
FieldFn = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], Sequence[tuple[torch.Tensor, torch.Tensor]]]


@dataclass
class RenderSettings:
    n_samples: int = 64
    stratified: bool = False
    fusion: str = "weighted"
    compositing: str = "fused"
    background: tuple = (0.0, 0.0, 0.0)


def render_rays(field_fn: FieldFn, rays: Rays, settings: RenderSettings,
                generator: Optional[torch.Generator] = None) -> torch.Tensor:
    """Render rays (R,) to colors (R, 3). Background rays get the background color without field queries."""
    dtype = rays.origins.dtype
    bg = torch.tensor(settings.background, dtype=dtype)
    out = bg.expand(len(rays), 3).clone()
    idx = rays.hit.nonzero().squeeze(1)
    if idx.numel() == 0:
        return out
    sub = rays.subset(idx)
    t, delta = sample_points(sub.near, sub.far, settings.n_samples, settings.stratified, generator)
    x = sub.origins[:, None, :] + t[..., None] * sub.dirs[:, None, :]
    branches = list(field_fn(x, sub.dirs, idx))
    if settings.compositing == "per_branch" and len(branches) > 1:
        rgb = sum(composite(s, c, delta)[0] for s, c in branches)
        t_final = composite(sum(s for s, _ in branches), branches[0][1], delta)[2]
        rgb = rgb + t_final[:, None] * bg
    else:
        sigma, color = branches[0]
        for s2, c2 in branches[1:]:
            sigma, color = fuse_point(sigma, color, s2, c2, settings.fusion)
        rgb, _, _ = composite(sigma, color, delta, bg)
    return out.index_put((idx,), rgb)


def render_image(field_fn: FieldFn, camera: Camera, settings: RenderSettings, chunk: int = 1024,
                 dtype=torch.float32) -> np.ndarray:
    """Full image (H, W, 3) as float64 numpy, rendered in ray chunks without gradients."""
    rays = generate_rays(camera, image_pixels(camera.width, camera.height), dtype)
    out = []
    with torch.no_grad():
        for s in range(0, len(rays), chunk):
            idx = torch.arange(s, min(s + chunk, len(rays)))
            sub = rays.subset(idx)
            out.append(render_rays(lambda x, d, i: field_fn(x, d, idx[i]), sub, settings))
    img = torch.cat(out).double().numpy()
    return img.reshape(camera.height, camera.width, 3)


def render_pixel(field_fn: FieldFn, camera: Camera, pixel: tuple[int, int], settings: RenderSettings,
                 dtype=torch.float64) -> torch.Tensor:
    """Color (3,) of one pixel; ``field_fn`` receives ray index 0."""
    return render_rays(field_fn, generate_ray(camera, pixel, dtype), settings)[0]
