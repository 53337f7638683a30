"""Losses, the coarse-to-fine training loop and checkpoint state mapping."""

from __future__ import annotations

import csv
import logging
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from .config import RunConfig, ablation_row_name
from .diffcore import AdamState, NonFiniteError, ParamTensor, adam_step, backward, param_tensors, zero_grads
from .field import ConditionVector, DTNeRF
from .metrics import EvalReport, frame_metrics, psnr
from .renderer import Camera, RenderSettings, Rays, generate_rays, image_pixels, render_rays
from .synth import Dataset

log = logging.getLogger(__name__)

LOG_HEADER = ["step", "split", "psnr", "mouth_psnr", "lmd", "loss"]


# --------------------------------------------------------------------------
# losses


def coarse_loss(pred: torch.Tensor, gt: torch.Tensor, face_mask: torch.Tensor, mouth_mask: torch.Tensor,
                lambda_mouth: float = 0.001) -> torch.Tensor:
    """Squared error summed over face pixels plus lambda times the sum over mouth pixels.

    pred, gt: (P, 3); masks: (P,) bool. A pixel in both sets counts in both sums.
    """
    if not bool(face_mask.any()):
        raise ValueError("coarse loss needs at least one face pixel")
    sq = ((pred - gt) ** 2).sum(dim=-1)
    return sq[face_mask].sum() + lambda_mouth * sq[mouth_mask].sum()


def pyramid_mse(pred: torch.Tensor, gt: torch.Tensor, levels: int = 3) -> torch.Tensor:
    """Sum over a 2x2 average-pooling pyramid (full, 1/2, 1/4 ...) of per-level MSE. Patches are (H, W, 3)."""
    a = pred.permute(2, 0, 1)[None]
    b = gt.permute(2, 0, 1)[None]
    total = a.new_zeros(())
    for level in range(levels):
        if level:
            a = F.avg_pool2d(a, 2)
            b = F.avg_pool2d(b, 2)
        total = total + ((a - b) ** 2).mean()
    return total


def fine_loss(pred_patch: torch.Tensor, gt_patch: torch.Tensor, lambda_perc: float = 0.001,
              surrogate: str = "pyramid_mse") -> torch.Tensor:
    """Patch squared error plus lambda times a perceptual surrogate. Patches are (P, P, 3)."""
    if pred_patch.shape != gt_patch.shape:
        raise ValueError("patch shapes differ")
    loss = ((pred_patch - gt_patch) ** 2).sum()
    if surrogate == "pyramid_mse":
        loss = loss + lambda_perc * pyramid_mse(pred_patch, gt_patch)
    elif surrogate != "none":
        raise ValueError(f"unknown perceptual surrogate {surrogate!r}")
    return loss


def mouth_patch_origin(camera: Camera, mouth_box, patch: int) -> tuple[int, int]:
    """Top-left pixel of a patch centered on the projected mouth box, clipped to the image."""
    lo, hi = np.asarray(mouth_box[0]), np.asarray(mouth_box[1])
    corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    c = camera.project(corners).mean(axis=0)
    x0 = int(np.rint(c[0] - patch / 2 + 0.5))
    y0 = int(np.rint(c[1] - patch / 2 + 0.5))
    cx = int(np.clip(x0, 0, max(camera.width - patch, 0)))
    cy = int(np.clip(y0, 0, max(camera.height - patch, 0)))
    if (cx, cy) != (x0, y0) or patch > min(camera.width, camera.height):
        warnings.warn(f"mouth patch at ({x0}, {y0}) exceeds the image; clipped to ({cx}, {cy})")
    return cx, cy


# --------------------------------------------------------------------------
# model plumbing


def torch_dtype(cfg: RunConfig):
    return torch.float64 if cfg.dtype == "float64" else torch.float32


def build_model(cfg: RunConfig, mouth_box) -> DTNeRF:
    return DTNeRF(cfg.encoder, cfg.field, mouth_box, seed=cfg.schedule.seed, dtype=torch_dtype(cfg),
                  use_attention=cfg.ablation.transformer)


def model_field_fn(model: DTNeRF, cond: ConditionVector, use_mouth: bool):
    """Field callable for the renderer; ``cond`` rows are per ray, or one row shared by all rays."""
    def fn(x, d, ray_idx):
        if cond.D.shape[0] == 1:
            n = x.shape[0]
            sub = ConditionVector(cond.a.expand(n, -1), cond.e.expand(n, -1), cond.D.expand(n, -1))
        else:
            sub = ConditionVector(cond.a[ray_idx], cond.e[ray_idx], cond.D[ray_idx])
        return model.branch_outputs(x, d, sub, use_mouth)
    return fn


def render_settings(cfg: RunConfig, train: bool) -> RenderSettings:
    r = cfg.render
    return RenderSettings(r.n_samples_train if train else r.n_samples_eval, r.stratified and train,
                          r.fusion, r.compositing, tuple(r.background))


def render_frame(model: DTNeRF, cfg: RunConfig, camera: Camera, audio: float, blink: float,
                 n_samples: Optional[int] = None) -> np.ndarray:
    """Deterministic (midpoint-sampled) render of a full frame, (H, W, 3) float64."""
    dtype = torch_dtype(cfg)
    settings = render_settings(cfg, train=False)
    if n_samples is not None:
        settings.n_samples = n_samples
    rays = generate_rays(camera, image_pixels(camera.width, camera.height), dtype)
    out = []
    with torch.no_grad():
        cond = model.cond(torch.tensor([audio], dtype=dtype), torch.tensor([blink], dtype=dtype))
        fn = model_field_fn(model, cond, cfg.ablation.fusion)
        chunk = cfg.render.chunk_rays
        for s in range(0, len(rays), chunk):
            sub = rays.subset(torch.arange(s, min(s + chunk, len(rays))))
            out.append(render_rays(fn, sub, settings))
    return torch.cat(out).double().numpy().reshape(camera.height, camera.width, 3)


def evaluate_model(model: DTNeRF, cfg: RunConfig, data: Dataset, ids: list[int],
                   config_hash: str = "") -> EvalReport:
    if not ids:
        raise ValueError("evaluation split is empty")
    report = EvalReport(config_hash=config_hash)
    for i in ids:
        pred = render_frame(model, cfg, data.cameras[i], float(data.audio[i]), float(data.blink[i]))
        mouth = data.mouth_masks[i] if data.mouth_masks[i].any() else data.face_masks[i]
        report.frames.append(frame_metrics(i, pred, data.images[i], mouth, data.landmarks[i]))
    return report


# --------------------------------------------------------------------------
# training


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainResult:
    checkpoint: Optional[Path]
    log_rows: list[dict] = field(default_factory=list)
    final_report: Optional[EvalReport] = None
    wall_clock: float = 0.0
    row_name: str = ""
    trainer: Optional["Trainer"] = None


class Trainer:
    """Holds model, optimizer states and the precomputed training rays."""

    def __init__(self, cfg: RunConfig, data: Dataset):
        self.cfg = cfg
        self.data = data
        self.dtype = torch_dtype(cfg)
        torch.set_num_threads(max(1, cfg.threads))
        self.model = build_model(cfg, data.mouth_box)
        self.params: list[ParamTensor] = param_tensors(self.model)
        s = cfg.schedule
        self.adam = {
            "tables": AdamState(s.lr_tables, s.beta1, s.beta2, s.adam_eps),
            "heads": AdamState(s.lr_heads, s.beta1, s.beta2, s.adam_eps),
        }
        for p in self.params:
            st = self.adam[p.group]
            st.m[p.name] = torch.zeros_like(p.param.data)
            st.v[p.name] = torch.zeros_like(p.param.data)
        self.step = 0
        self.config_hash = cfg.config_hash()
        self._prepare_rays()

    # ---- data

    def _prepare_rays(self) -> None:
        d = self.data
        res = d.resolution
        pix = image_pixels(res, res)
        self.train_ids = np.array(d.train_ids)
        rays = [generate_rays(d.cameras[i], pix, self.dtype) for i in self.train_ids]
        self.rays_o = torch.stack([r.origins for r in rays])
        self.rays_d = torch.stack([r.dirs for r in rays])
        self.near = torch.stack([r.near for r in rays])
        self.far = torch.stack([r.far for r in rays])
        self.hit = torch.stack([r.hit for r in rays])
        self.gt = torch.tensor(d.images[self.train_ids].reshape(len(self.train_ids), -1, 3), dtype=self.dtype)
        self.face = torch.tensor(d.face_masks[self.train_ids].reshape(len(self.train_ids), -1))
        self.mouth = torch.tensor(d.mouth_masks[self.train_ids].reshape(len(self.train_ids), -1))
        self.audio = torch.tensor(d.audio[self.train_ids], dtype=self.dtype)
        self.blink = torch.tensor(d.blink[self.train_ids], dtype=self.dtype)

    def _batch_rays(self, f: torch.Tensor, p: torch.Tensor) -> Rays:
        return Rays(self.rays_o[f, p], self.rays_d[f, p], self.near[f, p], self.far[f, p], self.hit[f, p])

    # ---- parameter selection

    @property
    def total_steps(self) -> int:
        s = self.cfg.schedule
        return s.coarse_steps + self.fine_steps

    @property
    def fine_steps(self) -> int:
        return self.cfg.schedule.fine_steps if self.cfg.ablation.finetune else 0

    def fine_params(self) -> list[ParamTensor]:
        if self.cfg.schedule.fine_updates == "all":
            return self.params
        # without fusion the face branch alone renders the mouth, so it is the one refined
        prefix = "mouth." if self.cfg.ablation.fusion else "face."
        return [p for p in self.params if p.name.startswith(prefix)]

    def _update(self, params: list[ParamTensor]) -> None:
        scale = self.cfg.schedule.lr_decay ** (self.step / max(self.total_steps, 1))
        for group, state in self.adam.items():
            adam_step([p for p in params if p.group == group], state, scale)
        zero_grads(self.params)

    # ---- steps

    def _render(self, rays: Rays, frame_rows: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
        cond = self.model.cond(self.audio[frame_rows], self.blink[frame_rows])
        fn = model_field_fn(self.model, cond, self.cfg.ablation.fusion)
        return render_rays(fn, rays, render_settings(self.cfg, train=True), gen)

    def _generators(self) -> tuple[np.random.Generator, torch.Generator]:
        seed = self.cfg.schedule.seed
        rng = np.random.default_rng([seed, self.step])
        gen = torch.Generator().manual_seed(int(rng.integers(2 ** 62)))
        return rng, gen

    def coarse_step(self) -> float:
        rng, gen = self._generators()
        n = self.cfg.schedule.rays_per_step
        n_pix = self.gt.shape[1]
        f = torch.tensor(rng.integers(len(self.train_ids), size=n))
        p = torch.tensor(rng.integers(n_pix, size=n))
        pred = self._render(self._batch_rays(f, p), f, gen)
        face = torch.ones(n, dtype=torch.bool) if self.cfg.loss.coarse_face_set == "all" else self.face[f, p]
        loss = coarse_loss(pred, self.gt[f, p], face, self.mouth[f, p], self.cfg.loss.lambda_mouth)
        self._backward(loss)
        self._update(self.params)
        self.step += 1
        return loss.item()

    def fine_step(self) -> float:
        rng, gen = self._generators()
        P = self.cfg.loss.patch_size
        res = self.data.resolution
        k = int(rng.integers(len(self.train_ids)))
        cam = self.data.cameras[int(self.train_ids[k])]
        x0, y0 = mouth_patch_origin(cam, self.data.mouth_box, P)
        P = min(P, res)
        ys, xs = np.mgrid[y0:y0 + P, x0:x0 + P]
        p = torch.tensor((ys * res + xs).ravel())
        f = torch.full_like(p, k)
        pred = self._render(self._batch_rays(f, p), f, gen)
        loss = fine_loss(pred.reshape(P, P, 3), self.gt[f, p].reshape(P, P, 3),
                         self.cfg.loss.lambda_perc, self.cfg.loss.perceptual_surrogate)
        self._backward(loss)
        self._update(self.fine_params())
        self.step += 1
        return loss.item()

    def _backward(self, loss: torch.Tensor) -> None:
        try:
            backward(loss, self.params)
        except NonFiniteError as exc:
            zero_grads(self.params)
            raise TrainingAborted(f"step {self.step}: {exc}") from exc

    # ---- state

    def state_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for p in self.params:
            out[f"param.{p.name}"] = p.param.detach().cpu().numpy()
        for group, st in self.adam.items():
            out[f"adam.{group}.step_count"] = np.array([st.step_count], dtype=np.float32)
            for p in self.params:
                if p.group == group:
                    out[f"adam.{group}.m.{p.name}"] = st.m[p.name].cpu().numpy()
                    out[f"adam.{group}.v.{p.name}"] = st.v[p.name].cpu().numpy()
        out["state.step"] = np.array([self.step], dtype=np.float32)
        lo, hi = self.data.mouth_box
        out["meta.mouth_box"] = np.array([lo, hi], dtype=np.float32)
        out["meta.config_hash"] = ckpt.encode_text(self.config_hash)
        return out

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        stored = tensors.get("meta.config_hash")
        if stored is not None and ckpt.decode_text(stored) != self.config_hash:
            warnings.warn("checkpoint was written under a different config hash")
        for p in self.params:
            _assign(p.param.data, tensors, f"param.{p.name}")
        for group, st in self.adam.items():
            st.step_count = int(_get(tensors, f"adam.{group}.step_count")[0])
            for p in self.params:
                if p.group == group:
                    _assign(st.m[p.name], tensors, f"adam.{group}.m.{p.name}")
                    _assign(st.v[p.name], tensors, f"adam.{group}.v.{p.name}")
        self.step = int(_get(tensors, "state.step")[0])

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        ckpt.save_checkpoint(path, self.state_tensors())
        return path

    def load(self, path: str | Path) -> None:
        self.load_state(ckpt.load_checkpoint(path))


def load_model(path: str | Path, cfg: RunConfig, mouth_box=None) -> DTNeRF:
    """Rebuild the model stored in a checkpoint, without optimizer state or training rays.

    Pass the dataset's ``mouth_box`` to reproduce training-time renders exactly; the
    copy stored in the checkpoint is float32.
    """
    tensors = ckpt.load_checkpoint(path)
    stored = tensors.get("meta.config_hash")
    if stored is not None and ckpt.decode_text(stored) != cfg.config_hash():
        warnings.warn("checkpoint was written under a different config hash")
    if mouth_box is None:
        box = _get(tensors, "meta.mouth_box").astype(np.float64)
        mouth_box = (box[0].tolist(), box[1].tolist())
    model = build_model(cfg, mouth_box)
    with torch.no_grad():
        for p in param_tensors(model):
            _assign(p.param.data, tensors, f"param.{p.name}")
    return model


def _get(tensors: dict, name: str) -> np.ndarray:
    if name not in tensors:
        raise ckpt.CheckpointError(f"checkpoint lacks tensor {name!r}")
    return tensors[name]


def _assign(dst: torch.Tensor, tensors: dict, name: str) -> None:
    src = _get(tensors, name)
    if tuple(src.shape) != tuple(dst.shape):
        raise ckpt.CheckpointError(f"tensor {name!r} has shape {tuple(src.shape)}, expected {tuple(dst.shape)}")
    dst.copy_(torch.from_numpy(src).to(dst.dtype))


def _log_row(step, split, psnr_v, mouth_v, lmd_v, loss) -> dict:
    return {"step": step, "split": split, "psnr": psnr_v, "mouth_psnr": mouth_v, "lmd": lmd_v, "loss": loss}


def write_log(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, LOG_HEADER)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def train(cfg: RunConfig, data: Dataset, out_dir: Optional[str | Path] = None,
          resume: Optional[str | Path] = None, final_eval: bool = True,
          progress: Optional[Callable[[str], None]] = None) -> TrainResult:
    """Coarse stage on random rays, then mouth-patch fine stage; writes checkpoint and metric log."""
    t_start = time.perf_counter()
    trainer = Trainer(cfg, data)
    if resume is not None:
        trainer.load(resume)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    s = cfg.schedule
    rows: list[dict] = []
    row_name = ablation_row_name(cfg.ablation)
    say = progress or log.info
    say(f"training [{row_name}] config {trainer.config_hash}: {s.coarse_steps} coarse + "
        f"{trainer.fine_steps} fine steps from step {trainer.step}")
    eval_ids = data.holdout_ids[: s.eval_frames]
    n_train_log = 100
    try:
        while trainer.step < trainer.total_steps:
            fine = trainer.step >= s.coarse_steps
            loss = trainer.fine_step() if fine else trainer.coarse_step()
            if trainer.step % n_train_log == 0 or trainer.step == trainer.total_steps:
                rows.append(_log_row(trainer.step, "fine" if fine else "train", float("nan"), float("nan"),
                                     float("nan"), loss))
            stage_end = trainer.step in (s.coarse_steps, trainer.total_steps)
            if (s.eval_every and trainer.step % s.eval_every == 0) or (stage_end and trainer.step < trainer.total_steps):
                rep = evaluate_model(trainer.model, cfg, data, eval_ids)
                rows.append(_log_row(trainer.step, "holdout", rep.mean_psnr, rep.mean_mouth_psnr, rep.mean_lmd, loss))
                say(f"step {trainer.step}: holdout psnr {rep.mean_psnr:.2f} mouth {rep.mean_mouth_psnr:.2f} "
                    f"lmd {rep.mean_lmd:.3f}")
    except TrainingAborted:
        if out is not None:
            trainer.save(out / "last_good.ckpt")
            write_log(out / "metrics.csv", rows)
        raise
    report = None
    if final_eval:
        report = evaluate_model(trainer.model, cfg, data, data.holdout_ids, trainer.config_hash)
        rows.append(_log_row(trainer.step, "holdout", report.mean_psnr, report.mean_mouth_psnr,
                             report.mean_lmd, rows[-1]["loss"] if rows else float("nan")))
        say(f"final holdout psnr {report.mean_psnr:.2f} mouth {report.mean_mouth_psnr:.2f} lmd {report.mean_lmd:.3f}")
    path = None
    if out is not None:
        path = trainer.save(out / "model.ckpt")
        write_log(out / "metrics.csv", rows)
    return TrainResult(path, rows, report, time.perf_counter() - t_start, row_name, trainer)
