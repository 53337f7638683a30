"""Dual-branch conditional radiance field.

Each branch (mouth, face) is a triplane-hash encoder followed by a point
feature MLP, an audio-query attention over the samples of one ray and
density / color heads. The mouth branch lives in its own axis-aligned box;
the face branch covers the unit cube.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .config import EncoderConfig, FieldConfig
from .encoders import TriplaneHashEncoder, frequency_encode


def mlp(sizes: Sequence[int], generator: Optional[torch.Generator] = None, dtype=torch.float32) -> nn.Sequential:
    """Linear layers with ReLU between them; Kaiming-uniform weights, zero biases."""
    layers: list[nn.Module] = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        lin = nn.Linear(a, b, dtype=dtype)
        _kaiming_uniform(lin.weight, generator)
        nn.init.zeros_(lin.bias)
        layers.append(lin)
        if i < len(sizes) - 2:
            layers.append(nn.ReLU())
    return nn.Sequential(*layers)


def _kaiming_uniform(w: torch.Tensor, generator: Optional[torch.Generator]) -> None:
    bound = math.sqrt(6.0 / w.shape[1])
    with torch.no_grad():
        u = torch.rand(w.shape, generator=generator, dtype=torch.float64)
        w.copy_(((u * 2 - 1) * bound).to(w.dtype))


@dataclass
class ConditionVector:
    a: torch.Tensor      # lifted audio, (..., 2 * n_freqs_audio)
    e: torch.Tensor      # lifted blink, (..., 2 * n_freqs_blink)
    D: torch.Tensor      # fused condition, (..., cond_width)


class ConditionNet(nn.Module):
    def __init__(self, cfg: FieldConfig, generator=None, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        n_in = 2 * cfg.n_freqs_audio + 2 * cfg.n_freqs_blink
        self.mlp = mlp([n_in, cfg.cond_hidden, cfg.cond_width], generator, dtype)

    def forward(self, audio: torch.Tensor, blink: torch.Tensor) -> ConditionVector:
        return condition_fuse(self, audio, blink)


def condition_fuse(net: ConditionNet, audio: torch.Tensor, blink: torch.Tensor) -> ConditionVector:
    """Lift audio and blink scalars with sinusoids, concatenate, map through a small MLP.

    audio, blink: (B,) tensors. The audio lift occupies the first input channels,
    the blink lift the remaining ones.
    """
    if (blink < 0).any() or (blink > 1).any():
        raise ValueError("blink scalar must lie in [0, 1]")
    a = frequency_encode(audio[..., None], net.cfg.n_freqs_audio)
    e = frequency_encode(blink[..., None], net.cfg.n_freqs_blink)
    D = net.mlp(torch.cat([a, e], dim=-1))
    return ConditionVector(a, e, D)


def softmax_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, scale: float,
                      mask: Optional[torch.Tensor] = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Pool values along each ray with softmax(scale * <q, k_i>) and add the pool back to every v_i.

    q: (R, d), k: (R, N, d), v: (R, N, dv), mask: (R, N) bool of samples taking part.
    Returns (attended (R, N, dv), alpha (R, N)).
    """
    if k.shape[1] == 0:
        raise ValueError("attention over a ray with no samples")
    logits = scale * torch.einsum("rd,rnd->rn", q, k)
    if mask is not None:
        if not mask.any(dim=1).all():
            raise ValueError("attention over a ray with no samples")
        logits = logits.masked_fill(~mask, float("-inf"))
    alpha = torch.softmax(logits, dim=-1)
    g = torch.einsum("rn,rnd->rd", alpha, v)
    return v + g[:, None, :], alpha


class RadianceBranch(nn.Module):
    """One conditional field producing per-sample density and color."""

    def __init__(self, enc_cfg: EncoderConfig, cfg: FieldConfig, box_lo, box_hi,
                 generator=None, dtype=torch.float32, use_attention: bool = True):
        super().__init__()
        self.cfg = cfg
        self.use_attention = use_attention
        self.register_buffer("box_lo", torch.as_tensor(box_lo, dtype=dtype).clone())
        self.register_buffer("box_hi", torch.as_tensor(box_hi, dtype=dtype).clone())
        self.encoder = TriplaneHashEncoder(enc_cfg, generator, dtype)
        self.feat_mlp = mlp([self.encoder.out_dim + cfg.cond_width, cfg.feat_hidden, cfg.d_v], generator, dtype)
        self.W_q = nn.Linear(2 * cfg.n_freqs_audio, cfg.d_attn, bias=False, dtype=dtype)
        self.W_k = nn.Linear(3, cfg.d_attn, bias=False, dtype=dtype)
        self.W_v = nn.Linear(cfg.d_v, cfg.d_v, bias=False, dtype=dtype)
        for lin in (self.W_q, self.W_k, self.W_v):
            _kaiming_uniform(lin.weight, generator)
        self.density_mlp = mlp([cfg.d_v] + [cfg.density_hidden] * cfg.density_layers + [1 + cfg.geo_feat_dim],
                               generator, dtype)
        n_dir = 3 * 2 * cfg.n_freqs_dir
        self.color_mlp = mlp([cfg.geo_feat_dim + n_dir] + [cfg.color_hidden] * cfg.color_layers + [3],
                             generator, dtype)

    @property
    def attention_scale(self) -> float:
        s = self.cfg.attention_scale
        return 1.0 / math.sqrt(self.cfg.d_attn) if s is None else s

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.box_lo) / (self.box_hi - self.box_lo)

    def inside(self, x: torch.Tensor) -> torch.Tensor:
        return ((x >= self.box_lo) & (x <= self.box_hi)).all(dim=-1)

    def point_features(self, xn: torch.Tensor, D: torch.Tensor) -> torch.Tensor:
        """x_feat = MLP(triplane(x) ++ D) for box-normalized points xn (P, 3) and D (P, cw)."""
        return self.feat_mlp(torch.cat([self.encoder(xn), D], dim=-1))

    def attend(self, a: torch.Tensor, xn: torch.Tensor, x_feat: torch.Tensor,
               mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """a: (R, A) lifted audio; xn: (R, N, 3); x_feat: (R, N, dv) -> attended (R, N, dv)."""
        v = self.W_v(x_feat)
        if not self.use_attention:
            return v
        q = self.W_q(a)
        k = self.W_k(xn)
        attended, _ = softmax_attention(q, k, v, self.attention_scale, mask)
        return attended

    def density_color(self, attended: torch.Tensor, d_view: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """attended (..., dv), unit directions (..., 3) -> sigma (...), color (..., 3)."""
        h = self.density_mlp(attended)
        pre = h[..., 0] + self.cfg.density_bias
        if self.cfg.density_activation == "softplus":
            sigma = F.softplus(pre)
        else:
            sigma = torch.exp(pre)
        geo = h[..., 1:]
        color = torch.sigmoid(self.color_mlp(torch.cat([geo, frequency_encode(d_view, self.cfg.n_freqs_dir)], -1)))
        return sigma, color

    def forward(self, x: torch.Tensor, d: torch.Tensor, a: torch.Tensor, D: torch.Tensor,
                mask: Optional[torch.Tensor] = None) -> tuple[torch.Tensor, torch.Tensor]:
        """x: (R, N, 3) world points; d: (R, 3); a: (R, A); D: (R, cw).

        Returns sigma (R, N) and color (R, N, 3); masked-out samples get sigma 0.
        """
        R, N, _ = x.shape
        xn = self.normalize(x).clamp(0.0, 1.0)
        Dn = D[:, None, :].expand(R, N, D.shape[-1])
        x_feat = self.point_features(xn.reshape(-1, 3), Dn.reshape(R * N, -1)).reshape(R, N, -1)
        attended = self.attend(a, xn, x_feat, mask)
        dn = d[:, None, :].expand(R, N, 3)
        sigma, color = self.density_color(attended, dn)
        if mask is not None:
            sigma = sigma * mask.to(sigma.dtype)
        return sigma, color


def mouth_encoder_config(enc: EncoderConfig, cfg: FieldConfig) -> EncoderConfig:
    return replace(enc, n_levels=cfg.mouth_encoder_levels, log2_table_size=cfg.mouth_log2_table_size)


class DTNeRF(nn.Module):
    """Condition network plus mouth (branch 1) and face (branch 2) fields."""

    def __init__(self, enc_cfg: EncoderConfig, cfg: FieldConfig, mouth_box, seed: int = 0,
                 dtype=torch.float32, use_attention: bool = True):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.cfg = cfg
        self.cond = ConditionNet(cfg, gen, dtype)
        lo, hi = mouth_box
        self.mouth = RadianceBranch(mouth_encoder_config(enc_cfg, cfg), cfg, lo, hi, gen, dtype, use_attention)
        self.face = RadianceBranch(enc_cfg, cfg, [0.0] * 3, [1.0] * 3, gen, dtype, use_attention)

    def branch_outputs(self, x: torch.Tensor, d: torch.Tensor, cond: ConditionVector,
                       use_mouth: bool = True) -> list[tuple[torch.Tensor, torch.Tensor]]:
        """Per-branch (sigma, color) at samples x (R, N, 3); order is [mouth, face] or [face]."""
        R, N, _ = x.shape
        a_face = cond.a if self.cfg.face_audio else torch.zeros_like(cond.a)
        face = self.face(x, d, a_face, cond.D)
        if not use_mouth:
            return [face]
        inside = self.mouth.inside(x)
        sigma1 = x.new_zeros(R, N)
        color1 = x.new_zeros(R, N, 3)
        rays = inside.any(dim=1).nonzero().squeeze(1)
        if rays.numel():
            s, c = self.mouth(x[rays], d[rays], cond.a[rays], cond.D[rays], inside[rays])
            sigma1 = sigma1.index_put((rays,), s)
            color1 = color1.index_put((rays,), c)
        return [(sigma1, color1), face]

    def mouth_parameters(self):
        return self.mouth.parameters()
