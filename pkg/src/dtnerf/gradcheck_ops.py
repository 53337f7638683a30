"""Small double-precision instances of every parameterized operation, for the gradient checker."""

from __future__ import annotations

import numpy as np
import torch

from .config import EncoderConfig, FieldConfig
from .diffcore import GradProblem, ParamTensor, param_tensors, register_gradcheck
from .encoders import HashGrid2D, TriplaneHashEncoder, frequency_encode, plane_encode
from .field import ConditionNet, DTNeRF, RadianceBranch, softmax_attention
from .renderer import RenderSettings, Rays, render_rays
from .trainer import coarse_loss, fine_loss

F64 = torch.float64

SMALL_ENCODER = EncoderConfig(n_levels=3, features_per_level=2, base_resolution=4, per_level_scale=2.0,
                              log2_table_size=5, init_scale=0.5)
SMALL_FIELD = FieldConfig(n_freqs_audio=2, n_freqs_blink=1, n_freqs_dir=2, cond_width=4, cond_hidden=8,
                          feat_hidden=8, d_attn=4, d_v=6, density_hidden=8, density_layers=2, geo_feat_dim=3,
                          color_hidden=8, color_layers=1, mouth_encoder_levels=3, mouth_log2_table_size=5)


def _t(rng: np.random.Generator, *shape, low=None, high=None) -> torch.Tensor:
    if low is None:
        return torch.tensor(rng.normal(size=shape), dtype=F64)
    return torch.tensor(rng.uniform(low, high, size=shape), dtype=F64)


def _gen(rng: np.random.Generator) -> torch.Generator:
    return torch.Generator().manual_seed(int(rng.integers(2 ** 31)))


def _randomize_biases(module: torch.nn.Module, rng: np.random.Generator) -> None:
    # zero-initialized biases leave ReLU preactivations symmetric; spread them out
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("bias"):
                p.copy_(_t(rng, *p.shape) * 0.3)


@register_gradcheck("encoders.plane_hash_table")
def _plane(rng):
    # one level dense, two hashed
    grid = HashGrid2D(EncoderConfig(n_levels=3, features_per_level=2, base_resolution=4, per_level_scale=2.0,
                                    log2_table_size=6, init_scale=0.5))
    table = ParamTensor("tables.XY", grid.init_table(_gen(rng), F64), "tables")
    uv = _t(rng, 40, 2, low=0.0, high=1.0)
    c = _t(rng, 40, grid.out_dim)
    return GradProblem([table], lambda: (plane_encode(table.param, grid, uv) * c).sum())


@register_gradcheck("encoders.triplane_concat")
def _triplane(rng):
    enc = TriplaneHashEncoder(SMALL_ENCODER, _gen(rng), F64)
    x = _t(rng, 40, 3, low=0.0, high=1.0)
    c = _t(rng, 40, enc.out_dim)
    return GradProblem(param_tensors(enc), lambda: (enc(x) * c).sum())


@register_gradcheck("field.condition_mlp")
def _condition(rng):
    cfg = FieldConfig(n_freqs_audio=3, n_freqs_blink=2, cond_width=6, cond_hidden=16)
    net = ConditionNet(cfg, _gen(rng), F64)
    _randomize_biases(net, rng)
    audio = _t(rng, 6, low=-1.0, high=1.0)
    blink = _t(rng, 6, low=0.0, high=1.0)
    c = _t(rng, 6, cfg.cond_width)
    return GradProblem(param_tensors(net), lambda: (net(audio, blink).D * c).sum())


def _branch(rng, use_attention=True) -> RadianceBranch:
    br = RadianceBranch(SMALL_ENCODER, SMALL_FIELD, [0.0] * 3, [1.0] * 3, _gen(rng), F64, use_attention)
    _randomize_biases(br, rng)
    return br


@register_gradcheck("field.point_features")
def _point_features(rng):
    br = _branch(rng)
    xn = _t(rng, 30, 3, low=0.0, high=1.0)
    D = _t(rng, 30, SMALL_FIELD.cond_width)
    c = _t(rng, 30, SMALL_FIELD.d_v)
    params = [p for p in param_tensors(br) if p.name.startswith(("encoder.", "feat_mlp."))]
    return GradProblem(params, lambda: (br.point_features(xn, D) * c).sum())


@register_gradcheck("field.attention_qkv")
def _attention(rng):
    d_k, d_v, n_a = 8, 10, 12
    Wq = ParamTensor("W_q", _t(rng, d_k, n_a))
    Wk = ParamTensor("W_k", _t(rng, d_k, 3))
    Wv = ParamTensor("W_v", _t(rng, d_v, d_v))
    a = _t(rng, 3, n_a)
    x = _t(rng, 3, 7, 3, low=0.0, high=1.0)
    feat = _t(rng, 3, 7, d_v)
    mask = torch.tensor(rng.uniform(size=(3, 7)) < 0.8)
    mask[:, 0] = True
    c = _t(rng, 3, 7, d_v)

    def loss():
        out, _ = softmax_attention(a @ Wq.param.T, x @ Wk.param.T, feat @ Wv.param.T, 0.5, mask)
        return (out * c).sum()
    return GradProblem([Wq, Wk, Wv], loss)


@register_gradcheck("field.density_color_heads")
def _heads(rng):
    br = _branch(rng)
    att = _t(rng, 25, SMALL_FIELD.d_v)
    d = torch.nn.functional.normalize(_t(rng, 25, 3), dim=-1)
    cs = _t(rng, 25)
    cc = _t(rng, 25, 3)
    params = [p for p in param_tensors(br) if p.name.startswith(("density_mlp.", "color_mlp."))]

    def loss():
        sigma, color = br.density_color(att, d)
        return (sigma * cs).sum() + (color * cc).sum()
    return GradProblem(params, loss)


def _small_model(rng) -> DTNeRF:
    model = DTNeRF(SMALL_ENCODER, SMALL_FIELD, ([0.3, 0.3, 0.5], [0.7, 0.6, 0.9]),
                   seed=int(rng.integers(2 ** 31)), dtype=F64)
    _randomize_biases(model, rng)
    return model


@register_gradcheck("field.mouth_density_tables")
def _mouth_density(rng):
    model = _small_model(rng)
    br = model.mouth
    x = _t(rng, 4, 9, 3, low=0.35, high=0.65) + torch.tensor([0.0, 0.0, 0.2], dtype=F64)
    d = torch.nn.functional.normalize(_t(rng, 4, 3), dim=-1)
    cond = model.cond(_t(rng, 4, low=-1, high=1), _t(rng, 4, low=0, high=1))
    a, D = cond.a.detach(), cond.D.detach()
    w = _t(rng, 4, 9)
    params = [p for p in param_tensors(br) if p.group == "tables"]
    return GradProblem(params, lambda: (br(x, d, a, D)[0] * w).sum())


@register_gradcheck("renderer.render_ray")
def _render(rng):
    model = _small_model(rng)
    n = 3
    origins = torch.tensor([[0.5, 0.45, 2.0]] * n, dtype=F64) + _t(rng, n, 3) * 0.05
    target = _t(rng, n, 3, low=0.35, high=0.65)
    dirs = torch.nn.functional.normalize(target - origins, dim=-1)
    rays = Rays(origins, dirs, torch.full((n,), 1.0, dtype=F64), torch.full((n,), 2.0, dtype=F64),
                torch.ones(n, dtype=torch.bool))
    settings = RenderSettings(n_samples=12, stratified=False)
    audio = _t(rng, n, low=-1, high=1)
    blink = _t(rng, n, low=0, high=1)
    c = _t(rng, n, 3)

    def loss():
        cond = model.cond(audio, blink)
        fn = lambda x, d, idx: model.branch_outputs(x, d, type(cond)(cond.a[idx], cond.e[idx], cond.D[idx]))
        return (render_rays(fn, rays, settings) * c).sum()
    return GradProblem(param_tensors(model), loss)


@register_gradcheck("trainer.coarse_loss")
def _coarse(rng):
    n = 80
    pred = ParamTensor("pred", _t(rng, n, 3, low=0, high=1))
    gt = _t(rng, n, 3, low=0, high=1)
    face = torch.tensor(rng.uniform(size=n) < 0.7)
    face[0] = True
    mouth = torch.tensor(rng.uniform(size=n) < 0.3)
    return GradProblem([pred], lambda: coarse_loss(pred.param, gt, face, mouth, 0.001))


@register_gradcheck("trainer.fine_loss")
def _fine(rng):
    pred = ParamTensor("pred", _t(rng, 12, 12, 3, low=0, high=1))
    gt = _t(rng, 12, 12, 3, low=0, high=1)
    return GradProblem([pred], lambda: fine_loss(pred.param, gt, 0.3, "pyramid_mse"))


@register_gradcheck("encoders.frequency_encode")
def _freq(rng):
    s = ParamTensor("s", _t(rng, 120, 2, low=-1, high=1))
    c = _t(rng, 120, 2 * 2 * 3)
    return GradProblem([s], lambda: (frequency_encode(s.param, 3) * c).sum())
