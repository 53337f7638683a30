import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dtnerf.config import EncoderConfig, FieldConfig
from dtnerf.diffcore import backward, param_tensors
from dtnerf.field import ConditionNet, DTNeRF, RadianceBranch, condition_fuse, softmax_attention

F64 = torch.float64
ENC = EncoderConfig(n_levels=3, features_per_level=2, base_resolution=4, per_level_scale=2.0, log2_table_size=6,
                    init_scale=0.5)
CFG = FieldConfig(n_freqs_audio=2, n_freqs_blink=1, n_freqs_dir=2, cond_width=4, cond_hidden=8, feat_hidden=8,
                  d_attn=4, d_v=6, density_hidden=8, density_layers=2, geo_feat_dim=3, color_hidden=8,
                  color_layers=1, mouth_encoder_levels=2, mouth_log2_table_size=5)


def _np_mlp(seq: torch.nn.Sequential, x: np.ndarray) -> np.ndarray:
    lins = [m for m in seq if isinstance(m, torch.nn.Linear)]
    for i, lin in enumerate(lins):
        x = x @ lin.weight.detach().numpy().T + lin.bias.detach().numpy()
        if i < len(lins) - 1:
            x = np.maximum(x, 0.0)
    return x


def _lift(s: float, n: int) -> list[float]:
    out = []
    for k in range(n):
        out += [math.sin(2 ** k * math.pi * s), math.cos(2 ** k * math.pi * s)]
    return out


def _spread_biases(module, seed=0):
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("bias"):
                p.copy_(torch.tensor(rng.normal(size=p.shape) * 0.3))


# ---- condition


def test_condition_at_zero_matches_numpy_forward():
    net = ConditionNet(CFG, torch.Generator().manual_seed(0), F64)
    _spread_biases(net)
    D = net(torch.zeros(1, dtype=F64), torch.zeros(1, dtype=F64)).D[0].detach().numpy()
    lift = np.array(_lift(0.0, CFG.n_freqs_audio) + _lift(0.0, CFG.n_freqs_blink))
    assert np.array_equal(lift[0::2], np.zeros(3)) and np.array_equal(lift[1::2], np.ones(3))
    np.testing.assert_allclose(D, _np_mlp(net.mlp, lift), rtol=0, atol=1e-14)


def test_condition_is_pure():
    net = ConditionNet(CFG, torch.Generator().manual_seed(0), F64)
    c = net(torch.tensor([0.3, 0.3], dtype=F64), torch.tensor([0.1, 0.1], dtype=F64))
    assert torch.equal(c.D[0], c.D[1])


def test_blink_enters_only_through_blink_channels():
    net = ConditionNet(CFG, torch.Generator().manual_seed(0), F64)
    c1 = net(torch.tensor([0.4], dtype=F64), torch.tensor([0.0], dtype=F64))
    c2 = net(torch.tensor([0.4], dtype=F64), torch.tensor([0.7], dtype=F64))
    assert torch.equal(c1.a, c2.a)
    assert not torch.equal(c1.e, c2.e)
    # zeroing the blink columns of the first layer removes the dependence
    with torch.no_grad():
        net.mlp[0].weight[:, 2 * CFG.n_freqs_audio:] = 0
    assert torch.equal(net(torch.tensor([0.4], dtype=F64), torch.tensor([0.0], dtype=F64)).D,
                       net(torch.tensor([0.4], dtype=F64), torch.tensor([0.7], dtype=F64)).D)


def test_blink_out_of_range_raises():
    net = ConditionNet(CFG)
    with pytest.raises(ValueError):
        condition_fuse(net, torch.zeros(1), torch.tensor([1.5]))


# ---- point features


def _branch(seed=0, attention=True):
    br = RadianceBranch(ENC, CFG, [0.0] * 3, [1.0] * 3, torch.Generator().manual_seed(seed), F64, attention)
    _spread_biases(br, seed)
    return br


def test_zero_tables_and_condition_give_bias_image():
    br = _branch()
    with torch.no_grad():
        for t in br.encoder.tables.values():
            t.zero_()
    out = br.point_features(torch.rand(5, 3, dtype=F64), torch.zeros(5, CFG.cond_width, dtype=F64))
    expected = _np_mlp(br.feat_mlp, np.zeros(br.encoder.out_dim + CFG.cond_width))
    np.testing.assert_allclose(out.detach().numpy(), np.tile(expected, (5, 1)), rtol=0, atol=1e-15)


def test_point_features_golden_and_conditioning():
    br = _branch()
    x = torch.tensor([[0.5, 0.5, 0.5]], dtype=F64)
    D = torch.tensor([[0.2, -0.1, 0.4, 0.0]], dtype=F64)
    got = br.point_features(x, D)[0].detach().numpy()
    feat = br.encoder(x)[0].detach().numpy()
    np.testing.assert_allclose(got, _np_mlp(br.feat_mlp, np.concatenate([feat, D[0].numpy()])), rtol=0, atol=1e-14)
    assert not torch.equal(br.point_features(x, D), br.point_features(x, D + 0.5))


# ---- attention


def test_singleton_attention_doubles_value():
    v = torch.randn(1, 1, 5, dtype=F64)
    out, alpha = softmax_attention(torch.randn(1, 3, dtype=F64), torch.randn(1, 1, 3, dtype=F64), v, 1.0)
    assert torch.equal(alpha, torch.ones(1, 1, dtype=F64))
    assert torch.allclose(out, 2 * v, rtol=0, atol=1e-15)


def test_orthogonal_query_gives_uniform_weights():
    q = torch.tensor([[1.0, 0.0]], dtype=F64)
    k = torch.tensor([[[0.0, 2.0], [0.0, -1.0], [0.0, 5.0]]], dtype=F64)
    _, alpha = softmax_attention(q, k, torch.randn(1, 3, 4, dtype=F64), 1.0)
    assert torch.allclose(alpha, torch.full((1, 3), 1 / 3, dtype=F64), rtol=0, atol=1e-15)


def test_two_sample_attention_golden():
    rng = np.random.default_rng(5)
    a = rng.normal(size=4)
    Wq, Wk, Wv = rng.normal(size=(3, 4)), rng.normal(size=(3, 3)), rng.normal(size=(2, 2))
    xs, feats = rng.uniform(size=(2, 3)), rng.normal(size=(2, 2))
    scale = 1 / math.sqrt(3)
    # direct evaluation: q.k logits, softmax, pooled value added to every v_i
    q = Wq @ a
    ks = [Wk @ x for x in xs]
    vs = [Wv @ f for f in feats]
    logits = [scale * float(q @ k) for k in ks]
    m = max(logits)
    w = [math.exp(l - m) for l in logits]
    alpha = [wi / sum(w) for wi in w]
    g = alpha[0] * vs[0] + alpha[1] * vs[1]
    expected = np.stack([vs[0] + g, vs[1] + g])
    t = lambda z: torch.tensor(z, dtype=F64)
    out, al = softmax_attention(t(q)[None], t(np.stack(ks))[None], t(np.stack(vs))[None], scale)
    np.testing.assert_allclose(out[0].numpy(), expected, rtol=0, atol=1e-14)
    np.testing.assert_allclose(al[0].numpy(), alpha, rtol=0, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 12), st.integers(0, 10 ** 6))
def test_attention_weights_and_equivariance(n, seed):
    g = torch.Generator().manual_seed(seed)
    q = torch.randn(2, 3, generator=g, dtype=F64)
    k = torch.randn(2, n, 3, generator=g, dtype=F64) * 3
    v = torch.randn(2, n, 4, generator=g, dtype=F64)
    out, alpha = softmax_attention(q, k, v, 0.7)
    assert (alpha >= 0).all()
    assert torch.allclose(alpha.sum(-1), torch.ones(2, dtype=F64), atol=1e-6)
    perm = torch.randperm(n, generator=g)
    out_p, _ = softmax_attention(q, k[:, perm], v[:, perm], 0.7)
    assert torch.allclose(out_p, out[:, perm], rtol=0, atol=1e-12)


def test_attention_masks_and_rejects_empty_rays():
    q = torch.randn(1, 2, dtype=F64)
    k = torch.randn(1, 3, 2, dtype=F64)
    v = torch.randn(1, 3, 2, dtype=F64)
    _, alpha = softmax_attention(q, k, v, 1.0, torch.tensor([[True, False, True]]))
    assert alpha[0, 1] == 0
    with pytest.raises(ValueError):
        softmax_attention(q, k, v, 1.0, torch.zeros(1, 3, dtype=torch.bool))
    with pytest.raises(ValueError):
        softmax_attention(q, k[:, :0], v[:, :0], 1.0)


def test_zero_value_weights_remove_point_information():
    br = _branch()
    with torch.no_grad():
        br.W_v.weight.zero_()
    x = torch.rand(2, 5, 3, dtype=F64)
    a = torch.randn(2, 4, dtype=F64)
    xf = torch.randn(2, 5, CFG.d_v, dtype=F64)
    att = br.attend(a, x, xf)
    assert torch.count_nonzero(att) == 0
    d = torch.nn.functional.normalize(torch.randn(2, 5, 3, dtype=F64), dim=-1)
    s1, c1 = br(x, d[:, 0], a, torch.randn(2, CFG.cond_width, dtype=F64))
    s2, c2 = br(torch.rand(2, 5, 3, dtype=F64), d[:, 0], a, torch.randn(2, CFG.cond_width, dtype=F64))
    assert torch.equal(s1, s2)


def test_no_attention_passes_values_through():
    br = _branch(attention=False)
    xf = torch.randn(2, 5, CFG.d_v, dtype=F64)
    assert torch.equal(br.attend(torch.randn(2, 4, dtype=F64), torch.rand(2, 5, 3, dtype=F64), xf), br.W_v(xf))


# ---- heads


def test_density_color_golden():
    br = _branch()
    att = torch.tensor([[0.3, -0.2, 0.5, 0.1, -0.4, 0.25]], dtype=F64)
    d = torch.tensor([[0.0, 0.0, 1.0]], dtype=F64)
    sigma, color = br.density_color(att, d)
    h = _np_mlp(br.density_mlp, att[0].numpy())
    exp_sigma = math.log1p(math.exp(h[0]))
    dir_lift = sum((_lift(c, CFG.n_freqs_dir) for c in (0.0, 0.0, 1.0)), [])
    pre = _np_mlp(br.color_mlp, np.concatenate([h[1:], dir_lift]))
    exp_color = 1 / (1 + np.exp(-pre))
    assert sigma.item() == pytest.approx(exp_sigma, rel=1e-13)
    np.testing.assert_allclose(color[0].detach().numpy(), exp_color, rtol=1e-13)


def test_density_tail_and_neutral_color():
    br = _branch()
    with torch.no_grad():
        last = br.density_mlp[-1]
        last.weight.zero_()
        last.bias.zero_()
        last.bias[0] = -800.0
        br.color_mlp[-1].weight.zero_()
        br.color_mlp[-1].bias.zero_()
    sigma, color = br.density_color(torch.randn(4, CFG.d_v, dtype=F64), torch.tensor([[0, 0, 1.0]] * 4, dtype=F64))
    assert (sigma < 1e-300).all()
    assert torch.equal(color, torch.full((4, 3), 0.5, dtype=F64))


@settings(max_examples=30, deadline=None)
@given(st.floats(-50, 50), st.integers(0, 1000))
def test_output_ranges(scale, seed):
    br = _branch(seed % 7)
    g = torch.Generator().manual_seed(seed)
    att = torch.randn(8, CFG.d_v, generator=g, dtype=F64) * scale
    d = torch.nn.functional.normalize(torch.randn(8, 3, generator=g, dtype=F64), dim=-1)
    sigma, color = br.density_color(att, d)
    assert (sigma >= 0).all() and ((color >= 0) & (color <= 1)).all()


# ---- full model


def _model():
    return DTNeRF(ENC, CFG, ([0.4, 0.3, 0.6], [0.6, 0.45, 0.85]), seed=1, dtype=F64)


def test_mouth_density_is_zero_outside_its_box():
    model = _model()
    cond = model.cond(torch.tensor([0.5], dtype=F64), torch.tensor([0.2], dtype=F64))
    x = torch.tensor([[[0.1, 0.1, 0.1], [0.5, 0.4, 0.7], [0.9, 0.9, 0.2]]], dtype=F64)
    (s1, _), _ = model.branch_outputs(x, torch.tensor([[0, 0, -1.0]], dtype=F64), cond)
    assert s1[0, 0] == 0 and s1[0, 2] == 0 and s1[0, 1] > 0


def test_mouth_branch_isolated_from_rays_missing_its_box():
    model = _model()
    params = param_tensors(model)
    cond = model.cond(torch.tensor([0.5], dtype=F64), torch.tensor([0.2], dtype=F64))
    x = torch.rand(1, 6, 3, dtype=F64) * 0.3   # far from the mouth box
    outs = model.branch_outputs(x, torch.tensor([[0, 0, -1.0]], dtype=F64), cond)
    loss = sum(s.sum() + c.sum() for s, c in outs)
    backward(loss, params)
    for p in params:
        if p.name.startswith("mouth."):
            assert torch.count_nonzero(p.grad) == 0, p.name
