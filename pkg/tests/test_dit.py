import numpy as np
import pytest
import torch

from d2m.conditioning import CondBatch
from d2m.dit import DiT, DiTConfig, adaln_modulate, layer_norm, num_params, param_group

from dit_reference import ln, reference_forward, silu

SMALL = DiTConfig(depth=2, d_model=16, heads=2, c_latent=4, d_txt=8, d_vis=6, n_prepend=1, ff_mult=2,
                  concat_kernel=3, max_visual_frames=16)


def randomize(model, seed=0, scale=0.3):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return model


def numpy_state(model):
    return {k: v.detach().numpy().astype(np.float64) for k, v in model.state_dict().items()}


def make_cond(rng, B, cfg, Fr, text_null=False, visual_null=False, M=3):
    text = torch.as_tensor(rng.standard_normal((B, M, cfg.d_txt)))
    return CondBatch(text, torch.ones(B, M, dtype=torch.bool), torch.full((B,), text_null),
                     torch.as_tensor(rng.standard_normal((B, Fr, cfg.d_vis))), torch.full((B,), visual_null))


@pytest.mark.parametrize("n_prepend,text_null,visual_null", [(1, False, False), (2, True, False), (1, False, True)])
def test_forward_matches_numpy_reference(rng, n_prepend, text_null, visual_null):
    cfg = DiTConfig(**{**SMALL.to_dict(), "n_prepend": n_prepend})
    model = randomize(DiT.build(cfg, dtype=torch.float64))
    L, Fr = 5, 3
    x = torch.as_tensor(rng.standard_normal((1, cfg.c_latent, L)))
    cond = make_cond(rng, 1, cfg, Fr, text_null, visual_null)
    out = model(x, torch.tensor([0.37], dtype=torch.float64), cond)[0].detach().numpy()
    ref = reference_forward(numpy_state(model), cfg, x[0].numpy(), 0.37,
                            None if text_null else cond.text[0].numpy(),
                            None if visual_null else cond.visual[0].numpy())
    np.testing.assert_allclose(out, ref, rtol=1e-9, atol=1e-9)


def test_single_frame_single_block_scalar_oracle():
    # hand-set weights: only input projection, one ff layer and output projection are live
    cfg = DiTConfig(depth=1, d_model=2, heads=1, c_latent=1, d_txt=2, d_vis=2, ff_mult=1, visual=False)
    model = DiT.build(cfg, dtype=torch.float64)
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
        model.in_proj.weight.copy_(torch.tensor([[1.0], [-1.0]]))
        model.blocks[0].ff[0].weight.copy_(torch.tensor([[1.0, 0.0], [0.0, 0.0]]))
        model.blocks[0].ff[2].weight.copy_(torch.tensor([[2.0, 0.0], [0.0, 0.0]]))
        model.out_proj.weight.copy_(torch.tensor([[1.0, 0.0]]))
    x, t = 0.7, 0.0
    # frame token: [x, -x] + posemb(0) = [x, -x] + [sin 0, cos 0] = [x, 1 - x]
    h = np.array([x, 1 - x])
    # attention/cross-attention outputs are zero (zero value/out weights)
    a = ln(h)
    hid = 0.5 * a[0] * (1 + __import__("math").erf(a[0] / np.sqrt(2)))
    h = h + np.array([2 * hid, 0.0])
    expected = ln(h)[0]
    cond = CondBatch(torch.zeros(1, 1, 2, dtype=torch.float64), torch.ones(1, 1, dtype=torch.bool),
                     torch.tensor([True]), torch.zeros(1, 1, 2, dtype=torch.float64), torch.tensor([True]))
    out = model(torch.tensor([[[x]]], dtype=torch.float64), torch.tensor([t], dtype=torch.float64), cond)
    assert out.shape == (1, 1, 1)
    assert abs(out.item() - expected) < 1e-12


def test_shape_contract(rng):
    model = DiT.build(SMALL)
    for L in (4, 8):
        x = torch.randn(2, SMALL.c_latent, L)
        cond = make_cond(rng, 2, SMALL, 3)
        cond = CondBatch(cond.text.float(), cond.text_mask, cond.text_null, cond.visual.float(), cond.visual_null)
        assert model(x, torch.rand(2), cond).shape == (2, SMALL.c_latent, L)


def test_adaln_zero_generator_is_plain_layernorm(rng):
    h = torch.as_tensor(rng.standard_normal((2, 4, 6)))
    m = torch.as_tensor(rng.standard_normal((2, 3, 6)))
    out = adaln_modulate(h, m, torch.zeros(12, 6, dtype=h.dtype), torch.zeros(12, dtype=h.dtype), 1)
    assert torch.equal(out, layer_norm(h))


def test_adaln_matches_per_row_oracle(rng):
    h = rng.standard_normal((3, 5))
    m = rng.standard_normal((2, 5))
    W, b = rng.standard_normal((10, 5)), rng.standard_normal(10)
    out = adaln_modulate(torch.as_tensor(h), torch.as_tensor(m), torch.as_tensor(W), torch.as_tensor(b), 1).numpy()
    np.testing.assert_allclose(out[0], ln(h[0]), atol=1e-12)
    for i in range(2):
        g = W @ silu(m[i]) + b
        np.testing.assert_allclose(out[1 + i], ln(h[1 + i]) * (1 + g[:5]) + g[5:], atol=1e-12)


def test_adaln_constant_source_shares_modulation(rng):
    h = torch.as_tensor(rng.standard_normal((1, 4, 5)))
    m = torch.as_tensor(np.tile(rng.standard_normal(5), (3, 1)))[None]
    W, b = torch.as_tensor(rng.standard_normal((10, 5))), torch.as_tensor(rng.standard_normal(10))
    out = adaln_modulate(h, m, W, b, 1)
    x = layer_norm(h)
    g = torch.nn.functional.linear(torch.nn.functional.silu(m[0, 0]), W, b)
    torch.testing.assert_close(out[0, 1:], x[0, 1:] * (1 + g[:5]) + g[5:])


def test_prepended_tokens_ignore_modulation(rng):
    h = torch.as_tensor(rng.standard_normal((1, 6, 5)))
    W, b = torch.as_tensor(rng.standard_normal((10, 5))), torch.as_tensor(rng.standard_normal(10))
    for _ in range(5):
        m = torch.as_tensor(rng.standard_normal((1, 4, 5)))
        out = adaln_modulate(h, m, W, b, 2)
        assert torch.equal(out[0, :2], layer_norm(h)[0, :2])


def test_adaln_length_mismatch_is_hard_error(rng):
    h = torch.zeros(1, 4, 5)
    with pytest.raises(RuntimeError):
        adaln_modulate(h, torch.zeros(1, 4, 5), torch.zeros(10, 5), torch.zeros(10), 1)


def test_visual_frame_only_changes_own_column_without_mixing(rng):
    cfg = DiTConfig(**{**SMALL.to_dict(), "concat_kernel": 1})
    model = randomize(DiT.build(cfg, dtype=torch.float64))
    L = 6
    x = torch.as_tensor(rng.standard_normal((1, cfg.c_latent, L)))
    cond = make_cond(rng, 1, cfg, L, text_null=True)
    t = torch.tensor([0.5], dtype=torch.float64)
    base = model(x, t, cond, mix_tokens=False)
    for j in range(L):
        vis = cond.visual.clone()
        vis[0, j] += torch.as_tensor(rng.standard_normal(cfg.d_vis))
        out = model(x, t, CondBatch(cond.text, cond.text_mask, cond.text_null, vis, cond.visual_null), mix_tokens=False)
        changed = (out - base).abs().amax(dim=1)[0] > 1e-12
        assert changed.tolist() == [i == j for i in range(L)]


def test_param_groups():
    model = DiT.build(SMALL)
    groups = {n: param_group(n) for n, _ in model.named_parameters()}
    assert groups["visual.concat.weight"] == "visual"
    assert groups["blocks.0.adaln.weight"] == "visual"
    assert groups["blocks.0.attn.qkv.weight"] == "base"
    base = DiT.build(SMALL.base())
    assert {n for n, g in groups.items() if g == "base"} == {n for n, _ in base.named_parameters()}


def test_toy_model_under_one_million_params():
    from d2m.experiment import TOY_DIT
    assert num_params(DiT.build(TOY_DIT)) <= 1_000_000
