import numpy as np
import pytest
import torch

from oracles import gradient_check, loss_closure, randomize_zero_init
from vctransfer.errors import ConfigError, InvalidRangeError, ShapeMismatchError
from vctransfer.net import ModelConfig, PatchEmbed, flow_strides, init_params, patchify, unpatchify, zero_init_names
from vctransfer.data import to_model_range


def test_patchify_token_count_and_round_trip():
    x = torch.randn(2, 4, 16, 16, 3)
    tok = patchify(x, 4)
    assert tok.shape == (2, 64, 48)
    assert torch.equal(unpatchify(tok, 4, 16, 16, 4), x)
    # token 1 is the patch right of the top-left one
    assert torch.equal(tok[0, 1], x[0, 0, :4, 4:8].reshape(-1))
    with pytest.raises(InvalidRangeError):
        patchify(torch.zeros(1, 1, 15, 16, 3), 4)


def test_identity_patch_embed_round_trips():
    pe = PatchEmbed(48, 48, 4)
    with torch.no_grad():
        pe.proj.weight.copy_(torch.eye(48))
        pe.proj.bias.zero_()
    x = torch.randn(1, 2, 8, 8, 3)
    assert torch.equal(unpatchify(pe(x), 2, 8, 8, 4), x)
    with torch.no_grad():
        assert not pe(torch.zeros(1, 2, 8, 8, 3)).any()


def test_flow_strides():
    for p in (1, 2, 4, 8, 16):
        s = flow_strides(p)
        assert len(s) == 4 and int(np.prod(s)) == p
    for bad in (3, 32, 0):
        with pytest.raises(InvalidRangeError):
            flow_strides(bad)


def test_config_validation():
    with pytest.raises(InvalidRangeError):
        ModelConfig(height=30)
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"dim": 64, "width_mult": 2})


def test_text_embedding(tiny_cfg):
    m = init_params(ModelConfig(**{**tiny_cfg.to_dict(), "text_buckets": 4096}))
    with torch.no_grad():
        a, b, empty = m.embed_text(["red square moving", "red square moving", ""])
        assert torch.equal(a, b)
        assert torch.equal(empty, m.text.table.weight[0])
        words = [f"w{i}" for i in range(1000)]
        emb = m.embed_text(words)
    assert torch.unique(emb, dim=0).shape[0] == 1000


def test_flow_encoder_grid(tiny_cfg):
    m = init_params(tiny_cfg)
    with torch.no_grad():
        z = m.flow_encoder(torch.randn(2, tiny_cfg.frames - 1, 16, 16, 2))
        assert z.shape == (2, tiny_cfg.num_tokens, tiny_cfg.dim)
        assert not m.flow_encoder(torch.zeros(1, tiny_cfg.frames - 1, 16, 16, 2)).any()


def _inputs(cfg, B=2, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    r = lambda *s: torch.randn(*s, generator=g, dtype=dtype)
    f, H, W, C = cfg.frames, cfg.height, cfg.width, cfg.channels
    return (r(B, f, H, W, C), torch.tensor([5, 700][:B]), r(B, H, W, C), r(B, H, W, C), r(B, f - 1, H, W, 2) * 3)


def test_init_is_seeded_and_zero_where_required(tiny_cfg):
    a, b, c = init_params(tiny_cfg, 1), init_params(tiny_cfg, 1), init_params(tiny_cfg, 2)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert any(not torch.equal(sa[k], sc[k]) for k in sa)
    names = zero_init_names(a)
    assert any(n.startswith("zconv.") for n in names) and any(n.startswith("flow_inject.") for n in names)
    params = dict(a.named_parameters())
    assert all(not params[n].any() for n in names)


@pytest.mark.parametrize("toggles", [dict(), dict(early_motion=True), dict(dual_stream=False)])
def test_forward_shape_and_fresh_invariance(tiny_cfg, toggles):
    cfg = ModelConfig(**{**tiny_cfg.to_dict(), **toggles})
    m = init_params(cfg)
    z, t, fg, bg, flow = _inputs(cfg)
    txt = m.embed_text(["a", "b"])
    with torch.no_grad():
        out = m(z, t, txt, fg, bg, flow)
        assert out.shape == z.shape and torch.isfinite(out).all()
        assert torch.equal(out, m(z, t, txt, fg, bg, flow * -2 + 1))
        if cfg.dual_stream:
            assert torch.equal(out, m(z, t, txt, fg * 0.5 - 1, bg, flow))
        assert not torch.equal(out, m(z, t, txt, fg, bg * 0.5, flow))


def test_forward_rejects_bad_shapes(tiny_cfg):
    m = init_params(tiny_cfg)
    z, t, fg, bg, flow = _inputs(tiny_cfg)
    txt = m.embed_text(["a", "b"])
    with pytest.raises(ShapeMismatchError):
        m(z, t, txt, fg[:, :8], bg, flow)
    with pytest.raises(ShapeMismatchError):
        m(z, t, txt, fg, bg, flow[:, :1])
    with pytest.raises(ShapeMismatchError):
        m(z[:, :2], t, txt, fg, bg, flow)


def test_one_step_makes_flow_matter(tiny_cfg):
    m = init_params(tiny_cfg)
    z, t, fg, bg, flow = _inputs(tiny_cfg)
    txt = m.embed_text(["a", "b"])
    opt = torch.optim.SGD(m.parameters(), lr=0.1)
    ((m(z, t, txt, fg, bg, flow) - z) ** 2).mean().backward()
    zgrads = [p.grad for n, p in m.named_parameters() if n.startswith("zconv.") and n.endswith("weight")]
    assert all(g is not None and g.abs().sum() > 0 for g in zgrads)
    opt.step()
    with torch.no_grad():
        txt = m.embed_text(["a", "b"])
        assert not torch.equal(m(z, t, txt, fg, bg, flow), m(z, t, txt, fg, bg, -flow))
        assert not torch.equal(m(z, t, txt, fg, bg, flow), m(z, t, txt, -fg, bg, flow))


@pytest.mark.parametrize("toggles", [dict(), dict(early_motion=True), dict(dual_stream=False)])
def test_gradient_check_tiny(tiny_cfg, tiny_clip, toggles):
    cfg = ModelConfig(**{**tiny_cfg.to_dict(), **toggles})
    m = init_params(cfg, dtype=torch.float64)
    randomize_zero_init(m)
    results, covered, groups = gradient_check(m, loss_closure(m, tiny_clip), n_params=20)
    assert covered == groups
    worst = max(r[-1] for r in results)
    assert worst < 1e-3, results


def test_gray_fill_is_zero_input():
    assert to_model_range(np.array([127.5]))[0] == 0
