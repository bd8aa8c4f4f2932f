import numpy as np
import pytest
import torch

from conftest import TINY
from vctransfer.errors import ConfigError, CorruptFileError, FormatError
from vctransfer.trainer import (TOGGLES, TrainConfig, apply_toggles, draw_timesteps, load_checkpoint, load_model,
                                new_state, read_loss_csv, save_checkpoint, save_model, train, write_loss_csv)


def _cfg(**kw):
    base = dict(phase="finetune", steps=6, batch_size=2, seed=0, model=dict(TINY))
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation():
    with pytest.raises(ConfigError):
        _cfg(toggles=["no_such_toggle"])
    with pytest.raises(ConfigError):
        _cfg(phase="pretrain", toggles=["no_pretrain_init"])
    with pytest.raises(ConfigError):
        _cfg(freeze_foreground=True, toggles=["no_dual_stream"])
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"phase": "finetune", "learning_rate": 1.0})
    with pytest.raises(ConfigError):
        _cfg(masks={"cover": 0.5})
    with pytest.raises(ConfigError):
        _cfg(phase="warmup")


def test_toggles_flip_one_switch_each():
    base = apply_toggles(_cfg())
    expect = {
        "early_motion_injection": ("early_motion", True),
        "no_flow_noise": ("flow_sigma", 0.0),
        "no_dual_stream": ("dual_stream", False),
        "no_cop": ("cop", False),
        "no_pretrain_init": ("use_pretrain_init", False),
    }
    assert set(expect) == set(TOGGLES)
    for toggle, (field, value) in expect.items():
        w = apply_toggles(_cfg(toggles=[toggle]))
        diffs = {k for k in vars(base) if getattr(base, k) != getattr(w, k)}
        assert diffs == {field} and getattr(w, field) == value


def test_draw_timesteps_stratified_and_uniform():
    rng = np.random.default_rng(0)
    ts = draw_timesteps(rng, 4, 1000)
    assert sorted((t - 1) // 250 for t in ts) == [0, 1, 2, 3]
    all_t = np.array([t for _ in range(5000) for t in draw_timesteps(rng, 4, 1000)])
    assert all_t.min() >= 1 and all_t.max() <= 1000
    hist = np.bincount((all_t - 1) // 100, minlength=10)
    assert np.all(np.abs(hist / hist.mean() - 1) < 0.1)


def test_zero_lr_leaves_params(tiny_clip):
    cfg = _cfg(lr=0.0, steps=3)
    state = new_state(cfg)
    before = {n: p.detach().clone() for n, p in state.model.named_parameters()}
    train(cfg, [tiny_clip], state=state)
    assert all(torch.equal(before[n], p) for n, p in state.model.named_parameters())
    assert len(state.log) == 3


def test_first_step_moves_zero_init_projections(tiny_clip):
    cfg = _cfg(steps=1)
    seen = {}

    def grab(state):
        for n, p in state.model.named_parameters():
            if n.startswith("zconv.") and n.endswith(".weight"):
                seen[n] = p.detach().abs().sum().item()
    train(cfg, [tiny_clip], on_step=grab)
    assert seen and all(v > 0 for v in seen.values())


def test_freeze_foreground(tiny_clip):
    cfg = _cfg(steps=2, freeze_foreground=True)
    state = new_state(cfg)
    before = {n: p.detach().clone() for n, p in state.model.named_parameters()}
    train(cfg, [tiny_clip], state=state)
    for n, p in state.model.named_parameters():
        if n.startswith(("fg_embed.", "fg_blocks.")):
            assert torch.equal(before[n], p)
    assert not torch.equal(before["zconv.0.weight"], state.model.zconv[0].weight)


def test_determinism_and_csv(tiny_clip, tmp_path):
    a = train(_cfg(), [tiny_clip])
    b = train(_cfg(), [tiny_clip])
    write_loss_csv(a.log, tmp_path / "a.csv")
    write_loss_csv(b.log, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert read_loss_csv(tmp_path / "a.csv") == a.log


def test_resume_matches_uninterrupted(tiny_clip, tmp_path):
    cfg = _cfg(steps=6)
    full = train(cfg, [tiny_clip])
    half = train(cfg, [tiny_clip], until=3)
    save_checkpoint(half, cfg, tmp_path / "h.ckpt")
    resumed, cfg2 = load_checkpoint(tmp_path / "h.ckpt")
    assert cfg2 == cfg
    resumed = train(cfg2, [tiny_clip], state=resumed)
    assert resumed.log == full.log
    for (n, p), (_, q) in zip(full.model.named_parameters(), resumed.model.named_parameters()):
        assert torch.equal(p, q), n


def test_truncated_checkpoint_is_rejected(tiny_clip, tmp_path):
    cfg = _cfg(steps=1)
    st = train(cfg, [tiny_clip])
    p = tmp_path / "c.ckpt"
    save_checkpoint(st, cfg, p)
    raw = p.read_bytes()
    p.write_bytes(raw[: len(raw) - 100])
    with pytest.raises(CorruptFileError):
        load_checkpoint(p)


def test_pretrained_init_and_architecture_mismatch(tiny_clip, tmp_path):
    pre = train(_cfg(phase="pretrain", steps=2), [tiny_clip])
    save_model(pre.model, tmp_path / "pre.ckpt")
    ft = train(_cfg(steps=0), [tiny_clip], init=tmp_path / "pre.ckpt")
    for (n, p), (_, q) in zip(pre.model.named_parameters(), ft.model.named_parameters()):
        assert torch.equal(p, q), n
    scratch = train(_cfg(steps=0, toggles=["no_pretrain_init"]), [tiny_clip], init=tmp_path / "pre.ckpt")
    assert not torch.equal(scratch.model.zconv[0].weight, pre.model.zconv[0].weight)
    with pytest.raises(FormatError):
        train(_cfg(steps=0, model={**TINY, "dim": 64}), [tiny_clip], init=tmp_path / "pre.ckpt")
    m = load_model(tmp_path / "pre.ckpt")
    assert torch.equal(m.zconv[0].weight, pre.model.zconv[0].weight)


def test_empty_corpus():
    with pytest.raises(ConfigError):
        train(_cfg(), [])
