"""Two-phase training driver: random-block pretraining and mask-supervised finetuning."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np
import torch

from . import checkpoint as ckpt
from .cop import PromptHierarchy, StageConfig, staged_prompt_for_training, summarize
from .data import MaskSettings, VideoClip, make_batch
from .errors import ConfigError, FormatError
from .net import DecomposedDiT, ModelConfig, init_params
from .schedule import NoiseSchedule, denoising_loss, make_schedule

logger = logging.getLogger(__name__)

TOGGLES = ("early_motion_injection", "no_flow_noise", "no_dual_stream", "no_cop", "no_pretrain_init")
PHASE_LR = {"pretrain": 1e-3, "finetune": 5e-4}


@dataclass
class TrainConfig:
    phase: str = "finetune"
    steps: int = 500
    batch_size: int = 4
    lr: Optional[float] = None
    seed: int = 0
    cop: bool = True
    stages: dict[str, Any] = field(default_factory=dict)
    flow_sigma: float = 0.1
    cond_dropout: float = 0.1
    toggles: list[str] = field(default_factory=list)
    freeze_foreground: bool = False
    checkpoint_every: int = 0
    smoothing: float = 0.9
    model: dict[str, Any] = field(default_factory=dict)
    schedule: dict[str, Any] = field(default_factory=lambda: {"T": 1000, "beta_start": 1e-4,
                                                              "beta_end": 0.02, "kind": "linear"})
    masks: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.phase not in PHASE_LR:
            raise ConfigError(f"phase must be 'pretrain' or 'finetune', got {self.phase!r}")
        bad = [t for t in self.toggles if t not in TOGGLES]
        if bad:
            raise ConfigError(f"unknown toggles {bad}; known: {list(TOGGLES)}")
        if len(set(self.toggles)) != len(self.toggles):
            raise ConfigError("duplicate toggles")
        if self.phase == "pretrain" and "no_pretrain_init" in self.toggles:
            raise ConfigError("no_pretrain_init only applies to the finetune phase")
        if self.freeze_foreground and "no_dual_stream" in self.toggles:
            raise ConfigError("freeze_foreground needs the foreground branch, which no_dual_stream removes")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if self.lr is not None and self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if not 0.0 <= self.cond_dropout <= 1.0 or not 0.0 <= self.smoothing < 1.0:
            raise ConfigError("cond_dropout must be in [0, 1] and smoothing in [0, 1)")
        if self.flow_sigma < 0:
            raise ConfigError("flow_sigma must be >= 0")
        unknown = set(self.masks) - {f.name for f in fields(MaskSettings)}
        if unknown:
            raise ConfigError(f"unknown mask keys: {sorted(unknown)}")
        self.model_config()
        self.stage_config()

    @property
    def learning_rate(self) -> float:
        return PHASE_LR[self.phase] if self.lr is None else float(self.lr)

    def model_config(self) -> ModelConfig:
        base = ModelConfig.from_dict(self.model)
        return replace(base, dual_stream=base.dual_stream and "no_dual_stream" not in self.toggles,
                       early_motion=base.early_motion or "early_motion_injection" in self.toggles)

    def noise_schedule(self) -> NoiseSchedule:
        s = self.schedule
        return make_schedule(int(s["T"]), float(s["beta_start"]), float(s["beta_end"]), s.get("kind", "linear"))

    def stage_config(self) -> StageConfig:
        d = dict(self.stages)
        d.setdefault("T_train", int(self.schedule["T"]))
        try:
            return StageConfig(**d)
        except TypeError as exc:
            raise ConfigError(f"bad stage config: {exc}") from exc

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Wiring:
    """What the toggles resolve to: each toggle flips exactly one of these."""
    dual_stream: bool
    early_motion: bool
    flow_sigma: float
    cop: bool
    use_pretrain_init: bool


def apply_toggles(cfg: TrainConfig) -> Wiring:
    cfg.validate()
    on = set(cfg.toggles)
    mc = cfg.model_config()
    return Wiring(
        dual_stream=mc.dual_stream,
        early_motion=mc.early_motion,
        flow_sigma=0.0 if "no_flow_noise" in on else cfg.flow_sigma,
        cop=cfg.cop and "no_cop" not in on,
        use_pretrain_init="no_pretrain_init" not in on,
    )


@dataclass
class TrainState:
    model: DecomposedDiT
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    step: int = 0
    smoothed_loss: Optional[float] = None
    log: list[tuple[int, float, float]] = field(default_factory=list)


def _trainable(model: DecomposedDiT, cfg: TrainConfig) -> list[tuple[str, torch.nn.Parameter]]:
    frozen = ("fg_embed.", "fg_blocks.") if cfg.freeze_foreground else ()
    return [(n, p) for n, p in model.named_parameters() if not n.startswith(frozen)]


def new_state(cfg: TrainConfig, model: Optional[DecomposedDiT] = None) -> TrainState:
    model = model if model is not None else init_params(cfg.model_config(), cfg.seed)
    params = _trainable(model, cfg)
    for n, p in model.named_parameters():
        p.requires_grad_(any(n == m for m, _ in params))
    opt = torch.optim.Adam([p for _, p in params], lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8,
                           foreach=False)
    return TrainState(model, opt, np.random.default_rng(cfg.seed))


def load_pretrained(model: DecomposedDiT, path) -> None:
    """Copy parameters from a checkpoint into ``model`` (architectures must match)."""
    header, arrays = ckpt.read_container(path)
    sd = model.state_dict()
    missing = [n for n in sd if f"param/{n}" not in arrays]
    if missing:
        raise FormatError(f"{path}: checkpoint lacks parameters {missing[:5]}")
    with torch.no_grad():
        for n, p in model.named_parameters():
            src = arrays[f"param/{n}"]
            if tuple(src.shape) != tuple(p.shape):
                raise FormatError(f"{path}: shape mismatch for {n}: {src.shape} vs {tuple(p.shape)}")
            p.copy_(torch.from_numpy(src))


def _hierarchies(corpus: Sequence[VideoClip]) -> list[PromptHierarchy]:
    return [summarize(c.caption) for c in corpus]


def train(cfg: TrainConfig, corpus: Sequence[VideoClip], init=None, state: Optional[TrainState] = None,
          until: Optional[int] = None, on_step: Optional[Callable[[TrainState], None]] = None,
          checkpoint_dir=None) -> TrainState:
    """Run optimisation steps until ``until`` (default ``cfg.steps``).

    ``init`` is an optional pretrained checkpoint whose parameters seed a fresh
    state; ``state`` resumes an existing run instead.
    """
    if not corpus:
        raise ConfigError("corpus is empty")
    wiring = apply_toggles(cfg)
    sched = cfg.noise_schedule()
    stages = cfg.stage_config()
    masks = MaskSettings(**cfg.masks)
    if state is None:
        state = new_state(cfg)
        if init is not None and wiring.use_pretrain_init:
            load_pretrained(state.model, init)
    hier = _hierarchies(corpus)
    model, opt, rng = state.model, state.optimizer, state.rng
    dtype = next(model.parameters()).dtype
    model.train()
    until = cfg.steps if until is None else until
    while state.step < until:
        batches, prompts = [], []
        for t in draw_timesteps(rng, cfg.batch_size, sched.T):
            k = int(rng.integers(len(corpus)))
            prompt = staged_prompt_for_training(t - 1, stages, hier[k]) if wiring.cop else corpus[k].caption
            if rng.random() < cfg.cond_dropout:
                prompt = ""
            batches.append(make_batch(corpus[k], cfg.phase, t, rng, sched, wiring.flow_sigma, masks, prompt))
            prompts.append(prompt)
        loss = _loss(model, batches, prompts, dtype)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        raw = float(loss.detach())
        if not math.isfinite(raw):
            raise FloatingPointError(f"non-finite loss at step {state.step + 1}")
        s = raw if state.smoothed_loss is None else cfg.smoothing * state.smoothed_loss + (1 - cfg.smoothing) * raw
        state.smoothed_loss = s
        state.step += 1
        state.log.append((state.step, raw, s))
        if on_step is not None:
            on_step(state)
        if checkpoint_dir is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_checkpoint(state, cfg, Path(checkpoint_dir) / f"step_{state.step:06d}.ckpt")
    return state


def draw_timesteps(rng: np.random.Generator, n: int, T: int) -> list[int]:
    """One timestep per stratum of ``1..T`` split into ``n`` equal parts; each draw is marginally uniform."""
    u = rng.random(n)
    return [1 + min(T - 1, int((i + u[i]) * T / n)) for i in rng.permutation(n)]


def stack_batches(batches, dtype=torch.float32):
    def st(name):
        return torch.as_tensor(np.stack([getattr(b, name) for b in batches]), dtype=dtype)
    t = torch.tensor([b.t for b in batches])
    return st("z_t"), t, st("foreground"), st("background"), st("flow"), st("eps")


def _loss(model, batches, prompts, dtype):
    z_t, t, fg, bg, flow, eps = stack_batches(batches, dtype)
    eps_pred = model(z_t, t, model.embed_text(prompts), fg, bg, flow)
    return denoising_loss(eps_pred, eps)


# --- persistence ----------------------------------------------------------

def write_loss_csv(log, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "raw_loss", "smoothed_loss"])
        for step, raw, s in log:
            w.writerow([step, repr(raw), repr(s)])


def read_loss_csv(path) -> list[tuple[int, float, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return [(int(a), float(b), float(c)) for a, b, c in rows]


def save_checkpoint(state: TrainState, cfg: TrainConfig, path) -> None:
    model, opt = state.model, state.optimizer
    arrays = {f"param/{n}": p.detach().cpu().numpy() for n, p in model.named_parameters()}
    index = {id(p): n for n, p in model.named_parameters()}
    adam_steps = {}
    for p in opt.param_groups[0]["params"]:
        st = opt.state.get(p)
        if not st:
            continue
        n = index[id(p)]
        arrays[f"adam_m/{n}"] = st["exp_avg"].detach().cpu().numpy()
        arrays[f"adam_v/{n}"] = st["exp_avg_sq"].detach().cpu().numpy()
        adam_steps[n] = int(st["step"])
    header = {
        "kind": "train_state",
        "model": model.cfg.to_dict(),
        "train": cfg.to_dict(),
        "step": state.step,
        "smoothed_loss": state.smoothed_loss,
        "rng": state.rng.bit_generator.state,
        "adam_steps": adam_steps,
        "log": [list(r) for r in state.log],
    }
    ckpt.write_container(path, header, arrays)


def load_checkpoint(path, cfg: Optional[TrainConfig] = None) -> tuple[TrainState, TrainConfig]:
    """Restore a full training state. Everything is validated before any state is built."""
    header, arrays = ckpt.read_container(path)
    if header.get("kind") != "train_state":
        raise FormatError(f"{path}: not a training checkpoint")
    cfg = cfg or TrainConfig.from_dict(header["train"])
    model = init_params(ModelConfig.from_dict(header["model"]), 0)
    names = [n for n, _ in model.named_parameters()]
    missing = [n for n in names if f"param/{n}" not in arrays]
    if missing:
        raise FormatError(f"{path}: missing parameters {missing[:5]}")
    with torch.no_grad():
        for n, p in model.named_parameters():
            a = arrays[f"param/{n}"]
            if tuple(a.shape) != tuple(p.shape):
                raise FormatError(f"{path}: shape mismatch for {n}")
            p.copy_(torch.from_numpy(a))
    state = new_state(cfg, model)
    params = dict(model.named_parameters())
    for n, steps in header["adam_steps"].items():
        state.optimizer.state[params[n]] = {
            "step": torch.tensor(float(steps)),
            "exp_avg": torch.from_numpy(arrays[f"adam_m/{n}"]).clone(),
            "exp_avg_sq": torch.from_numpy(arrays[f"adam_v/{n}"]).clone(),
        }
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng"]
    state.rng = rng
    state.step = int(header["step"])
    state.smoothed_loss = header["smoothed_loss"]
    state.log = [(int(a), float(b), float(c)) for a, b, c in header["log"]]
    return state, cfg


def load_model(path) -> DecomposedDiT:
    """Parameters only, from either a training checkpoint or a bare model checkpoint."""
    header, _ = ckpt.read_container(path)
    model = init_params(ModelConfig.from_dict(header["model"]), 0)
    load_pretrained(model, path)
    model.eval()
    return model


def save_model(model: DecomposedDiT, path) -> None:
    arrays = {f"param/{n}": p.detach().cpu().numpy() for n, p in model.named_parameters()}
    ckpt.write_container(path, {"kind": "model", "model": model.cfg.to_dict()}, arrays)
