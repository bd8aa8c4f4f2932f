"""Chain-of-Prompt: prompt hierarchy, stage selection, staged training prompts and the
staged guided sampling loop."""
from __future__ import annotations

import json
import os
import re
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np
import torch

from .errors import InvalidRangeError, ShapeMismatchError, SummarizerError
from .schedule import NoiseSchedule, reverse_step, sampling_timesteps

STAGE_NAMES = ("coarse", "medium", "fine")


@dataclass(frozen=True)
class PromptHierarchy:
    tau_crs: str
    tau_mid: str
    tau_fine: str

    def by_stage(self, stage: int) -> str:
        return (self.tau_crs, self.tau_mid, self.tau_fine)[stage - 1]


def _ceil_frac(num: int, den: int, T: int) -> int:
    return -(-num * T // den)


@dataclass(frozen=True)
class StageConfig:
    T_sample: int = 50
    T1: int = 35
    T2: int = 15
    weights: tuple[float, float, float] = (1.5, 2.0, 1.0)
    T_train: int = 1000
    t_c: Optional[int] = None
    t_f: Optional[int] = None

    def __post_init__(self):
        if self.t_c is None:
            object.__setattr__(self, "t_c", _ceil_frac(7, 10, self.T_train))
        if self.t_f is None:
            object.__setattr__(self, "t_f", _ceil_frac(3, 10, self.T_train))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if not 0 < self.T2 < self.T1 <= self.T_sample:
            raise InvalidRangeError(f"need 0 < T2 < T1 <= T_sample, got {self.T2}, {self.T1}, {self.T_sample}")
        if not 0 < self.t_f < self.t_c < self.T_train:
            raise InvalidRangeError(f"need 0 < t_f < t_c < T_train, got {self.t_f}, {self.t_c}, {self.T_train}")
        if len(self.weights) != 3:
            raise InvalidRangeError("need exactly three stage weights")

    def to_dict(self) -> dict:
        return {"T_sample": self.T_sample, "T1": self.T1, "T2": self.T2, "weights": list(self.weights),
                "T_train": self.T_train, "t_c": self.t_c, "t_f": self.t_f}


# --- summarizers ----------------------------------------------------------

class Summarizer(Protocol):
    def summarize(self, fine_prompt: str) -> tuple[str, str]:
        """Return ``(coarse, mid)`` for a fine prompt."""


def _sentences(text: str) -> list[str]:
    return [s.strip() for s in re.findall(r"[^.]*\.|[^.]+$", text) if s.strip()]


class StubSummarizer:
    """Deterministic rules: mid = first two sentences; coarse = first clause of the first sentence."""

    def summarize(self, fine_prompt: str) -> tuple[str, str]:
        sents = _sentences(fine_prompt)
        if not sents:
            return "", ""
        mid = " ".join(sents[:2])
        first = sents[0]
        crs = first.split(",", 1)[0].strip() if "," in first else first
        return crs, mid


class HttpSummarizer:
    """POSTs ``{"prompt": ...}`` and expects ``{"coarse": ..., "mid": ...}``."""

    def __init__(self, url: str, key: Optional[str] = None, timeout: float = 30.0):
        self.url = url
        self.key = key
        self.timeout = timeout

    @classmethod
    def from_env(cls) -> Optional["HttpSummarizer"]:
        url = os.environ.get("SUMMARIZER_URL")
        return cls(url, os.environ.get("SUMMARIZER_KEY")) if url else None

    def summarize(self, fine_prompt: str) -> tuple[str, str]:
        req = urllib.request.Request(self.url, data=json.dumps({"prompt": fine_prompt}).encode("utf-8"),
                                     headers={"Content-Type": "application/json"}, method="POST")
        if self.key:
            req.add_header("Authorization", f"Bearer {self.key}")
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                body = json.loads(resp.read().decode("utf-8"))
            return str(body["coarse"]), str(body["mid"])
        except (urllib.error.URLError, TimeoutError, OSError, ValueError, KeyError, TypeError) as exc:
            raise SummarizerError(f"summarizer request to {self.url} failed: {exc}") from exc


def summarize(fine_prompt: str, client: Optional[Summarizer] = None) -> PromptHierarchy:
    client = client or StubSummarizer()
    try:
        crs, mid = client.summarize(fine_prompt)
    except SummarizerError:
        raise
    except Exception as exc:
        raise SummarizerError(f"summarizer failed: {exc}") from exc
    if not len(crs) <= len(mid) <= len(fine_prompt):
        raise SummarizerError(f"summaries must shrink with granularity, got lengths "
                              f"{len(crs)}, {len(mid)}, {len(fine_prompt)}")
    return PromptHierarchy(crs, mid, fine_prompt)


# --- stage routing --------------------------------------------------------

def stage_for_step(step: int, cfg: StageConfig) -> int:
    if not 1 <= step <= cfg.T_sample:
        raise InvalidRangeError(f"step {step} outside [1, {cfg.T_sample}]")
    if step >= cfg.T1:
        return 1
    if step >= cfg.T2:
        return 2
    return 3


def select_prompt(step: int, cfg: StageConfig, h: PromptHierarchy) -> tuple[str, float]:
    stage = stage_for_step(step, cfg)
    return h.by_stage(stage), cfg.weights[stage - 1]


def training_stage(t_index: int, cfg: StageConfig) -> int:
    """Stage for a 0-based training timestep index in ``[0, T_train - 1]``."""
    if not 0 <= t_index <= cfg.T_train - 1:
        raise InvalidRangeError(f"timestep index {t_index} outside [0, {cfg.T_train - 1}]")
    if t_index >= cfg.t_c:
        return 1
    if t_index >= cfg.t_f:
        return 2
    return 3


def staged_prompt_for_training(t_index: int, cfg: StageConfig, h: PromptHierarchy) -> str:
    return h.by_stage(training_stage(t_index, cfg))


def cfg_combine(eps_cond, eps_uncond, w: float):
    """Classifier-free guidance ``eps_u + w (eps_c - eps_u)``, written so w=1 and w=0 are exact."""
    if tuple(eps_cond.shape) != tuple(eps_uncond.shape):
        raise ShapeMismatchError(f"shape mismatch: {tuple(eps_cond.shape)} vs {tuple(eps_uncond.shape)}")
    return eps_cond * w + eps_uncond * (1.0 - w)


# --- sampling -------------------------------------------------------------

@dataclass
class Conditions:
    """Model-range spatial conditions: images ``(h, w, 3)`` in [-1, 1], flow ``(f-1, h, w, 2)``."""
    foreground: np.ndarray
    background: np.ndarray
    flow: np.ndarray
    provenance: dict = field(default_factory=dict)


@dataclass
class SampleResult:
    video: np.ndarray        # (f, h, w, 3) float32 model range
    frames: np.ndarray       # (f, h, w, 3) uint8
    trace: list[tuple[int, int, int, str, float]]  # (step, t, stage, prompt, weight)

    def stage_counts(self) -> tuple[int, int, int]:
        c = [0, 0, 0]
        for _, _, stage, _, _ in self.trace:
            c[stage - 1] += 1
        return tuple(c)


@torch.no_grad()
def hierarchical_denoise(noise, cond: Conditions, h: PromptHierarchy, cfg: StageConfig, model,
                         sched: NoiseSchedule, use_cop: bool = True, clip_denoised: bool = True) -> SampleResult:
    """Staged guided denoising from ``noise`` (array or integer seed).

    Each sampling step ``T_sample..1`` picks a prompt and guidance weight,
    runs a conditional and a null-text pass with the same spatial conditions,
    combines them and takes a deterministic reverse step. With ``use_cop``
    off the fine prompt and weight 1.0 are used throughout. ``clip_denoised``
    keeps each clean estimate inside the [-1, 1] data range.
    """
    from .data import to_pixels

    mcfg = model.cfg
    shape = (mcfg.frames, mcfg.height, mcfg.width, mcfg.channels)
    if isinstance(noise, (int, np.integer)):
        noise = np.random.default_rng(int(noise)).standard_normal(shape).astype(np.float32)
    noise = np.asarray(noise, dtype=np.float32)
    if noise.shape != shape:
        raise ShapeMismatchError(f"noise {noise.shape}, expected {shape}")
    dtype = next(model.parameters()).dtype
    ts = sampling_timesteps(cfg.T_sample, sched.T)
    fg = torch.as_tensor(cond.foreground, dtype=dtype)[None].expand(2, -1, -1, -1)
    bg = torch.as_tensor(cond.background, dtype=dtype)[None].expand(2, -1, -1, -1)
    flow = torch.as_tensor(cond.flow, dtype=dtype)[None].expand(2, -1, -1, -1, -1)
    z = torch.as_tensor(noise, dtype=dtype)[None]
    was_training = model.training
    model.eval()
    trace = []
    emb_cache: dict[str, torch.Tensor] = {}
    try:
        for step in range(cfg.T_sample, 0, -1):
            if use_cop:
                stage = stage_for_step(step, cfg)
                prompt, w = select_prompt(step, cfg, h)
            else:
                stage, prompt, w = 3, h.tau_fine, 1.0
            if prompt not in emb_cache:
                emb_cache[prompt] = model.embed_text([prompt, ""])
            t = ts[step]
            eps = model(z.expand(2, -1, -1, -1, -1), torch.tensor([t, t]), emb_cache[prompt], fg, bg, flow)
            eps_hat = cfg_combine(eps[:1], eps[1:], w)
            z = reverse_step(z, eps_hat, t, ts[step - 1], sched, clip=1.0 if clip_denoised else None)
            trace.append((step, t, stage, prompt, w))
    finally:
        model.train(was_training)
    video = z[0].to(torch.float32).numpy()
    return SampleResult(video, to_pixels(video), trace)
