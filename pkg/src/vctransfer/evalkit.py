"""Pixel-domain metrics and the foreground / background / motion transfer driver."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from PIL import Image

from . import decompose, motion
from .cop import Conditions, PromptHierarchy, SampleResult, StageConfig, hierarchical_denoise, summarize
from .data import VideoClip, to_model_range
from .errors import InvalidRangeError, ShapeMismatchError, TooFewFramesError
from .schedule import NoiseSchedule

PSNR_CAP = 99.0
TASKS = ("reconstruct", "foreground", "background", "motion")


def _check_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """10 log10(255^2 / MSE), capped at 99 dB for identical inputs."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(255.0 ** 2 / mse))


def ssim(a, b, window: int = 8) -> float:
    """Mean SSIM over all ``window x window`` positions, channels and frames.

    Inputs are ``(..., h, w)`` or ``(..., h, w, c)`` with c <= 4 on the 0-255 scale.
    """
    a, b = _check_pair(a, b)
    if a.ndim >= 3 and a.shape[-1] <= 4:
        a = np.moveaxis(a, -1, -3)
        b = np.moveaxis(b, -1, -3)
    if min(a.shape[-2:]) < window:
        raise ShapeMismatchError(f"spatial dims {a.shape[-2:]} smaller than window {window}")
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    wa = sliding_window_view(a, (window, window), axis=(-2, -1))
    wb = sliding_window_view(b, (window, window), axis=(-2, -1))
    mu_a, mu_b = wa.mean(axis=(-2, -1)), wb.mean(axis=(-2, -1))
    var_a = wa.var(axis=(-2, -1))
    var_b = wb.var(axis=(-2, -1))
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


def temporal_consistency(clip) -> float:
    """Mean adjacent-frame normalized cross-correlation, mapped from [-1, 1] to [0, 1]."""
    x = np.asarray(clip, dtype=np.float64)
    if x.ndim < 3 or x.shape[0] < 2:
        raise TooFewFramesError("temporal consistency needs at least two frames")
    flat = x.reshape(x.shape[0], -1)
    flat = flat - flat.mean(axis=1, keepdims=True)
    scores = []
    for u, v in zip(flat[:-1], flat[1:]):
        nu, nv = np.linalg.norm(u), np.linalg.norm(v)
        if nu == 0.0 or nv == 0.0:
            ncc = 1.0 if nu == nv else 0.0
        else:
            ncc = float(np.dot(u, v) / (nu * nv))
        scores.append((ncc + 1.0) / 2.0)
    return float(np.mean(scores))


@dataclass
class MetricReport:
    rows: list[dict] = field(default_factory=list)

    def add(self, clip_id: str, generated: np.ndarray, reference: Optional[np.ndarray] = None,
            mask_coverage: Optional[float] = None) -> dict:
        row = {"clip": clip_id, "psnr": float("nan"), "ssim": float("nan"),
               "temporal": temporal_consistency(generated),
               "mask_coverage": float("nan") if mask_coverage is None else mask_coverage}
        if reference is not None:
            row["psnr"] = psnr(generated, reference)
            row["ssim"] = ssim(generated, reference)
        self.rows.append(row)
        return row

    def means(self) -> dict[str, float]:
        out = {}
        for key in ("psnr", "ssim", "temporal", "mask_coverage"):
            vals = [r[key] for r in self.rows if not math.isnan(r[key])]
            out[key] = float(np.mean(vals)) if vals else float("nan")
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["clip", "psnr", "ssim", "temporal", "mask_coverage"])
            w.writeheader()
            for r in self.rows:
                w.writerow(r)
            w.writerow({"clip": "MEAN", **self.means()})

    def table(self) -> str:
        lines = [f"{'clip':<26}{'PSNR':>9}{'SSIM':>9}{'temporal':>10}{'coverage':>10}"]
        for r in self.rows + [{"clip": "MEAN", **self.means()}]:
            lines.append(f"{r['clip']:<26}{r['psnr']:>9.3f}{r['ssim']:>9.4f}{r['temporal']:>10.4f}"
                         f"{r['mask_coverage']:>10.4f}")
        return "\n".join(lines)


# --- transfer -------------------------------------------------------------

def _components(clip: VideoClip, ref_index: int) -> decompose.Decomposition:
    return decompose.split_frame(clip.frames[ref_index], clip.masks[ref_index], "finetune")


def assemble_conditions(task: str, source: VideoClip, reference: Optional[VideoClip] = None,
                        ref_index: int = 0, flow_block: int = 4, flow_radius: int = 3) -> Conditions:
    """Build model conditions for a transfer task.

    ``foreground``: F from ``reference``, B and flow from ``source``.
    ``background``: B from ``reference``, F and flow from ``source``.
    ``motion``: flow estimated from ``source`` (the driving clip), F and B from ``reference``.
    ``reconstruct``: everything from ``source``.
    ``provenance`` names the clip each component came from.
    """
    if task not in TASKS:
        raise InvalidRangeError(f"task must be one of {TASKS}, got {task!r}")
    if task != "reconstruct" and reference is None:
        raise InvalidRangeError(f"task {task!r} needs a reference clip")
    if reference is not None and reference.frames.shape[1:] != source.frames.shape[1:]:
        raise ShapeMismatchError("reference and source frame dims differ")
    src = _components(source, ref_index)
    ref = _components(reference, ref_index) if reference is not None else src
    ref_id = reference.id if reference is not None else source.id
    if task == "reconstruct":
        fg, bg, flow = src.foreground, src.background, source.flow
        prov = {"foreground": source.id, "background": source.id, "flow": source.id}
    elif task == "foreground":
        fg, bg, flow = ref.foreground, src.background, source.flow
        prov = {"foreground": ref_id, "background": source.id, "flow": source.id}
    elif task == "background":
        fg, bg, flow = src.foreground, ref.background, source.flow
        prov = {"foreground": source.id, "background": ref_id, "flow": source.id}
    else:
        fg, bg = ref.foreground, ref.background
        flow = motion.estimate_flow(source.frames, flow_block, flow_radius)
        prov = {"foreground": ref_id, "background": ref_id, "flow": f"estimated:{source.id}"}
    return Conditions(to_model_range(fg), to_model_range(bg), np.asarray(flow, dtype=np.float32), prov)


@dataclass
class TransferResult:
    sample: SampleResult
    conditions: Conditions
    report: MetricReport
    hierarchy: PromptHierarchy


def run_transfer(task: str, source: VideoClip, reference: Optional[VideoClip], model, sched: NoiseSchedule,
                 stages: Optional[StageConfig] = None, seed: int = 0, use_cop: bool = True,
                 prompt: Optional[str] = None, clip_denoised: bool = True) -> TransferResult:
    """Assemble conditions, run staged sampling and score the output.

    PSNR/SSIM against the source are reported only for ``reconstruct``, the one
    task with a ground-truth pairing; other tasks report output-only metrics.
    """
    stages = stages or StageConfig(T_train=sched.T)
    cond = assemble_conditions(task, source, reference)
    text_src = reference if task == "foreground" and reference is not None else source
    hier = summarize(prompt if prompt is not None else text_src.caption)
    sample = hierarchical_denoise(seed, cond, hier, stages, model, sched, use_cop=use_cop,
                                  clip_denoised=clip_denoised)
    report = MetricReport()
    gt = source.frames if task == "reconstruct" else None
    report.add(f"{task}:{source.id}", sample.frames, gt, decompose.coverage(source.masks[0]))
    return TransferResult(sample, cond, report, hier)


def contact_sheet(videos: list[np.ndarray], path, gap: int = 2) -> None:
    """Write rows of frames (one row per video) as a PNG grid."""
    f, h, w, c = videos[0].shape
    sheet = np.full((len(videos) * (h + gap) + gap, f * (w + gap) + gap, 3), 255, dtype=np.uint8)
    for r, vid in enumerate(videos):
        for k in range(vid.shape[0]):
            y, x = gap + r * (h + gap), gap + k * (w + gap)
            sheet[y:y + h, x:x + w] = vid[k]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(sheet).save(path)
