"""Synthetic sprite clips with analytic masks/flow, the clip directory format, and batch assembly."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
from PIL import Image

from . import decompose, motion
from .errors import (CorruptFileError, FormatError, InvalidRangeError, MissingFileError,
                     VersionMismatchError)
from .schedule import NoiseSchedule, q_sample

FORMAT_VERSION = 1
CORPUS_FILE = "corpus.json"

COLORS = {
    "red": (220, 40, 40),
    "green": (40, 190, 70),
    "blue": (40, 80, 220),
    "yellow": (230, 210, 40),
    "magenta": (210, 50, 200),
    "cyan": (40, 200, 210),
}
SHAPES = ("square", "disc")
TEXTURES = ("flat", "gradient", "checker")
_TEXTURE_WORDS = {"flat": "a flat gray", "gradient": "a soft gradient", "checker": "a checkerboard"}


@dataclass(frozen=True)
class SyntheticScene:
    shape: str = "square"
    color: str = "red"
    size: int = 10
    start: tuple[int, int] = (4, 10)  # (x, y) of the sprite's top-left corner
    velocity: tuple[int, int] = (2, 0)
    texture: str = "flat"
    frames: int = 8
    height: int = 32
    width: int = 32

    def position(self, k: int) -> tuple[int, int]:
        return self.start[0] + k * self.velocity[0], self.start[1] + k * self.velocity[1]

    def validate(self) -> None:
        if self.shape not in SHAPES or self.color not in COLORS or self.texture not in TEXTURES:
            raise InvalidRangeError(f"unknown scene attribute in {self}")
        if self.frames < 2 or self.size < 2:
            raise InvalidRangeError("need at least 2 frames and sprite size >= 2")
        for k in (0, self.frames - 1):
            x, y = self.position(k)
            if x < 0 or y < 0 or x + self.size > self.width or y + self.size > self.height:
                raise InvalidRangeError(f"sprite leaves the frame at frame {k}: top-left ({x}, {y})")


@dataclass
class VideoClip:
    frames: np.ndarray   # (f, h, w, 3) uint8
    masks: np.ndarray    # (f, h, w) uint8 in {0, 1}
    flow: np.ndarray     # (f - 1, h, w, 2) float32
    caption: str
    id: str = "clip"
    fps: int = 8
    provenance: dict[str, Any] = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.frames.shape[:3]

    def manifest(self) -> dict[str, Any]:
        f, h, w = self.shape
        return {"id": self.id, "frames": f, "height": h, "width": w, "fps": self.fps,
                "caption": self.caption, "provenance": self.provenance, "format_version": FORMAT_VERSION}


def _background(texture: str, h: int, w: int) -> np.ndarray:
    if texture == "flat":
        img = np.full((h, w), 100.0)
    elif texture == "gradient":
        img = np.tile(np.linspace(50.0, 170.0, w), (h, 1))
    else:
        yy, xx = np.mgrid[0:h, 0:w]
        img = np.where(((yy // 4) + (xx // 4)) % 2 == 0, 70.0, 150.0)
    return np.repeat(img[..., None], 3, axis=-1)


def _sprite_support(shape: str, size: int) -> np.ndarray:
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    return (yy - c) ** 2 + (xx - c) ** 2 <= (size / 2.0) ** 2


def _direction(vx: int, vy: int) -> str:
    horiz = "right" if vx > 0 else "left" if vx < 0 else ""
    vert = "down" if vy > 0 else "up" if vy < 0 else ""
    if horiz and vert:
        return f"{vert} and to the {horiz}"
    return horiz or vert


def caption_for(scene: SyntheticScene) -> str:
    size_word = "small" if scene.size <= 8 else "medium" if scene.size <= 11 else "large"
    bg = _TEXTURE_WORDS[scene.texture]
    vx, vy = scene.velocity
    subject = f"A {size_word} {scene.color} {scene.shape}"
    if vx == 0 and vy == 0:
        first = f"{subject} stays still on {bg} background, no motion, crisp edges."
    else:
        speed = "fast" if max(abs(vx), abs(vy)) >= 2 else "slow"
        first = f"{subject} moves {_direction(vx, vy)} across {bg} background, {speed} steady speed, crisp edges."
    return f"{first} The {scene.shape} carries a fine speckled texture. The background stays perfectly still."


def gen_clip(scene: SyntheticScene, rng: np.random.Generator, clip_id: str = "clip") -> VideoClip:
    """Render a rigid textured sprite translating over a static background."""
    scene.validate()
    f, h, w, s = scene.frames, scene.height, scene.width, scene.size
    base = _background(scene.texture, h, w)
    support = _sprite_support(scene.shape, s)
    speckle = rng.integers(-40, 41, size=(s, s, 1)).astype(np.float64)
    sprite = np.clip(np.asarray(COLORS[scene.color], dtype=np.float64) + speckle, 0, 255)

    frames = np.empty((f, h, w, 3), dtype=np.uint8)
    masks = np.zeros((f, h, w), dtype=np.uint8)
    flow = np.zeros((f - 1, h, w, 2), dtype=np.float32)
    for k in range(f):
        x, y = scene.position(k)
        img = base.copy()
        region = img[y:y + s, x:x + s]
        region[support] = sprite[support]
        frames[k] = np.rint(img).astype(np.uint8)
        masks[k, y:y + s, x:x + s] = support
        if k < f - 1:
            flow[k][masks[k] == 1] = scene.velocity
    prov = {"generator": "synthetic-sprite", "scene": {
        "shape": scene.shape, "color": scene.color, "size": s, "start": list(scene.start),
        "velocity": list(scene.velocity), "texture": scene.texture}}
    return VideoClip(frames, masks, flow, caption_for(scene), clip_id, 8, prov)


def random_scene(rng: np.random.Generator, frames: int = 8, height: int = 32, width: int = 32,
                 max_speed: int = 2) -> SyntheticScene:
    shape = SHAPES[int(rng.integers(len(SHAPES)))]
    color = list(COLORS)[int(rng.integers(len(COLORS)))]
    texture = TEXTURES[int(rng.integers(len(TEXTURES)))]
    size = int(rng.integers(8, 13))
    for _ in range(100):
        vx, vy = (int(v) for v in rng.integers(-max_speed, max_speed + 1, size=2))
        span_x, span_y = abs(vx) * (frames - 1), abs(vy) * (frames - 1)
        if size + span_x > width or size + span_y > height:
            continue
        x0 = int(rng.integers(0, width - size - span_x + 1)) + (span_x if vx < 0 else 0)
        y0 = int(rng.integers(0, height - size - span_y + 1)) + (span_y if vy < 0 else 0)
        return SyntheticScene(shape, color, size, (x0, y0), (vx, vy), texture, frames, height, width)
    raise InvalidRangeError("could not place a sprite that stays inside the frame")


def synth_corpus(n: int, seed: int, frames: int = 8, height: int = 32, width: int = 32) -> list[VideoClip]:
    rng = np.random.default_rng(seed)
    clips = []
    for i in range(n):
        scene = random_scene(rng, frames, height, width)
        clips.append(gen_clip(scene, rng, clip_id=f"clip_{i:05d}"))
    return clips


# --- on-disk format -------------------------------------------------------

def save_clip(clip: VideoClip, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for k in range(clip.frames.shape[0]):
        Image.fromarray(clip.frames[k], mode="RGB").save(d / f"frame_{k:05d}.png")
        Image.fromarray((clip.masks[k] * 255).astype(np.uint8), mode="L").save(d / f"mask_{k:05d}.png")
    motion.save_flow(clip.flow, d / "flow.bin")
    (d / "manifest.json").write_text(json.dumps(clip.manifest(), indent=2, sort_keys=True) + "\n")
    return d


def _read_png(path: Path, mode: str) -> np.ndarray:
    if not path.exists():
        raise MissingFileError(f"missing file: {path.name} in {path.parent}")
    try:
        with Image.open(path) as im:
            return np.array(im.convert(mode))
    except OSError as exc:
        raise CorruptFileError(f"cannot decode {path}: {exc}") from exc


def load_clip(directory) -> VideoClip:
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.exists():
        raise MissingFileError(f"missing file: manifest.json in {d}")
    try:
        man = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptFileError(f"{mpath}: {exc}") from exc
    if man.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(f"{mpath}: format_version {man.get('format_version')!r}, expected {FORMAT_VERSION}")
    f, h, w = int(man["frames"]), int(man["height"]), int(man["width"])
    frames = np.stack([_read_png(d / f"frame_{k:05d}.png", "RGB") for k in range(f)])
    masks = np.stack([_read_png(d / f"mask_{k:05d}.png", "L") for k in range(f)])
    if frames.shape != (f, h, w, 3) or masks.shape != (f, h, w):
        raise CorruptFileError(f"{d}: media dims disagree with manifest ({frames.shape}, {masks.shape})")
    flow = motion.load_flow(d / "flow.bin")
    if flow.shape != (f - 1, h, w, 2):
        raise CorruptFileError(f"{d}: flow shape {flow.shape} disagrees with manifest")
    return VideoClip(frames, (masks > 127).astype(np.uint8), flow, man["caption"], man["id"],
                     int(man.get("fps", 8)), man.get("provenance", {}))


def save_corpus(clips: list[VideoClip], root, splits: Optional[dict[str, str]] = None) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for clip in clips:
        save_clip(clip, root / clip.id)
        entries.append({"id": clip.id, "split": (splits or {}).get(clip.id, "train")})
    (root / CORPUS_FILE).write_text(json.dumps({"format_version": FORMAT_VERSION, "clips": entries},
                                               indent=2, sort_keys=True) + "\n")
    return root


def load_corpus(root, split: Optional[str] = None) -> list[VideoClip]:
    root = Path(root)
    index = root / CORPUS_FILE
    if not index.exists():
        raise MissingFileError(f"missing file: {CORPUS_FILE} in {root}")
    listing = json.loads(index.read_text())
    if listing.get("format_version") != FORMAT_VERSION:
        raise VersionMismatchError(f"{index}: unsupported format_version {listing.get('format_version')!r}")
    clips = [load_clip(root / e["id"]) for e in listing["clips"] if split is None or e.get("split") == split]
    if not clips:
        raise FormatError(f"{root}: corpus has no clips" + (f" in split {split!r}" if split else ""))
    return clips


# --- batch assembly -------------------------------------------------------

def to_model_range(x: np.ndarray) -> np.ndarray:
    """0..255 -> [-1, 1]; the gray fill maps to 0."""
    return (np.asarray(x, dtype=np.float32) / np.float32(127.5) - np.float32(1.0)).astype(np.float32)


def to_pixels(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(x, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


@dataclass
class Batch:
    z0: np.ndarray
    z_t: np.ndarray
    eps: np.ndarray
    t: int
    foreground: np.ndarray   # (h, w, 3) in model range
    background: np.ndarray
    flow: np.ndarray         # (f - 1, h, w, 2) px/frame
    mask: np.ndarray
    prompt: str
    ref_index: int
    decomposition: decompose.Decomposition


@dataclass
class MaskSettings:
    coverage: float = 0.5
    min_block: Optional[int] = None
    max_block: Optional[int] = None
    boundary_margin: int = 1
    max_iter: int = 500
    dilation_radius: int = 2


def make_batch(clip: VideoClip, mode: str, t: Optional[int], rng: np.random.Generator, sched: NoiseSchedule,
               flow_sigma: float = 0.0, masks: Optional[MaskSettings] = None, prompt: Optional[str] = None) -> Batch:
    """Assemble one training example.

    Draws a reference frame, builds the foreground/background split (random
    blocks in pretrain mode, the clip's mask in finetune mode), perturbs the
    flow, and noises the clip to timestep ``t`` (drawn uniformly from
    ``1..T`` when ``None``). ``prompt`` defaults to the clip caption.
    """
    masks = masks or MaskSettings()
    f = clip.frames.shape[0]
    ref = int(rng.integers(f))
    frame = clip.frames[ref]
    if mode == "pretrain":
        blk = decompose.random_block_mask(frame, masks.coverage, masks.min_block, masks.max_block,
                                          masks.boundary_margin, masks.max_iter, rng)
        m = blk.mask
    elif mode == "finetune":
        m = clip.masks[ref]
    else:
        raise InvalidRangeError(f"unknown mode {mode!r}")
    dec = decompose.split_frame(frame, m, mode, masks.dilation_radius)
    flow = motion.perturb_flow(clip.flow, flow_sigma, rng) if flow_sigma > 0 else clip.flow.copy()
    dec.flow = flow
    if t is None:
        t = int(rng.integers(1, sched.T + 1))
    z0 = to_model_range(clip.frames)
    eps = rng.standard_normal(z0.shape).astype(np.float32)
    z_t = q_sample(z0, int(t), eps, sched).astype(np.float32)
    return Batch(z0, z_t, eps, int(t), to_model_range(dec.foreground), to_model_range(dec.background),
                 flow, dec.mask, clip.caption if prompt is None else prompt, ref, dec)
