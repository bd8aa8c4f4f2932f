"""Command-line entry point.

Exit codes: 0 success, 1 usage/config error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import data, decompose, evalkit
from .cop import HttpSummarizer, StageConfig, select_prompt, stage_for_step, summarize, STAGE_NAMES
from .errors import ConfigError, VCTError
from .schedule import schedule_from_dict
from .trainer import TOGGLES, TrainConfig, load_checkpoint, load_model, save_checkpoint, train, write_loss_csv

log = logging.getLogger("vctransfer")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _load_config_file(path: Optional[str]) -> dict[str, Any]:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    text = p.read_text()
    try:
        if p.suffix == ".toml":
            try:
                import tomllib
            except ImportError:
                import tomli as tomllib
            cfg = tomllib.loads(text)
        else:
            cfg = json.loads(text)
    except ValueError as exc:
        raise UsageError(f"cannot parse config file {p}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError(f"config file {p} must hold a table of settings")
    return cfg


def _apply_override(cfg: dict[str, Any], item: str) -> None:
    if "=" not in item:
        raise UsageError(f"override must look like key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise UsageError(f"override {key!r} descends into a non-table value")
    node[parts[-1]] = value


def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--config", help="JSON (or TOML) run configuration")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-key override, applied after --config; explicit flags win over both")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vctransfer", description="Decomposed conditional video diffusion at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-data", help="write a synthetic clip corpus")
    _common(p)
    p.add_argument("--clips", type=int, default=16)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)

    for phase in ("pretrain", "finetune"):
        p = sub.add_parser(phase, help=f"{phase} the denoiser on a corpus")
        _common(p)
        p.add_argument("--corpus", required=True)
        p.add_argument("--steps", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--toggle", action="append", choices=TOGGLES, default=None)
        p.add_argument("--resume", help="training checkpoint to continue from")
        if phase == "finetune":
            p.add_argument("--init", help="pretrained checkpoint to start from")
            p.add_argument("--freeze-foreground", action="store_true", default=None)

    p = sub.add_parser("transfer", help="run a transfer task with a trained checkpoint")
    _common(p)
    p.add_argument("--task", choices=evalkit.TASKS, required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True, help="source (or driving) clip directory")
    p.add_argument("--reference", help="reference clip directory")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--t1", type=int, default=35)
    p.add_argument("--t2", type=int, default=15)
    p.add_argument("--no-cop", action="store_true")
    p.add_argument("--no-clip", action="store_true", help="do not clamp clean estimates to the data range")

    p = sub.add_parser("eval", help="self-reconstruction metrics over a corpus")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--clips", type=int, default=0, help="limit number of clips (0 = all)")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--t1", type=int, default=35)
    p.add_argument("--t2", type=int, default=15)
    p.add_argument("--no-cop", action="store_true")
    p.add_argument("--no-clip", action="store_true", help="do not clamp clean estimates to the data range")

    p = sub.add_parser("mask-demo", help="write random-block foreground/background/mask triplets")
    _common(p)
    p.add_argument("--clip", help="clip directory to take frames from (default: a synthetic clip)")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--coverage", type=float, default=0.5)
    p.add_argument("--min-block", type=int)
    p.add_argument("--max-block", type=int)
    p.add_argument("--margin", type=int, default=1)

    p = sub.add_parser("cop-preview", help="print the step -> stage/prompt/weight table")
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--t1", type=int, default=35)
    p.add_argument("--t2", type=int, default=15)
    p.add_argument("--prompt", default=data.caption_for(data.SyntheticScene()))
    return parser


def _write_resolved(out: Path, resolved: dict[str, Any]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")


def _train_config(args, phase: str) -> TrainConfig:
    cfg = _load_config_file(args.config)
    cfg.setdefault("phase", phase)
    for item in args.set:
        _apply_override(cfg, item)
    cfg["phase"] = phase
    cfg["seed"] = args.seed
    for flag, key in (("steps", "steps"), ("batch_size", "batch_size"), ("lr", "lr"), ("toggle", "toggles"),
                      ("freeze_foreground", "freeze_foreground")):
        val = getattr(args, flag, None)
        if val is not None:
            cfg[key] = val
    return TrainConfig.from_dict(cfg)


def cmd_synth(args) -> int:
    out = Path(args.out)
    clips = data.synth_corpus(args.clips, args.seed, args.frames, args.height, args.width)
    n_val = len(clips) // 8
    splits = {c.id: ("val" if i >= len(clips) - n_val else "train") for i, c in enumerate(clips)}
    data.save_corpus(clips, out, splits)
    _write_resolved(out, {"command": "synth-data", "seed": args.seed, "clips": args.clips,
                          "frames": args.frames, "height": args.height, "width": args.width})
    print(f"wrote {len(clips)} clips to {out}")
    return 0


def cmd_train(args, phase: str) -> int:
    cfg = _train_config(args, phase)
    corpus = data.load_corpus(args.corpus, split="train")
    out = Path(args.out)
    _write_resolved(out, {"command": phase, "corpus": str(args.corpus), "train": cfg.to_dict(),
                          "init": getattr(args, "init", None), "resume": args.resume})
    state = load_checkpoint(args.resume, cfg)[0] if args.resume else None
    ckdir = out / "checkpoints"
    ckdir.mkdir(parents=True, exist_ok=True)

    def progress(st):
        if st.step % 50 == 0 or st.step == cfg.steps:
            log.info("step %d loss %.5f smoothed %.5f", st.step, st.log[-1][1], st.smoothed_loss)

    state = train(cfg, corpus, init=getattr(args, "init", None), state=state, on_step=progress,
                  checkpoint_dir=ckdir)
    save_checkpoint(state, cfg, ckdir / "final.ckpt")
    write_loss_csv(state.log, out / "loss.csv")
    print(f"{phase}: {state.step} steps, final smoothed loss {state.smoothed_loss:.5f}; "
          f"checkpoint {ckdir / 'final.ckpt'}")
    return 0


def _sampling_setup(args, ckpt_path):
    from . import checkpoint as ck
    header, _ = ck.read_container(ckpt_path)
    model = load_model(ckpt_path)
    sched_d = header.get("train", {}).get("schedule", {"T": 1000, "beta_start": 1e-4, "beta_end": 0.02})
    sched = schedule_from_dict(sched_d)
    stages = StageConfig(T_sample=args.steps, T1=getattr(args, "t1", 35), T2=getattr(args, "t2", 15),
                         T_train=sched.T)
    return model, sched, stages


def cmd_transfer(args) -> int:
    out = Path(args.out)
    source = data.load_clip(args.source)
    reference = data.load_clip(args.reference) if args.reference else None
    model, sched, stages = _sampling_setup(args, args.checkpoint)
    _write_resolved(out, {"command": "transfer", "task": args.task, "checkpoint": args.checkpoint,
                          "source": args.source, "reference": args.reference, "seed": args.seed,
                          "stages": stages.to_dict(), "cop": not args.no_cop, "clip_denoised": not args.no_clip})
    res = evalkit.run_transfer(args.task, source, reference, model, sched, stages, seed=args.seed,
                               use_cop=not args.no_cop, clip_denoised=not args.no_clip)
    gen = data.VideoClip(res.sample.frames, np.zeros(res.sample.frames.shape[:3], np.uint8),
                         res.conditions.flow, res.hierarchy.tau_fine, f"{args.task}_{source.id}",
                         provenance={"task": args.task, **res.conditions.provenance})
    data.save_clip(gen, out / "samples" / gen.id)
    evalkit.contact_sheet([source.frames, res.sample.frames], out / "samples" / f"{gen.id}.png")
    res.report.write_csv(out / "metrics.csv")
    print(res.report.table())
    return 0


def cmd_eval(args) -> int:
    out = Path(args.out)
    clips = data.load_corpus(args.corpus)
    if args.clips:
        clips = clips[:args.clips]
    model, sched, stages = _sampling_setup(args, args.checkpoint)
    _write_resolved(out, {"command": "eval", "checkpoint": args.checkpoint, "corpus": args.corpus,
                          "seed": args.seed, "clips": len(clips), "stages": stages.to_dict(),
                          "cop": not args.no_cop, "clip_denoised": not args.no_clip})
    report = evalkit.MetricReport()
    sheets = []
    for clip in clips:
        res = evalkit.run_transfer("reconstruct", clip, None, model, sched, stages, seed=args.seed,
                                   use_cop=not args.no_cop, clip_denoised=not args.no_clip)
        row = res.report.rows[0]
        row["clip"] = clip.id
        report.rows.append(row)
        sheets += [clip.frames, res.sample.frames]
    report.write_csv(out / "metrics.csv")
    evalkit.contact_sheet(sheets, out / "samples" / "eval_contact_sheet.png")
    (out / "metrics.txt").write_text(report.table() + "\n")
    print(report.table())
    return 0


def cmd_mask_demo(args) -> int:
    from PIL import Image
    out = Path(args.out)
    rng = np.random.default_rng(args.seed)
    if args.clip:
        frames = data.load_clip(args.clip).frames
    else:
        frames = data.gen_clip(data.random_scene(rng), rng).frames
    _write_resolved(out, {"command": "mask-demo", "seed": args.seed, "clip": args.clip, "count": args.count,
                          "coverage": args.coverage, "min_block": args.min_block, "max_block": args.max_block,
                          "margin": args.margin})
    for i in range(args.count):
        frame = frames[int(rng.integers(frames.shape[0]))]
        blk = decompose.random_block_mask(frame, args.coverage, args.min_block, args.max_block, args.margin,
                                          rng=rng)
        Image.fromarray(np.rint(blk.foreground).astype(np.uint8)).save(out / f"foreground_{i:03d}.png")
        Image.fromarray(np.rint(blk.background).astype(np.uint8)).save(out / f"background_{i:03d}.png")
        Image.fromarray(blk.mask * 255).save(out / f"mask_{i:03d}.png")
        print(f"{i}: coverage {decompose.coverage(blk.mask):.3f}, {len(blk.blocks)} blocks, "
              f"{blk.iterations} iterations{' (cap hit)' if blk.cap_hit else ''}")
    return 0


def cmd_cop_preview(args) -> int:
    cfg = StageConfig(T_sample=args.steps, T1=args.t1, T2=args.t2, T_train=max(args.steps, 1000))
    h = summarize(args.prompt, HttpSummarizer.from_env())
    counts = [0, 0, 0]
    print(f"{'step':>4}  {'stage':<7} {'weight':>6}  prompt")
    for step in range(cfg.T_sample, 0, -1):
        stage = stage_for_step(step, cfg)
        prompt, w = select_prompt(step, cfg, h)
        counts[stage - 1] += 1
        print(f"{step:>4}  {STAGE_NAMES[stage - 1]:<7} {w:>6.2f}  {prompt}")
    print(f"stage counts: coarse={counts[0]} medium={counts[1]} fine={counts[2]}")
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"synth-data": cmd_synth, "pretrain": lambda a: cmd_train(a, "pretrain"),
                "finetune": lambda a: cmd_train(a, "finetune"), "transfer": cmd_transfer, "eval": cmd_eval,
                "mask-demo": cmd_mask_demo, "cop-preview": cmd_cop_preview}
    try:
        return handlers[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"vctransfer {args.command}: {exc}", file=sys.stderr)
        return 1
    except (VCTError, OSError, ValueError, FloatingPointError) as exc:
        print(f"vctransfer {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
