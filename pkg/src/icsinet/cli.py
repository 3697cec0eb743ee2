"""Command-line entry point: ``icsinet <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import IcsinetError

log = logging.getLogger("icsinet")


def _gen_data(args) -> int:
    from .config import RunConfig, load_config
    from .synthgen import generate_dataset

    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.scene.seed = args.seed
    manifest = generate_dataset(cfg.scene, args.count, args.out)
    splits = {}
    for e in manifest["samples"]:
        splits[e["split"]] = splits.get(e["split"], 0) + 1
    print(f"wrote {args.count} frames to {args.out} (splits: {json.dumps(splits, sort_keys=True)})")
    return 0


def _train(args) -> int:
    from .config import load_config
    from .pipeline import train

    cfg = load_config(args.config)
    if args.max_steps is not None:
        cfg.train.max_steps = args.max_steps

    def report(step, s):
        print(
            f"step {step}: oolemma IoU {s['oolemma_iou_mean']:.4f}  pipette IoU {s['pipette_iou_mean']:.4f}  tip {s['tip_px_mean']:.2f}px",
            flush=True,
        )

    res = train(cfg, args.out, on_eval=report)
    print(f"finished {res.steps} steps; best step {res.best_step}; checkpoints in {res.out_dir}")
    return 0


def _eval(args) -> int:
    from .pipeline import cmd_eval, eval_report_text
    from .checkpoint import load_checkpoint

    ev = cmd_eval(args.ckpt, args.data, args.out, bin_width=args.bin_width)
    size = load_checkpoint(args.ckpt).config.model.input_size
    sys.stdout.write(eval_report_text(ev, size))
    print(f"mean latency per frame: {ev.latency_ms:.1f} ms")
    return 0


def _infer(args) -> int:
    from .pipeline import cmd_infer

    done, failed = cmd_infer(args.ckpt, args.input, args.out)
    print(f"processed {len(done)} image(s); {len(failed)} failed")
    for f in failed:
        print(f"  failed: {f}", file=sys.stderr)
    return 1 if failed else 0


def _agreement(args) -> int:
    from .pipeline import cmd_agreement

    cmd_agreement(args.annotations, args.mode, args.out)
    sys.stdout.write(Path(args.out, "agreement.txt").read_text(encoding="utf-8"))
    return 0


def _gradcheck(args) -> int:
    from .gradcheck import run_all

    results = run_all(full=args.full, seed=args.seed)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="icsinet", description="Segmentation and needle-tip localization for ICSI frames.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic annotated dataset")
    g.add_argument("--config", help="run config JSON (its 'scene' section is used)")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, help="override scene.seed")
    g.set_defaults(func=_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--max-steps", type=int, help="override train.max_steps")
    t.set_defaults(func=_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on an annotated directory")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--bin-width", type=float, default=1.0, help="tip error histogram bin width (reference-scale pixels)")
    e.set_defaults(func=_eval)

    i = sub.add_parser("infer", help="predict masks and tip for images")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--input", required=True, help="image file or directory")
    i.add_argument("--out", required=True)
    i.set_defaults(func=_infer)

    a = sub.add_parser("agreement", help="inter/intra-operator agreement report")
    a.add_argument("--annotations", required=True)
    a.add_argument("--mode", choices=("inter", "intra", "both"), required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=_agreement)

    c = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    c.add_argument("--full", action="store_true", help="also check the end-to-end loss of a micro model")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except IcsinetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
