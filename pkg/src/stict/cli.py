"""Command-line driver: dataset generation, training, evaluation,
inference, and gradient verification.

Exit codes: 0 success, 1 validation failure, 2 numerical failure,
3 I/O failure. Every command prints the fully resolved configuration
before doing any work.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ConfigError, RunConfig
from .data import DatasetError, GenerationError, generate_dataset, load_dataset
from .formats import FormatError, read_ppm, write_pgm
from .losses import LossBreakdown
from .metrics import evaluate
from .tensor import NonFiniteError, Tensor
from .trainer import CheckpointError, init_state, load_checkpoint, run_training, save_checkpoint
from .verify import OP_CHECKS, check_model, check_op


def _load_config(path):
    cfg = RunConfig.load(path) if path else RunConfig()
    cfg.validate()
    return cfg


def _announce(cfg):
    print("# resolved configuration")
    print(cfg.resolved_text(), end="")
    print("# end configuration")


def cmd_gen_data(args):
    cfg = _load_config(args.config)
    _announce(cfg)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise ConfigError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    generate_dataset(
        out,
        cfg.image_scene_spec(),
        cfg.video_scene_spec(),
        cfg["data.labeled_count"],
        cfg["data.video_count"],
        args.seed,
        labeled_only=args.labeled_only,
    )
    print(f"dataset written to {out}")
    return 0


def cmd_train(args):
    cfg = _load_config(args.config)
    _announce(cfg)
    dataset = load_dataset(args.data)
    tc = cfg.train_config()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved.cfg").write_text(cfg.resolved_text())

    state = load_checkpoint(args.resume, tc) if args.resume else init_state(tc)
    log_path = out / "log.csv"
    if not args.resume or not log_path.exists():
        log_path.write_text(LossBreakdown.CSV_HEADER + "\n")

    rows = []

    def on_epoch_end(s):
        with open(log_path, "a") as f:
            for row in rows:
                f.write(row + "\n")
        rows.clear()
        save_checkpoint(s, out / f"ckpt_epoch_{s.epoch:03d}.stck")
        save_checkpoint(s, out / "ckpt_latest.stck")
        print(f"epoch {s.epoch}/{tc.epochs} done ({s.step} steps)")

    run_training(state, dataset, log_rows=rows, on_epoch_end=on_epoch_end)

    scored = [v for v in dataset.videos if v.masks is not None]
    if scored:
        report = evaluate(
            state.student, scored, cfg["eval.threshold"], cfg["eval.beta2"], cfg["eval.domain"]
        )
        (out / "report.csv").write_text(report.to_csv())
        (out / "report.txt").write_text(report.to_text())
        print(report.to_text(), end="")
    print(f"training complete; checkpoints in {out}")
    return 0


def cmd_eval(args):
    cfg = _load_config(args.config)
    _announce(cfg)
    dataset = load_dataset(args.data)
    scored = [v for v in dataset.videos if v.masks is not None]
    if not scored:
        raise DatasetError("no mask-carrying videos to evaluate")
    state = load_checkpoint(args.ckpt, cfg.train_config())
    report = evaluate(
        state.student, scored, cfg["eval.threshold"], cfg["eval.beta2"], cfg["eval.domain"]
    )
    print(report.to_text(), end="")
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    if cfg["eval.strict"] and report.flagged_frames:
        print(f"strict mode: {report.flagged_frames} single-class frames were flagged")
        return 1
    return 0


def cmd_infer(args):
    cfg = _load_config(args.config)
    _announce(cfg)
    frame_dir = Path(args.video) / "frames"
    paths = sorted(frame_dir.glob("*.ppm"))
    if not paths:
        raise DatasetError(f"no frames found under {frame_dir}")
    state = load_checkpoint(args.ckpt, cfg.train_config())
    model = state.student.eval()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    domain = cfg["eval.domain"]
    with T.no_grad():
        for i, p in enumerate(paths):
            frame = read_ppm(p).astype(np.float32).transpose(2, 0, 1) / 255.0
            pred = model.forward(Tensor(frame[None]), domain).r_final.data[0, 0]
            write_pgm(out / f"{i:05d}.pgm", np.clip(np.rint(pred * 255.0), 0, 255).astype(np.uint8))
    print(f"wrote {len(paths)} probability maps to {out}")
    return 0


def cmd_gradcheck(args):
    failed = []
    if args.scope == "op":
        for name in OP_CHECKS:
            report = check_op(name, seeds=range(args.seeds))
            status = "pass" if report.passed else "FAIL"
            print(f"{name:<28} {status}  worst rel err {report.max_rel_error:.3e}")
            if not report.passed:
                failed.append(name)
    else:
        report = check_model(seed=args.seeds and 0)
        status = "pass" if report.passed else "FAIL"
        print(f"{'sanet+supervised-loss':<28} {status}  worst rel err {report.max_rel_error:.3e}")
        if not report.passed:
            failed.append("model")
    if failed:
        raise NonFiniteError(f"gradient verification failed for: {', '.join(failed)}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="stict", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--config", default=None)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--force", action="store_true")
    g.add_argument("--labeled-only", action="store_true")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train on a generated dataset")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", default=None)
    t.add_argument("--resume", default=None)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on mask-carrying videos")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--config", default=None)
    e.add_argument("--csv", default=None)
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("infer", help="write per-frame probability maps for one video")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--video", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--config", default=None)
    i.set_defaults(fn=cmd_infer)

    v = sub.add_parser("gradcheck", help="finite-difference verification")
    v.add_argument("--scope", choices=("op", "model"), default="op")
    v.add_argument("--seeds", type=int, default=20)
    v.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (FormatError, CheckpointError) as e:
        print(f"i/o failure: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"i/o failure: {e}", file=sys.stderr)
        return 3
    except NonFiniteError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    except (ConfigError, GenerationError, DatasetError, T.ShapeError, ValueError) as e:
        print(f"validation failure: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
