"""Command-line entry point: ``rseq {train|eval|gradcheck|configs}``.

Exit codes: 0 success, 1 gradient check failed, 2 bad config / data / checkpoint,
3 numeric fault during training.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import sys
from pathlib import Path

import numpy as np

from rseq import numerics as nx
from rseq.checkpoint import load_checkpoint, run_info, save_checkpoint
from rseq.config import RunConfig, load_run_config, parse_config_text, shipped_configs
from rseq.errors import CheckpointError, ConfigError, DataError, NumericFault
from rseq.model import RTransformerModel
from rseq.numerics import Rng
from rseq.tasks import build_task
from rseq.training import TrainState, evaluate, format_metrics, lr_on_plateau, train_epoch

log = logging.getLogger("rseq")

EXIT_OK, EXIT_GRADCHECK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3
LR_FLOOR = 1e-7
CHECKPOINT_NAME = "checkpoint.rseq"
METRICS_NAME = "metrics.log"
DROPOUT_STREAM = 0xD50


def _threads(n: int):
    if n <= 0:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _run_config(args, extra_flags: dict | None = None, base: dict | None = None) -> RunConfig:
    flags = {"seed": args.seed, "threads": args.threads, "precision": args.precision,
             "out_dir": args.out}
    flags.update(extra_flags or {})
    return load_run_config(args.config, flags, args.overrides, base)


def recorded_run(checkpoint) -> dict:
    text = "\n".join(f"{k} = {v}" for k, v in run_info(checkpoint).items())
    return parse_config_text(text, str(checkpoint))


def train(cfg: RunConfig, resume: str | None = None, render: bool = True) -> int:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective.cfg").write_text(cfg.to_text())
    nx.set_default_dtype(cfg.precision)
    task = build_task(cfg)
    ocfg = cfg.optimizer_config()
    if resume:
        model, state = load_checkpoint(resume, expect_config=task.model_config)
    else:
        model = RTransformerModel(task.model_config, Rng(cfg.seed))
        state = TrainState(current_lr=ocfg.lr, rng=Rng(cfg.seed).spawn(DROPOUT_STREAM))
    info = {line.split(" = ", 1)[0]: line.split(" = ", 1)[1] for line in cfg.to_text().splitlines()}
    metrics_path = out / METRICS_NAME
    with open(metrics_path, "a" if resume else "w") as mlog:
        def emit(split, epoch_loss, metric, lr, wall_ms):
            line = format_metrics(state.step, state.epoch, split, epoch_loss, metric, lr, wall_ms)
            mlog.write(line + "\n")
            mlog.flush()
            log.info(line)

        # overflow surfaces as NumericFault from the op's finiteness check; numpy's warning is noise
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                while state.epoch < ocfg.max_epochs:
                    lr = state.current_lr
                    em = train_epoch(model, task.train_batches(state.epoch + 1), state, ocfg)
                    emit("train", em.loss, task.metric(em.loss, em.accuracy), lr, em.wall_ms)
                    val_loss, val_acc = evaluate(model, task.eval_batches["valid"])
                    emit("val", val_loss, task.metric(val_loss, val_acc), lr, 0)
                    lr_on_plateau(state, val_loss, ocfg)
                    save_checkpoint(model, state, out / CHECKPOINT_NAME, info)
                    if state.current_lr < LR_FLOOR * ocfg.lr:
                        log.info("learning rate fell below %g of its initial value; stopping", LR_FLOOR)
                        break
        except NumericFault as exc:
            print(f"numeric fault in op {exc.op!r} at step {state.step}; last good checkpoint kept",
                  file=sys.stderr)
            return EXIT_NUMERIC
        if "test" in task.eval_batches:
            test_loss, test_acc = evaluate(model, task.eval_batches["test"])
            emit("test", test_loss, task.metric(test_loss, test_acc), state.current_lr, 0)
    if render:
        from rseq.report import plot_training

        plot_training(metrics_path, out / "figures")
    return EXIT_OK


def evaluate_checkpoint(checkpoint, split: str = "valid", cfg: RunConfig | None = None) -> dict[str, float]:
    if cfg is None:
        cfg = RunConfig(**recorded_run(checkpoint))
    nx.set_default_dtype(cfg.precision)
    task = build_task(cfg)
    model, _ = load_checkpoint(checkpoint, expect_config=task.model_config)
    if split not in task.eval_batches:
        raise DataError(f"split {split!r} is not available; have {sorted(task.eval_batches)}")
    loss, acc = evaluate(model, task.eval_batches[split])
    return {"loss": loss, task.metric_name: task.metric(loss, acc)}


def gradcheck(cfg: RunConfig, seeds: int, out: str | None = None) -> int:
    from rseq.verify import run_gradcheck

    report = run_gradcheck(num_layers=cfg.num_layers, d_model=cfg.d_model, window=cfg.window,
                           num_heads=cfg.num_heads, d_ff=cfg.d_ff, seq_len=cfg.seq_len,
                           seeds=range(cfg.seed, cfg.seed + seeds))
    for line in report.lines():
        print(line)
    if out:
        from rseq.report import plot_gradcheck

        plot_gradcheck(report.worst, report.tolerance, Path(out) / "figures")
    if not report.passed:
        print("gradient check failed for: " + ", ".join(sorted(report.offenders)), file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="config file path or shipped config name")
    common.add_argument("--seed", type=int)
    common.add_argument("--threads", type=int, help="BLAS threads (0 = library default)")
    common.add_argument("--precision", choices=("f32", "f64"))
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", help="log each metrics line")
    common.add_argument("overrides", nargs="*", metavar="key=value")

    parser = argparse.ArgumentParser(prog="rseq", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--no-figures", action="store_true")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="valid", choices=("valid", "test"))
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--seeds", type=int, default=10)
    sub.add_parser("configs", help="list shipped configs").set_defaults(verbose=False)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    if args.command == "configs":
        print("\n".join(shipped_configs()))
        return EXIT_OK
    try:
        if args.command == "train":
            cfg = _run_config(args, {"max_epochs": args.max_epochs})
            with _threads(cfg.threads):
                return train(cfg, resume=args.resume, render=not args.no_figures)
        if args.command == "eval":
            cfg = _run_config(args, base=recorded_run(args.checkpoint))
            with _threads(cfg.threads):
                results = evaluate_checkpoint(args.checkpoint, args.split, cfg)
            for name, value in results.items():
                print(f"metric={name} value={value:.10g}")
            return EXIT_OK
        if args.config is None:
            args.config = "gradcheck_tiny"
        cfg = _run_config(args)
        with _threads(cfg.threads):
            return gradcheck(cfg, args.seeds, args.out)
    except (ConfigError, DataError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
