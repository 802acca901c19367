"""``gatedunipose`` command line: verify | train-toy | eval | params | deploy.

Exit codes: 0 success, 1 property or metric failure, 2 usage or config error.
Every command writes ``manifest.json`` into its output directory.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensor as T
from . import verify as V
from .config import RunConfig, dump_config, load_config
from .data import read_annotation_file, read_predictions
from .evaluation import average_precision, pckh
from .exceptions import AnnotationError, GatedUniPoseError
from .model import build_model, load_checkpoint, parameter_breakdown, save_checkpoint, switch_to_deploy
from .runlog import RunManifest, configure_logging, git_describe, kv, utc_now
from .seeding import derive_seed
from .training import ToyTrainer, TrainingDiverged

log = logging.getLogger("gatedunipose.cli")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
PUBLISHED_PARAMS_M = 52.4
DEPLOY_TOLERANCE = 1e-4


class PropertyFailure(Exception):
    """A check ran to completion and did not hold; maps to exit code 1."""


def builtin_config_path(name: str) -> Path | None:
    path = resources.files("gatedunipose") / "configs" / f"{name}.toml"
    return Path(str(path)) if path.is_file() else None


def resolve_config(args) -> RunConfig:
    if args.config is None:
        config = RunConfig()
    else:
        path = Path(args.config)
        if not path.exists() and builtin_config_path(args.config) is not None:
            path = builtin_config_path(args.config)
        config = load_config(path)
    if args.seed is not None:
        config.with_seed(args.seed)
    if args.precision is not None:
        config.precision = args.precision
    return config.validate()


# ---------------------------------------------------------------------------
# commands


def cmd_verify(args, config: RunConfig, out_dir: Path) -> dict:
    v = config.verify
    cases = args.cases if args.cases is not None else v.cases
    rows = V.run_all(cases, v.coords_per_case, v.reparam_inputs, v.codec_positions, config.seed)
    print(V.format_results(rows))
    failed = [r.name for r in rows if not r.passed]
    report = [{"name": r.name, "passed": r.passed, "detail": r.detail, "seconds": round(r.seconds, 3)}
              for r in rows]
    (out_dir / "verify.json").write_text(json.dumps(report, indent=1) + "\n")
    summary = {"checks": len(rows), "failed": failed}
    if failed:
        log.error(kv(event="verify.failed", count=len(failed), checks=",".join(failed)))
        raise PropertyFailure(summary)
    log.info(kv(event="verify.passed", checks=len(rows)))
    return summary


def cmd_train_toy(args, config: RunConfig, out_dir: Path) -> dict:
    if args.steps is not None:
        config.train.steps = args.steps
    if args.lr is not None:
        config.train.lr = args.lr
    model = build_model(config.model)
    teacher = load_checkpoint(args.teacher) if args.teacher else None
    trainer = ToyTrainer(model, config.data, config.train, teacher=teacher, out_dir=out_dir)
    start = trainer.restore(args.resume) if args.resume else 0
    remaining = max(config.train.steps - start, 0)
    log.info(kv(event="train.start", start_step=start, steps=remaining, lr=config.train.lr,
                batch_size=config.train.batch_size, samples=config.data.samples))
    try:
        result = trainer.run(start_step=start, steps=remaining)
    except TrainingDiverged as exc:
        log.error(kv(event="train.diverged", error=str(exc), dump=str(out_dir)))
        raise PropertyFailure({"diverged": str(exc)}) from exc
    with (out_dir / "metrics.log").open("a" if args.resume else "w") as fh:
        for epoch in result.epochs:
            fh.write(kv(event="epoch", **epoch) + "\n")
        fh.write(kv(event="final", steps=start + remaining, pck=result.final_pck,
                    loss_first=result.losses[0] if result.losses else float("nan"),
                    loss_last=result.losses[-1] if result.losses else float("nan")) + "\n")
    (out_dir / "losses.json").write_text(json.dumps(result.losses) + "\n")
    checkpoint = trainer.save(out_dir)
    summary = {"start_step": start, "steps": remaining, "final_pck": result.final_pck,
               "loss_first": result.losses[0] if result.losses else None,
               "loss_last": result.losses[-1] if result.losses else None,
               "loss_reduction": result.loss_reduction, "seconds": round(result.seconds, 2),
               "checkpoint": str(checkpoint)}
    log.info(kv(event="train.done", **{k: v for k, v in summary.items() if v is not None}))
    return summary


def cmd_eval(args, config: RunConfig, out_dir: Path) -> dict:
    ann = read_annotation_file(args.ann)
    if not ann.records:
        raise AnnotationError(f"{args.ann}: no annotations")
    joints = ann.records[0].num_joints
    preds = read_predictions(args.pred)
    for p in preds:
        if p.keypoints.shape[0] != joints:
            raise AnnotationError(f"joint-count mismatch: predictions have {p.keypoints.shape[0]} joints, "
                                  f"annotations have {joints}")
    if args.metric == "ap":
        report = average_precision(preds, ann.records)
    else:
        report = pckh(preds, ann.records, args.fraction)
    for w in report.warnings:
        log.warning(kv(event="eval.warning", message=w))
    print(report.format_table())
    print(kv(metric=args.metric, value=f"{report.value:.3f}"))
    (out_dir / "report.json").write_text(report.to_json() + "\n")
    (out_dir / "report.txt").write_text(report.format_table() + "\n")
    return {"metric": args.metric, "value": report.value, "warnings": report.warnings, **report.counts}


def _param_rows(model) -> list:
    rows = []
    for name, count in parameter_breakdown(model).items():
        if name == "stages":
            for i, stage in enumerate(model.stages):
                rows.append((f"stages.{i}", sum(p.size for p in stage.parameters())))
        elif name != "total":
            rows.append((name, count))
    return rows


def cmd_params(args, config: RunConfig, out_dir: Path) -> dict:
    model = build_model(config.model)
    rows = _param_rows(model)
    total = sum(c for _, c in rows)
    width = max(len(n) for n, _ in rows + [("total", 0)])
    print(f"{'module':<{width}}  {'params':>12}  {'M':>6}")
    for name, count in rows:
        print(f"{name:<{width}}  {count:>12,}  {T.format_millions(count):>6}")
    print(f"{'total':<{width}}  {total:>12,}  {T.format_millions(total):>6}")
    summary = {"preset": config.preset, "total": total, "total_m": T.format_millions(total),
               "modules": dict(rows)}
    if config.preset == "paper":
        diff = total / 1e6 - PUBLISHED_PARAMS_M
        print(f"published GatedUniPose-B: {PUBLISHED_PARAMS_M:.1f} M  (this build {T.format_millions(total)} M, "
              f"difference {diff:+.1f} M)")
        summary["published_m"] = PUBLISHED_PARAMS_M
    (out_dir / "params.json").write_text(json.dumps(summary, indent=1) + "\n")
    return summary


def cmd_deploy(args, config: RunConfig, out_dir: Path) -> dict:
    model = load_checkpoint(args.checkpoint)
    rng = np.random.default_rng(derive_seed(config.seed, 0xDE9))
    inputs = [rng.standard_normal((1, 3) + model.config.input_size) for _ in range(args.inputs)]
    before = [model.predict(x) for x in inputs]
    switch_to_deploy(model)
    worst = max(float(np.max(np.abs(b.astype(np.float64) - model.predict(x).astype(np.float64))))
                for b, x in zip(before, inputs))
    out = Path(args.out) if args.out else out_dir / "model_deployed.gupz"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out)
    print(f"max_abs_diff={worst:.3e} tolerance={DEPLOY_TOLERANCE:g} inputs={args.inputs} out={out}")
    summary = {"max_abs_diff": worst, "tolerance": DEPLOY_TOLERANCE, "out": str(out)}
    if not worst <= DEPLOY_TOLERANCE:
        raise PropertyFailure(summary)
    return summary


COMMANDS = {
    "verify": cmd_verify,
    "train-toy": cmd_train_toy,
    "eval": cmd_eval,
    "params": cmd_params,
    "deploy": cmd_deploy,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config path, or a built-in name (toy, paper)")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--precision", choices=("f32", "f64"), help="overrides the config precision")
    common.add_argument("--threads", type=int, help="BLAS thread cap; 1 forces the bit-deterministic path")
    common.add_argument("--out-dir", help="output directory (default runs/<command>)")

    parser = argparse.ArgumentParser(prog="gatedunipose", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", parents=[common], help="run the property suites")
    p.add_argument("--cases", type=int, help="randomized cases per gradient check")

    p = sub.add_parser("train-toy", parents=[common], help="train the toy model on synthetic data")
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--resume", help="directory holding model.gupz and optimizer.gupz")
    p.add_argument("--teacher", help="teacher checkpoint for output distillation")

    p = sub.add_parser("eval", parents=[common], help="score predictions against annotations")
    p.add_argument("--pred", required=True)
    p.add_argument("--ann", required=True)
    p.add_argument("--metric", choices=("ap", "pckh"), default="ap")
    p.add_argument("--fraction", type=float, default=0.5, help="PCKh head-size fraction")

    sub.add_parser("params", parents=[common], help="per-module parameter counts")

    p = sub.add_parser("deploy", parents=[common], help="merge re-parameterisable branches")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    p.add_argument("--inputs", type=int, default=4, help="random inputs for the equivalence check")
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    configure_logging()
    out_dir = Path(args.out_dir or Path("runs") / args.command)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(command=args.command, argv=argv, config="", seed=args.seed or 0,
                           precision=args.precision or "f32", threads=args.threads,
                           git_describe=git_describe(Path(__file__).parent), started=utc_now())
    code, result = EXIT_OK, {}
    try:
        config = resolve_config(args)
        manifest.config = dump_config(config)
        manifest.seed, manifest.precision = config.seed, config.precision
        log.info(kv(event="start", command=args.command, seed=config.seed, precision=config.precision,
                    out_dir=str(out_dir)))
        limits = threadpool_limits(args.threads) if args.threads else contextlib.nullcontext()
        with limits, T.precision(config.precision):
            result = COMMANDS[args.command](args, config, out_dir)
    except PropertyFailure as exc:
        code, result = EXIT_FAIL, exc.args[0] if exc.args else {}
    except (GatedUniPoseError, ValueError, OSError) as exc:
        code, result = EXIT_USAGE, {"error": f"{type(exc).__name__}: {exc}"}
        log.error(kv(event="error", kind=type(exc).__name__, message=str(exc)))
        print(f"error: {exc}", file=sys.stderr)
    except Exception as exc:  # unexpected: still leave a manifest behind
        code, result = EXIT_FAIL, {"error": f"{type(exc).__name__}: {exc}"}
        log.exception(kv(event="crash", kind=type(exc).__name__))
    manifest.finish(code, **result).write(out_dir)
    log.info(kv(event="exit", code=code, manifest=str(out_dir / "manifest.json")))
    return code


if __name__ == "__main__":
    sys.exit(main())
