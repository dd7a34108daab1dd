"""
Command-line interface.

    auif train --config FILE [--data-ir DIR --data-vis DIR --out model.auif --seed N --ablation NAME]
    auif fuse --checkpoint FILE --ir IMG --vis IMG --out IMG [--strategy S] [--avg-weight W] [--dump-maps DIR]
    auif decompose --method filter|optim|gd-base|gd-detail --input IMG --out-base IMG --out-detail IMG
    auif eval --ir-dir DIR --vis-dir DIR --fused-dir DIR --csv FILE
    auif gradcheck [--tolerance T]
    auif params [--checkpoint FILE]
    auif select-strategy --checkpoint FILE --ir-dir DIR --vis-dir DIR [--csv FILE]
    auif robustness --config FILE --repeats R

Errors raised on purpose by the package end the process with exit code 1 and
one ``error: <ExceptionName>: <message>`` line on stderr.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np

from auif.config import RunConfig, build_run_config, load_run_config
from auif.core.checkpoint import load_checkpoint, save_checkpoint
from auif.core.dataset import load_gray, pair_directories, save_gray
from auif.core.decompose import (
    DEFAULT_ITERS,
    DEFAULT_LAMBDA,
    DEFAULT_OPTIM_ITERS,
    DEFAULT_OPTIM_STEP,
    DEFAULT_THETA,
    classic_gd_decompose,
    filter_decompose,
    optim_decompose,
)
from auif.core.errors import AUIFError, ConfigError
from auif.core.fusion import STRATEGY_NAMES, MergeStrategy, fuse, select_strategy, write_strategy_csv
from auif.core.gradcheck_suite import run_suite
from auif.core.metrics import METRIC_NAMES, evaluate_corpus
from auif.core.network import DEFAULT_CHANNELS, DEFAULT_LAYERS, Ablation, init_network
from auif.core.trainer import repeat_training, train, write_run_logs

logger = logging.getLogger(__name__)

ABLATION_NAMES = [m.lower() for m in Ablation.__members__ if m != "NONE"]


def _run_config(args) -> RunConfig:
    cfg = load_run_config(args.config)
    overrides = {}
    for key in ("data_ir", "data_vis", "out", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "ablation", None):
        overrides["ablation"] = args.ablation
    if overrides:
        cfg = build_run_config({**cfg.model_dump(), **overrides}, source=str(args.config))
    if not cfg.data_ir or not cfg.data_vis:
        raise ConfigError(f"{args.config}: data_ir and data_vis must be set (in the file or with --data-ir/--data-vis)")
    return cfg


def _training_images(cfg: RunConfig) -> List[np.ndarray]:
    dataset = pair_directories(cfg.data_ir, cfg.data_vis, split="train", min_size=cfg.crop)
    return dataset.training_images()


def _write_map(img: np.ndarray, path: str) -> None:
    """``.npy`` keeps the raw float map; any other suffix is an 8-bit image."""
    if Path(path).suffix.lower() == ".npy":
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        np.save(path, img)
    else:
        save_gray(img, path)


def cmd_train(args) -> int:
    cfg = _run_config(args)
    images = _training_images(cfg)
    params, log = train(images, cfg, snapshot_dir=Path(cfg.out).parent)
    save_checkpoint(params, cfg.out)
    paths = write_run_logs(log, cfg.out)
    print(f"checkpoint={cfg.out} initial_loss={log.initial_loss:.6f} "
          f"final_loss={log.final_epoch_loss:.6f} seconds={log.seconds:.1f}")
    print(f"loss_csv={paths['loss']} layers_csv={paths['layers']} config={paths['config']}")
    return 0


def _fusion_strategy(args) -> MergeStrategy:
    """``--strategy`` wins; otherwise the one recorded in the run config beside the checkpoint."""
    name, weight = args.strategy, args.avg_weight
    echo = Path(f"{Path(args.checkpoint).with_suffix('')}.config.txt")
    if name is None and echo.exists():
        run = load_run_config(echo)
        name = run.strategy
        weight = run.avg_weight if weight is None else weight
    return MergeStrategy(name or "addition", 0.5 if weight is None else weight)


def cmd_fuse(args) -> int:
    params = load_checkpoint(args.checkpoint)
    strategy = _fusion_strategy(args)
    ir, vis = load_gray(args.ir), load_gray(args.vis)
    result = fuse(ir, vis, params, strategy, dump_dir=args.dump_maps, name=Path(args.out).stem)
    save_gray(result.fused, args.out)
    print(f"fused={args.out} strategy={result.strategy} seconds={result.seconds:.4f}")
    return 0


def cmd_decompose(args) -> int:
    img = load_gray(args.input)
    if args.method == "filter":
        result = filter_decompose(img)
    elif args.method == "optim":
        result = optim_decompose(
            img,
            lam=DEFAULT_LAMBDA if args.lam is None else args.lam,
            iters=DEFAULT_OPTIM_ITERS if args.iters is None else args.iters,
            step=DEFAULT_OPTIM_STEP if args.eta is None else args.eta,
        )
    else:
        result = classic_gd_decompose(
            img,
            variant=args.method.split("-", 1)[1],
            theta=DEFAULT_THETA if args.theta is None else args.theta,
            eta=args.eta,
            iters=DEFAULT_ITERS if args.iters is None else args.iters,
        )
    _write_map(result.base, args.out_base)
    _write_map(result.detail, args.out_detail)
    final = f" final_objective={result.loss_trace[-1]:.6g}" if result.loss_trace else ""
    print(f"method={result.method} iterations={result.iterations}{final}")
    return 0


def cmd_eval(args) -> int:
    corpus = evaluate_corpus(args.ir_dir, args.vis_dir, args.fused_dir, args.csv, threads=args.threads)
    print(f"images={len(corpus.reports)} " + " ".join(f"{m}={corpus.mean[m]:.4f}" for m in METRIC_NAMES))
    return 0


def cmd_gradcheck(args) -> int:
    result = run_suite(tolerance=args.tolerance, seeds=range(args.seeds), max_entries=args.max_entries)
    for name, report in result.worst_by_case().items():
        status = "ok" if report.passed else "FAIL"
        print(f"{name:<28} max_rel_err={report.max_rel_error:.3e} tol={report.tolerance:.0e} {status}")
    return 0 if result.passed else 1


def cmd_params(args) -> int:
    if args.checkpoint:
        params = load_checkpoint(args.checkpoint)
    else:
        params = init_network(args.layers, args.channels, ablation=Ablation.from_names(args.ablation or []))
    print(params.parameter_count())
    return 0


def cmd_select_strategy(args) -> int:
    params = load_checkpoint(args.checkpoint)
    dataset = pair_directories(args.ir_dir, args.vis_dir, split="val")
    pairs = [dataset.load_pair(i) for i in range(len(dataset))]
    report = select_strategy(pairs, params, avg_weight=args.avg_weight)
    for variant, means in report.means.items():
        print(f"{variant:<9} wins={report.wins[variant]} "
              + " ".join(f"{m}={means[m]:.4f}" for m in METRIC_NAMES)
              + f" seconds={report.mean_seconds[variant]:.4f}")
    if args.csv:
        write_strategy_csv(report, args.csv)
    print(f"best={report.best}")
    return 0


def cmd_robustness(args) -> int:
    cfg = _run_config(args)
    report = repeat_training(_training_images(cfg), cfg, args.repeats)
    for seed, loss in zip(report.seeds, report.final_losses):
        print(f"seed={seed} final_loss={loss:.6f}")
    print(f"mean={report.mean:.6f} std={report.std:.6f} cv={report.cv:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="auif", description="Unrolled two-scale infrared/visible image fusion")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network from a key = value config file")
    p.add_argument("--config", required=True)
    p.add_argument("--data-ir", dest="data_ir")
    p.add_argument("--data-vis", dest="data_vis")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--ablation", action="append", choices=ABLATION_NAMES,
                   help="variant flag; repeat to combine")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("fuse", help="fuse one infrared/visible pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ir", required=True)
    p.add_argument("--vis", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--strategy", choices=STRATEGY_NAMES,
                   help="defaults to the strategy in the checkpoint's run config, else addition")
    p.add_argument("--avg-weight", dest="avg_weight", type=float, default=None)
    p.add_argument("--dump-maps", dest="dump_maps")
    p.set_defaults(handler=cmd_fuse)

    p = sub.add_parser("decompose", help="classical two-scale decomposition of one image")
    p.add_argument("--method", required=True, choices=["filter", "optim", "gd-base", "gd-detail"])
    p.add_argument("--input", required=True)
    p.add_argument("--out-base", dest="out_base", required=True)
    p.add_argument("--out-detail", dest="out_detail", required=True)
    p.add_argument("--theta", type=float)
    p.add_argument("--eta", type=float, help="step size (optim: step on its objective)")
    p.add_argument("--iters", type=int)
    p.add_argument("--lambda", dest="lam", type=float)
    p.set_defaults(handler=cmd_decompose)

    p = sub.add_parser("eval", help="score fused images and write a metrics CSV")
    p.add_argument("--ir-dir", dest="ir_dir", required=True)
    p.add_argument("--vis-dir", dest="vis_dir", required=True)
    p.add_argument("--fused-dir", dest="fused_dir", required=True)
    p.add_argument("--csv", required=True)
    p.add_argument("--threads", type=int, help="worker cap (default: AUIF_THREADS)")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every gradient")
    p.add_argument("--tolerance", type=float, help="override the per-case tolerances")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--max-entries", dest="max_entries", type=int)
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("params", help="print the learnable parameter count")
    p.add_argument("--checkpoint")
    p.add_argument("--layers", type=int, default=DEFAULT_LAYERS)
    p.add_argument("--channels", type=int, default=DEFAULT_CHANNELS)
    p.add_argument("--ablation", action="append", choices=ABLATION_NAMES)
    p.set_defaults(handler=cmd_params)

    p = sub.add_parser("select-strategy", help="pick the fusion strategy on validation pairs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--ir-dir", dest="ir_dir", required=True)
    p.add_argument("--vis-dir", dest="vis_dir", required=True)
    p.add_argument("--avg-weight", dest="avg_weight", type=float, default=0.5)
    p.add_argument("--csv")
    p.set_defaults(handler=cmd_select_strategy)

    p = sub.add_parser("robustness", help="repeat training over consecutive seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--repeats", type=int, required=True)
    p.add_argument("--data-ir", dest="data_ir")
    p.add_argument("--data-vis", dest="data_vis")
    p.set_defaults(handler=cmd_robustness)
    return parser


def cli_dispatch(argv: Optional[List[str]] = None) -> int:
    """
    Parse ``argv`` and run one command.

    Returns:
        0 on success, 1 for a package error, 2 for a usage error.
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 0

    handler: Callable = args.handler
    logger.info(f"▶️ auif {args.command}")
    try:
        code = handler(args)
    except AUIFError as e:
        message = " ".join(str(e).split())
        print(f"error: {type(e).__name__}: {message}", file=sys.stderr)
        logger.error(f"❌ auif {args.command} failed: {type(e).__name__}: {message}")
        return 1
    logger.info(f"🏁 auif {args.command} finished (exit {code})")
    return code
