"""
Material-prompted hyperspectral tracker
Command-line entry point: data generation, training, evaluation, unmixing export and checks
"""

import argparse
import sys
from typing import List, Optional

import numpy as np
import orjson
import structlog

from lib.ablation import ABLATION_AXES, run_ablation, write_ablation
from lib.checkpoint import load_checkpoint, save_checkpoint
from lib.config import parse_int_list, read_key_values
from lib.evaluation import evaluate_model, write_frame_table, write_metrics_json
from lib.gradcheck import CASES, run_gradchecks
from lib.log import configure_logging
from lib.synthdata import SceneSpec, SequenceRecord, generate_dataset, list_sequences, read_hsvc, write_hsvc
from lib.tensor import as_tensor
from lib.training import load_sequences, load_train_config, train, write_step_log
from lib.unmixing import UnmixingError, decode, encode

logger = structlog.get_logger()


def cmd_gen(args: argparse.Namespace) -> int:
    spec = SceneSpec.from_file(args.spec)
    paths = generate_dataset(spec, args.out, count=args.count)
    logger.info("gen_completed", sequences=len(paths), out=args.out)
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = load_train_config(args.config)
    sequences = load_sequences(args.data)
    result = train(config, sequences, steps=args.steps)
    save_checkpoint(args.out, result.model, train=config.model_dump(mode="json", exclude={"model"}),
                    steps=len(result.step_log))
    if args.log:
        write_step_log(args.log, result.step_log)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    model, metadata = load_checkpoint(args.ckpt)
    paths = list_sequences(args.data)
    sequences = [read_hsvc(p) for p in paths]
    rho = metadata.get("train", {}).get("rho", 0.25)
    combined, per_sequence = evaluate_model(model, sequences, rho=rho, workers=args.workers,
                                            names=[p.stem for p in paths])
    write_metrics_json(args.json, combined, per_sequence)
    if args.csv:
        write_frame_table(args.csv, per_sequence)
    print(orjson.dumps(combined.summary()).decode())
    return 0


def cmd_unmix(args: argparse.Namespace) -> int:
    model, _ = load_checkpoint(args.ckpt)
    if model.unmix is None:
        raise UnmixingError("Checkpoint was trained without the unmixing network")
    record = read_hsvc(args.cube)
    model.eval()
    abundances = encode(as_tensor(record.cubes), model.unmix)
    recon = decode(abundances, model.unmix)
    exported = SequenceRecord(cubes=recon.numpy(), boxes=record.boxes,
                              endmembers=model.unmix.endmember_array(), abundances=abundances.numpy())
    write_hsvc(args.out, exported)
    logger.info("unmix_exported", frames=record.frames, endmembers=model.unmix.endmembers, out=args.out)
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    reports = run_gradchecks(args.op, seeds=args.seeds)
    print(orjson.dumps([r._asdict() for r in reports], option=orjson.OPT_INDENT_2).decode())
    failed = [r.name for r in reports if not r.passed]
    if failed:
        logger.error("gradcheck_failed", entries=failed)
        return 1
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    base = read_key_values(args.config)
    rows = run_ablation(args.axis, base, load_sequences(args.data), load_sequences(args.eval_data),
                        seeds=parse_int_list(args.seeds), steps=args.steps)
    write_ablation(args.out, rows)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpt", description=__doc__)
    parser.add_argument("--log-level", default=None, help="Override MPT_LOG_LEVEL")
    parser.add_argument("--log-format", default=None, choices=["json", "console"], help="Override MPT_LOG_FORMAT")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="Generate synthetic HSVC sequences")
    gen.add_argument("--spec", required=True, help="Scene key=value file")
    gen.add_argument("--out", required=True, help="Output directory")
    gen.add_argument("--count", type=int, default=None, help="Sequences to write (default: spec 'sequences')")
    gen.set_defaults(func=cmd_gen)

    tr = sub.add_parser("train", help="Train a tracker")
    tr.add_argument("--config", required=True, help="Training key=value file")
    tr.add_argument("--data", required=True, help="Directory of .hsvc training sequences")
    tr.add_argument("--out", required=True, help="Checkpoint path")
    tr.add_argument("--steps", type=int, default=None, help="Override the schedule length")
    tr.add_argument("--log", default=None, help="CSV step log path")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="One-pass evaluation of a checkpoint")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data", required=True, help="Directory of .hsvc sequences")
    ev.add_argument("--json", required=True, help="Metrics JSON path")
    ev.add_argument("--csv", default=None, help="Per-frame CSV path")
    ev.add_argument("--workers", type=int, default=None, help="Override MPT_EVAL_WORKERS")
    ev.set_defaults(func=cmd_eval)

    um = sub.add_parser("unmix", help="Export endmembers and abundances of a sequence")
    um.add_argument("--ckpt", required=True)
    um.add_argument("--cube", required=True, help="Input .hsvc sequence")
    um.add_argument("--out", required=True, help="Output .hsvc path")
    um.set_defaults(func=cmd_unmix)

    gc = sub.add_parser("gradcheck", help="Finite-difference gradient checks")
    gc.add_argument("--op", action="append", choices=sorted(CASES), help="Entry to check (repeatable)")
    gc.add_argument("--seeds", type=int, default=None, help="Override MPT_GRADCHECK_SEEDS")
    gc.set_defaults(func=cmd_gradcheck)

    ab = sub.add_parser("ablate", help="Train and evaluate variants along one ablation axis")
    ab.add_argument("--config", required=True, help="Base training key=value file")
    ab.add_argument("--axis", required=True, choices=sorted(ABLATION_AXES))
    ab.add_argument("--data", required=True, help="Training sequences")
    ab.add_argument("--eval-data", required=True, help="Held-out sequences")
    ab.add_argument("--out", required=True, help="Output directory for ablation.csv/json")
    ab.add_argument("--seeds", default="0,1,2", help="Comma-separated seeds")
    ab.add_argument("--steps", type=int, default=None, help="Override the schedule length")
    ab.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level, args.log_format)
    np.seterr(over="ignore", under="ignore")
    try:
        return args.func(args)
    except (ValueError, ArithmeticError, RuntimeError, OSError) as e:
        logger.error("command_failed", command=args.command, error=str(e), error_type=type(e).__name__)
        return 2


if __name__ == "__main__":
    sys.exit(main())
