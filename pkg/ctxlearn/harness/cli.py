"""Command-line entry point: pretrain, probe, ablate, report."""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from ctxlearn import __version__
from ctxlearn.config import setup_logging
from ctxlearn.db import list_runs, record_run
from ctxlearn.db.models import RunKind
from ctxlearn.exceptions import ConfigError, CtxLearnError
from ctxlearn.harness.ablate import run_ablation, summarize as summarize_ablation
from ctxlearn.harness.checkpoint import load_checkpoint
from ctxlearn.harness.datasets import ingest_dataset
from ctxlearn.harness.pretrain import build_model, output_dir_for, pretrain, run_from_checkpoint
from ctxlearn.harness.probe import probe_encoder
from ctxlearn.harness.report import plot_metrics, read_metrics, summarize
from ctxlearn.harness.run_config import cli_overrides, format_validation_error, load_run_config
from ctxlearn.network.params import ModelParams

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_INTERRUPTED = 130


def cmd_pretrain(args) -> int:
    overrides = cli_overrides(args.seed, args.subsample_ratio, args.out)
    run = load_run_config(args.config, overrides)
    print(f"🚀 Pretraining {run.modality.value} model for {run.train.updates} updates (seed {run.seed})")
    result = pretrain(run, out=args.out, resume=args.resume, strict=args.strict)
    print(f"✅ Checkpoint: {result.checkpoint}")
    print(f"📈 Metrics: {result.metrics}")
    return EXIT_OK


def cmd_probe(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    trained = run_from_checkpoint(checkpoint)
    run = trained
    if args.config:
        run = load_run_config(args.config, cli_overrides(args.seed, args.subsample_ratio))
        if run.modality != trained.modality:
            raise ConfigError(
                f"checkpoint modality {trained.modality.value} does not match dataset modality {run.modality.value}"
            )
    seed = run.seed if args.seed is None else args.seed

    encoder, _ = build_model(trained)
    student = checkpoint.group("student.")
    params = ModelParams.from_arrays({n: a for n, a in student.items() if not n.startswith("decoder.")})
    dataset = ingest_dataset(run.dataset, run.modality, seed, trained.features)
    result = probe_encoder(encoder, params, dataset, seed, run.probe)
    record_run(
        RunKind.PROBE,
        modality=run.modality.value,
        seed=seed,
        probe_accuracy=result.accuracy,
        checkpoint_path=str(args.checkpoint),
    )
    print(f"🎯 Probe accuracy: {result.accuracy:.4f} ({result.num_classes} classes, {result.test_size} held out)")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "probe.json").write_text(result.model_dump_json(indent=2))
    return EXIT_OK


def cmd_ablate(args) -> int:
    run = load_run_config(args.config, cli_overrides(None, args.subsample_ratio))
    base_seed = run.seed if args.seed is None else args.seed
    seeds = [base_seed + i for i in range(args.seeds)]
    out = Path(args.out) if args.out else output_dir_for(run) / "ablations"
    print(f"🧪 Ablation {args.recipe!r} over seeds {seeds}")
    rows = run_ablation(args.recipe, run, seeds, out, strict=args.strict)
    for cell, entry in summarize_ablation(rows).items():
        print(f"   {cell}: {json.dumps(entry, sort_keys=True)}")
    print(f"✅ Table: {out / f'ablation_{args.recipe}.csv'}")
    return EXIT_OK


def cmd_report(args) -> int:
    if args.ledger:
        for row in list_runs(args.limit):
            print(json.dumps(row, default=str, sort_keys=True))
        return EXIT_OK
    if not args.csv:
        raise ConfigError("report needs --csv (or --ledger)")
    metrics = read_metrics(args.csv)
    out = Path(args.out) if args.out else Path(args.csv).parent / "plots"
    for path in plot_metrics(args.csv, out):
        print(f"🖼️  {path}")
    print(json.dumps(summarize(metrics, args.window), indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ctxlearn", description="Contextualized-target self-supervised pretraining")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=None, help="Override CTXLEARN_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="Pretrain an encoder")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--strict", action="store_true", help="Serialize everything for bit-exact reruns")
    p.add_argument("--subsample-ratio", type=float)
    p.add_argument("--out", type=Path)
    p.add_argument("--resume", type=Path, help="Checkpoint to continue from")
    p.set_defaults(handler=cmd_pretrain)

    p = sub.add_parser("probe", help="Linear probe on a checkpoint's frozen encoder")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--config", type=Path, help="Run config naming the labeled dataset (default: the checkpoint's)")
    p.add_argument("--seed", type=int)
    p.add_argument("--subsample-ratio", type=float)
    p.add_argument("--out", type=Path)
    p.set_defaults(handler=cmd_probe)

    p = sub.add_parser("ablate", help="Run an ablation recipe")
    p.add_argument("recipe", help="multimask | masking | losses | alibi")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--seed", type=int, help="First seed")
    p.add_argument("--seeds", type=int, default=3, help="Number of seeds per cell")
    p.add_argument("--strict", action="store_true")
    p.add_argument("--subsample-ratio", type=float)
    p.add_argument("--out", type=Path)
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("report", help="Plots and summary from a metrics CSV")
    p.add_argument("--csv", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--window", type=int, default=200, help="Smoothing window for the summary")
    p.add_argument("--ledger", action="store_true", help="List recorded runs instead")
    p.add_argument("--limit", type=int, default=50)
    p.set_defaults(handler=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)
    try:
        return args.handler(args)
    except KeyboardInterrupt:
        print("\n👋 Interrupted")
        return EXIT_INTERRUPTED
    except CtxLearnError as e:
        print(f"❌ {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except ValidationError as e:
        print(f"❌ {format_validation_error(e)}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"❌ I/O error: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:
        logger.exception("Unexpected failure")
        print(f"❌ Error: {e}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
