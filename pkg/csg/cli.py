"""
Command-line front end.

    python -m csg pipeline --config csg.yaml --mode euclidean,spectral
    python -m csg train --mode spectral --out-dir out

Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numerical failure.
"""

import argparse
import json
import logging
import sys
from typing import Any, Dict, List, Optional

from rich.console import Console
from rich.table import Table

from . import __version__
from .config import MODES, PipelineConfig, load_config
from .errors import ConfigError, CsgError
from .logs import configure_logging
from .pipeline import (
    StageRunner,
    run_align,
    run_embed,
    run_evaluate,
    run_pipeline,
    run_predict,
    run_regularize,
    run_split,
    run_synth,
    run_train,
)

logger = logging.getLogger(__name__)

COMMANDS = ("synth", "split", "embed", "align", "train", "predict", "regularize", "evaluate", "pipeline")


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or key = value configuration file")
    common.add_argument("--data-dir", help="Directory of subject folders (mesh.off, sulc.txt, labels.txt)")
    common.add_argument("--out-dir", help="Directory for every stage artifact")
    common.add_argument("--seed", type=int, help="Seed for the split and for network initialization")
    common.add_argument("--workers", type=int, help="Subjects processed concurrently")
    common.add_argument("--log-level", help="Overrides CSG_LOG")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="csg",
        description="Spectral graph-convolution cortical parcellation",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Stages:
  synth -> split -> embed -> align -> train -> predict -> regularize -> evaluate
  'pipeline' runs them all; each stage reads the artifacts of the previous ones.
        """,
    )
    parser.add_argument("--version", action="version", version=f"csg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    common = _common_flags()

    synth = sub.add_parser("synth", parents=[common], help="Generate a synthetic labeled cohort")
    synth.add_argument("--n-subjects", type=int)
    synth.add_argument("--n-vertices", type=int)
    synth.add_argument("--n-parcels", type=int)

    sub.add_parser("split", parents=[common], help="Write the train/val/test split")

    embed = sub.add_parser("embed", parents=[common], help="Spectral embedding per subject")
    embed.add_argument("--d", type=int, help="Embedding dimension (default 3)")
    embed.add_argument("--solver", choices=["lanczos", "lobpcg", "dense"])

    align = sub.add_parser("align", parents=[common], help="Align embeddings to a reference subject")
    align.add_argument("--reference", help="Reference subject id (default: first training subject)")

    for name, text in (("train", "Train one mode"), ("predict", "Predict with a trained mode")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--mode", required=True, choices=MODES)

    regularize = sub.add_parser("regularize", parents=[common], help="MRF refinement of predictions")
    regularize.add_argument("--mode", required=True, choices=MODES)
    regularize.add_argument("--lambda", dest="lam", type=float, help="Potts weight; swept on validation if unset")

    evaluate = sub.add_parser("evaluate", parents=[common], help="Metrics and report")
    evaluate.add_argument("--mode", help="Comma-separated modes (default: configured modes)")

    pipeline = sub.add_parser("pipeline", parents=[common], help="Run every stage")
    pipeline.add_argument("--mode", help="Comma-separated modes to train and compare")
    pipeline.add_argument("--lambda", dest="lam", type=float)
    pipeline.add_argument("--d", type=int)
    pipeline.add_argument("--reference")
    return parser


def _modes(text: str) -> List[str]:
    modes = [m.strip() for m in text.split(",") if m.strip()]
    unknown = [m for m in modes if m not in MODES]
    if unknown or not modes:
        raise ConfigError(f"Unknown mode(s) {unknown or [text]}; expected a comma list of {list(MODES)}")
    return modes


def overrides_from(args: argparse.Namespace) -> Dict[str, Any]:
    """Config overrides for every flag given on the command line."""
    tree: Dict[str, Dict[str, Any]] = {}

    def put(section: str, key: str, value):
        if value is not None:
            tree.setdefault(section, {})[key] = value

    put("runtime", "data_dir", args.data_dir)
    put("runtime", "out_dir", args.out_dir)
    put("runtime", "seed", args.seed)
    put("runtime", "workers", args.workers)
    put("synth", "n_subjects", getattr(args, "n_subjects", None))
    put("synth", "n_vertices", getattr(args, "n_vertices", None))
    put("synth", "n_parcels", getattr(args, "n_parcels", None))
    if getattr(args, "n_parcels", None) is not None:
        put("network", "n_parcels", args.n_parcels)
    put("embedding", "d", getattr(args, "d", None))
    put("embedding", "solver", getattr(args, "solver", None))
    put("alignment", "reference", getattr(args, "reference", None))
    put("mrf", "lambda_", getattr(args, "lam", None))
    if args.command in ("evaluate", "pipeline") and getattr(args, "mode", None):
        put("runtime", "modes", tuple(_modes(args.mode)))
    return tree


def print_summary(path, console: Optional[Console] = None) -> None:
    console = console or Console()
    summary = json.loads(path.read_text(encoding="utf-8"))
    table = Table(title="Test-set summary")
    for column in ("mode", "mean Dice", "std Dice", "mean Hausdorff (mm)", "accuracy"):
        table.add_column(column)
    for mode, row in summary.items():
        table.add_row(
            mode,
            f"{row['dice_mean']:.4f}",
            f"{row['dice_std']:.4f}",
            f"{row['hausdorff_mean']:.2f}",
            f"{row['accuracy_mean']:.4f}",
        )
    console.print(table)


def dispatch(args: argparse.Namespace, config: PipelineConfig) -> None:
    runner = StageRunner(config)
    command = args.command
    if command == "synth":
        run_synth(runner)
    elif command == "split":
        run_split(runner)
    elif command == "embed":
        run_embed(runner)
    elif command == "align":
        run_align(runner, reference=config.alignment.reference)
    elif command == "train":
        run_train(runner, args.mode)
    elif command == "predict":
        run_predict(runner, args.mode)
    elif command == "regularize":
        run_regularize(runner, args.mode, lam=config.mrf.lambda_)
    elif command == "evaluate":
        print_summary(run_evaluate(runner, config.runtime.modes)["summary"])
    elif command == "pipeline":
        print_summary(run_pipeline(runner)["summary"])


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    try:
        config = load_config(args.config, overrides_from(args))
        dispatch(args, config)
    except CsgError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
