"""
Command-line interface.

    gen-data   write a synthetic corpus
    train      train a denoiser on a corpus
    sample     decode a split with a checkpoint
    evaluate   BLEU (and language accuracy) of a hypotheses file
    analyze    nn-recovery | loss-profile | reliance-probe | schedule-equiv | lb-mbr-sweep
    ablate     clipping x sampler grid over seeds

Failures print one line ``error=<kind> code=<n> message=<json>`` to stderr and
exit with the error's code.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from src.analysis.reporting import format_table
from src.config import describe_keys, load_config
from src.errors import SeqDiffError, UsageError
from src.harness import pipeline

logger = logging.getLogger(__name__)


class ArgumentParser(argparse.ArgumentParser):
    """argparse that raises instead of exiting on bad usage."""

    def error(self, message: str) -> None:
        raise UsageError(message)


def _keys_epilog() -> str:
    lines = ["config keys (file: key = value, env: SEQDIFF_<KEY>):"]
    lines.extend(f"  {key:<20} {kind:<28} default {default}" for key, kind, default in describe_keys())
    return "\n".join(lines)


def _floats(text: str) -> List[float]:
    return [float(v) for v in text.split(",") if v]


def _ints(text: str) -> List[int]:
    return [int(v) for v in text.split(",") if v]


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def _add_sampler_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", type=int, help="denoising steps M")
    p.add_argument("--mode", choices=["ddim", "cedi"])
    p.add_argument("--tau-sigma", type=float, help="sigma of the last CeDi model timestep")
    p.add_argument("--length-beam", type=int)
    p.add_argument("--mbr", type=int, help="samples per length beam")
    p.add_argument("--selection", choices=["mbr", "length_score"])
    p.add_argument("--seed", type=int, help="sampling seed")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(
        prog="seqdiff",
        description="Continuous diffusion for sequence-to-sequence tasks on synthetic data.",
        epilog=_keys_epilog(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    _add_common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, help="data seed")

    p = sub.add_parser("train", help="train a denoiser")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--steps", type=int, help="total training steps")
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p.add_argument("--no-clipping", action="store_true", help="train without noise scale clipping")

    p = sub.add_parser("sample", help="decode a split")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--split", default="test", choices=["train", "valid", "test"])
    p.add_argument("--limit", type=int)
    _add_sampler_flags(p)

    p = sub.add_parser("evaluate", help="score hypotheses")
    _add_common(p)
    p.add_argument("--hyp", type=Path, required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--ref", type=Path, help="reference token file")
    group.add_argument("--data", type=Path, help="corpus directory (uses --split)")
    p.add_argument("--split", default="test", choices=["train", "valid", "test"])
    p.add_argument("--out", type=Path, help="where evaluation.json and the manifest go (default: <hyp dir>/evaluation)")

    p = sub.add_parser("analyze", help="diagnostic experiments")
    modes = p.add_subparsers(dest="analysis", required=True)

    a = modes.add_parser("nn-recovery")
    _add_common(a)
    a.add_argument("--out", type=Path, required=True)
    a.add_argument("--vocab-sizes", type=_ints, default=[100, 1000])
    a.add_argument("--dims", type=_ints, default=[16, 64, 128])
    a.add_argument("--samples", type=int, default=50_000)
    a.add_argument("--grid-points", type=int, default=50)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--plot", action="store_true", help="also write an SVG")

    for name in ("loss-profile", "reliance-probe", "schedule-equiv", "lb-mbr-sweep"):
        a = modes.add_parser(name)
        _add_common(a)
        a.add_argument("--checkpoint", type=Path, required=True)
        a.add_argument("--data", type=Path, required=True)
        a.add_argument("--out", type=Path, required=True)
        a.add_argument("--limit", type=int)
        if name == "lb-mbr-sweep":
            a.add_argument("--length-beams", type=_ints, default=[1, 3, 5])
            a.add_argument("--mbr-sizes", type=_ints, default=[1, 5, 10])
            a.add_argument("--steps", type=int)
            a.add_argument("--mode", choices=["ddim", "cedi"])
            a.add_argument("--tau-sigma", type=float)
        else:
            a.add_argument("--seed", type=int, default=0)
        if name == "loss-profile":
            a.add_argument("--grid-points", type=int, default=50)
            a.add_argument("--plot", action="store_true")
        if name == "reliance-probe":
            a.add_argument("--t-grid", type=_floats, default=[0.1 * i for i in range(1, 11)])
            a.add_argument("--large-tau", type=float, default=0.995)
            a.add_argument("--plot", action="store_true")
        if name == "schedule-equiv":
            a.add_argument("--samples", type=int, default=100_000)

    p = sub.add_parser("ablate", help="clipping x sampler grid")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seeds", type=_ints, default=[1, 2, 3])
    p.add_argument("--mbr-sizes", type=_ints, default=[1, 10])
    p.add_argument("--limit", type=int)
    return parser


def _overrides(args: argparse.Namespace, mapping: Dict[str, str]) -> Dict[str, str]:
    """Explicit --set pairs, then flags named in ``mapping`` (attribute -> config key)."""
    values: Dict[str, str] = {}
    for pair in args.set:
        key, sep, value = pair.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {pair!r}")
        values[key.strip()] = value.strip()
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            values[key] = str(value)
    return values


_SAMPLER_FLAGS = {
    "steps": "sample_steps",
    "mode": "mode",
    "tau_sigma": "tau_sigma",
    "length_beam": "length_beam",
    "mbr": "mbr",
    "selection": "selection",
    "seed": "sample_seed",
}


def _print_rows(columns: Sequence[str], rows) -> None:
    print(format_table(columns, rows))


def run(args: argparse.Namespace) -> None:
    command = args.command

    if command == "gen-data":
        config = load_config(args.config, overrides=_overrides(args, {"seed": "data_seed"}))
        corpus = pipeline.gen_data(config, args.out)
        print(f"wrote {args.out}  collision_rate={corpus.collision_rate:.4f}")

    elif command == "train":
        flags = _overrides(args, {"steps": "steps", "seed": "seed"})
        if args.no_clipping:
            flags["noise_clipping"] = "false"
        config = load_config(args.config, overrides=flags)
        trainer = pipeline.train(config, args.data, args.out, resume=args.resume)
        last = trainer.history[-1] if trainer.history else {}
        print(f"trained {trainer.step} steps  sigma_min={last.get('sigma_min', float('nan')):.4f}")

    elif command == "sample":
        results = pipeline.sample(
            args.checkpoint, args.data, args.out,
            overrides=_overrides(args, _SAMPLER_FLAGS), split=args.split, limit=args.limit,
        )
        per_source = len(results[0].candidates) if results else 0
        print(f"decoded {len(results)} sources  candidates_per_source={per_source}")

    elif command == "evaluate":
        config = load_config(args.config, overrides=_overrides(args, {}))
        if args.ref is not None:
            result = pipeline.evaluate_files(args.hyp, args.ref)
            inputs = {"hypotheses": str(args.hyp), "references": str(args.ref)}
        else:
            result = pipeline.evaluate(args.hyp, args.data, args.split)
            inputs = {"hypotheses": str(args.hyp), "data": str(args.data), "split": args.split}
        pipeline.record_evaluation(args.out or args.hyp.parent / "evaluation", config, result, inputs)
        row = [result.sentences, result.bleu]
        columns = ["sentences", "bleu"]
        if result.language_accuracy is not None:
            columns.append("language_accuracy")
            row.append(result.language_accuracy)
        _print_rows(columns, [row])

    elif command == "analyze":
        _run_analysis(args)

    elif command == "ablate":
        config = load_config(args.config, overrides=_overrides(args, {}))
        report = pipeline.run_ablation(config, args.seeds, args.data, args.out, args.mbr_sizes, args.limit)
        _print_rows(pipeline.ABLATION_COLUMNS, report.rows())
        for name, ok in report.ordering_checks(min(args.mbr_sizes)).items():
            print(f"{name:<24} {'yes' if ok else 'no'}")


def _run_analysis(args: argparse.Namespace) -> None:
    kind = args.analysis
    if kind == "nn-recovery":
        config = load_config(args.config, overrides=_overrides(args, {}))
        rows = pipeline.analyze_nn_recovery(
            args.out, args.vocab_sizes, args.dims, args.samples, args.grid_points, args.seed, args.plot, config,
        )
        print(f"wrote {len(rows)} rows to {args.out}")
    elif kind == "loss-profile":
        rows = pipeline.analyze_loss_profile(
            args.checkpoint, args.data, args.out, args.grid_points, args.limit, args.seed, args.plot,
        )
        _print_rows(("sigma", "diffusion_loss"), rows)
    elif kind == "reliance-probe":
        rows = pipeline.analyze_reliance_probe(
            args.checkpoint, args.data, args.out, args.t_grid, args.large_tau, args.limit, args.seed, args.plot,
        )
        _print_rows(("t", "policy", "mse_to_truth", "mse_to_negative"), rows)
    elif kind == "schedule-equiv":
        result = pipeline.analyze_schedule_equivalence(
            args.checkpoint, args.data, args.out, args.samples, args.limit, args.seed,
        )
        _print_rows(("lhs", "rhs", "relative_gap"), [result])
    elif kind == "lb-mbr-sweep":
        flags = _overrides(args, {"steps": "sample_steps", "mode": "mode", "tau_sigma": "tau_sigma"})
        rows = pipeline.analyze_lb_mbr_sweep(
            args.checkpoint, args.data, args.out, args.length_beams, args.mbr_sizes, flags, args.limit,
        )
        _print_rows(("length_beam", "mbr", "nfe", "bleu"), rows)


def _report_error(exc: BaseException, kind: str, code: int) -> int:
    print(f"error={kind} code={code} message={json.dumps(str(exc))}", file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the CLI; returns the process exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=getattr(args, "log_level", "INFO"), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
        run(args)
    except SeqDiffError as exc:
        return _report_error(exc, exc.kind, exc.exit_code)
    except Exception as exc:  # noqa: BLE001
        logger.debug("unexpected failure", exc_info=True)
        return _report_error(exc, "internal", 1)
    return 0
