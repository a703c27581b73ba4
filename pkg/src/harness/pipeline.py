"""
End-to-end experiment steps: generate data, train, sample, evaluate, analyze,
and the clipping x sampler ablation.

Each step reads and writes plain files under an output directory and records a
manifest, so steps can be run separately from the CLI or chained in-process.
"""

import json
import logging
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from src.analysis.bleu import corpus_bleu
from src.analysis.loss_profile import loss_vs_sigma_profile, sigma_histogram
from src.analysis.nn_recovery import closed_form_recovery_accuracy, default_sigma_grid, nn_recovery_experiment
from src.analysis.reliance_probe import LARGE_TAU, build_probe_triples, condition_reliance_probe
from src.analysis.reporting import plot_lines, write_table
from src.analysis.schedule_equivalence import schedule_equivalence_check
from src.analysis.sweep import lb_mbr_sweep
from src.config import ExperimentConfig, SamplerMode
from src.decoding import decode_corpus
from src.embedding import sigma_min
from src.entities import CandidateSet, Example, Vocabulary
from src.experiment_builder import ablation_grid
from src.harness.checkpoint import (
    CHECKPOINT_FILE,
    LoadedModel,
    checkpoint_payload,
    load_checkpoint,
    restore_model,
    save_checkpoint,
)
from src.harness.corpus import VOCAB_FILE, directory_checksums, load_split, read_tokens, write_tokens
from src.harness.manifest import clipping_summary, write_manifest
from src.harness.tasks import Corpus, generate_dataset, language_accuracy
from src.training import Trainer, run_training

logger = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
HYPOTHESES_FILE = "hypotheses.txt"
CANDIDATES_FILE = "candidates.jsonl"
EVALUATION_FILE = "evaluation.json"


def _flat_config(config: ExperimentConfig) -> Dict[str, object]:
    return {"config_hash": config.config_hash(), "seed": config.seed}


def gen_data(config: ExperimentConfig, out_dir: Path) -> Corpus:
    corpus = generate_dataset(config.task, out_dir)
    write_manifest(out_dir, "gen-data", config, {
        "checksums": directory_checksums(out_dir),
        "collision_rate": corpus.collision_rate,
    })
    return corpus


def load_vocab(data_dir: Path) -> Vocabulary:
    return Vocabulary.load(Path(data_dir) / VOCAB_FILE)


def train(
    config: ExperimentConfig,
    data_dir: Path,
    out_dir: Path,
    steps: Optional[int] = None,
    resume: Optional[Path] = None,
) -> Trainer:
    """
    Train on ``data_dir``/train.jsonl, checkpointing into ``out_dir``.

    Writes checkpoint.pt, metrics.csv (one row per step, with the sigma_min /
    t_min trace) and a manifest summarising the clipping trace.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab = load_vocab(data_dir)
    examples = load_split(data_dir, "train")
    ckpt_path = out_dir / CHECKPOINT_FILE

    def on_checkpoint(trainer: Trainer) -> None:
        save_checkpoint(ckpt_path, checkpoint_payload(config, vocab, trainer.state_dict()))

    resume_state = load_checkpoint(resume)["trainer"] if resume is not None else None
    trainer = run_training(config, vocab, examples, steps, on_checkpoint, resume_state)
    trainer.write_metrics(out_dir / METRICS_FILE)
    write_manifest(out_dir, "train", config, {
        "steps": trainer.step,
        "data_checksums": directory_checksums(data_dir),
        "clipping": clipping_summary(trainer.clipping_trace),
        "noise_clipping": config.train.noise_clipping,
    })
    return trainer


def load_model(checkpoint: Path) -> LoadedModel:
    return restore_model(load_checkpoint(checkpoint))


def _limited(examples: List[Example], limit: Optional[int]) -> List[Example]:
    return examples if limit is None else examples[:limit]


def sample(
    checkpoint: Path,
    data_dir: Path,
    out_dir: Path,
    overrides: Optional[Mapping[str, str]] = None,
    split: str = "test",
    limit: Optional[int] = None,
    progress: bool = False,
) -> List[CandidateSet]:
    """
    Decode a split with a trained model.

    Sampler settings come from the checkpoint config, updated by flat ``overrides``.

    Writes hypotheses.txt (the selected candidate per source) and
    candidates.jsonl (every candidate, its length, the selection and NFE).
    """
    loaded = load_model(checkpoint)
    config = loaded.config.with_overrides(overrides or {})
    examples = _limited(load_split(data_dir, split), limit)
    results = decode_corpus(
        loaded.model, loaded.table, [ex.src for ex in examples], config.sampler, loaded.schedule, progress=progress,
    )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_tokens(out_dir / HYPOTHESES_FILE, [r.best.tokens for r in results])
    with open(out_dir / CANDIDATES_FILE, "w") as fh:
        for r in results:
            fh.write(json.dumps({
                "candidates": [list(c.tokens) for c in r.candidates],
                "lengths": [c.length for c in r.candidates],
                "selected": r.selected,
                "nfe": r.nfe,
            }, separators=(",", ":")) + "\n")
    write_manifest(out_dir, "sample", config, {
        "checkpoint": str(checkpoint),
        "split": split,
        "sources": len(results),
        "candidates_per_source": config.sampler.length_beam * config.sampler.mbr_samples,
    })
    return results


@dataclass
class Evaluation:
    bleu: float
    sentences: int
    language_accuracy: Optional[float] = None


def score(
    hypotheses: Sequence[Sequence[int]],
    references: Sequence[Example],
    vocab: Optional[Vocabulary] = None,
) -> Evaluation:
    """BLEU against the references, plus language accuracy for tagged multilingual data."""
    bleu = corpus_bleu(hypotheses, [ex.tgt for ex in references])
    lang_acc = None
    if vocab is not None and vocab.tags and all(ex.lang is not None for ex in references):
        lang_acc = language_accuracy(hypotheses, [ex.lang for ex in references], vocab)
    return Evaluation(bleu=bleu, sentences=len(hypotheses), language_accuracy=lang_acc)


def evaluate(hypotheses_path: Path, data_dir: Path, split: str = "test") -> Evaluation:
    hypotheses = read_tokens(hypotheses_path)
    references = load_split(data_dir, split)[:len(hypotheses)]
    vocab_path = Path(data_dir) / VOCAB_FILE
    vocab = Vocabulary.load(vocab_path) if vocab_path.exists() else None
    return score(hypotheses, references, vocab)


def evaluate_files(hypotheses_path: Path, references_path: Path) -> Evaluation:
    """BLEU between two token files."""
    hypotheses = read_tokens(hypotheses_path)
    references = [Example(src=(), tgt=tuple(r)) for r in read_tokens(references_path)]
    return score(hypotheses, references)


def record_evaluation(
    out_dir: Path,
    config: ExperimentConfig,
    evaluation: Evaluation,
    inputs: Mapping[str, str],
) -> Path:
    """Write evaluation.json and the run manifest into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / EVALUATION_FILE
    path.write_text(json.dumps(asdict(evaluation), indent=1, sort_keys=True) + "\n")
    write_manifest(out_dir, "evaluate", config, {"inputs": dict(inputs), "bleu": evaluation.bleu})
    return path


# analyses


def _analysis_manifest(
    out_dir: Path,
    kind: str,
    checkpoint: Path,
    config: ExperimentConfig,
    seed: int,
    extra: Optional[Dict[str, object]] = None,
) -> None:
    write_manifest(out_dir, f"analyze {kind}", config, {"seed": seed, "checkpoint": str(checkpoint), **(extra or {})})


def analyze_nn_recovery(
    out_dir: Path,
    vocab_sizes: Sequence[int],
    dims: Sequence[int],
    samples: int,
    grid_points: int = 50,
    seed: int = 0,
    plot: bool = False,
    config: Optional[ExperimentConfig] = None,
) -> List[Tuple]:
    """
    Recovery curves for every (V, D); needs no checkpoint.

    ``config`` only feeds the manifest (defaults when omitted).
    """
    grid = [0.0] + default_sigma_grid(grid_points)
    rows = []
    series = {}
    for v in vocab_sizes:
        for d in dims:
            curve = nn_recovery_experiment(v, d, grid, samples, seed)
            rows.extend((v, d, s, acc) for s, acc in curve)
            series[f"V={v} D={d}"] = [acc for _, acc in curve]
    series["closed form V=2"] = [closed_form_recovery_accuracy(s) for s in grid]
    out_dir = Path(out_dir)
    write_table(out_dir / "nn_recovery.csv", ("vocab_size", "dim", "sigma", "accuracy"), rows, {
        "samples_per_sigma": samples, "seed": seed,
    })
    if plot:
        plot_lines(out_dir / "nn_recovery.svg", grid, series, "sigma", "nearest-neighbour accuracy")
    write_manifest(out_dir, "analyze nn-recovery", config or ExperimentConfig(), {
        "seed": seed, "vocab_sizes": list(vocab_sizes), "dims": list(dims), "samples_per_sigma": samples,
    })
    return rows


def analyze_loss_profile(
    checkpoint: Path,
    data_dir: Path,
    out_dir: Path,
    grid_points: int = 50,
    limit: Optional[int] = None,
    seed: int = 0,
    plot: bool = False,
) -> List[Tuple[float, float]]:
    loaded = load_model(checkpoint)
    examples = _limited(load_split(data_dir, "valid"), limit)
    rows = loss_vs_sigma_profile(loaded.model, loaded.table, examples, default_sigma_grid(grid_points),
                                 loaded.schedule, seed)
    out_dir = Path(out_dir)
    meta = _flat_config(loaded.config)
    write_table(out_dir / "loss_profile.csv", ("sigma", "diffusion_loss"), rows, meta)
    t_min = 0.0
    if loaded.config.train.noise_clipping:
        t_min = float(loaded.schedule.sigma_inverse(sigma_min(loaded.table)))
    edges, counts = sigma_histogram(loaded.schedule, t_min, seed=seed)
    write_table(out_dir / "sigma_histogram.csv", ("sigma_low", "sigma_high", "count"),
                [(float(edges[i]), float(edges[i + 1]), int(c)) for i, c in enumerate(counts)], meta)
    if plot:
        plot_lines(out_dir / "loss_profile.svg", [s for s, _ in rows], {"loss": [v for _, v in rows]},
                   "sigma", "diffusion loss")
    _analysis_manifest(out_dir, "loss-profile", checkpoint, loaded.config, seed)
    return rows


def analyze_reliance_probe(
    checkpoint: Path,
    data_dir: Path,
    out_dir: Path,
    t_grid: Sequence[float],
    large_tau: float = LARGE_TAU,
    limit: Optional[int] = None,
    seed: int = 0,
    plot: bool = False,
):
    loaded = load_model(checkpoint)
    triples = build_probe_triples(_limited(load_split(data_dir, "valid"), limit), seed)
    rows = condition_reliance_probe(loaded.model, loaded.table, triples, t_grid, loaded.schedule, large_tau, seed)
    out_dir = Path(out_dir)
    write_table(out_dir / "reliance_probe.csv", ("t", "policy", "mse_to_truth", "mse_to_negative"), rows,
                {**_flat_config(loaded.config), "triples": len(triples)})
    if plot:
        policies = sorted({r[1] for r in rows})
        series = {}
        for p in policies:
            series[f"truth {p}"] = [r[2] for r in rows if r[1] == p]
            series[f"negative {p}"] = [r[3] for r in rows if r[1] == p]
        plot_lines(out_dir / "reliance_probe.svg", list(t_grid), series, "t", "mse")
    _analysis_manifest(out_dir, "reliance-probe", checkpoint, loaded.config, seed, {"triples": len(triples)})
    return rows


def analyze_schedule_equivalence(
    checkpoint: Path,
    data_dir: Path,
    out_dir: Path,
    n_samples: int,
    limit: Optional[int] = None,
    seed: int = 0,
) -> Tuple[float, float, float]:
    loaded = load_model(checkpoint)
    examples = _limited(load_split(data_dir, "valid"), limit)
    result = schedule_equivalence_check(loaded.model, loaded.table, examples, n_samples, seed,
                                        model_schedule=loaded.schedule)
    write_table(Path(out_dir) / "schedule_equivalence.csv", ("lhs", "rhs", "relative_gap"), [result],
                {**_flat_config(loaded.config), "n_samples": n_samples})
    _analysis_manifest(out_dir, "schedule-equiv", checkpoint, loaded.config, seed, {"n_samples": n_samples})
    return result


def analyze_lb_mbr_sweep(
    checkpoint: Path,
    data_dir: Path,
    out_dir: Path,
    length_beams: Sequence[int],
    mbr_sizes: Sequence[int],
    overrides: Optional[Mapping[str, str]] = None,
    limit: Optional[int] = None,
):
    loaded = load_model(checkpoint)
    config = loaded.config.with_overrides(overrides or {})
    examples = _limited(load_split(data_dir, "valid"), limit)
    rows = lb_mbr_sweep(loaded.model, loaded.table, examples, length_beams, mbr_sizes,
                        config.sampler, loaded.schedule)
    write_table(Path(out_dir) / "lb_mbr_sweep.csv", ("length_beam", "mbr", "nfe", "bleu"), rows,
                _flat_config(config))
    _analysis_manifest(out_dir, "lb-mbr-sweep", checkpoint, config, config.sampler.seed, {
        "length_beams": list(length_beams), "mbr_sizes": list(mbr_sizes),
    })
    return rows


# ablation


@dataclass
class AblationReport:
    """
    Median validation scores of the clipping x sampler grid.

    Attributes:
        cells: (noise_clipping, mode, mbr) -> per-seed BLEU.
        language: Same keys -> per-seed language accuracy (tagged multilingual tasks only).
    """
    cells: Dict[Tuple[bool, SamplerMode, int], List[float]] = field(default_factory=dict)
    language: Dict[Tuple[bool, SamplerMode, int], List[float]] = field(default_factory=dict)

    def median(self, clipping: bool, mode: SamplerMode, mbr: int) -> float:
        return statistics.median(self.cells[(clipping, mode, mbr)])

    def median_language(self, clipping: bool, mode: SamplerMode, mbr: int) -> float:
        return statistics.median(self.language[(clipping, mode, mbr)])

    def ordering_checks(self, mbr: int = 1) -> Dict[str, bool]:
        """
        clipped_cedi_ge_ddim: with clipping, CeDi is at least as good as DDIM.
        unclipped_ddim_worst: unclipped DDIM is the worst cell.
        gap_larger_unclipped: the CeDi - DDIM gap grows without clipping.
        """
        m = {(c, mode): self.median(c, mode, mbr) for c in (True, False) for mode in SamplerMode}
        worst = min(m.values())
        return {
            "clipped_cedi_ge_ddim": m[(True, SamplerMode.CEDI)] >= m[(True, SamplerMode.DDIM)],
            "unclipped_ddim_worst": m[(False, SamplerMode.DDIM)] == worst,
            "gap_larger_unclipped": (
                m[(False, SamplerMode.CEDI)] - m[(False, SamplerMode.DDIM)]
                > m[(True, SamplerMode.CEDI)] - m[(True, SamplerMode.DDIM)]
            ),
        }

    def rows(self) -> List[Tuple]:
        out = []
        for (clipping, mode, mbr), scores in sorted(self.cells.items(), key=lambda kv: (not kv[0][0], kv[0][1].value, kv[0][2])):
            lang = self.language.get((clipping, mode, mbr))
            out.append((
                "on" if clipping else "off", mode.value, mbr,
                statistics.median(scores),
                self.median_language(clipping, mode, mbr) if lang else "",
            ))
        return out


ABLATION_COLUMNS = ("noise_clipping", "mode", "mbr", "median_bleu", "median_language_accuracy")


def run_ablation(
    base: ExperimentConfig,
    seeds: Sequence[int],
    data_dir: Path,
    out_dir: Path,
    mbr_sizes: Sequence[int] = (1, 10),
    limit: Optional[int] = None,
) -> AblationReport:
    """
    Train with and without noise clipping for every seed, decode the validation
    split with DDIM and CeDi at each MBR size, and report medians over seeds.
    """
    out_dir = Path(out_dir)
    vocab = load_vocab(data_dir)
    references = _limited(load_split(data_dir, "valid"), limit)
    report = AblationReport()
    for (clipping, seed), decodes in ablation_grid(base, seeds, mbr_sizes):
        run_dir = out_dir / f"clip_{'on' if clipping else 'off'}_seed{seed}"
        trainer = train(decodes[0][2], data_dir, run_dir)
        for mode, mbr, cfg in decodes:
            results = decode_corpus(trainer.model, trainer.table, [ex.src for ex in references],
                                    cfg.sampler, trainer.schedule)
            evaluation = score([r.best.tokens for r in results], references, vocab)
            report.cells.setdefault((clipping, mode, mbr), []).append(evaluation.bleu)
            if evaluation.language_accuracy is not None:
                report.language.setdefault((clipping, mode, mbr), []).append(evaluation.language_accuracy)
            logger.info("clipping=%s seed=%d %s MBR=%d BLEU=%.2f", clipping, seed, mode.value, mbr, evaluation.bleu)
    write_table(out_dir / "ablation.csv", ABLATION_COLUMNS, report.rows(), {
        **_flat_config(base), "seeds": " ".join(str(s) for s in seeds),
    })
    checks = report.ordering_checks(min(mbr_sizes))
    write_manifest(out_dir, "ablate", base, {"ordering_checks": checks, "seeds": list(seeds)})
    return report
