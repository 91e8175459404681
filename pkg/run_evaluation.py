"""
Command-line entry point for ECOC ensembles and the attacks against them.

Subcommands:
- codes: print a codeword matrix and its minimum Hamming distance
- train: train the one-hot baseline, fine-tune the ECOC ensemble, save both checkpoints
- attack: run an attack campaign against a checkpoint and write per-image results
- report: confidence tables, probability histograms and ASR-vs-PSNR curves from results
- selftest: gradient checks, code properties and the brute-force attack oracle
- replay: re-run a command from its manifest and compare artifact checksums

Artifact-producing commands write a manifest.json next to their outputs.
"""

import argparse
import hashlib
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional

from pydantic import ValidationError

from attacks.attack_models import AttackConfig, AttackKind, AttackResult
from attacks.campaign import IncompatibleAttackError, check_compatibility, run_confidence_sweep, select_attack_set
from codes import build_codeword_matrix, format_codewords, one_hot_matrix
from config import settings
from dataset_builder import Dataset, IdxFormatError, load_idx, load_source, split
from evaluation import (
    AGGREGATE_FIELDS, EvaluationRecord, ReportError, aggregate_records, asr_vs_psnr_curve,
    confidence_table, histogram_points, probability_histogram, read_records, write_records, write_rows,
    write_two_columns,
)
from models import Architecture, BottomMode, LossKind, RunManifest, SyntheticSpec, TrainConfig
from networks import CheckpointError, Model, load_checkpoint, save_checkpoint
from selftest import run_selftest
from tracing import langfuse, score_outcome
from training import (
    PROGRESS_HEADER, TrainingError, default_architecture, evaluate_error_rate, finetune_ensemble, train_base,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

MANIFEST_NAME = "manifest.json"


class UsageError(ValueError):
    """Bad flags or unreadable inputs; reported with the subcommand's usage line."""


def _sha256(path: Path, offset: int = 0) -> str:
    """Digest of the file's bytes from `offset` on."""
    return hashlib.sha256(Path(path).read_bytes()[offset:]).hexdigest()


def _config_echo(args: argparse.Namespace) -> Dict[str, object]:
    return {k: v for k, v in vars(args).items() if k not in ("func", "parser", "argv")}


def _write_manifest(path: Path, args: argparse.Namespace, outputs: Dict[str, Path],
                    seeds: Dict[str, int], inputs: Dict[str, str], exit_code: int,
                    extra_config: Optional[Dict[str, object]] = None,
                    offsets: Optional[Dict[str, int]] = None) -> RunManifest:
    config = _config_echo(args)
    config.update(extra_config or {})
    manifest = RunManifest(
        command=args.command,
        argv=list(args.argv),
        config=config,
        seeds=seeds,
        inputs=inputs,
        outputs={name: str(p) for name, p in outputs.items()},
        checksums={name: _sha256(p, (offsets or {}).get(name, 0)) for name, p in outputs.items()},
        exit_code=exit_code,
    )
    path.write_text(manifest.model_dump_json(indent=2))
    return manifest


def manifest_path(args: argparse.Namespace) -> Optional[Path]:
    """Where a command writes its manifest; None for commands that produce no artifacts."""
    if args.command in ("train", "report"):
        return Path(args.output_dir) / MANIFEST_NAME
    if args.command == "attack":
        out = Path(args.output)
        return out.with_name(f"{out.stem}_{MANIFEST_NAME}")
    return None


def _next_power_of_two(n: int) -> int:
    return 1 << (n - 1).bit_length()


def _parse_floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"Expected a comma-separated list of numbers, got '{text}'")


# ---------------------------------------------------------------------------
# codes
# ---------------------------------------------------------------------------

def cmd_codes(args: argparse.Namespace) -> int:
    try:
        C = one_hot_matrix(args.classes) if args.one_hot else build_codeword_matrix(
            args.classes, args.length or max(16, _next_power_of_two(args.classes)))
    except ValueError as e:
        raise UsageError(str(e))
    print(format_codewords(C))
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _load_training_data(args: argparse.Namespace) -> Dataset:
    if args.synthetic:
        try:
            spec = SyntheticSpec.parse(args.synthetic, seed=args.seed)
        except ValueError as e:
            raise UsageError(f"Bad synthetic spec: {e}")
        return load_source("synthetic:" + spec.to_line())
    images, labels = args.idx
    for path in (images, labels):
        if not Path(path).is_file():
            raise UsageError(f"Dataset file not found: {path}")
    try:
        return load_idx(images, labels, limit=args.limit)
    except IdxFormatError as e:
        raise UsageError(str(e))


def cmd_train(args: argparse.Namespace) -> int:
    if not 0.0 < args.test_fraction < 1.0:
        raise UsageError(f"--test-fraction must lie in (0, 1), got {args.test_fraction}")
    dataset = _load_training_data(args)
    try:
        config = TrainConfig(
            epochs=args.epochs, finetune_epochs=args.finetune_epochs, batch_size=args.batch_size,
            learning_rate=args.lr, momentum=args.momentum, seed=args.seed,
            loss=LossKind(args.loss), bottom_mode=BottomMode(args.bottom_mode),
        )
        N = args.codeword_length or max(16, _next_power_of_two(dataset.num_classes))
        codewords = build_codeword_matrix(dataset.num_classes, N)
        arch = Architecture(**{**default_architecture(dataset.image_shape).model_dump(),
                               "bits_per_branch": args.bits_per_branch})
    except ValueError as e:
        raise UsageError(str(e))

    train_part, test_part = split(dataset, (1.0 - args.test_fraction, args.test_fraction), seed=args.seed)
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    print(f"Training on {dataset.source}")
    print(f"Split: {len(train_part)} train / {len(test_part)} test, codewords {dataset.num_classes}×{N}")

    progress_lines: List[str] = []

    def progress(line: str) -> None:
        progress_lines.append(line)
        print(line)

    trace = langfuse.start_span(
        name="ecoc_training",
        input={"source": dataset.source, "config": config.model_dump(mode="json"), "code_length": N},
        metadata={"architecture": arch.model_dump(mode="json")},
    )
    print(PROGRESS_HEADER)
    try:
        base = train_base(train_part, config, arch, progress=progress)
        ensemble = finetune_ensemble(base, train_part, codewords, config, progress=progress,
                                     bits_per_branch=args.bits_per_branch)
    except TrainingError as e:
        print(f"  [ERROR] Training failed: {e}")
        trace.update(output={"error": str(e)})
        trace.end()
        langfuse.flush()
        return EXIT_FAILURE

    errors: Dict[str, float] = {}
    models: Dict[str, Model] = {"base": base, "ecoc": ensemble}
    for name, model in list(models.items()):
        test_error = evaluate_error_rate(model, test_part) if len(test_part) else None
        errors[name] = math.nan if test_error is None else test_error
        metadata = dict(model.metadata, test_fraction=args.test_fraction, test_error=test_error)
        models[name] = replace(model, metadata=metadata)

    outputs = {
        "base_checkpoint": out_dir / "base.ckpt",
        "ecoc_checkpoint": out_dir / "ecoc.ckpt",
        "training_csv": out_dir / "training.csv",
    }
    save_checkpoint(models["base"], outputs["base_checkpoint"])
    save_checkpoint(models["ecoc"], outputs["ecoc_checkpoint"])
    outputs["training_csv"].write_text("\n".join([PROGRESS_HEADER, *progress_lines]) + "\n")

    finite = {f"{name}_test_error": v for name, v in errors.items() if math.isfinite(v)}
    score_outcome(trace, **finite)
    trace.update(output=finite)
    trace.end()

    _write_manifest(manifest_path(args), args, outputs, seeds={"seed": args.seed},
                    inputs={"dataset_source": dataset.source}, exit_code=EXIT_OK)

    print(f"\n📊 Training Results ({len(test_part)} test images)")
    print(f"   One-hot test error: {errors['base']:6.1%}")
    print(f"   ECOC test error:    {errors['ecoc']:6.1%}")
    print(f"\n📁 Checkpoints saved to {out_dir}")
    langfuse.flush()
    return EXIT_OK


# ---------------------------------------------------------------------------
# attack
# ---------------------------------------------------------------------------

def regenerate_splits(model: Model):
    """The (train, test) split a checkpoint was trained with, rebuilt from its metadata."""
    meta = model.metadata
    if "dataset_source" not in meta or "test_fraction" not in meta:
        raise UsageError("Checkpoint metadata lacks the dataset source or test fraction")
    dataset = load_source(meta["dataset_source"])
    fraction = float(meta["test_fraction"])
    return split(dataset, (1.0 - fraction, fraction), seed=int(meta.get("split_seed", 0)))


def _trace_result(result: AttackResult, checkpoint: str) -> None:
    span = langfuse.start_span(
        name="ecoc_attack",
        input={
            "image_id": result.image_id,
            "true_class": result.true_class,
            "target_class": result.target_class,
            "kind": result.kind.value,
            "params": result.config.quadruple(),
        },
        metadata={"checkpoint": checkpoint, "epsilon": result.config.step_size},
    )
    scores = {"success": result.success, "l2_norm": result.l2_norm}
    if math.isfinite(result.psnr_db):
        scores["psnr_db"] = result.psnr_db
    score_outcome(span, **scores)
    span.update(output={"iterations": result.iterations, "final_lambda": result.final_lambda,
                        "error": result.error})
    span.end()


def cmd_attack(args: argparse.Namespace) -> int:
    try:
        model = load_checkpoint(args.checkpoint)
    except CheckpointError as e:
        raise UsageError(str(e))
    try:
        config = AttackConfig.from_quadruple(args.params, kind=AttackKind(args.kind), step_size=args.epsilon,
                                             seed=args.seed)
    except (ValueError, ValidationError) as e:
        raise UsageError(f"Bad attack parameters: {e}")
    try:
        check_compatibility(model, config.kind)
    except IncompatibleAttackError as e:
        raise UsageError(str(e))
    confidences = _parse_floats(args.confidences) if args.confidences else [config.confidence]

    train_part, test_part = regenerate_splits(model)
    attack_set, targets = select_attack_set(model, test_part, args.images, seed=args.seed)
    if len(attack_set) == 0:
        print("  [ERROR] No correctly classified test images to attack")
        return EXIT_FAILURE

    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    # Rows are appended to an existing file; only this run's rows enter the manifest checksum.
    write_records(out, [], append=True)
    rows_start = out.stat().st_size
    print(f"Attacking {len(attack_set)} images with {config.kind.value} ({config.quadruple()}, ε={config.step_size:g})")

    def on_result(result: AttackResult) -> None:
        write_records(out, [EvaluationRecord.from_result(result)], append=True)
        _trace_result(result, args.checkpoint)
        if args.verbose:
            status = "✓" if result.success else "✗"
            print(f"  image {result.image_id}: {result.true_class}→{result.target_class} {status} "
                  f"PSNR {result.psnr_db:.2f} dB")

    sweep = run_confidence_sweep(model, attack_set, targets, config, confidences,
                                 pool_source=train_part, workers=args.workers, on_result=on_result)
    results = [r for c in confidences for r in sweep[float(c)]]
    records = [EvaluationRecord.from_result(r) for r in results]
    aggregate_path = out.with_name(f"{out.stem}_aggregate.csv")
    rows = aggregate_records(records)
    write_rows(aggregate_path, AGGREGATE_FIELDS, (row.as_row() for row in rows))

    errors = [r for r in results if r.error]
    exit_code = EXIT_FAILURE if errors else EXIT_OK
    _write_manifest(
        manifest_path(args), args, {"results": out, "aggregate": aggregate_path},
        seeds={"seed": args.seed, "split_seed": int(model.metadata.get("split_seed", 0))},
        inputs={"checkpoint": args.checkpoint, "dataset_source": model.metadata["dataset_source"]},
        exit_code=exit_code,
        extra_config={"checkpoint_sha256": _sha256(Path(args.checkpoint)), "attack": config.model_dump(mode="json")},
        offsets={"results": rows_start},
    )

    for row in rows:
        print(f"\n📊 {row.attack} ({row.lambda_start:g},{row.n},{row.m},{row.c:g}): {row.attempts} images")
        print(f"   Success rate:         {row.successes:3d} ({row.asr:6.1%})")
        print(f"   Mean PSNR (success):  {row.mean_psnr_successes:.2f} dB")
        print(f"   Mean PSNR (all):      {row.mean_psnr_all:.2f} dB")
    for r in errors:
        print(f"  [ERROR] image {r.image_id}: {r.error}")
    print(f"\n📁 Results saved to {out}")
    langfuse.flush()
    return exit_code


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def cmd_report(args: argparse.Namespace) -> int:
    try:
        records = read_records(args.results)
    except ReportError as e:
        raise UsageError(str(e))
    if not records:
        raise UsageError("Results files contain no rows")
    thresholds = _parse_floats(args.thresholds)
    confidences = _parse_floats(args.confidences) if args.confidences else None

    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = {
        "aggregate": out_dir / "aggregate.csv",
        "confidence_table": out_dir / "confidence_table.csv",
        "histogram_clean": out_dir / "histogram_clean.csv",
        "histogram_adversarial": out_dir / "histogram_adversarial.csv",
        "asr_psnr": out_dir / "asr_vs_psnr.csv",
    }
    write_rows(outputs["aggregate"], AGGREGATE_FIELDS, (r.as_row() for r in aggregate_records(records)))
    write_rows(outputs["confidence_table"], AGGREGATE_FIELDS,
               (r.as_row() for r in confidence_table(records, confidences)))

    clean = probability_histogram([r.prob_true_before for r in records], bins=args.bins)
    adversarial = probability_histogram([r.prob_target_after for r in records if r.success], bins=args.bins)
    write_two_columns(outputs["histogram_clean"], ("probability", "count"), histogram_points(*clean))
    write_two_columns(outputs["histogram_adversarial"], ("probability", "count"), histogram_points(*adversarial))
    write_two_columns(outputs["asr_psnr"], ("psnr_threshold", "asr"), asr_vs_psnr_curve(records, thresholds))

    _write_manifest(manifest_path(args), args, outputs, seeds={},
                    inputs={f"results{i}": str(p) for i, p in enumerate(args.results)}, exit_code=EXIT_OK)

    successes = sum(r.success for r in records)
    print(f"\n📊 Report over {len(records)} rows from {len(args.results)} file(s)")
    print(f"   Successful attacks: {successes} ({successes / len(records):6.1%})")
    print(f"\n📁 Report saved to {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# selftest
# ---------------------------------------------------------------------------

def cmd_selftest(args: argparse.Namespace) -> int:
    results = run_selftest()
    for r in results:
        status = "✓" if r.passed else "✗"
        print(f"  {status} {r.name:<22} {r.seconds:6.2f}s  {r.detail}")
    failed = [r for r in results if not r.passed]
    total = sum(r.seconds for r in results)
    print(f"\n📊 Selftest: {len(results) - len(failed)}/{len(results)} passed in {total:.1f}s")
    return EXIT_FAILURE if failed else EXIT_OK


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------

def _redirect(args: argparse.Namespace, output_dir: str) -> None:
    if hasattr(args, "output_dir"):
        args.output_dir = output_dir
    if getattr(args, "output", None):
        args.output = str(Path(output_dir) / Path(args.output).name)


def cmd_replay(args: argparse.Namespace) -> int:
    try:
        recorded = RunManifest.model_validate_json(Path(args.manifest).read_text())
    except (OSError, ValidationError) as e:
        raise UsageError(f"Cannot read manifest {args.manifest}: {e}")
    if recorded.command == "replay":
        raise UsageError("Refusing to replay a replay")

    replayed = build_parser().parse_args(recorded.argv)
    replayed.argv = list(recorded.argv)
    if args.output_dir:
        _redirect(replayed, args.output_dir)
    print(f"Replaying: {' '.join(recorded.argv)}")
    code = _run(replayed)
    if code != recorded.exit_code:
        print(f"  [ERROR] Exit code {code}, recorded {recorded.exit_code}")
        return EXIT_FAILURE

    path = manifest_path(replayed)
    if path is None:
        return EXIT_OK
    fresh = RunManifest.model_validate_json(path.read_text())
    mismatched = [name for name, digest in recorded.checksums.items() if fresh.checksums.get(name) != digest]
    for name in mismatched:
        print(f"  ✗ {name}: checksum differs")
    if mismatched:
        return EXIT_FAILURE
    print(f"  ✓ {len(recorded.checksums)} artifact checksums match")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Train ECOC ensembles, attack them, and report the results.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python run_evaluation.py codes --classes 10 --length 16
  python run_evaluation.py train --synthetic M=4,dims=16,sep=8 --seed 7
  python run_evaluation.py attack --checkpoint runs/ecoc.ckpt --kind proposed --params 1e-3,10,1000,0 --images 50
  python run_evaluation.py report runs/results.csv --output-dir runs/report
  python run_evaluation.py selftest
  python run_evaluation.py replay runs/manifest.json --output-dir runs/replay
        """
    )
    parser.add_argument("--verbose", "-v", action="store_true", default=settings.verbose,
                        help="Verbose output")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("codes", help="Print a codeword matrix")
    p.add_argument("--classes", "-M", type=int, required=True, help="Number of classes M")
    p.add_argument("--length", "-N", type=int, help="Codeword length N (default max(16, next power of 2))")
    p.add_argument("--one-hot", action="store_true", help="Print the one-hot matrix instead")
    p.set_defaults(func=cmd_codes, parser=p)

    p = sub.add_parser("train", help="Train the baseline and the ECOC ensemble")
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--synthetic", metavar="SPEC", help="Gaussian blobs, e.g. M=4,dims=16,sep=8")
    source.add_argument("--idx", nargs=2, metavar=("IMAGES", "LABELS"), help="IDX image and label files")
    p.add_argument("--limit", type=int, help="Use only the first LIMIT IDX items")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--finetune-epochs", type=int, help="Fine-tuning epochs (default: --epochs)")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=0.05, help="Learning rate")
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--loss", choices=[k.value for k in LossKind], default=LossKind.LOGISTIC.value,
                   help="Per-bit loss for fine-tuning")
    p.add_argument("--bottom-mode", choices=[m.value for m in BottomMode], default=BottomMode.FROZEN.value)
    p.add_argument("--codeword-length", type=int, help="N (default max(16, next power of 2 of M))")
    p.add_argument("--bits-per-branch", type=int, default=1)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--output-dir", "-o", default=settings.output_dir)
    p.set_defaults(func=cmd_train, parser=p)

    p = sub.add_parser("attack", help="Run an attack campaign against a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--kind", choices=[k.value for k in AttackKind], required=True)
    p.add_argument("--params", default="1e-3,10,1000,0",
                   help="lambda_start,binary_search_steps,max_iterations,confidence")
    p.add_argument("--epsilon", type=float, default=settings.default_step_size, help="Step size")
    p.add_argument("--confidences", help="Sweep these confidence margins instead of the one in --params")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--images", type=int, default=50, help="Number of test images to attack")
    p.add_argument("--output", default=str(Path(settings.output_dir) / "results.csv"))
    p.add_argument("--workers", type=int, help="Concurrent attacks (default ECOC_WORKERS)")
    p.set_defaults(func=cmd_attack, parser=p)

    p = sub.add_parser("report", help="Tables and curves from results CSVs")
    p.add_argument("results", nargs="+", help="One or more results CSV files")
    p.add_argument("--output-dir", "-o", default=str(Path(settings.output_dir) / "report"))
    p.add_argument("--bins", type=int, default=settings.histogram_bins)
    p.add_argument("--thresholds", default="20,25,30,35,40,45,50", help="PSNR thresholds in dB")
    p.add_argument("--confidences", help="Confidence margins to tabulate (default: all present)")
    p.set_defaults(func=cmd_report, parser=p)

    p = sub.add_parser("selftest", help="Run the self-verification suite")
    p.set_defaults(func=cmd_selftest, parser=p)

    p = sub.add_parser("replay", help="Re-run a command from its manifest")
    p.add_argument("manifest")
    p.add_argument("--output-dir", "-o", help="Write the replayed artifacts here instead")
    p.set_defaults(func=cmd_replay, parser=p)
    return parser


def _run(args: argparse.Namespace) -> int:
    try:
        return args.func(args)
    except UsageError as e:
        args.parser.print_usage(sys.stderr)
        print(f"{args.parser.prog}: error: {e}", file=sys.stderr)
        return EXIT_USAGE


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    args.argv = argv
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    return _run(args)


if __name__ == "__main__":
    sys.exit(main())
