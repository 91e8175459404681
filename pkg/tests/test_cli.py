"""
End-to-end tests for the command-line surface: exit codes, artifacts and replay.
Training runs once per test class on a small synthetic set.
"""

import csv
import hashlib
import io
import tempfile
import unittest
from contextlib import redirect_stderr, redirect_stdout
from pathlib import Path
from unittest.mock import patch

import run_evaluation
from evaluation import CSV_FIELDS
from models import RunManifest
from networks import EcocEnsemble, OneHotModel, load_checkpoint
from selftest import CheckResult

SYNTHETIC = "M=3,dims=4,sep=8,per_class=20"


def run_cli(*argv: str) -> int:
    with redirect_stdout(io.StringIO()), redirect_stderr(io.StringIO()):
        return run_evaluation.main(list(argv))


def sha(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def count_rows(path: Path) -> int:
    with open(path, newline="") as f:
        return sum(1 for _ in csv.DictReader(f))


def sha_of_rows(path: Path) -> str:
    """Digest of a results file without its header line."""
    data = Path(path).read_bytes()
    return hashlib.sha256(data[data.index(b"\n") + 1:]).hexdigest()


class TestCodesCommand(unittest.TestCase):
    """Tests for the codes subcommand."""

    def test_prints_matrix(self):
        """codes prints M rows of N signs."""
        buf = io.StringIO()
        with redirect_stdout(buf):
            code = run_evaluation.main(["codes", "--classes", "4", "--length", "8"])
        self.assertEqual(code, run_evaluation.EXIT_OK)
        self.assertIn("M=4 N=8", buf.getvalue())

    def test_bad_length_is_usage_error(self):
        """A length that cannot hold M distinct rows exits 2."""
        self.assertEqual(run_cli("codes", "--classes", "10", "--length", "4"), run_evaluation.EXIT_USAGE)

    def test_missing_flag(self):
        """Argument errors exit 2."""
        self.assertEqual(run_cli("codes"), run_evaluation.EXIT_USAGE)


class TestTrainAttackReport(unittest.TestCase):
    """Tests for train, attack, report and replay on one trained model."""

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.dir = Path(cls.tmp.name)
        cls.train_dir = cls.dir / "train"
        cls.train_code = run_cli("train", "--synthetic", SYNTHETIC, "--seed", "1", "--epochs", "20",
                                 "--output-dir", str(cls.train_dir))
        cls.checkpoint = cls.train_dir / "ecoc.ckpt"

    @classmethod
    def tearDownClass(cls):
        cls.tmp.cleanup()

    def attack(self, name: str, *extra: str) -> int:
        return run_cli("attack", "--checkpoint", str(self.checkpoint), "--kind", "proposed",
                       "--params", "0.01,2,20,0", "--images", "3", "--seed", "2",
                       "--output", str(self.dir / name), *extra)

    def test_train_artifacts(self):
        """train writes both checkpoints, the progress CSV and a manifest."""
        self.assertEqual(self.train_code, run_evaluation.EXIT_OK)
        for name in ("base.ckpt", "ecoc.ckpt", "training.csv", "manifest.json"):
            self.assertTrue((self.train_dir / name).is_file(), name)
        self.assertIsInstance(load_checkpoint(self.train_dir / "base.ckpt"), OneHotModel)
        model = load_checkpoint(self.checkpoint)
        self.assertIsInstance(model, EcocEnsemble)
        self.assertEqual(model.metadata["test_fraction"], 0.2)

    def test_train_is_reproducible(self):
        """The same flags give byte-identical checkpoints."""
        again = self.dir / "again"
        code = run_cli("train", "--synthetic", SYNTHETIC, "--seed", "1", "--epochs", "20",
                       "--output-dir", str(again))
        self.assertEqual(code, run_evaluation.EXIT_OK)
        self.assertEqual(sha(again / "ecoc.ckpt"), sha(self.checkpoint))

    def test_attack_writes_results(self):
        """attack writes one row per attacked image plus an aggregate and a manifest."""
        code = self.attack("results.csv")
        self.assertEqual(code, run_evaluation.EXIT_OK)
        rows = count_rows(self.dir / "results.csv")
        self.assertGreater(rows, 0)
        self.assertLessEqual(rows, 3)
        self.assertEqual(count_rows(self.dir / "results_aggregate.csv"), 1)
        manifest = RunManifest.model_validate_json((self.dir / "results_manifest.json").read_text())
        self.assertEqual(manifest.command, "attack")
        self.assertEqual(manifest.checksums["results"], sha_of_rows(self.dir / "results.csv"))

    def test_attack_appends_to_existing_results(self):
        """A second run adds its rows under the one existing header."""
        self.attack("appended.csv")
        first = count_rows(self.dir / "appended.csv")
        first_digest = RunManifest.model_validate_json(
            (self.dir / "appended_manifest.json").read_text()).checksums["results"]
        self.attack("appended.csv")
        self.assertEqual(count_rows(self.dir / "appended.csv"), 2 * first)
        text = (self.dir / "appended.csv").read_text()
        self.assertEqual(text.count(",".join(CSV_FIELDS)), 1)
        second_digest = RunManifest.model_validate_json(
            (self.dir / "appended_manifest.json").read_text()).checksums["results"]
        self.assertEqual(second_digest, first_digest)

    def test_rows_ordered_by_image_id(self):
        """With several workers the results file is still sorted by image id."""
        code = self.attack("ordered.csv", "--images", "10", "--workers", "3")
        self.assertEqual(code, run_evaluation.EXIT_OK)
        with open(self.dir / "ordered.csv", newline="") as f:
            ids = [int(row["image_id"]) for row in csv.DictReader(f)]
        self.assertGreater(len(ids), 3)
        self.assertEqual(ids, sorted(ids))

    def test_confidence_sweep_rows(self):
        """--confidences repeats the campaign once per margin."""
        self.attack("single.csv")
        self.attack("sweep.csv", "--confidences", "0,0.1")
        self.assertEqual(count_rows(self.dir / "sweep.csv"), 2 * count_rows(self.dir / "single.csv"))
        self.assertEqual(count_rows(self.dir / "sweep_aggregate.csv"), 2)

    def test_onehot_attack_on_ensemble_is_usage_error(self):
        """cw-onehot against an ECOC checkpoint exits 2."""
        code = run_cli("attack", "--checkpoint", str(self.checkpoint), "--kind", "cw-onehot",
                       "--output", str(self.dir / "never.csv"))
        self.assertEqual(code, run_evaluation.EXIT_USAGE)
        self.assertFalse((self.dir / "never.csv").exists())

    def test_unknown_kind(self):
        """An unknown attack kind exits 2."""
        code = run_cli("attack", "--checkpoint", str(self.checkpoint), "--kind", "fgsm")
        self.assertEqual(code, run_evaluation.EXIT_USAGE)

    def test_corrupt_checkpoint(self):
        """An unreadable checkpoint exits 2."""
        bad = self.dir / "bad.ckpt"
        bad.write_bytes(b"ECOC1garbage")
        code = run_cli("attack", "--checkpoint", str(bad), "--kind", "proposed",
                       "--output", str(self.dir / "bad.csv"))
        self.assertEqual(code, run_evaluation.EXIT_USAGE)

    def test_report_merges_files(self):
        """report reads several results files and writes the tables and curves."""
        self.attack("part_a.csv")
        self.attack("part_b.csv", "--params", "0.01,2,20,0.1")
        out = self.dir / "report"
        code = run_cli("report", str(self.dir / "part_a.csv"), str(self.dir / "part_b.csv"),
                       "--output-dir", str(out), "--thresholds", "20,30,40")
        self.assertEqual(code, run_evaluation.EXIT_OK)
        total = count_rows(self.dir / "part_a.csv") + count_rows(self.dir / "part_b.csv")
        self.assertEqual(count_rows(out / "aggregate.csv"), 2)
        self.assertEqual(count_rows(out / "asr_vs_psnr.csv"), 3)
        with open(out / "histogram_clean.csv", newline="") as f:
            self.assertEqual(sum(int(row["count"]) for row in csv.DictReader(f)), total)

    def test_report_empty_input(self):
        """A results file with a header and no rows exits 2."""
        empty = self.dir / "empty.csv"
        empty.write_text(",".join(CSV_FIELDS) + "\n")
        self.assertEqual(run_cli("report", str(empty), "--output-dir", str(self.dir / "r")),
                         run_evaluation.EXIT_USAGE)

    def test_replay_train(self):
        """Replaying the training manifest reproduces every checksum."""
        code = run_cli("replay", str(self.train_dir / "manifest.json"), "--output-dir", str(self.dir / "replayed"))
        self.assertEqual(code, run_evaluation.EXIT_OK)
        self.assertEqual(sha(self.dir / "replayed" / "ecoc.ckpt"), sha(self.checkpoint))

    def test_replay_attack(self):
        """Replaying an attack manifest reproduces the results file."""
        self.attack("to_replay.csv")
        code = run_cli("replay", str(self.dir / "to_replay_manifest.json"),
                       "--output-dir", str(self.dir / "attack_replay"))
        self.assertEqual(code, run_evaluation.EXIT_OK)
        self.assertEqual(sha(self.dir / "attack_replay" / "to_replay.csv"), sha(self.dir / "to_replay.csv"))

    def test_replay_detects_changed_checksum(self):
        """A manifest with a wrong checksum fails replay with exit 1."""
        manifest = RunManifest.model_validate_json((self.train_dir / "manifest.json").read_text())
        manifest.checksums["training_csv"] = "0" * 64
        doctored = self.dir / "doctored.json"
        doctored.write_text(manifest.model_dump_json())
        code = run_cli("replay", str(doctored), "--output-dir", str(self.dir / "doctored_out"))
        self.assertEqual(code, run_evaluation.EXIT_FAILURE)


class TestTrainErrors(unittest.TestCase):
    """Tests for training input errors."""

    def test_missing_idx_file(self):
        """A missing IDX path exits 2."""
        with tempfile.TemporaryDirectory() as tmp:
            code = run_cli("train", "--idx", f"{tmp}/images.idx", f"{tmp}/labels.idx", "--output-dir", tmp)
        self.assertEqual(code, run_evaluation.EXIT_USAGE)

    def test_bad_synthetic_spec(self):
        """An unknown synthetic key exits 2."""
        with tempfile.TemporaryDirectory() as tmp:
            code = run_cli("train", "--synthetic", "M=3,colour=red", "--output-dir", tmp)
        self.assertEqual(code, run_evaluation.EXIT_USAGE)

    def test_bad_test_fraction(self):
        """--test-fraction outside (0, 1) exits 2."""
        with tempfile.TemporaryDirectory() as tmp:
            code = run_cli("train", "--synthetic", SYNTHETIC, "--test-fraction", "1.5", "--output-dir", tmp)
        self.assertEqual(code, run_evaluation.EXIT_USAGE)


class TestSelftestCommand(unittest.TestCase):
    """Tests for the selftest subcommand's exit codes."""

    def test_all_pass(self):
        """Passing checks exit 0."""
        with patch("run_evaluation.run_selftest", return_value=[CheckResult("a", True, "ok")]):
            self.assertEqual(run_cli("selftest"), run_evaluation.EXIT_OK)

    def test_any_failure(self):
        """A failing check exits 1."""
        results = [CheckResult("a", True, "ok"), CheckResult("b", False, "off by 2")]
        with patch("run_evaluation.run_selftest", return_value=results):
            self.assertEqual(run_cli("selftest"), run_evaluation.EXIT_FAILURE)


if __name__ == "__main__":
    unittest.main()
