"""
Tests for the metrics and report helpers.
"""

import math
import tempfile
import unittest
from pathlib import Path

import numpy as np

from evaluation import (
    CSV_FIELDS, EvaluationRecord, ReportError, aggregate_records, asr_vs_psnr_curve, attack_success_rate,
    confidence_table, histogram_points, probability_histogram, psnr, psnr_from_norm, read_records,
    write_records,
)


def record(image_id: int = 0, success: bool = True, psnr_db: float = 40.0, c: float = 0.0,
           attack: str = "proposed", **overrides) -> EvaluationRecord:
    values = dict(
        image_id=image_id, true_class=1, target_class=2, attack=attack, lambda_start=1e-3, n=10,
        epsilon=0.01, m=1000, c=c, success=success, l2_norm=0.5 if success else 0.0, psnr_db=psnr_db,
        prob_true_before=0.9, prob_true_after=0.1 if success else 0.9,
        prob_target_before=0.05, prob_target_after=0.8 if success else 0.05,
    )
    values.update(overrides)
    return EvaluationRecord(**values)


class TestPsnr(unittest.TestCase):
    """Tests for the PSNR metric."""

    def test_zero_perturbation_is_infinite(self):
        """δ = 0 gives +inf."""
        self.assertEqual(psnr(np.zeros(784)), math.inf)

    def test_known_value(self):
        """A uniform 1/255 perturbation over every pixel is 20·log₁₀(255) dB."""
        delta = np.full(784, 1.0 / 255.0)
        self.assertAlmostEqual(psnr(delta), 20.0 * math.log10(255.0), places=9)

    def test_smaller_perturbation_higher_psnr(self):
        """PSNR decreases as the norm grows."""
        self.assertGreater(psnr_from_norm(0.1, 784), psnr_from_norm(1.0, 784))

    def test_pixel_count_must_be_positive(self):
        """A non-positive pixel count is rejected."""
        with self.assertRaises(ValueError):
            psnr_from_norm(1.0, 0)


class TestAttackSuccessRate(unittest.TestCase):
    """Tests for ASR."""

    def test_fraction(self):
        """ASR is successes over attempts."""
        rows = [record(success=True), record(success=False), record(success=True), record(success=False)]
        self.assertEqual(attack_success_rate(rows), 0.5)

    def test_empty_rejected(self):
        """ASR over nothing is undefined."""
        with self.assertRaises(ValueError):
            attack_success_rate([])


class TestRecordFiles(unittest.TestCase):
    """Tests for writing and reading results CSVs."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_header_and_values(self):
        """The header is the schema; rows read back equal to what was written."""
        path = self.dir / "results.csv"
        rows = [record(0), record(1, success=False, psnr_db=math.inf)]
        self.assertEqual(write_records(path, rows), 2)
        self.assertEqual(path.read_text().splitlines()[0], ",".join(CSV_FIELDS))
        self.assertEqual(read_records(path), rows)

    def test_append_writes_header_once(self):
        """Appending to an existing file adds rows only."""
        path = self.dir / "results.csv"
        write_records(path, [record(0)])
        write_records(path, [record(1)], append=True)
        lines = path.read_text().splitlines()
        self.assertEqual(len(lines), 3)
        self.assertEqual(sum(1 for line in lines if line.startswith("image_id")), 1)

    def test_several_files_concatenate(self):
        """Rows from several files come back in file order."""
        a, b = self.dir / "a.csv", self.dir / "b.csv"
        write_records(a, [record(0)])
        write_records(b, [record(5), record(6)])
        self.assertEqual([r.image_id for r in read_records([a, b])], [0, 5, 6])

    def test_wrong_header(self):
        """A file with another header is rejected."""
        path = self.dir / "bad.csv"
        path.write_text("id,score\n1,2\n")
        with self.assertRaises(ReportError):
            read_records(path)

    def test_malformed_row(self):
        """A row that fails validation names its line."""
        path = self.dir / "bad.csv"
        write_records(path, [record(0)])
        with open(path, "a") as f:
            f.write("x" + ",0" * (len(CSV_FIELDS) - 1) + "\n")
        with self.assertRaises(ReportError) as ctx:
            read_records(path)
        self.assertIn(":3:", str(ctx.exception))

    def test_missing_file(self):
        """An unreadable file is a ReportError."""
        with self.assertRaises(ReportError):
            read_records(self.dir / "missing.csv")


class TestAggregates(unittest.TestCase):
    """Tests for grouping and summaries."""

    def test_groups_by_parameters(self):
        """One row per parameter tuple, in order of first appearance."""
        rows = [record(0, c=0.0), record(1, c=0.5), record(2, c=0.0, success=False)]
        groups = aggregate_records(rows)
        self.assertEqual([g.c for g in groups], [0.0, 0.5])
        self.assertEqual((groups[0].attempts, groups[0].successes, groups[0].asr), (2, 1, 0.5))

    def test_psnr_means_ignore_infinity(self):
        """+inf PSNR values are left out of the means."""
        rows = [record(0, psnr_db=30.0), record(1, psnr_db=50.0), record(2, psnr_db=math.inf)]
        (row,) = aggregate_records(rows)
        self.assertAlmostEqual(row.mean_psnr_successes, 40.0)
        self.assertAlmostEqual(row.mean_psnr_all, 40.0)

    def test_after_columns_average_successes_only(self):
        """Post-attack probabilities average over successful attacks."""
        rows = [record(0, prob_target_after=0.6), record(1, prob_target_after=1.0),
                record(2, success=False, prob_target_after=0.0)]
        (row,) = aggregate_records(rows)
        self.assertAlmostEqual(row.prob_target_after, 0.8)
        self.assertAlmostEqual(row.prob_true_before, 0.9)

    def test_no_successes_flags_empty(self):
        """A group without successes is marked empty with NaN success means."""
        (row,) = aggregate_records([record(0, success=False), record(1, success=False)])
        self.assertTrue(row.empty)
        self.assertTrue(math.isnan(row.mean_psnr_successes))

    def test_empty_input(self):
        """Aggregating nothing is a ReportError."""
        with self.assertRaises(ReportError):
            aggregate_records([])

    def test_confidence_table_requested_margins(self):
        """Requested margins without records give empty rows with zero attempts."""
        rows = confidence_table([record(0, c=0.0), record(1, c=0.1)], confidences=[0.0, 0.1, 0.5])
        self.assertEqual([r.c for r in rows], [0.0, 0.1, 0.5])
        self.assertEqual(rows[2].attempts, 0)
        self.assertTrue(rows[2].empty)
        self.assertFalse(rows[0].empty)


class TestDistributions(unittest.TestCase):
    """Tests for histograms and ASR-vs-PSNR curves."""

    def test_histogram_counts_cover_all_values(self):
        """Counts sum to the number of values; 1.0 lands in the last bin."""
        values = [0.0, 0.05, 0.5, 0.99, 1.0]
        edges, counts = probability_histogram(values, bins=10)
        self.assertEqual(len(edges), 11)
        self.assertEqual(int(counts.sum()), len(values))
        self.assertEqual(int(counts[-1]), 2)

    def test_histogram_rejects_out_of_range(self):
        """Values outside [0, 1] are rejected."""
        with self.assertRaises(ValueError):
            probability_histogram([0.5, 1.2])
        with self.assertRaises(ValueError):
            probability_histogram([0.5], bins=0)

    def test_histogram_points_are_centers(self):
        """Points pair bin centers with counts."""
        edges, counts = probability_histogram([0.1, 0.7], bins=2)
        self.assertEqual(histogram_points(edges, counts), [(0.25, 1), (0.75, 1)])

    def test_asr_vs_psnr_curve(self):
        """The curve is non-increasing in τ and counts against all attempts."""
        rows = [record(0, psnr_db=25.0), record(1, psnr_db=35.0), record(2, psnr_db=45.0),
                record(3, success=False, psnr_db=math.inf)]
        curve = asr_vs_psnr_curve(rows, [20.0, 30.0, 40.0, 50.0])
        self.assertEqual(curve, [(20.0, 0.75), (30.0, 0.5), (40.0, 0.25), (50.0, 0.0)])

    def test_asr_vs_psnr_empty(self):
        """No records gives a zero curve."""
        self.assertEqual(asr_vs_psnr_curve([], [20.0]), [(20.0, 0.0)])


if __name__ == "__main__":
    unittest.main()
