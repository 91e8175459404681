"""
Tests for the baseline and ensemble networks: shapes, branch independence, decoding
probabilities, and the checkpoint format.
"""

import hashlib
import struct
import tempfile
import unittest
from pathlib import Path

import numpy as np

from codes import build_codeword_matrix, one_hot_matrix
from models import Architecture, BottomKind
from networks import (
    MAGIC, CheckpointChecksumError, CheckpointError, CheckpointTruncatedError, CheckpointVersionError,
    EcocEnsemble, branch_logits, checkpoint_bytes, class_probabilities, correlations, ensemble_from_base,
    init_ensemble, init_one_hot, load_checkpoint, logits, parse_checkpoint, predict, predict_batch,
    predict_from_logits, probabilities, save_checkpoint, softmax_probabilities,
)
from autodiff import ShapeMismatchError


def dense_arch(**kwargs) -> Architecture:
    defaults = dict(input_shape=(6,), bottom=BottomKind.DENSE, bottom_width=5, head_width=4)
    defaults.update(kwargs)
    return Architecture(**defaults)


class TestEnsembleShapes(unittest.TestCase):
    """Tests for ensemble construction and forward shapes."""

    def setUp(self):
        self.C = build_codeword_matrix(4, 8)
        self.model = init_ensemble(dense_arch(), self.C, seed=1)

    def test_branch_count_equals_code_length(self):
        """One single-bit branch per codeword bit."""
        self.assertEqual(self.model.branch_count, 8)
        self.assertEqual(self.model.output_size, 8)

    def test_logit_shapes(self):
        """Single images give 1-D logits; batches give 2-D."""
        rng = np.random.default_rng(0)
        self.assertEqual(logits(self.model, rng.uniform(size=6)).shape, (8,))
        self.assertEqual(logits(self.model, rng.uniform(size=(3, 6))).shape, (3, 8))

    def test_wrong_input_shape(self):
        """Inputs of the wrong size raise ShapeMismatchError."""
        with self.assertRaises(ShapeMismatchError):
            logits(self.model, np.zeros(5))

    def test_grouped_branches(self):
        """bits_per_branch groups several bits per branch."""
        model = init_ensemble(dense_arch(bits_per_branch=4), self.C, seed=0)
        self.assertEqual(model.branch_count, 2)
        self.assertEqual(logits(model, np.zeros(6)).shape, (8,))

    def test_indivisible_grouping_rejected(self):
        """N must be a multiple of bits_per_branch."""
        with self.assertRaises(ValueError):
            init_ensemble(dense_arch(bits_per_branch=3), self.C)

    def test_one_hot_codewords_rejected(self):
        """An ensemble needs ±1 codewords."""
        with self.assertRaises(ValueError):
            init_ensemble(dense_arch(), one_hot_matrix(4))

    def test_params_read_only(self):
        """Model parameters cannot be mutated in place."""
        with self.assertRaises(ValueError):
            self.model.params["branch.b2"][0] = 1.0

    def test_conv_bottom(self):
        """Conv bottoms accept image-shaped inputs."""
        arch = Architecture(input_shape=(1, 8, 8), bottom=BottomKind.CONV, conv_channels=(2, 3), head_width=4)
        model = init_ensemble(arch, self.C, seed=0)
        self.assertEqual(logits(model, np.zeros((2, 1, 8, 8))).shape, (2, 8))


class TestBranchIndependence(unittest.TestCase):
    """Tests that each branch depends only on its own parameters."""

    def setUp(self):
        self.model = init_ensemble(dense_arch(), build_codeword_matrix(4, 8), seed=3)
        self.x = np.random.default_rng(1).uniform(size=(5, 6))

    def test_branch_path_matches_batched(self):
        """Per-branch evaluation equals the corresponding batched logit."""
        z = logits(self.model, self.x)
        for k in range(self.model.branch_count):
            np.testing.assert_allclose(branch_logits(self.model, self.x, k)[:, 0], z[:, k], atol=1e-12)

    def test_perturbing_branch_changes_only_its_bit(self):
        """Changing branch j's output layer leaves every other bit unchanged."""
        before = logits(self.model, self.x)
        params = dict(self.model.params)
        w2 = params["branch.w2"].copy()
        w2[2] += 0.5
        params["branch.w2"] = w2
        after = logits(EcocEnsemble(self.model.architecture, params, self.model.codewords), self.x)
        changed = np.any(np.abs(after - before) > 1e-12, axis=0)
        self.assertTrue(changed[2])
        self.assertFalse(np.any(np.delete(changed, 2)))

    def test_branch_out_of_range(self):
        """Branch indices are checked."""
        with self.assertRaises(IndexError):
            branch_logits(self.model, self.x, 8)


class TestProbabilities(unittest.TestCase):
    """Tests for ECOC decoding."""

    def setUp(self):
        self.C = build_codeword_matrix(10, 16)

    def test_codeword_exact_output(self):
        """Logits that saturate to a codeword give that class probability 1."""
        for k in range(self.C.M):
            z = np.arctanh(self.C.as_float()[k] * 0.999999999999)
            p, degenerate = class_probabilities(correlations(z, self.C))
            self.assertFalse(degenerate)
            self.assertAlmostEqual(p[k], 1.0, delta=1e-9)

    def test_sums_to_one(self):
        """Probabilities are non-negative and sum to 1."""
        rng = np.random.default_rng(0)
        p, _ = class_probabilities(correlations(rng.standard_normal((50, 16)), self.C))
        self.assertTrue(np.all(p >= 0))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_exp_identity_reduces_to_softmax(self):
        """With C = I and exp activation the decoder is softmax."""
        rng = np.random.default_rng(1)
        z = rng.standard_normal((1000, 10))
        p, _ = class_probabilities(correlations(z, one_hot_matrix(10), activation="exp"))
        np.testing.assert_allclose(p, softmax_probabilities(z), rtol=0, atol=1e-12)

    def test_degenerate_correlations(self):
        """All correlations ≤ 0 give the uniform vector and a flag."""
        p, degenerate = class_probabilities(np.array([-1.0, -0.5, 0.0]))
        self.assertTrue(degenerate)
        np.testing.assert_allclose(p, np.full(3, 1 / 3))

    def test_degenerate_prediction_uses_correlation_argmax(self):
        """Prediction falls back to argmax ρ when p is undefined."""
        C = build_codeword_matrix(2, 2)
        model = init_ensemble(Architecture(input_shape=(2,), bottom=BottomKind.IDENTITY, head_width=0), C)
        z = np.array([-1.0, 0.2])
        rho = correlations(z, C)
        self.assertTrue(np.all(rho <= 0))
        self.assertEqual(predict_from_logits(model, z), int(np.argmax(rho)))

    def test_unknown_activation(self):
        """Only tanh and exp are supported."""
        with self.assertRaises(ValueError):
            correlations(np.zeros(16), self.C, activation="relu")


class TestOneHotModel(unittest.TestCase):
    """Tests for the baseline network."""

    def test_probabilities_are_softmax(self):
        """A one-hot model decodes with softmax."""
        model = init_one_hot(dense_arch(), 4, seed=0)
        x = np.full(6, 0.5)
        np.testing.assert_allclose(probabilities(model, x), softmax_probabilities(logits(model, x)))

    def test_predict_batch_matches_predict(self):
        """Batch prediction agrees with single-image prediction."""
        model = init_one_hot(dense_arch(), 4, seed=2)
        x = np.random.default_rng(0).uniform(size=(7, 6))
        np.testing.assert_array_equal(predict_batch(model, x, batch_size=3), [predict(model, xi) for xi in x])

    def test_predict_rejects_batch(self):
        """predict takes one image."""
        model = init_one_hot(dense_arch(), 4)
        with self.assertRaises(ShapeMismatchError):
            predict(model, np.zeros((2, 6)))

    def test_ensemble_from_base_copies_bottom(self):
        """Fine-tuning starts from the baseline's bottom and first head layer."""
        base = init_one_hot(dense_arch(), 4, seed=5)
        model = ensemble_from_base(base, build_codeword_matrix(4, 8), seed=0)
        np.testing.assert_array_equal(model.params["bottom.dense.w"], base.params["bottom.dense.w"])
        np.testing.assert_array_equal(model.params["branch.w1"][:, :4], base.params["head.w1"])
        np.testing.assert_array_equal(model.params["branch.w1"][:, 28:], base.params["head.w1"])


class TestCheckpoint(unittest.TestCase):
    """Tests for checkpoint round-trips and corruption detection."""

    def setUp(self):
        self.model = init_ensemble(dense_arch(), build_codeword_matrix(4, 8), seed=4)
        self.model = EcocEnsemble(self.model.architecture, self.model.params, self.model.codewords,
                                  metadata={"dataset_source": "synthetic:M=4,dims=6,sep=8,per_class=10,seed=0"})
        self.data = checkpoint_bytes(self.model)

    def test_round_trip_is_bit_exact(self):
        """Loaded parameters, codewords and metadata equal the saved ones."""
        loaded = parse_checkpoint(self.data)
        self.assertIsInstance(loaded, EcocEnsemble)
        for name, value in self.model.params.items():
            np.testing.assert_array_equal(loaded.params[name], value)
        np.testing.assert_array_equal(loaded.codewords.entries, self.model.codewords.entries)
        self.assertEqual(loaded.metadata, self.model.metadata)
        x = np.random.default_rng(0).uniform(size=(3, 6))
        np.testing.assert_array_equal(logits(loaded, x), logits(self.model, x))

    def test_one_hot_round_trip(self):
        """One-hot checkpoints load as one-hot models."""
        base = init_one_hot(dense_arch(), 4, seed=0)
        loaded = parse_checkpoint(checkpoint_bytes(base))
        self.assertEqual(loaded.kind, base.kind)
        self.assertEqual(loaded.num_classes, 4)

    def test_file_round_trip(self):
        """save_checkpoint and load_checkpoint agree; the digest is stable."""
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "model.ckpt"
            first = save_checkpoint(self.model, path)
            self.assertEqual(first, save_checkpoint(load_checkpoint(path), path))

    def resealed(self, body: bytes) -> bytes:
        """`body` with a valid trailing checksum, as a foreign writer would produce it."""
        return body + hashlib.blake2b(body, digest_size=8).digest()

    def test_bad_magic(self):
        """Files without the magic prefix are rejected."""
        with self.assertRaises(CheckpointError):
            parse_checkpoint(self.resealed(b"NOPE" + self.data[4:-8]))

    def test_unknown_version(self):
        """A different format version is reported as such."""
        with self.assertRaises(CheckpointVersionError):
            parse_checkpoint(self.resealed(MAGIC + b"9" + self.data[5:-8]))

    def test_truncated(self):
        """A file shorter than the fixed frame is truncated; a cut tail fails the checksum."""
        with self.assertRaises(CheckpointTruncatedError):
            parse_checkpoint(self.data[:6])
        with self.assertRaises(CheckpointChecksumError):
            parse_checkpoint(self.data[:-40])

    def test_declared_size_past_end(self):
        """A sealed file holding less than its header declares is truncated."""
        with self.assertRaises(CheckpointTruncatedError):
            parse_checkpoint(self.resealed(self.data[:-48]))

    def test_header_length_past_end(self):
        """A header length beyond the file is truncation."""
        corrupted = self.data[:5] + struct.pack("<I", 10 ** 7) + self.data[9:-8]
        with self.assertRaises(CheckpointTruncatedError):
            parse_checkpoint(self.resealed(corrupted))

    def test_flipped_parameter_byte(self):
        """A single corrupted parameter byte fails the checksum."""
        corrupted = bytearray(self.data)
        corrupted[-20] ^= 0xFF
        with self.assertRaises(CheckpointChecksumError):
            parse_checkpoint(bytes(corrupted))

    def test_every_single_byte_corruption_fails_checksum(self):
        """Changing any one byte, header and checksum included, is a checksum error."""
        for i in range(len(self.data)):
            for change in (0x01, 0xFF):
                corrupted = bytearray(self.data)
                corrupted[i] ^= change
                with self.assertRaises(CheckpointChecksumError, msg=f"byte {i} ^ {change:#x}"):
                    parse_checkpoint(bytes(corrupted))

    def test_trailing_bytes(self):
        """Extra bytes after the checksum are rejected."""
        with self.assertRaises(CheckpointError):
            parse_checkpoint(self.data + b"\x00" * 8)
        with self.assertRaises(CheckpointError):
            parse_checkpoint(self.resealed(self.data[:-8] + b"\x00" * 8))

    def test_missing_file(self):
        """An unreadable path raises CheckpointError."""
        with self.assertRaises(CheckpointError):
            load_checkpoint("/nonexistent/model.ckpt")


if __name__ == "__main__":
    unittest.main()
