"""
Self-verification suite behind the `selftest` command.

Each check returns a CheckResult; the command fails when any check fails. The tiny
linear model and the grid-search oracle here are also used by the unit tests.
"""

import logging
import math
import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

import autodiff as ad
from attacks.attack_models import AttackConfig, AttackKind
from attacks.objectives import OBJECTIVES, attack_margin, initial_w
from attacks.search import binary_search_attack
from codes import build_codeword_matrix, min_hamming_distance, one_hot_matrix, sylvester_hadamard
from models import Architecture, BottomKind
from networks import (
    EcocEnsemble, Model, class_probabilities, correlations, init_ensemble, init_one_hot, logits,
    predict_from_logits, softmax_probabilities,
)

logger = logging.getLogger(__name__)

GRADIENT_TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


# ---------------------------------------------------------------------------
# Tiny models and the grid oracle
# ---------------------------------------------------------------------------

def linear_ensemble(weights: np.ndarray, bias: np.ndarray, codewords=None) -> EcocEnsemble:
    """z = x·W + b on flat inputs, decoded through a ±1 codeword matrix."""
    weights = np.asarray(weights, dtype=np.float64)
    pixels, bits = weights.shape
    codewords = codewords if codewords is not None else build_codeword_matrix(bits, bits)
    arch = Architecture(input_shape=(pixels,), bottom=BottomKind.IDENTITY, head_width=0)
    return EcocEnsemble(arch, {"branch.w": weights, "branch.b": np.asarray(bias, dtype=np.float64)}, codewords)


def tiny_ensemble(seed: int, pixels: int = 4, bits: int = 4, classes: int = 3, hidden: int = 3) -> EcocEnsemble:
    """Small random ensemble with a dense bottom and two-layer branches."""
    arch = Architecture(input_shape=(pixels,), bottom=BottomKind.DENSE, bottom_width=5, head_width=hidden)
    return init_ensemble(arch, build_codeword_matrix(classes, bits), seed=seed)


def grid_min_norm(model: Model, x: np.ndarray, t: int, c: float = 0.0,
                  kind: AttackKind = AttackKind.PROPOSED, step: float = 0.005) -> float:
    """
    Smallest ‖δ‖₂ over the grid δ ∈ [−1, 1]², x + δ ∈ [0, 1]², that is adversarial for t.

    Returns +inf when no grid point is.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (2,):
        raise ValueError("The grid oracle works on 2-pixel inputs")
    axis = np.arange(-1.0, 1.0 + step / 2, step)
    d1, d2 = np.meshgrid(axis, axis, indexing="ij")
    deltas = np.stack([d1.ravel(), d2.ravel()], axis=1)
    points = x + deltas
    inside = np.all((points >= 0.0) & (points <= 1.0), axis=1)
    deltas, points = deltas[inside], points[inside]

    z = logits(model, points)
    hits = np.asarray(predict_from_logits(model, z)) == t
    if AttackKind(kind) == AttackKind.PROPOSED:
        code = model.codewords.signed()[t]
        hits &= np.min(2.0 * code * z, axis=1) >= c
    else:
        hits &= np.array([attack_margin(model, zi, t, kind) >= c for zi in z])
    if not hits.any():
        return math.inf
    return float(np.min(np.linalg.norm(deltas[hits], axis=1)))


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------

def _op_cases(rng: np.random.Generator) -> List[Tuple[str, Callable[[ad.Tensor], ad.Tensor], np.ndarray]]:
    """(name, scalar function of one leaf, point) for every differentiable op."""
    a = rng.standard_normal((3, 4))
    w = rng.standard_normal((4, 2))
    other = rng.standard_normal((3, 4))
    kernel = rng.standard_normal((2, 1, 3, 3))
    blocks = rng.standard_normal((3, 2, 1))
    left = rng.standard_normal((4, 6))
    labels = np.array([0, 2, 1])

    def total(t: ad.Tensor) -> ad.Tensor:
        return ad.reduce_sum(t)

    def weighted(t: ad.Tensor) -> ad.Tensor:
        return ad.reduce_sum(ad.mul(t, np.cos(np.arange(t.value.size)).reshape(t.shape)))

    return [
        ("add", lambda x: total(ad.mul(ad.add(x, other), ad.add(x, other))), a),
        ("sub", lambda x: total(ad.mul(ad.sub(x, other), x)), a),
        ("mul", lambda x: total(ad.mul(x, other)), a),
        ("scale", lambda x: weighted(ad.scale(x, -2.5)), a),
        ("matmul", lambda x: weighted(ad.matmul(x, x.tape.constant(w))), a),
        ("bias_add", lambda x: weighted(ad.bias_add(x.tape.constant(a), x)), rng.standard_normal(4)),
        ("tanh", lambda x: weighted(ad.tanh(x)), a),
        ("relu", lambda x: weighted(ad.relu(x)), a + np.sign(a) * 0.1),
        ("exp", lambda x: weighted(ad.exp(x)), a * 0.5),
        ("softplus", lambda x: weighted(ad.softplus(x)), a),
        ("conv2d", lambda x: weighted(ad.conv2d(x, x.tape.constant(kernel))), rng.standard_normal((1, 1, 4, 4))),
        ("maxpool2x2", lambda x: weighted(ad.maxpool2x2(x)), rng.standard_normal((1, 2, 4, 4))),
        ("flatten", lambda x: weighted(ad.flatten(x)), rng.standard_normal((2, 2, 2))),
        ("reduce_max", lambda x: weighted(ad.reduce_max(x)), a),
        ("reduce_min", lambda x: weighted(ad.reduce_min(x)), a),
        ("select", lambda x: weighted(ad.select(x, 2)), a),
        ("inner_product", lambda x: weighted(ad.inner_product(x, other)), a),
        ("softmax", lambda x: weighted(ad.softmax(x)), a),
        ("l2_norm", lambda x: ad.l2_norm(x), a),
        ("cross_entropy", lambda x: ad.cross_entropy(x, labels), a[:, :3]),
        ("block_diagonal", lambda x: total(ad.matmul(x.tape.constant(left), ad.block_diagonal(x))), blocks),
        ("maximum", lambda x: weighted(ad.maximum(x, 0.05)), a + np.sign(a - 0.05) * 0.1),
        ("minimum", lambda x: weighted(ad.minimum(x, 0.05)), a + np.sign(a - 0.05) * 0.1),
    ]


def check_op_gradients(trials: int = 100, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst, worst_op = 0.0, ""
    for _ in range(trials):
        for name, fn, point in _op_cases(rng):
            err = ad.finite_difference_check(fn, point)
            if err > worst:
                worst, worst_op = err, name
    passed = worst < GRADIENT_TOLERANCE
    return CheckResult("op gradients", passed, f"max relative error {worst:.2e} ({worst_op or 'n/a'})")


def check_objective_gradients(trials: int = 34, seed: int = 0) -> CheckResult:
    worst = 0.0
    for trial in range(trials):
        model = tiny_ensemble(seed + trial)
        baseline = init_one_hot(model.architecture, 3, seed=seed + trial)
        rng = np.random.default_rng(seed + trial)
        x = rng.uniform(0.2, 0.8, size=4)
        cases = [
            (model, AttackKind.PROPOSED, rng.normal(0.0, 0.05, size=4)),
            (model, AttackKind.CW_ECOC, rng.normal(0.0, 0.05, size=4)),
            (baseline, AttackKind.CW_ONEHOT, initial_w(x) + rng.normal(0.0, 0.05, size=4)),
        ]
        for target_model, kind, point in cases:
            objective = OBJECTIVES[kind]
            err = ad.finite_difference_check(
                lambda v: objective(v.tape, target_model, x, v, 1, 0.7, 100.0).value, point
            )
            worst = max(worst, err)
    return CheckResult("objective gradients", worst < GRADIENT_TOLERANCE, f"max relative error {worst:.2e}")


def check_hadamard() -> CheckResult:
    H = sylvester_hadamard(4)
    orthogonal = np.array_equal(H @ H.T, 16 * np.eye(16, dtype=np.int64))
    distance = min_hamming_distance(build_codeword_matrix(10, 16))
    passed = orthogonal and distance == 8 and min_hamming_distance(one_hot_matrix(10)) == 2
    return CheckResult("hadamard codes", passed, f"H·Hᵀ=16·I: {orthogonal}, d_min(10,16)={distance}")


def check_probabilities(samples: int = 1000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    C = build_codeword_matrix(10, 16)
    exact = []
    for k in range(C.M):
        p, _ = class_probabilities(correlations(np.arctanh(C.as_float()[k] * 0.999999999999), C))
        exact.append(abs(p[k] - 1.0))
    identity = one_hot_matrix(10)
    reduction = max(
        float(np.max(np.abs(
            class_probabilities(correlations(z, identity, activation="exp"))[0] - softmax_probabilities(z)
        )))
        for z in rng.standard_normal((samples, 10))
    )
    passed = max(exact) < 1e-9 and reduction < 1e-12
    return CheckResult("ECOC probabilities", passed,
                       f"codeword-exact error {max(exact):.1e}, softmax reduction error {reduction:.1e}")


def check_lambda_trace() -> CheckResult:
    model = linear_ensemble(np.eye(2), np.zeros(2))
    x = np.array([0.5, 0.5])
    config = AttackConfig(lambda_start=0.01, binary_search_steps=4, max_iterations=3, step_size=0.01)
    never = binary_search_attack(model, x, 1, config, adversarial_check=lambda adv, z: False)
    always = binary_search_attack(model, x, 1, config, adversarial_check=lambda adv, z: True)
    never_trace = [r.lambda_value for r in never.rounds]
    always_trace = [r.lambda_value for r in always.rounds]
    passed = (np.allclose(never_trace, [0.01, 0.1, 1.0, 10.0], rtol=0, atol=1e-15)
              and np.allclose(always_trace, [0.01, 0.005, 0.0025, 0.00125], rtol=0, atol=1e-15))
    return CheckResult("lambda schedule", passed, f"never={never_trace} always={always_trace}")


def oracle_instances(count: int, seed: int = 0, low: float = 0.1, high: float = 0.5):
    """
    Random 2-pixel, 2-class linear ensembles with a target whose grid optimum lies in
    [low, high]; yields (model, x, t, grid_norm).
    """
    rng = np.random.default_rng(seed)
    found = 0
    while found < count:
        model = linear_ensemble(rng.standard_normal((2, 2)), rng.normal(0.0, 0.5, size=2))
        x = rng.uniform(0.2, 0.8, size=2)
        t = 1 - int(predict_from_logits(model, logits(model, x)))
        grid = grid_min_norm(model, x, t)
        if low <= grid <= high:
            found += 1
            yield model, x, t, grid


def oracle_config() -> AttackConfig:
    return AttackConfig(lambda_start=1.0, binary_search_steps=3, max_iterations=2000, step_size=0.001)


def check_grid_oracle(instances: int = 20, seed: int = 0) -> CheckResult:
    config = oracle_config()
    worst = 0.0
    for model, x, t, grid in oracle_instances(instances, seed):
        result = binary_search_attack(model, x, t, config)
        if not result.success:
            return CheckResult("grid oracle", False, f"attack missed a feasible target (grid norm {grid:.3f})")
        worst = max(worst, result.l2_norm / grid)
    return CheckResult("grid oracle", worst <= 1.1, f"worst attack/grid norm ratio {worst:.3f}")


CHECKS: List[Callable[[], CheckResult]] = [
    check_op_gradients,
    check_objective_gradients,
    check_hadamard,
    check_probabilities,
    check_lambda_trace,
    check_grid_oracle,
]


def run_selftest(checks: Optional[List[Callable[[], CheckResult]]] = None) -> List[CheckResult]:
    results = []
    for check in checks or CHECKS:
        start = time.perf_counter()
        try:
            result = check()
        except Exception as e:
            result = CheckResult(check.__name__, False, f"raised {type(e).__name__}: {e}")
        result.seconds = time.perf_counter() - start
        logger.info("%s: %s (%s)", result.name, "pass" if result.passed else "FAIL", result.detail)
        results.append(result)
    return results
