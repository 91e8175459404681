"""
Binary search over λ with normalized gradient descent, shared by the proposed, C&W-ECOC
and C&W one-hot objectives.

Round i starts again from δ = 0 and runs m steps δ ← δ − ε·∇/‖∇‖, checking every iterate
before stepping; the smallest adversarial δ is tracked across all rounds. Pixels already
on the [0, 1] box whose gradient points outward are left out of ∇ before normalizing.
After a round λ becomes an upper bound (something found) or a lower bound (nothing
found); λ grows ×10 while no upper bound exists and is bisected afterwards. An image that
is already adversarial returns δ = 0 without searching.
"""

import logging
import math
from typing import Callable, List, Optional

import numpy as np

from autodiff import NonFiniteError, Tape
from evaluation import psnr
from networks import Model, logits, predict, predict_from_logits, probabilities

from .attack_models import AttackConfig, AttackKind, AttackResult, SearchRound
from .objectives import OBJECTIVES, attack_margin, initial_w, target_codewords

logger = logging.getLogger(__name__)

# Signature of an override for the "is adversarial" predicate: (x_adv, logits) -> bool.
AdversarialCheck = Callable[[np.ndarray, np.ndarray], bool]


def is_adversarial_logits(model: Model, z: np.ndarray, t: int, c: float, kind: AttackKind) -> bool:
    """predict = t and, except for LOTS, the attacked margin reaches c (inclusive)."""
    if predict_from_logits(model, z) != t:
        return False
    if AttackKind(kind) == AttackKind.LOTS:
        return True
    return attack_margin(model, z, t, kind) >= c


def is_adversarial(model: Model, x_adv: np.ndarray, t: int, c: float, kind: AttackKind) -> bool:
    return is_adversarial_logits(model, logits(model, x_adv), t, c, kind)


def finish_result(model: Model, x: np.ndarray, t: int, config: AttackConfig, adv: np.ndarray,
                  success: bool, iterations: int, final_lambda: float,
                  rounds: Optional[List[SearchRound]] = None, **extra) -> AttackResult:
    """Fill in probabilities, distortion and margin for a finished attack."""
    delta = np.asarray(adv, dtype=np.float64) - x
    label = predict(model, x)
    before = probabilities(model, x)
    after = probabilities(model, adv)
    z_after = logits(model, adv)
    margin = float("nan") if config.kind == AttackKind.LOTS else attack_margin(model, z_after, t, config.kind)
    return AttackResult(
        kind=config.kind,
        config=config,
        true_class=label,
        target_class=t,
        target_codeword=target_codewords(model)[t].copy(),
        delta=delta,
        success=bool(success),
        l2_norm=float(np.linalg.norm(delta)),
        psnr_db=psnr(delta),
        iterations=iterations,
        final_lambda=final_lambda,
        prob_true_before=float(before[label]),
        prob_true_after=float(after[label]),
        prob_target_before=float(before[t]),
        prob_target_after=float(after[t]),
        margin_after=margin,
        rounds=list(rounds or []),
        **extra,
    )


def free_gradient(adv: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """grad with zeros where a descent step would push a pixel of `adv` out of [0, 1]."""
    blocked = ((adv <= 0.0) & (grad > 0.0)) | ((adv >= 1.0) & (grad < 0.0))
    return np.where(blocked, 0.0, grad)


def binary_search_attack(model: Model, x: np.ndarray, t: int, config: AttackConfig,
                         kind: Optional[AttackKind] = None,
                         adversarial_check: Optional[AdversarialCheck] = None) -> AttackResult:
    """
    Run the λ binary search for one image and target class.

    `adversarial_check` replaces the model-based predicate; it exists so the λ schedule
    can be traced against stub outcomes.
    """
    kind = AttackKind(kind or config.kind)
    if kind not in OBJECTIVES:
        raise ValueError(f"{kind.value} is not a binary-search attack")
    if kind != config.kind:
        config = config.model_copy(update={"kind": kind})
    objective = OBJECTIVES[kind]
    x = np.asarray(x, dtype=np.float64)
    c, eps = config.confidence, config.step_size
    tanh_space = kind == AttackKind.CW_ONEHOT

    def check(adv: np.ndarray, z: np.ndarray) -> bool:
        if adversarial_check is not None:
            return bool(adversarial_check(adv, z))
        return is_adversarial_logits(model, z, t, c, kind)

    if is_adversarial_logits(model, logits(model, x), t, c, kind):
        logger.debug("target %d already reached at delta = 0", t)
        return finish_result(model, x, t, config, x.copy(), True, 0, config.lambda_start)

    lam, upper, lower = config.lambda_start, math.inf, 0.0
    best_adv: Optional[np.ndarray] = None
    best_norm = math.inf
    last_adv = x.copy()
    iterations = 0
    rounds: List[SearchRound] = []
    aborted = 0

    for round_index in range(config.binary_search_steps):
        var = initial_w(x) if tanh_space else np.zeros_like(x)
        found = False
        for _ in range(config.max_iterations):
            iterations += 1
            tape = Tape()
            try:
                leaf = tape.leaf(var)
                out = objective(tape, model, x, leaf, t, lam, c)
            except NonFiniteError as e:
                logger.debug("round %d aborted: %s", round_index, e)
                found = False
                aborted += 1
                break
            if not np.isfinite(out.value.value):
                logger.debug("round %d aborted: non-finite objective", round_index)
                found = False
                aborted += 1
                break

            adv = out.adversarial
            last_adv = adv
            if check(adv, out.logits):
                found = True
                norm = float(np.linalg.norm(adv - x))
                if norm < best_norm:
                    best_norm, best_adv = norm, adv.copy()

            (grad,) = tape.gradient(out.value, [leaf])
            if not tanh_space:
                grad = free_gradient(x + var, grad)
            grad_norm = float(np.linalg.norm(grad))
            if grad_norm == 0.0 or not np.isfinite(grad_norm):
                continue
            var = var - eps * grad / grad_norm
            if not tanh_space:
                var = np.clip(x + var, 0.0, 1.0) - x

        if found:
            upper = lam
        else:
            lower = lam
        rounds.append(SearchRound(index=round_index, lambda_value=lam, found=found,
                                  upper=upper, lower=lower, best_norm=best_norm))
        logger.debug("round %d: lambda=%g found=%s best=%g", round_index, lam, found, best_norm)
        if round_index < config.binary_search_steps - 1:
            lam = lam * 10.0 if math.isinf(upper) else (upper + lower) / 2.0

    if best_adv is not None:
        success = check(best_adv, logits(model, best_adv))
        final_adv = best_adv
    else:
        success = False
        final_adv = np.clip(last_adv, 0.0, 1.0)
    error = "objective became non-finite in every round" if aborted == config.binary_search_steps else None
    return finish_result(model, x, t, config, final_adv, success, iterations, lam, rounds, error=error)
