"""
LOTS at the logit layer: pull z(x + δ) toward the mean logits of a pool of target-class
images by gradient descent on ½‖z(x + δ) − z_target‖², clipping x + δ into [0, 1].
"""

import logging
from typing import List

import numpy as np

import autodiff as ad
from autodiff import NonFiniteError, Tape
from config import settings
from networks import Model, logits, predict

from .attack_models import AttackConfig, AttackKind, AttackResult
from .objectives import model_logits
from .search import finish_result

logger = logging.getLogger(__name__)


def lots_target(model: Model, pool: np.ndarray) -> np.ndarray:
    """Elementwise mean of the pool's logits."""
    pool = np.asarray(pool, dtype=np.float64)
    if len(pool) == 0:
        raise ValueError("LOTS needs a non-empty target-class pool")
    return np.mean(logits(model, pool), axis=0)


def lots_loss(tape: Tape, model: Model, x: np.ndarray, delta: ad.Tensor, z_target: np.ndarray):
    adv = ad.add(delta, x)
    diff = ad.sub(model_logits(tape, model, adv), z_target)
    return ad.scale(ad.inner_product(diff, diff), 0.5)


def converged(losses: List[float], new_loss: float, window: int, tolerance: float) -> bool:
    """New loss within `tolerance` (relative) of the mean of the last `window` losses."""
    if len(losses) < window:
        return False
    recent = float(np.mean(losses[-window:]))
    return abs(new_loss - recent) <= tolerance * recent


def lots_attack(model: Model, x: np.ndarray, t: int, pool: np.ndarray, config: AttackConfig) -> AttackResult:
    """
    Move x toward the target representation for at most m steps of size ε.

    Stops early at zero loss or once the loss stalls; succeeds iff predict(x + δ) = t. An
    image already classified as t returns δ = 0 without a step.
    """
    if config.kind != AttackKind.LOTS:
        config = config.model_copy(update={"kind": AttackKind.LOTS})
    x = np.asarray(x, dtype=np.float64)
    z_target = lots_target(model, pool)
    if predict(model, x) == t:
        return finish_result(model, x, t, config, x.copy(), True, 0, 0.0, lots_target=z_target)
    delta = np.zeros_like(x)
    losses: List[float] = []
    steps = 0
    error = None

    for _ in range(config.max_iterations):
        tape = Tape()
        leaf = tape.leaf(delta)
        try:
            loss = lots_loss(tape, model, x, leaf, z_target)
        except NonFiniteError as e:
            logger.debug("LOTS stopped: %s", e)
            error = str(e)
            break
        value = float(loss.value)
        if value == 0.0 or converged(losses, value, settings.lots_window, settings.lots_tolerance):
            break
        losses.append(value)
        (grad,) = tape.gradient(loss, [leaf])
        delta = np.clip(x + delta - config.step_size * grad, 0.0, 1.0) - x
        steps += 1

    adv = x + delta
    success = predict(model, adv) == t
    logger.debug("LOTS: %d steps, final loss %s, success=%s", steps, losses[-1] if losses else 0.0, success)
    return finish_result(model, x, t, config, adv, success, steps, 0.0, lots_target=z_target, error=error)
