"""
Attack objectives, recorded on a tape so the optimizer can take ∇ w.r.t. the attack variable.

Every objective has the form ‖δ‖₂ − λ·min(margin, c): once the margin in the attacked score
space reaches c the second term is flat and only the distortion is minimized. Margins:

  proposed   min_i 2·t_i·z_i over the target codeword bits t = C_t
  cw-ecoc    ρ_t − max_{i≠t} ρ_i with ρ = tanh(z)·Cᵀ
  cw-onehot  z_t − max_{i≠t} z_i, optimized over w with x + δ = ½(tanh(w) + 1)

`attack_margin` computes the same margins from plain logits; it is what decides whether
a point "is adversarial".
"""

from dataclasses import dataclass
from typing import Callable, Dict

import numpy as np

import autodiff as ad
from autodiff import Tape, Tensor
from networks import Model, correlations, forward
from models import ModelKind

from .attack_models import AttackKind

# arctanh(±1) is infinite; initial w is computed from slightly shrunk pixels.
_TANH_SHRINK = 0.999999


@dataclass
class ObjectiveValue:
    value: Tensor          # scalar objective
    logits: np.ndarray     # z(x + δ)
    adversarial: np.ndarray  # x + δ


def target_codewords(model: Model) -> np.ndarray:
    """±1 codewords per class; one-hot models use 2·I − 1."""
    return model.codewords.signed()


def model_logits(tape: Tape, model: Model, image: Tensor) -> Tensor:
    """Logit vector for one recorded image."""
    batch = ad.reshape(image, (1,) + tuple(image.shape))
    z = forward(tape, model, batch)
    return ad.reshape(z, (z.shape[1],))


def _distortion_minus_margin(delta: Tensor, margin: Tensor, lam: float, c: float) -> Tensor:
    return ad.sub(ad.l2_norm(delta), ad.scale(ad.minimum(margin, c), lam))


def _top_margin(scores: Tensor, t: int) -> Tensor:
    """s_t − max_{i≠t} s_i, first index on ties."""
    return ad.sub(ad.select(scores, t), ad.reduce_max(scores, exclude=t))


def proposed_objective(tape: Tape, model: Model, x: np.ndarray, delta: Tensor,
                       t: int, lam: float, c: float) -> ObjectiveValue:
    """‖δ‖₂ − λ·min(min_i 2·t_i·z_i(x+δ), c)."""
    code = target_codewords(model)[t]
    adv = ad.add(delta, x)
    z = model_logits(tape, model, adv)
    margin = ad.reduce_min(ad.mul(z, 2.0 * code))
    return ObjectiveValue(_distortion_minus_margin(delta, margin, lam, c), z.value, adv.value)


def cw_ecoc_objective(tape: Tape, model: Model, x: np.ndarray, delta: Tensor,
                      t: int, lam: float, c: float) -> ObjectiveValue:
    """‖δ‖₂ − λ·min(ρ_t − max_{i≠t} ρ_i, c) with ρ = tanh(z(x+δ))·Cᵀ."""
    adv = ad.add(delta, x)
    z = model_logits(tape, model, adv)
    C = tape.constant(model.codewords.as_float().T)
    rho = ad.reshape(ad.matmul(ad.reshape(ad.tanh(z), (1, z.shape[0])), C), (C.shape[1],))
    return ObjectiveValue(_distortion_minus_margin(delta, _top_margin(rho, t), lam, c), z.value, adv.value)


def tanh_space(w: Tensor) -> Tensor:
    """x + δ = ½(tanh(w) + 1), which always lies in [0, 1]."""
    return ad.scale(ad.add(ad.tanh(w), 1.0), 0.5)


def initial_w(x: np.ndarray) -> np.ndarray:
    return np.arctanh((2.0 * np.asarray(x, dtype=np.float64) - 1.0) * _TANH_SHRINK)


def cw_onehot_objective(tape: Tape, model: Model, x: np.ndarray, w: Tensor,
                        t: int, lam: float, c: float) -> ObjectiveValue:
    """‖δ‖₂ − λ·min(z_t − max_{i≠t} z_i, c), optimized over w."""
    adv = tanh_space(w)
    delta = ad.sub(adv, x)
    z = model_logits(tape, model, adv)
    return ObjectiveValue(_distortion_minus_margin(delta, _top_margin(z, t), lam, c), z.value, adv.value)


ObjectiveFn = Callable[[Tape, Model, np.ndarray, Tensor, int, float, float], ObjectiveValue]

OBJECTIVES: Dict[AttackKind, ObjectiveFn] = {
    AttackKind.PROPOSED: proposed_objective,
    AttackKind.CW_ECOC: cw_ecoc_objective,
    AttackKind.CW_ONEHOT: cw_onehot_objective,
}


def attack_margin(model: Model, z: np.ndarray, t: int, kind: AttackKind) -> float:
    """The margin each objective drives toward c, from plain logits."""
    z = np.asarray(z, dtype=np.float64)
    kind = AttackKind(kind)
    if kind == AttackKind.PROPOSED:
        return float(np.min(2.0 * target_codewords(model)[t] * z))
    if kind == AttackKind.CW_ECOC:
        scores = correlations(z, model.codewords)
    elif kind == AttackKind.CW_ONEHOT:
        scores = z
    else:
        raise ValueError(f"{kind.value} has no margin")
    others = np.delete(scores, t)
    return float(scores[t] - np.max(others))


def compatible(model: Model, kind: AttackKind) -> bool:
    """cw-onehot needs a softmax model, cw-ecoc an ensemble; proposed and LOTS run on both."""
    kind = AttackKind(kind)
    if kind == AttackKind.CW_ONEHOT:
        return model.kind == ModelKind.ONE_HOT
    if kind == AttackKind.CW_ECOC:
        return model.kind == ModelKind.ECOC
    return True
