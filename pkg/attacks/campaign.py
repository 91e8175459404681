"""
Attack campaigns: choose the attacked images and their targets, fan the per-image attacks
out over workers, and hand results back in image order.
"""

import logging
from dataclasses import replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from config import settings
from dataset_builder import Dataset, sample_n
from networks import Model, predict_batch

from .attack_models import AttackConfig, AttackKind, AttackResult
from .lots import lots_attack
from .objectives import compatible
from .search import binary_search_attack

logger = logging.getLogger(__name__)


class IncompatibleAttackError(ValueError):
    """The attack kind does not apply to this kind of model."""


def check_compatibility(model: Model, kind: AttackKind) -> None:
    if not compatible(model, kind):
        raise IncompatibleAttackError(
            f"Attack '{AttackKind(kind).value}' cannot run on a {model.kind.value} checkpoint"
        )


def run_attack(model: Model, x: np.ndarray, t: int, config: AttackConfig,
               pool: Optional[np.ndarray] = None, image_id: int = -1) -> AttackResult:
    """Dispatch one attack by kind."""
    check_compatibility(model, config.kind)
    if config.kind == AttackKind.LOTS:
        if pool is None:
            raise ValueError("LOTS needs a target-class pool")
        result = lots_attack(model, x, t, pool, config)
    else:
        result = binary_search_attack(model, x, t, config)
    return replace(result, image_id=image_id)


def choose_targets(labels: Sequence[int], num_classes: int, seed: int) -> np.ndarray:
    """One target per label, uniform over the other M − 1 classes."""
    rng = np.random.default_rng(seed)
    targets = []
    for y in labels:
        t = int(rng.integers(num_classes - 1))
        targets.append(t + 1 if t >= y else t)
    return np.array(targets, dtype=np.int64)


def select_attack_set(model: Model, test: Dataset, count: int, seed: int) -> Tuple[Dataset, np.ndarray]:
    """
    Sample up to `count` correctly classified test images and a target for each.

    The set comes back ordered by image id, which is the row order of every results file.
    """
    correct = np.flatnonzero(predict_batch(model, test.images) == test.labels)
    candidates = test.subset(correct)
    chosen = sample_n(candidates, min(count, len(candidates)), seed=seed)
    chosen = chosen.subset(np.argsort(chosen.ids, kind="stable"))
    if len(chosen) < count:
        logger.warning("Only %d of %d requested images are correctly classified", len(chosen), count)
    return chosen, choose_targets(chosen.labels, test.num_classes, seed)


def target_pools(source: Dataset, targets: Sequence[int], pool_size: int, seed: int) -> Dict[int, np.ndarray]:
    """For each distinct target class, up to `pool_size` of its images chosen by seed."""
    pools = {}
    for t in sorted(set(int(t) for t in targets)):
        members = source.of_class(t)
        if len(members) == 0:
            raise ValueError(f"No images of target class {t} available for the LOTS pool")
        pools[t] = sample_n(members, min(pool_size, len(members)), seed=seed + t).images
    return pools


def run_campaign(model: Model, attack_set: Dataset, targets: Sequence[int], config: AttackConfig,
                 pool_source: Optional[Dataset] = None, workers: Optional[int] = None,
                 on_result: Optional[Callable[[AttackResult], None]] = None) -> List[AttackResult]:
    """
    Attack every image of `attack_set` toward its target.

    Attacks run concurrently over the shared model; `on_result` is called from this thread,
    in image order, so a single writer can stream rows.
    """
    check_compatibility(model, config.kind)
    if len(targets) != len(attack_set):
        raise ValueError(f"{len(targets)} targets for {len(attack_set)} images")
    pools: Dict[int, np.ndarray] = {}
    if config.kind == AttackKind.LOTS:
        if pool_source is None:
            raise ValueError("LOTS campaigns need a pool source dataset")
        pools = target_pools(pool_source, targets, config.lots_pool_size, config.seed)

    def attack_one(i: int) -> AttackResult:
        t = int(targets[i])
        return run_attack(model, attack_set.images[i], t, config, pool=pools.get(t),
                          image_id=int(attack_set.ids[i]))

    workers = max(1, workers or settings.workers)
    results: List[AttackResult] = []
    ordered = Parallel(n_jobs=workers, prefer="threads", return_as="generator")(
        delayed(attack_one)(i) for i in range(len(attack_set))
    )
    for result in ordered:
        results.append(result)
        if on_result is not None:
            on_result(result)
    logger.info("Campaign %s (%s): %d images, %d successes", config.kind.value, config.quadruple(),
                len(results), sum(r.success for r in results))
    return results


def run_confidence_sweep(model: Model, attack_set: Dataset, targets: Sequence[int],
                         config: AttackConfig, confidences: Sequence[float],
                         pool_source: Optional[Dataset] = None,
                         workers: Optional[int] = None,
                         on_result: Optional[Callable[[AttackResult], None]] = None) -> Dict[float, List[AttackResult]]:
    """The same campaign repeated at every confidence margin c."""
    return {
        float(c): run_campaign(model, attack_set, targets, config.model_copy(update={"confidence": float(c)}),
                               pool_source=pool_source, workers=workers, on_result=on_result)
        for c in confidences
    }
