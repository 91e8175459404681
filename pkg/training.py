"""
Training of the one-hot baseline and fine-tuning of the ECOC ensemble from it.

Optimizer: minibatch gradient descent with a fixed step and optional momentum. Every
minibatch records a fresh tape; parameter updates build new arrays, so models handed
out earlier are never modified.

Progress is reported as CSV lines `epoch,split,loss,error` through a `progress`
callback (the CLI prints them and copies them into the run directory).
"""

import logging
from dataclasses import replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

import autodiff as ad
from autodiff import NonFiniteError, Tape, Tensor
from codes import CodewordMatrix
from config import settings
from dataset_builder import Dataset, split
from models import Architecture, BottomKind, BottomMode, LossKind, TrainConfig
from networks import (
    EcocEnsemble, Model, OneHotModel, Params, bind, bottom_forward, branches_forward,
    ensemble_from_base, features, forward, init_one_hot, logits, predict_batch, with_params,
)

logger = logging.getLogger(__name__)

Progress = Callable[[str], None]
PROGRESS_HEADER = "epoch,split,loss,error"


class TrainingError(ValueError):
    """Training cannot proceed (empty data, diverging loss)."""


def progress_line(epoch, split_name: str, loss: float, error: float) -> str:
    return f"{epoch},{split_name},{loss:.6f},{error:.6f}"


def _log_progress(line: str) -> None:
    logger.info(line)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def per_bit_loss(z, t, kind: LossKind = LossKind.LOGISTIC):
    """
    Loss of logit z against target bit t ∈ {-1, +1}.

    logistic: log(1 + exp(-t·z)); hinge: max(0, 1 - t·z). Both are convex and
    non-increasing in the margin t·z. Works elementwise on arrays.
    """
    margin = np.asarray(t, dtype=np.float64) * np.asarray(z, dtype=np.float64)
    if LossKind(kind) == LossKind.HINGE:
        out = np.maximum(0.0, 1.0 - margin)
    else:
        out = np.logaddexp(0.0, -margin)
    return float(out) if out.ndim == 0 else out


def per_bit_loss_tensor(z: Tensor, targets: np.ndarray, kind: LossKind = LossKind.LOGISTIC) -> Tensor:
    """Mean per-bit loss over every entry of z, recorded for differentiation."""
    targets = np.asarray(targets, dtype=np.float64)
    neg_margin = ad.mul(z, -targets)
    if LossKind(kind) == LossKind.HINGE:
        elementwise = ad.relu(ad.add(neg_margin, 1.0))
    else:
        elementwise = ad.softplus(neg_margin)
    return ad.scale(ad.reduce_sum(elementwise), 1.0 / max(z.value.size, 1))


def _cross_entropy_value(z: np.ndarray, labels: np.ndarray) -> float:
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    return float(np.mean(log_norm - shifted[np.arange(len(labels)), labels]))


# ---------------------------------------------------------------------------
# Evaluation helpers
# ---------------------------------------------------------------------------

def evaluate_error_rate(model: Model, dataset: Dataset) -> float:
    """Fraction of items misclassified by predict()."""
    if len(dataset) == 0:
        raise ValueError("Cannot compute an error rate on an empty dataset")
    return float(np.mean(predict_batch(model, dataset.images) != dataset.labels))


def evaluate_loss(model: Model, dataset: Dataset, kind: LossKind = LossKind.LOGISTIC) -> float:
    """Training objective on a whole dataset: cross-entropy, or mean per-bit loss for ensembles."""
    if len(dataset) == 0:
        raise ValueError("Cannot compute a loss on an empty dataset")
    z = logits(model, dataset.images)
    if isinstance(model, OneHotModel):
        return _cross_entropy_value(z, dataset.labels)
    targets = model.codewords.signed()[dataset.labels]
    return float(np.mean(per_bit_loss(z, targets, kind)))


def _report(model: Model, epoch, named: Sequence[Dataset], kind: LossKind, progress: Progress) -> Dict[str, float]:
    errors = {}
    for part in named:
        if len(part) == 0:
            continue
        err = evaluate_error_rate(model, part)
        progress(progress_line(epoch, part.split_name, evaluate_loss(model, part, kind), err))
        errors[part.split_name] = err
    return errors


# ---------------------------------------------------------------------------
# Generic loop
# ---------------------------------------------------------------------------

def _fit(params: Params, trainable: Sequence[str], n_items: int,
         batch_loss: Callable[[Tape, Dict[str, Tensor], np.ndarray], Tensor],
         config: TrainConfig, epochs: int, rng: np.random.Generator,
         on_epoch: Optional[Callable[[int, Params], None]] = None) -> Params:
    params = dict(params)
    velocity = {name: np.zeros_like(params[name]) for name in trainable}
    for epoch in range(1, epochs + 1):
        order = rng.permutation(n_items)
        for start in range(0, n_items, config.batch_size):
            idx = order[start:start + config.batch_size]
            tape = Tape()
            try:
                bound = bind(tape, params, trainable)
                loss = batch_loss(tape, bound, idx)
            except NonFiniteError as e:
                raise TrainingError(f"Non-finite value at epoch {epoch}, batch offset {start}: {e}")
            if not np.isfinite(loss.value):
                raise TrainingError(f"Non-finite loss at epoch {epoch}, batch offset {start}")
            grads = tape.gradient(loss, [bound[name] for name in trainable])
            for name, g in zip(trainable, grads):
                velocity[name] = config.momentum * velocity[name] - config.learning_rate * g
                params[name] = params[name] + velocity[name]
        if on_epoch is not None:
            on_epoch(epoch, params)
    return params


def default_architecture(image_shape: Sequence[int]) -> Architecture:
    """Two conv layers for image-shaped inputs, one dense layer for flat vectors."""
    shape = tuple(image_shape)
    if len(shape) == 3 and shape[1] % 4 == 0 and shape[2] % 4 == 0:
        return Architecture(input_shape=shape, bottom=BottomKind.CONV, head_width=64)
    return Architecture(input_shape=shape, bottom=BottomKind.DENSE)


def train_validation_split(dataset: Dataset, config: TrainConfig) -> Tuple[Dataset, Dataset]:
    train, val = split(
        dataset, (1.0 - config.validation_fraction, config.validation_fraction),
        seed=config.seed, names=("train", "val"),
    )
    return train, val


# ---------------------------------------------------------------------------
# Base model
# ---------------------------------------------------------------------------

def train_base(dataset: Dataset, config: TrainConfig, architecture: Optional[Architecture] = None,
               progress: Optional[Progress] = None) -> OneHotModel:
    """Train the M-class softmax network that the ensemble is fine-tuned from."""
    if len(dataset) == 0:
        raise TrainingError("Cannot train on an empty dataset")
    progress = progress or _log_progress
    arch = architecture or default_architecture(dataset.image_shape)
    train, val = train_validation_split(dataset, config)
    if len(train) == 0:
        raise TrainingError("Training split is empty")

    model = init_one_hot(arch, dataset.num_classes, seed=config.seed)
    rng = np.random.default_rng(config.seed)
    trainable = sorted(model.params)
    images, labels = train.images, train.labels

    def batch_loss(tape, p, idx):
        z = forward(tape, model, tape.constant(images[idx]), p)
        return ad.cross_entropy(z, labels[idx])

    def on_epoch(epoch, params):
        _report(with_params(model, params), epoch, (train, val), config.loss, progress)

    params = _fit(model.params, trainable, len(train), batch_loss, config, config.epochs, rng, on_epoch)
    trained = with_params(model, params)
    errors = {part.split_name: evaluate_error_rate(trained, part) for part in (train, val) if len(part)}
    logger.info("Base model trained: %s", errors)
    return _with_metadata(trained, dataset, config, errors)


def _with_metadata(model: Model, dataset: Dataset, config: TrainConfig, errors: Dict[str, float]) -> Model:
    metadata = dict(model.metadata)
    metadata.update({
        "dataset_source": dataset.source,
        "split_seed": config.seed,
        "validation_fraction": config.validation_fraction,
        "train_error": errors.get("train"),
        "validation_error": errors.get("val"),
    })
    return replace(model, metadata=metadata)


# ---------------------------------------------------------------------------
# Ensemble fine-tuning
# ---------------------------------------------------------------------------

def branch_param_names(model: EcocEnsemble) -> List[str]:
    return ["branch.w1", "branch.b1", "branch.w2", "branch.b2"] if model.architecture.head_width \
        else ["branch.w", "branch.b"]


def branch_params(model: EcocEnsemble, k: int) -> Params:
    """Parameters of branch k as standalone arrays."""
    arch, p = model.architecture, model.params
    bits = arch.bits_per_branch
    cols = slice(k * bits, (k + 1) * bits)
    if arch.head_width:
        H = arch.head_width
        rows = slice(k * H, (k + 1) * H)
        return {"w1": p["branch.w1"][:, rows].copy(), "b1": p["branch.b1"][rows].copy(),
                "w2": p["branch.w2"][k].copy(), "b2": p["branch.b2"][cols].copy()}
    return {"w": p["branch.w"][:, cols].copy(), "b": p["branch.b"][cols].copy()}


def set_branch_params(model: EcocEnsemble, k: int, values: Params) -> EcocEnsemble:
    """A copy of `model` with branch k's parameters replaced."""
    arch = model.architecture
    bits = arch.bits_per_branch
    cols = slice(k * bits, (k + 1) * bits)
    updated = {name: model.params[name].copy() for name in branch_param_names(model)}
    if arch.head_width:
        H = arch.head_width
        rows = slice(k * H, (k + 1) * H)
        updated["branch.w1"][:, rows] = values["w1"]
        updated["branch.b1"][rows] = values["b1"]
        updated["branch.w2"][k] = values["w2"]
        updated["branch.b2"][cols] = values["b2"]
    else:
        updated["branch.w"][:, cols] = values["w"]
        updated["branch.b"][cols] = values["b"]
    return with_params(model, updated)


def _single_branch_forward(h: Tensor, p: Dict[str, Tensor]) -> Tensor:
    if "w1" in p:
        hidden = ad.relu(ad.bias_add(ad.matmul(h, p["w1"]), p["b1"]))
        return ad.bias_add(ad.matmul(hidden, p["w2"]), p["b2"])
    return ad.bias_add(ad.matmul(h, p["w"]), p["b"])


def finetune_branch(model: EcocEnsemble, k: int, feats: np.ndarray, targets: np.ndarray,
                    config: TrainConfig) -> Tuple[Params, List[Tuple[int, float, float]]]:
    """
    Train branch k alone on precomputed bottom features.

    `targets` holds the ±1 bits of every item's codeword (K × N). Returns the new branch
    parameters and a per-epoch (epoch, loss, bit error) history.
    """
    bits = model.architecture.bits_per_branch
    t = np.asarray(targets, dtype=np.float64)[:, k * bits:(k + 1) * bits]
    start = branch_params(model, k)
    names = sorted(start)
    rng = np.random.default_rng([config.seed, k])
    history: List[Tuple[int, float, float]] = []

    def batch_loss(tape, p, idx):
        z = _single_branch_forward(tape.constant(feats[idx]), p)
        return per_bit_loss_tensor(z, t[idx], config.loss)

    def on_epoch(epoch, params):
        tape = Tape()
        z = _single_branch_forward(tape.constant(feats), bind(tape, params)).value
        history.append((epoch, float(np.mean(per_bit_loss(z, t, config.loss))), float(np.mean(np.sign(z) != t))))

    trained = _fit(start, names, len(feats), batch_loss, config,
                   config.effective_finetune_epochs, rng, on_epoch)
    return trained, history


def finetune_ensemble(base: OneHotModel, dataset: Dataset, codewords: CodewordMatrix,
                      config: TrainConfig, progress: Optional[Progress] = None,
                      bits_per_branch: int = 1) -> EcocEnsemble:
    """
    Fine-tune an N-branch ensemble from the baseline.

    Frozen mode (default) keeps the bottom fixed and trains every branch independently,
    possibly in parallel; shared mode trains bottom and branches jointly on the summed
    per-bit loss.
    """
    if len(dataset) == 0:
        raise TrainingError("Cannot fine-tune on an empty dataset")
    progress = progress or _log_progress
    model = ensemble_from_base(base, codewords, seed=config.seed, bits_per_branch=bits_per_branch)
    train, val = train_validation_split(dataset, config)
    targets = codewords.signed()[train.labels]

    if config.bottom_mode == BottomMode.FROZEN:
        feats = features(model, train.images)

        outcomes = Parallel(n_jobs=max(1, settings.workers), prefer="threads")(
            delayed(finetune_branch)(model, k, feats, targets, config) for k in range(model.branch_count)
        )
        for k, (values, history) in enumerate(outcomes):
            model = set_branch_params(model, k, values)
            for epoch, loss, bit_error in history:
                progress(progress_line(epoch, f"branch{k}", loss, bit_error))
    else:
        rng = np.random.default_rng(config.seed)
        trainable = sorted(model.params)
        arch, images = model.architecture, train.images

        def batch_loss(tape, p, idx):
            h = bottom_forward(arch, tape.constant(images[idx]), p)
            return per_bit_loss_tensor(branches_forward(arch, h, p), targets[idx], config.loss)

        def on_epoch(epoch, params):
            _report(with_params(model, params), epoch, (train, val), config.loss, progress)

        model = with_params(model, _fit(model.params, trainable, len(train), batch_loss, config,
                                        config.effective_finetune_epochs, rng, on_epoch))

    errors = _report(model, "final", (train, val), config.loss, progress)
    logger.info("Ensemble fine-tuned (%s bottom): %s", config.bottom_mode.value, errors)
    return _with_metadata(model, dataset, config, errors)
