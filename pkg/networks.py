"""
The one-hot baseline classifier and the ECOC ensemble built on a shared bottom.

Ensemble layout: input → shared bottom → N/b branches (each b bits, default b = 1) →
logits z → tanh → correlations ρ = tanh(z)·Cᵀ → probabilities p_σ. All branches are
evaluated as one batched computation (first layers concatenated, second layers
block-diagonal); `branch_logits` is a separate per-branch path used to cross-check it.

Images live in [0, 1]. Models are immutable; training produces new parameter arrays.
"""

import hashlib
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, ClassVar, Dict, Iterable, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ValidationError

import autodiff as ad
from autodiff import ShapeMismatchError, Tape, Tensor
from codes import CodewordMatrix, one_hot_matrix
from models import Architecture, BottomKind, ModelKind

logger = logging.getLogger(__name__)

Params = Dict[str, np.ndarray]


def _freeze(params: Params) -> Params:
    frozen = {}
    for name, value in params.items():
        value = np.array(value, dtype=np.float64)
        value.setflags(write=False)
        frozen[name] = value
    return frozen


@dataclass(frozen=True, eq=False)
class OneHotModel:
    """Single network with M softmax outputs."""
    architecture: Architecture
    params: Params
    num_classes: int
    metadata: Dict[str, Any] = field(default_factory=dict)

    kind: ClassVar[ModelKind] = ModelKind.ONE_HOT

    def __post_init__(self):
        object.__setattr__(self, "params", _freeze(self.params))
        expected = _param_shapes(self.architecture, self.kind, self.num_classes, self.num_classes)
        _check_shapes(self.params, expected)

    @property
    def codewords(self) -> CodewordMatrix:
        return one_hot_matrix(self.num_classes)

    @property
    def M(self) -> int:
        return self.num_classes

    @property
    def output_size(self) -> int:
        return self.num_classes


@dataclass(frozen=True, eq=False)
class EcocEnsemble:
    """Shared bottom plus one-bit (or b-bit) branches decoded through a codeword matrix."""
    architecture: Architecture
    params: Params
    codewords: CodewordMatrix
    metadata: Dict[str, Any] = field(default_factory=dict)

    kind: ClassVar[ModelKind] = ModelKind.ECOC

    def __post_init__(self):
        if self.codewords.one_hot:
            raise ValueError("An ECOC ensemble needs a ±1 codeword matrix")
        if self.codewords.N % self.architecture.bits_per_branch:
            raise ValueError(
                f"Codeword length {self.codewords.N} is not a multiple of "
                f"bits_per_branch={self.architecture.bits_per_branch}"
            )
        object.__setattr__(self, "params", _freeze(self.params))
        expected = _param_shapes(self.architecture, self.kind, self.codewords.M, self.codewords.N)
        _check_shapes(self.params, expected)

    @property
    def M(self) -> int:
        return self.codewords.M

    @property
    def N(self) -> int:
        return self.codewords.N

    @property
    def branch_count(self) -> int:
        return self.N // self.architecture.bits_per_branch

    @property
    def output_size(self) -> int:
        return self.N


Model = Union[OneHotModel, EcocEnsemble]


# ---------------------------------------------------------------------------
# Parameter layout and initialization
# ---------------------------------------------------------------------------

def _bottom_shapes(arch: Architecture) -> Dict[str, Tuple[int, ...]]:
    if arch.bottom == BottomKind.CONV:
        c_in = arch.input_shape[0]
        c1, c2 = arch.conv_channels
        return {
            "bottom.conv1.w": (c1, c_in, 3, 3), "bottom.conv1.b": (c1,),
            "bottom.conv2.w": (c2, c1, 3, 3), "bottom.conv2.b": (c2,),
        }
    if arch.bottom == BottomKind.DENSE:
        return {"bottom.dense.w": (arch.pixel_count, arch.bottom_width),
                "bottom.dense.b": (arch.bottom_width,)}
    return {}


def _param_shapes(arch: Architecture, kind: ModelKind, M: int, N: int) -> Dict[str, Tuple[int, ...]]:
    shapes = _bottom_shapes(arch)
    F, H = arch.feature_size, arch.head_width
    if kind == ModelKind.ONE_HOT:
        if H:
            shapes.update({"head.w1": (F, H), "head.b1": (H,), "head.w2": (H, M), "head.b2": (M,)})
        else:
            shapes.update({"head.w": (F, M), "head.b": (M,)})
        return shapes

    nb = N // arch.bits_per_branch
    if H:
        shapes.update({
            "branch.w1": (F, nb * H), "branch.b1": (nb * H,),
            "branch.w2": (nb, H, arch.bits_per_branch), "branch.b2": (N,),
        })
    else:
        shapes.update({"branch.w": (F, N), "branch.b": (N,)})
    return shapes


def _check_shapes(params: Params, expected: Dict[str, Tuple[int, ...]]) -> None:
    if set(params) != set(expected):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise ShapeMismatchError(f"Parameter names differ: missing={missing} unexpected={extra}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ShapeMismatchError(f"{name}: expected shape {shape}, got {params[name].shape}")


def _he(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / max(fan_in, 1)), size=shape)


def _init_params(shapes: Dict[str, Tuple[int, ...]], rng: np.random.Generator) -> Params:
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".b") or name.endswith("b1") or name.endswith("b2"):
            params[name] = np.zeros(shape)
        elif len(shape) == 4:
            params[name] = _he(rng, shape, shape[1] * shape[2] * shape[3])
        elif len(shape) == 3:
            params[name] = _he(rng, shape, shape[1])
        else:
            params[name] = _he(rng, shape, shape[0])
    return params


def init_one_hot(arch: Architecture, num_classes: int, seed: int = 0) -> OneHotModel:
    rng = np.random.default_rng(seed)
    shapes = _param_shapes(arch, ModelKind.ONE_HOT, num_classes, num_classes)
    return OneHotModel(arch, _init_params(shapes, rng), num_classes)


def init_ensemble(arch: Architecture, codewords: CodewordMatrix, seed: int = 0) -> EcocEnsemble:
    rng = np.random.default_rng(seed)
    shapes = _param_shapes(arch, ModelKind.ECOC, codewords.M, codewords.N)
    return EcocEnsemble(arch, _init_params(shapes, rng), codewords)


def ensemble_from_base(base: OneHotModel, codewords: CodewordMatrix, seed: int = 0,
                       bits_per_branch: int = 1) -> EcocEnsemble:
    """
    Start an ensemble from a trained baseline.

    The bottom is copied; every branch's first layer starts as a copy of the baseline
    head's first layer, and the per-bit output layers are freshly initialized.
    """
    arch = base.architecture.model_copy(update={"bits_per_branch": bits_per_branch})
    rng = np.random.default_rng(seed)
    shapes = _param_shapes(arch, ModelKind.ECOC, codewords.M, codewords.N)
    params = _init_params(shapes, rng)
    for name in _bottom_shapes(arch):
        params[name] = base.params[name].copy()
    if arch.head_width:
        nb = codewords.N // bits_per_branch
        params["branch.w1"] = np.tile(base.params["head.w1"], (1, nb))
        params["branch.b1"] = np.tile(base.params["head.b1"], nb)
    return EcocEnsemble(arch, params, codewords, metadata=dict(base.metadata))


def with_params(model: Model, updates: Params) -> Model:
    """A copy of `model` with some parameter arrays replaced."""
    params = dict(model.params)
    params.update(updates)
    return replace(model, params=params)


# ---------------------------------------------------------------------------
# Recorded forward pass
# ---------------------------------------------------------------------------

def bind(tape: Tape, params: Params, trainable: Iterable[str] = ()) -> Dict[str, Tensor]:
    """Record parameters on a tape: leaves for `trainable`, constants for the rest."""
    trainable = set(trainable)
    unknown = trainable - set(params)
    if unknown:
        raise KeyError(f"Unknown parameters: {sorted(unknown)}")
    return {
        name: tape.leaf(value) if name in trainable else tape.constant(value)
        for name, value in params.items()
    }


def bottom_forward(arch: Architecture, x: Tensor, p: Dict[str, Tensor]) -> Tensor:
    """Shared-bottom features, shape (B, feature_size)."""
    if arch.bottom == BottomKind.CONV:
        h = ad.relu(ad.bias_add(ad.conv2d(x, p["bottom.conv1.w"]), p["bottom.conv1.b"]))
        h = ad.maxpool2x2(h)
        h = ad.relu(ad.bias_add(ad.conv2d(h, p["bottom.conv2.w"]), p["bottom.conv2.b"]))
        h = ad.maxpool2x2(h)
        return ad.flatten(h)
    if arch.bottom == BottomKind.DENSE:
        return ad.relu(ad.bias_add(ad.matmul(ad.flatten(x), p["bottom.dense.w"]), p["bottom.dense.b"]))
    return ad.flatten(x)


def head_forward(arch: Architecture, h: Tensor, p: Dict[str, Tensor]) -> Tensor:
    if arch.head_width:
        hidden = ad.relu(ad.bias_add(ad.matmul(h, p["head.w1"]), p["head.b1"]))
        return ad.bias_add(ad.matmul(hidden, p["head.w2"]), p["head.b2"])
    return ad.bias_add(ad.matmul(h, p["head.w"]), p["head.b"])


def branches_forward(arch: Architecture, h: Tensor, p: Dict[str, Tensor]) -> Tensor:
    """All branch logits at once, shape (B, N)."""
    if arch.head_width:
        hidden = ad.relu(ad.bias_add(ad.matmul(h, p["branch.w1"]), p["branch.b1"]))
        return ad.bias_add(ad.matmul(hidden, ad.block_diagonal(p["branch.w2"])), p["branch.b2"])
    return ad.bias_add(ad.matmul(h, p["branch.w"]), p["branch.b"])


def forward(tape: Tape, model: Model, x: Tensor,
            params: Optional[Dict[str, Tensor]] = None) -> Tensor:
    """Logits for a recorded batch `x` of shape (B, *input_shape)."""
    arch = model.architecture
    if tuple(x.shape[1:]) != tuple(arch.input_shape):
        raise ShapeMismatchError(f"Input batch {x.shape} does not match model input {arch.input_shape}")
    if params is None:
        params = bind(tape, model.params)
    h = bottom_forward(arch, x, params)
    if model.kind == ModelKind.ONE_HOT:
        return head_forward(arch, h, params)
    return branches_forward(arch, h, params)


def _as_batch(model: Model, x) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    shape = tuple(model.architecture.input_shape)
    if x.shape == shape:
        return x[None], True
    if x.shape[1:] == shape:
        return x, False
    raise ShapeMismatchError(f"Input of shape {x.shape} does not match model input {shape}")


def features(model: Model, x) -> np.ndarray:
    """Shared-bottom output for a batch, as a plain array."""
    batch, _ = _as_batch(model, x)
    tape = Tape()
    return bottom_forward(model.architecture, tape.constant(batch), bind(tape, model.params)).value


def logits(model: Model, x) -> np.ndarray:
    """z for one image (1-D result) or a batch (2-D result)."""
    batch, single = _as_batch(model, x)
    tape = Tape()
    z = forward(tape, model, tape.constant(batch)).value
    return z[0] if single else z


def branch_logits(model: EcocEnsemble, x, k: int) -> np.ndarray:
    """Bits of branch k computed on their own, without the block-diagonal batching."""
    if not 0 <= k < model.branch_count:
        raise IndexError(f"Branch {k} out of range for {model.branch_count} branches")
    batch, single = _as_batch(model, x)
    h = features(model, batch)
    arch, p = model.architecture, model.params
    bits = arch.bits_per_branch
    if arch.head_width:
        H = arch.head_width
        hidden = np.maximum(h @ p["branch.w1"][:, k * H:(k + 1) * H] + p["branch.b1"][k * H:(k + 1) * H], 0.0)
        out = hidden @ p["branch.w2"][k] + p["branch.b2"][k * bits:(k + 1) * bits]
    else:
        out = h @ p["branch.w"][:, k * bits:(k + 1) * bits] + p["branch.b"][k * bits:(k + 1) * bits]
    return out[0] if single else out


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

def correlations(z, codewords: Union[CodewordMatrix, np.ndarray], activation: str = "tanh") -> np.ndarray:
    """ρ_k = σ(z)·C_k over the last axis of z; σ is tanh, or exp for the softmax reduction."""
    C = codewords.as_float() if isinstance(codewords, CodewordMatrix) else np.asarray(codewords, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != C.shape[1]:
        raise ShapeMismatchError(f"Logit length {z.shape[-1]} does not match codeword length {C.shape[1]}")
    if activation == "tanh":
        activated = np.tanh(z)
    elif activation == "exp":
        activated = np.exp(z)
    else:
        raise ValueError(f"Unknown activation '{activation}'")
    return activated @ C.T


def class_probabilities(rho) -> Tuple[np.ndarray, Union[bool, np.ndarray]]:
    """
    p_σ(k) = max(ρ_k, 0) / Σ_i max(ρ_i, 0).

    When every correlation is ≤ 0 the ratio is undefined; the uniform vector is returned
    and the second element flags the case (a bool, or a bool array for batches).
    """
    rho = np.asarray(rho, dtype=np.float64)
    positive = np.maximum(rho, 0.0)
    total = positive.sum(axis=-1, keepdims=True)
    degenerate = total <= 0.0
    safe_total = np.where(degenerate, 1.0, total)
    p = np.where(degenerate, 1.0 / rho.shape[-1], positive / safe_total)
    flag = degenerate[..., 0]
    return p, (bool(flag) if flag.ndim == 0 else flag)


def softmax_probabilities(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def probabilities_from_logits(model: Model, z) -> np.ndarray:
    if model.kind == ModelKind.ONE_HOT:
        return softmax_probabilities(z)
    p, _ = class_probabilities(correlations(z, model.codewords))
    return p


def predict_from_logits(model: Model, z) -> Union[int, np.ndarray]:
    """argmax p (ties to the lowest index); degenerate ECOC rows fall back to argmax ρ."""
    z = np.asarray(z, dtype=np.float64)
    if model.kind == ModelKind.ONE_HOT:
        labels = np.argmax(softmax_probabilities(z), axis=-1)
    else:
        rho = correlations(z, model.codewords)
        p, degenerate = class_probabilities(rho)
        labels = np.where(degenerate, np.argmax(rho, axis=-1), np.argmax(p, axis=-1))
    return int(labels) if np.ndim(labels) == 0 else labels


def probabilities(model: Model, x) -> np.ndarray:
    """p_σ for an ensemble, p_ψ for a one-hot model."""
    return probabilities_from_logits(model, logits(model, x))


def predict(model: Model, x) -> int:
    _, single = _as_batch(model, x)
    if not single:
        raise ShapeMismatchError("predict takes a single image; use predict_batch")
    return predict_from_logits(model, logits(model, x))


def predict_batch(model: Model, x, batch_size: int = 256) -> np.ndarray:
    batch, _ = _as_batch(model, x)
    parts = [
        np.atleast_1d(predict_from_logits(model, logits(model, batch[i:i + batch_size])))
        for i in range(0, len(batch), batch_size)
    ]
    return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"ECOC"
FORMAT_VERSION = 1
_PREFIX = MAGIC + str(FORMAT_VERSION).encode()
_CHECKSUM_SIZE = 8


class CheckpointError(ValueError):
    """Unreadable or inconsistent checkpoint file."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointChecksumError(CheckpointError):
    pass


class ParamBlock(BaseModel):
    name: str
    shape: List[int]


class CheckpointHeader(BaseModel):
    format_version: int = FORMAT_VERSION
    kind: ModelKind
    architecture: Architecture
    num_classes: int
    code_length: int
    codewords: List[List[int]]
    pixel_range: str = "unit"
    params: List[ParamBlock]
    metadata: Dict[str, Any] = {}


def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=_CHECKSUM_SIZE).digest()


def checkpoint_bytes(model: Model) -> bytes:
    names = sorted(model.params)
    header = CheckpointHeader(
        kind=model.kind,
        architecture=model.architecture,
        num_classes=model.M,
        code_length=model.output_size,
        codewords=model.codewords.entries.tolist(),
        params=[ParamBlock(name=n, shape=list(model.params[n].shape)) for n in names],
        metadata=model.metadata,
    )
    header_bytes = header.model_dump_json().encode("utf-8")
    body = [_PREFIX, struct.pack("<I", len(header_bytes)), header_bytes]
    body += [np.ascontiguousarray(model.params[n], dtype="<f8").tobytes() for n in names]
    data = b"".join(body)
    return data + _checksum(data)


def save_checkpoint(model: Model, path: Union[str, Path]) -> str:
    """Write the model; returns the sha256 of the file for manifests."""
    data = checkpoint_bytes(model)
    Path(path).write_bytes(data)
    logger.info("Saved %s checkpoint (%d bytes) to %s", model.kind.value, len(data), path)
    return hashlib.sha256(data).hexdigest()


def parse_checkpoint(data: bytes) -> Model:
    """
    Decode checkpoint bytes.

    The trailing checksum is verified before anything else is read, so any corrupted or cut
    byte surfaces as CheckpointChecksumError; the structural checks after it only fire on
    files whose checksum is intact.
    """
    prefix_len = len(_PREFIX) + 4
    if len(data) < prefix_len + _CHECKSUM_SIZE:
        raise CheckpointTruncatedError(f"File too short for a checkpoint ({len(data)} bytes)")
    if _checksum(data[:-_CHECKSUM_SIZE]) != data[-_CHECKSUM_SIZE:]:
        raise CheckpointChecksumError("Checksum mismatch: the file is corrupted or truncated")
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("Not a checkpoint file (bad magic)")
    if data[:len(_PREFIX)] != _PREFIX:
        raise CheckpointVersionError(
            f"Unsupported checkpoint version {data[len(MAGIC):len(_PREFIX)]!r}, expected {FORMAT_VERSION}"
        )

    (header_len,) = struct.unpack("<I", data[len(_PREFIX):prefix_len])
    if prefix_len + header_len + _CHECKSUM_SIZE > len(data):
        raise CheckpointTruncatedError("Checkpoint header extends past end of file")
    try:
        header = CheckpointHeader.model_validate_json(data[prefix_len:prefix_len + header_len])
    except ValidationError as e:
        raise CheckpointError(f"Invalid checkpoint header: {e}")

    sizes = [int(np.prod(b.shape, dtype=np.int64)) for b in header.params]
    expected = prefix_len + header_len + 8 * sum(sizes) + _CHECKSUM_SIZE
    if len(data) < expected:
        raise CheckpointTruncatedError(f"Checkpoint is {len(data)} bytes, expected {expected}")
    if len(data) > expected:
        raise CheckpointError(f"Checkpoint has {len(data) - expected} unexpected trailing bytes")
    if header.format_version != FORMAT_VERSION:
        raise CheckpointVersionError(f"Unsupported header version {header.format_version}")

    params: Params = {}
    offset = prefix_len + header_len
    for block, size in zip(header.params, sizes):
        params[block.name] = np.frombuffer(data, dtype="<f8", count=size, offset=offset).reshape(block.shape)
        offset += 8 * size

    if header.kind == ModelKind.ONE_HOT:
        return OneHotModel(header.architecture, params, header.num_classes, metadata=header.metadata)
    codewords = CodewordMatrix(entries=np.array(header.codewords))
    return EcocEnsemble(header.architecture, params, codewords, metadata=header.metadata)


def load_checkpoint(path: Union[str, Path]) -> Model:
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}")
    model = parse_checkpoint(data)
    logger.info("Loaded %s checkpoint from %s", model.kind.value, path)
    return model
