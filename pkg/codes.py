"""
Codeword matrices for error-correcting output codes.

A codeword matrix C has one row per class (M rows) and one column per output bit
(N columns). Hadamard-derived matrices take values in {-1, +1}; the one-hot variant is
the M×M identity and is flagged as such.
"""

from dataclasses import dataclass
from itertools import combinations
from typing import Union

import numpy as np

from config import settings


@dataclass(frozen=True, eq=False)
class CodewordMatrix:
    """Class codewords, stored as signed 8-bit integers."""
    entries: np.ndarray
    one_hot: bool = False

    def __post_init__(self):
        entries = np.asarray(self.entries)
        if entries.ndim != 2:
            raise ValueError(f"Codeword matrix must be 2-D, got shape {entries.shape}")
        entries = entries.astype(np.int8)
        entries.setflags(write=False)
        object.__setattr__(self, "entries", entries)

        m, n = entries.shape
        if self.one_hot:
            if m != n or not np.array_equal(entries, np.eye(m, dtype=np.int8)):
                raise ValueError("One-hot codewords must be the identity matrix")
            return
        if not np.all(np.abs(entries) == 1):
            raise ValueError("Codeword entries must be -1 or +1")
        if n < m:
            raise ValueError(f"Codeword length N={n} is shorter than class count M={m}")
        if len({row.tobytes() for row in entries}) != m:
            raise ValueError("Codeword rows must be pairwise distinct")

    @property
    def M(self) -> int:
        return self.entries.shape[0]

    @property
    def N(self) -> int:
        return self.entries.shape[1]

    def as_float(self) -> np.ndarray:
        """Entries promoted to float64, for correlation arithmetic."""
        return self.entries.astype(np.float64)

    def signed(self) -> np.ndarray:
        """±1 bit targets per class; one-hot rows map to 2·I − 1."""
        if self.one_hot:
            return 2.0 * self.as_float() - 1.0
        return self.as_float()

    def row(self, k: int) -> np.ndarray:
        return self.signed()[k]


def sylvester_hadamard(order_exponent: int, max_exponent: int = None) -> np.ndarray:
    """
    Build the 2^p × 2^p Sylvester-Hadamard matrix.

    Uses exact integer arithmetic so that H·Hᵀ = 2^p·I holds bit for bit.
    """
    limit = settings.max_hadamard_exponent if max_exponent is None else max_exponent
    if order_exponent < 0:
        raise ValueError(f"Order exponent must be non-negative, got {order_exponent}")
    if order_exponent > limit:
        raise ValueError(
            f"Order exponent {order_exponent} exceeds the configured limit {limit}"
        )

    H = np.array([[1]], dtype=np.int64)
    for _ in range(order_exponent):
        H = np.vstack((np.hstack((H, H)), np.hstack((H, -H))))
    return H


def _power_of_two_exponent(n: int) -> int:
    if n < 1 or n & (n - 1):
        raise ValueError(f"Codeword length must be a power of two, got {n}")
    return n.bit_length() - 1


def build_codeword_matrix(M: int, N: int) -> CodewordMatrix:
    """
    Select M rows of the N×N Sylvester-Hadamard matrix.

    When M < N the constant all-ones first row is skipped and the next M rows are taken
    in natural order; when M == N the whole matrix is used.
    """
    exponent = _power_of_two_exponent(N)
    if M > N:
        raise ValueError(f"Class count M={M} exceeds codeword length N={N}")
    if M < 2:
        raise ValueError(f"Need at least 2 classes, got {M}")

    H = sylvester_hadamard(exponent)
    rows = H if M == N else H[1:M + 1]
    return CodewordMatrix(entries=rows)


def one_hot_matrix(M: int) -> CodewordMatrix:
    """The M×M identity, i.e. plain one-hot encoding."""
    if M < 2:
        raise ValueError(f"Need at least 2 classes, got {M}")
    return CodewordMatrix(entries=np.eye(M, dtype=np.int8), one_hot=True)


def min_hamming_distance(codewords: Union[CodewordMatrix, np.ndarray]) -> int:
    """Minimum number of differing positions over all pairs of rows."""
    entries = codewords.entries if isinstance(codewords, CodewordMatrix) else np.asarray(codewords)
    if entries.shape[0] < 2:
        raise ValueError("Need at least two codewords")
    return int(min(
        np.count_nonzero(entries[i] != entries[j])
        for i, j in combinations(range(entries.shape[0]), 2)
    ))


def format_codewords(codewords: CodewordMatrix) -> str:
    """Text rendering used by the `codes` subcommand."""
    if codewords.one_hot:
        symbols = {0: "0", 1: "1"}
    else:
        symbols = {-1: "-", 1: "+"}
    lines = [
        f"{k:3d}  " + "".join(symbols[int(v)] for v in row)
        for k, row in enumerate(codewords.entries)
    ]
    kind = "one-hot" if codewords.one_hot else "hadamard"
    lines.append(
        f"M={codewords.M} N={codewords.N} ({kind}) min Hamming distance="
        f"{min_hamming_distance(codewords)}"
    )
    return "\n".join(lines)
