"""Random row-selection sensing operator.

The operator keeps ``m = round_half_up(sr * n)`` of the ``n`` ambient
coordinates. Selected indices come from a seeded permutation drawn with
numpy's PCG64 bit generator (``numpy.random.Generator(PCG64(seed)).permutation``),
whose output stream is fixed across platforms, so a mask is reproducible
bit-exactly from ``(n, sr, seed)``.

Mask text format::

    <n> <m> <sr> <seed>
    <i_0> <i_1> ... <i_{m-1}>
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = ["SamplingMatrix", "make_sampler", "sample_count", "load_mask", "save_mask"]


def sample_count(n: int, sr: float) -> int:
    """Number of kept rows, ``floor(sr * n + 0.5)``."""
    return int(math.floor(sr * n + 0.5))


@dataclass(frozen=True, eq=False)
class SamplingMatrix:
    """Sensing operator ``Phi`` stored as a sorted index list."""

    n: int
    selected: np.ndarray
    sr: float
    seed: int

    def __post_init__(self):
        sel = np.asarray(self.selected, dtype=np.int64)
        if sel.ndim != 1 or sel.size < 1:
            raise ValueError("selected must be a nonempty 1-D index list")
        if np.any(np.diff(sel) <= 0):
            raise ValueError("selected indices must be strictly increasing")
        if sel[0] < 0 or sel[-1] >= self.n:
            raise ValueError(f"selected indices must lie in [0, {self.n})")
        sel = sel.copy()
        sel.flags.writeable = False
        object.__setattr__(self, "selected", sel)

    @property
    def m(self) -> int:
        return int(self.selected.size)

    def __eq__(self, other):
        if not isinstance(other, SamplingMatrix):
            return NotImplemented
        return (
            self.n == other.n
            and self.sr == other.sr
            and self.seed == other.seed
            and np.array_equal(self.selected, other.selected)
        )

    def __hash__(self):
        return hash((self.n, self.sr, self.seed, self.selected.tobytes()))

    def apply(self, x) -> np.ndarray:
        """``y = Phi x``; also accepts a batch with samples along the first axis."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n:
            raise ValueError(f"expected last dimension {self.n}, got {x.shape[-1]}")
        return x[..., self.selected]

    def compose(self, w) -> np.ndarray:
        """``Phi @ w`` for a matrix with ``n`` rows: the selected rows of ``w``."""
        w = np.asarray(w, dtype=float)
        if w.ndim != 2 or w.shape[0] != self.n:
            raise ValueError(f"expected a matrix with {self.n} rows, got shape {w.shape}")
        return w[self.selected, :]

    def scatter(self, y) -> np.ndarray:
        """``Phi^T y``: lift sensed values back to ambient coordinates (zeros elsewhere).

        Works on the last axis, so ``(m,)`` and ``(N, m)`` inputs are both fine.
        """
        y = np.asarray(y, dtype=float)
        if y.shape[-1] != self.m:
            raise ValueError(f"expected last dimension {self.m}, got {y.shape[-1]}")
        out = np.zeros(y.shape[:-1] + (self.n,))
        out[..., self.selected] = y
        return out

    def to_dense(self) -> np.ndarray:
        """Materialized 0/1 matrix of shape (m, n)."""
        phi = np.zeros((self.m, self.n))
        phi[np.arange(self.m), self.selected] = 1.0
        return phi

    def to_text(self) -> str:
        head = f"{self.n} {self.m} {self.sr!r} {self.seed}"
        return head + "\n" + " ".join(str(int(i)) for i in self.selected) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SamplingMatrix":
        lines = text.strip().splitlines()
        if len(lines) != 2:
            raise ValueError("mask text must have exactly two lines")
        n_s, m_s, sr_s, seed_s = lines[0].split()
        selected = np.array([int(t) for t in lines[1].split()], dtype=np.int64)
        if selected.size != int(m_s):
            raise ValueError(f"header says m={m_s} but {selected.size} indices follow")
        return cls(n=int(n_s), selected=selected, sr=float(sr_s), seed=int(seed_s))


def make_sampler(n: int, sr: float, seed: int) -> SamplingMatrix:
    """Seeded random row-selection mask keeping ``round(sr * n)`` coordinates."""
    if not (0.0 < sr <= 1.0):
        raise ValueError(f"sampling rate must lie in (0, 1], got {sr}")
    if n < 1:
        raise ValueError(f"n must be positive, got {n}")
    if not (0 <= seed < 2**64):
        raise ValueError("seed must be a 64-bit unsigned integer")
    m = sample_count(n, sr)
    if m < 1:
        raise ValueError(f"round({sr} * {n}) = 0 leaves nothing to sense")
    perm = np.random.Generator(np.random.PCG64(seed)).permutation(n)
    return SamplingMatrix(n=n, selected=np.sort(perm[:m]), sr=float(sr), seed=int(seed))


def save_mask(phi: SamplingMatrix, path) -> None:
    Path(path).write_text(phi.to_text())


def load_mask(path) -> SamplingMatrix:
    return SamplingMatrix.from_text(Path(path).read_text())
