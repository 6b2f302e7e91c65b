"""Haar dictionaries over the reshaped block space."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

NORM_EPS = 1e-9
RANK_RTOL = 1e-10


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dictionary:
    """Column dictionary for blocks of side ``n``; ``atoms`` has shape (n*n, k)."""

    n: int
    atoms: np.ndarray = field(repr=False)

    def __post_init__(self):
        atoms = np.ascontiguousarray(self.atoms, dtype=np.float64)
        if atoms.ndim != 2 or atoms.shape[0] != self.n * self.n:
            raise ConfigurationError(
                f"atoms must have shape ({self.n * self.n}, k), got {atoms.shape}"
            )
        atoms.setflags(write=False)
        object.__setattr__(self, "atoms", atoms)

    @property
    def dim(self) -> int:
        return self.atoms.shape[0]

    @property
    def k(self) -> int:
        return self.atoms.shape[1]

    def gram(self) -> np.ndarray:
        return self.atoms.T @ self.atoms


def next_pow2(m: int) -> int:
    p = 1
    while p < m:
        p *= 2
    return p


def max_levels(n: int) -> int:
    return int(np.log2(next_pow2(n * n)))


def haar_atoms_1d(length: int, levels: int) -> list[np.ndarray]:
    # global scaling atom, then wavelets from finest (support 2) to coarsest
    out = [np.full(length, 1.0 / np.sqrt(length))]
    for level in range(1, levels + 1):
        support = 2**level
        half = support // 2
        amp = 1.0 / np.sqrt(support)
        for start in range(0, length, support):
            w = np.zeros(length)
            w[start:start + half] = amp
            w[start + half:start + support] = -amp
            out.append(w)
    return out


def build_haar(n: int, levels: int = 5) -> Dictionary:
    """Build a complete (or over-complete) Haar dictionary for n x n blocks.

    1D Haar atoms live on the zero-padded length ``next_pow2(n*n)`` and are
    truncated back to ``n*n`` samples. Atoms that vanish under truncation are
    dropped, survivors are renormalized and de-duplicated. If the result does
    not span the block space, the canonical basis is appended.
    """
    if n < 3 or n % 2 == 0:
        raise ConfigurationError(f"block side must be odd and >= 3, got {n}")
    top = max_levels(n)
    if not 1 <= levels <= top:
        raise ConfigurationError(f"levels must be in [1, {top}] for n={n}, got {levels}")

    dim = n * n
    cols: list[np.ndarray] = []
    seen: set[bytes] = set()

    def add(v: np.ndarray) -> None:
        key = (np.round(v, 12) + 0.0).tobytes()
        if key not in seen:
            seen.add(key)
            cols.append(v)

    for atom in haar_atoms_1d(next_pow2(dim), levels):
        v = atom[:dim]
        norm = np.linalg.norm(v)
        if norm < NORM_EPS:
            continue
        add(v / norm)

    if matrix_rank(np.column_stack(cols)) < dim:
        for i in range(dim):
            e = np.zeros(dim)
            e[i] = 1.0
            add(e)

    return Dictionary(n=n, atoms=np.column_stack(cols))


def matrix_rank(m: np.ndarray) -> int:
    s = np.linalg.svd(m, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > RANK_RTOL * s[0]))


def rank(d: Dictionary) -> int:
    return matrix_rank(d.atoms)


def dump_dictionary(d: Dictionary, path) -> None:
    """Write ``SCKDICT n k`` followed by one atom (column) per line."""
    lines = [f"SCKDICT {d.n} {d.k}"]
    for j in range(d.k):
        lines.append(" ".join(f"{v:.17g}" for v in d.atoms[:, j]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dictionary(path) -> Dictionary:
    tokens = Path(path).read_text().split()
    if len(tokens) < 3 or tokens[0] != "SCKDICT":
        raise ValueError(f"{path}: missing SCKDICT header")
    n, k = int(tokens[1]), int(tokens[2])
    values = np.array(tokens[3:], dtype=np.float64)
    if values.size != n * n * k:
        raise ValueError(f"{path}: expected {n * n * k} values, found {values.size}")
    return Dictionary(n=n, atoms=values.reshape(k, n * n).T)
