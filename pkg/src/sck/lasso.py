"""L1-regularized reconstruction by cyclic coordinate descent.

Solves  min_a  0.5 * ||x - D a||_2^2 + lam * ||a||_1  for unit-norm atoms D.
The kernels are compiled with numba; the batched entry point codes many
blocks against one dictionary and is what the detector uses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .haar import Dictionary

# prefer OpenMP; the TBB found on some systems is too old for numba and warns
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]


class ConvergenceError(RuntimeError):
    """Raised when the iteration cap is hit; ``code`` holds the best iterate."""

    def __init__(self, code: "SparseCode"):
        super().__init__(
            f"coordinate descent did not reach KKT tolerance after {code.iterations} "
            f"sweeps (residual {code.kkt_residual:.3e})"
        )
        self.code = code


@dataclass(frozen=True)
class SolverParams:
    lam: float = 0.15
    tol: float = 1e-7
    max_iter: int = 10000

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"lambda must be > 0, got {self.lam}")
        if not self.tol > 0:
            raise ValueError(f"tol must be > 0, got {self.tol}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")


@dataclass(frozen=True, eq=False)
class SparseCode:
    coeffs: np.ndarray
    objective: float
    iterations: int
    kkt_residual: float
    converged: bool = True

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.coeffs)


@numba.njit(cache=True)
def _kkt(alpha, c, lam):
    worst = 0.0
    for j in range(alpha.shape[0]):
        a = alpha[j]
        if a > 0.0:
            r = abs(c[j] - lam)
        elif a < 0.0:
            r = abs(c[j] + lam)
        else:
            r = abs(c[j]) - lam
        if r > worst:
            worst = r
    return worst


@numba.njit(cache=True)
def _refresh(G, c0, alpha, c):
    k = alpha.shape[0]
    for i in range(k):
        c[i] = c0[i]
    for j in range(k):
        a = alpha[j]
        if a != 0.0:
            for i in range(k):
                c[i] -= G[i, j] * a


@numba.njit(cache=True)
def _cd(G, c0, lam, tol, max_iter, alpha):
    """Run sweeps in place on ``alpha`` (expected zero on entry).

    ``c`` tracks D^T (x - D alpha). Returns (sweeps, kkt residual, converged).
    """
    k = alpha.shape[0]
    c = c0.copy()
    res = _kkt(alpha, c, lam)
    if res <= tol:
        return 0, res, True
    for sweep in range(1, max_iter + 1):
        for j in range(k):
            old = alpha[j]
            z = old + c[j]
            if z > lam:
                new = z - lam
            elif z < -lam:
                new = z + lam
            else:
                new = 0.0
            delta = new - old
            if delta != 0.0:
                alpha[j] = new
                for i in range(k):
                    c[i] -= G[i, j] * delta
        res = _kkt(alpha, c, lam)
        if res <= tol:
            # drift guard: confirm against a freshly computed correlation
            _refresh(G, c0, alpha, c)
            res = _kkt(alpha, c, lam)
            if res <= tol:
                return sweep, res, True
    _refresh(G, c0, alpha, c)
    return max_iter, _kkt(alpha, c, lam), False


@numba.njit(cache=True)
def _objective(D, x, alpha, lam):
    dim, k = D.shape
    r = x.copy()
    l1 = 0.0
    for j in range(k):
        a = alpha[j]
        if a != 0.0:
            l1 += abs(a)
            for i in range(dim):
                r[i] -= D[i, j] * a
    return 0.5 * np.dot(r, r) + lam * l1


@numba.njit(cache=True, parallel=True)
def _solve_batch(D, G, X, lam, tol, max_iter, alpha, sweeps, kkt, converged, objective):
    dim, k = D.shape
    for b in numba.prange(X.shape[0]):
        x = X[b]
        c0 = np.zeros(k)
        for j in range(k):
            s = 0.0
            for i in range(dim):
                s += D[i, j] * x[i]
            c0[j] = s
        it, res, ok = _cd(G, c0, lam, tol, max_iter, alpha[b])
        sweeps[b] = it
        kkt[b] = res
        converged[b] = ok
        objective[b] = _objective(D, x, alpha[b], lam)


@dataclass(frozen=True, eq=False)
class BatchCodes:
    coeffs: np.ndarray
    iterations: np.ndarray
    kkt_residual: np.ndarray
    converged: np.ndarray
    objective: np.ndarray

    def __len__(self):
        return self.coeffs.shape[0]

    def __getitem__(self, i) -> SparseCode:
        return SparseCode(
            coeffs=self.coeffs[i].copy(),
            objective=float(self.objective[i]),
            iterations=int(self.iterations[i]),
            kkt_residual=float(self.kkt_residual[i]),
            converged=bool(self.converged[i]),
        )


def _gram(d: Dictionary) -> np.ndarray:
    # cached per dictionary object; the dictionary is immutable
    g = d.__dict__.get("_gram")
    if g is None:
        g = np.ascontiguousarray(d.gram())
        object.__setattr__(d, "_gram", g)
    return g


def solve_batch(d: Dictionary, X: np.ndarray, params: SolverParams = SolverParams()) -> BatchCodes:
    """Code every row of ``X`` (shape (B, dim)). Never raises on non-convergence;
    inspect ``converged`` instead."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != d.dim:
        raise ValueError(f"expected rows of length {d.dim}, got shape {X.shape}")
    B = X.shape[0]
    alpha = np.zeros((B, d.k))
    sweeps = np.zeros(B, dtype=np.int64)
    kkt = np.zeros(B)
    conv = np.zeros(B, dtype=np.bool_)
    obj = np.zeros(B)
    if B:
        _solve_batch(d.atoms, _gram(d), X, float(params.lam), float(params.tol),
                     int(params.max_iter), alpha, sweeps, kkt, conv, obj)
    return BatchCodes(alpha, sweeps, kkt, conv, obj)


def solve_lasso(d: Dictionary, x, params: SolverParams = SolverParams()) -> SparseCode:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (d.dim,):
        raise ValueError(f"signal must have length {d.dim}, got shape {x.shape}")
    nrm = np.linalg.norm(x)
    if abs(nrm - 1.0) > 1e-9:
        raise ValueError(f"signal must be unit norm, got {nrm!r}")
    code = solve_batch(d, x[None, :], params)[0]
    if not code.converged:
        raise ConvergenceError(code)
    return code


def lasso_objective(d: Dictionary, x, coeffs, lam: float) -> float:
    r = np.asarray(x, dtype=np.float64) - d.atoms @ coeffs
    return 0.5 * float(r @ r) + lam * float(np.abs(coeffs).sum())


def complexity_measure(code: SparseCode) -> int:
    return int(np.count_nonzero(code.coeffs))


def strength_measure(code: SparseCode, a1: float = 1.0, a2: float = 1.0) -> float:
    if not (a1 > 0 and a2 > 0):
        raise ValueError(f"strength weights must be positive, got a1={a1}, a2={a2}")
    return a1 * np.count_nonzero(code.coeffs) + a2 * float(np.abs(code.coeffs).sum())


def soft_threshold(v, lam):
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.maximum(np.abs(v) - lam, 0.0)


def set_threads(n: int | None) -> int:
    """Cap the workers used by ``solve_batch``; None restores all cores.

    Results never depend on the worker count: each block is coded
    independently and written to its own row.
    """
    top = numba.config.NUMBA_NUM_THREADS
    n = top if n is None else max(1, min(int(n), top))
    numba.set_num_threads(n)
    return n
