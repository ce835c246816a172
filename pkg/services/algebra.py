"""Matrix primitives for n <= 3: closed-form det/adjugate, jet predicates J(G), jet sampling, characters.

Every function accepts a single matrix of shape (n, n) or a stack of shape (..., n, n);
the stacked form is what the quadrature code feeds in.
"""
import logging
import math
from typing import Tuple

import numpy as np

from models.schemas import CharacterKind, CharacterSpec, GroupKind, GroupSpec
from utils.errors import CharacterError, DimensionError, VarinvError

logger = logging.getLogger(__name__)

SYMPLECTIC_FORM = np.array([[0.0, 1.0], [-1.0, 0.0]])


def _levi_civita(n: int) -> np.ndarray:
    eps = np.zeros((n,) * n)
    if n == 2:
        eps[0, 1], eps[1, 0] = 1.0, -1.0
    elif n == 3:
        for i, j, k in ((0, 1, 2), (1, 2, 0), (2, 0, 1)):
            eps[i, j, k] = 1.0
            eps[i, k, j] = -1.0
    return eps


LEVI_CIVITA = {2: _levi_civita(2), 3: _levi_civita(3)}


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; numpy guarantees a platform-independent stream for a given seed."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def as_matrix(M, n: int = None) -> np.ndarray:
    """Validate a square matrix (or stack) and return it as a read-only float array."""
    A = np.array(M, dtype=float)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2] or not 1 <= A.shape[-1] <= 3:
        raise DimensionError(f"expected square matrices of size 1..3, got shape {A.shape}")
    if n is not None and A.shape[-1] != n:
        raise DimensionError(f"expected {n}x{n} matrices, got {A.shape[-1]}x{A.shape[-1]}")
    if not np.all(np.isfinite(A)):
        raise VarinvError("matrix entries must be finite")
    A.setflags(write=False)
    return A


def det(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    n = M.shape[-1]
    if n == 1:
        return M[..., 0, 0].copy()
    if n == 2:
        return M[..., 0, 0] * M[..., 1, 1] - M[..., 0, 1] * M[..., 1, 0]
    if n == 3:
        return (M[..., 0, 0] * (M[..., 1, 1] * M[..., 2, 2] - M[..., 1, 2] * M[..., 2, 1])
                - M[..., 0, 1] * (M[..., 1, 0] * M[..., 2, 2] - M[..., 1, 2] * M[..., 2, 0])
                + M[..., 0, 2] * (M[..., 1, 0] * M[..., 2, 1] - M[..., 1, 1] * M[..., 2, 0]))
    raise DimensionError(f"det is implemented for n <= 3, got n = {n}")


def adjugate(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    n = M.shape[-1]
    if n == 1:
        raise DimensionError("adjugate is not defined for n = 1")
    adj = np.empty_like(M)
    if n == 2:
        adj[..., 0, 0] = M[..., 1, 1]
        adj[..., 0, 1] = -M[..., 0, 1]
        adj[..., 1, 0] = -M[..., 1, 0]
        adj[..., 1, 1] = M[..., 0, 0]
        return adj
    if n == 3:
        for i in range(3):
            for j in range(3):
                # adj_ij = cof_ji
                r = [k for k in range(3) if k != j]
                c = [k for k in range(3) if k != i]
                minor = M[..., r[0], c[0]] * M[..., r[1], c[1]] - M[..., r[0], c[1]] * M[..., r[1], c[0]]
                adj[..., i, j] = (-1.0) ** (i + j) * minor
        return adj
    raise DimensionError(f"adjugate is implemented for n <= 3, got n = {n}")


def cofactor(M) -> np.ndarray:
    return np.swapaxes(adjugate(M), -1, -2)


def inverse(M) -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.shape[-1] == 1:
        return 1.0 / M
    return adjugate(M) / det(M)[..., None, None]


def jet_deviation(g: GroupSpec, M) -> np.ndarray:
    """Distance of each matrix to exact satisfaction of the jet predicate of g."""
    M = np.asarray(M, dtype=float)
    if M.shape[-1] != g.n or M.shape[-2] != g.n:
        raise DimensionError(f"group {g.kind.value} has n = {g.n}, matrix is {M.shape[-2]}x{M.shape[-1]}")
    if g.kind in (GroupKind.FULL_DIFF, GroupKind.SEPARABLE_1D):
        return np.maximum(0.0, -det(M))
    if g.kind == GroupKind.VOLUME_PRESERVING:
        return np.abs(det(M) - 1.0)
    if g.kind == GroupKind.SYMPLECTIC_2D:
        residual = M @ SYMPLECTIC_FORM @ np.swapaxes(M, -1, -2) - SYMPLECTIC_FORM
        return np.max(np.abs(residual), axis=(-2, -1))
    # shear: mass off the single admitted entry
    off = M - np.eye(g.n)
    off[..., g.p - 1, g.q - 1] = 0.0
    return np.max(np.abs(off), axis=(-2, -1))


def jet_member(g: GroupSpec, M) -> Tuple[bool, float]:
    M = as_matrix(M, g.n)
    deviation = float(np.max(jet_deviation(g, M)))
    if g.kind in (GroupKind.FULL_DIFF, GroupKind.SEPARABLE_1D):
        # GL+ is open: membership means strictly positive determinant
        return bool(np.all(det(M) > 0.0)), deviation
    return deviation <= g.tolerance, deviation


def tangent_deviation(g: GroupSpec, A) -> np.ndarray:
    """Deviation of gradients A = grad eta from the Lie algebra of J(g)."""
    A = np.asarray(A, dtype=float)
    if g.kind in (GroupKind.FULL_DIFF, GroupKind.SEPARABLE_1D):
        return np.zeros(A.shape[:-2])
    if g.kind == GroupKind.VOLUME_PRESERVING:
        return np.abs(np.trace(A, axis1=-2, axis2=-1))
    if g.kind == GroupKind.SYMPLECTIC_2D:
        residual = A @ SYMPLECTIC_FORM + SYMPLECTIC_FORM @ np.swapaxes(A, -1, -2)
        return np.max(np.abs(residual), axis=(-2, -1))
    off = A.copy()
    off[..., g.p - 1, g.q - 1] = 0.0
    return np.max(np.abs(off), axis=(-2, -1))


def character_group(c: CharacterSpec) -> GroupSpec:
    if c.kind != CharacterKind.SHEAR_EXP:
        raise CharacterError("diagonal_power characters have no compactly supported local group")
    return GroupSpec(kind=GroupKind.SHEAR, n=c.n, p=c.p, q=c.q)


def _diagonal_deviation(M: np.ndarray) -> float:
    off = M - np.diag(np.diag(M))
    return float(np.max(np.abs(off)))


def character_eval(c: CharacterSpec, M) -> float:
    M = as_matrix(M, c.n)
    if c.kind == CharacterKind.SHEAR_EXP:
        member, deviation = jet_member(character_group(c), M)
        if not member:
            raise CharacterError(f"matrix is not a shear I + sE_{c.p}{c.q} (deviation {deviation:.3e})",
                                 {"deviation": deviation})
        return math.exp(c.c * M[c.p - 1, c.q - 1])
    diagonal = np.diag(M)
    if _diagonal_deviation(M) > 1e-12 or np.any(diagonal <= 0.0):
        raise CharacterError("diagonal_power needs a positive diagonal matrix")
    return float(np.prod(diagonal ** np.asarray(c.exponents)))


def random_orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    Q, R = np.linalg.qr(rng.standard_normal((n, n)))
    Q = Q * np.sign(np.diag(R))
    if det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q


def random_jet_element(g: GroupSpec, seed: int) -> np.ndarray:
    """Sample F in J(g), deterministic in seed.

    Singular values lie in [0.5, 2] (GL+) or in [0.39, 2.52] after the SL
    normalisation, so entries are bounded by 2.52 and the condition number
    stays below 7, well inside JET_CONDITION_BOUND.
    """
    rng = make_rng(seed)
    n = g.n
    if g.kind == GroupKind.SHEAR:
        M = np.eye(n)
        M[g.p - 1, g.q - 1] = rng.uniform(-2.0, 2.0)
        return as_matrix(M)
    if g.kind == GroupKind.SEPARABLE_1D or n == 1:
        value = math.exp(rng.uniform(-math.log(2.0), math.log(2.0)))
        if g.kind == GroupKind.VOLUME_PRESERVING:
            value = 1.0
        return as_matrix([[value]])

    singular = rng.uniform(0.5, 2.0, size=n)
    if g.kind in (GroupKind.VOLUME_PRESERVING, GroupKind.SYMPLECTIC_2D):
        singular = singular / np.prod(singular) ** (1.0 / n)
    M = random_orthogonal(rng, n) @ np.diag(singular) @ random_orthogonal(rng, n).T
    if g.kind in (GroupKind.VOLUME_PRESERVING, GroupKind.SYMPLECTIC_2D):
        M = M / det(M) ** (1.0 / n)
    return as_matrix(M)
