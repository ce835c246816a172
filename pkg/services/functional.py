"""Composite Gauss-Legendre quadrature on boxes, deformation maps and the functional I(u; box).

Node order is the C order of the tensor grid and every reduction goes through
math.fsum over that order, so values are bit-reproducible.
"""
import logging
import math
from functools import lru_cache
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from models.schemas import BoundaryIntegrals, BoxDomain, MapConfig
from services.algebra import LEVI_CIVITA, adjugate, cofactor, det, inverse, make_rng
from services.energies import EnergyDensity
from services.kinematics import BumpProfile, PointMap, SupportBox, as_points
from utils.constants import BUMP_GRADIENT_BOUND, EXACT_TOLERANCE, MC_IMAGE_SAMPLES, MC_SIGMA_BOUND
from utils.errors import (ConfigError, DimensionError, HessianUnavailableError, JetError, QuadratureError,
                          RangeEscapeError, SupportError)

logger = logging.getLogger(__name__)

RANGE_SLACK = 1e-12


@lru_cache(maxsize=32)
def _gauss_legendre(order: int) -> Tuple[np.ndarray, np.ndarray]:
    return np.polynomial.legendre.leggauss(order)


def _axis_rule(lower: float, upper: float, cells: int, order: int) -> Tuple[np.ndarray, np.ndarray]:
    x, w = _gauss_legendre(order)
    edges = np.linspace(lower, upper, cells + 1)
    half = 0.5 * np.diff(edges)
    mid = 0.5 * (edges[:-1] + edges[1:])
    nodes = (mid[:, None] + half[:, None] * x[None, :]).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return nodes, weights


def _tensor_rule(lowers: Sequence[float], uppers: Sequence[float], cells: int, order: int):
    if len(lowers) == 0:
        return np.zeros((1, 0)), np.ones(1)
    rules = [_axis_rule(lo, hi, cells, order) for lo, hi in zip(lowers, uppers)]
    grids = np.meshgrid(*[r[0] for r in rules], indexing="ij")
    wgrids = np.meshgrid(*[r[1] for r in rules], indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=-1)
    weights = np.prod(np.stack([g.ravel() for g in wgrids], axis=-1), axis=-1)
    return nodes, weights


@lru_cache(maxsize=64)
def quadrature(domain: BoxDomain) -> Tuple[np.ndarray, np.ndarray]:
    """Nodes (N, n) and weights (N,) of the composite tensor rule; read-only and cached."""
    nodes, weights = _tensor_rule(domain.lower, domain.upper, domain.cells, domain.order)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


@lru_cache(maxsize=256)
def _trapezoid_rule(lower: float, upper: float, points: int) -> Tuple[np.ndarray, np.ndarray]:
    # interior nodes only: the integrand and all its derivatives vanish at both ends
    h = (upper - lower) / (points + 1)
    return lower + h * np.arange(1, points + 1), np.full(points, h)


@lru_cache(maxsize=256)
def support_quadrature(domain: BoxDomain, box: Optional[SupportBox]) -> Tuple[np.ndarray, np.ndarray]:
    """Tensor rule on a generator support box.

    Compact axes get the trapezoid rule with domain.support_points interior nodes,
    which converges faster than any power for integrands that are flat at the
    support boundary. Slab axes reuse the composite Gauss rule of the domain.
    box=None falls back to quadrature(domain).
    """
    if box is None:
        return quadrature(domain)
    if len(box.lower) != domain.n:
        raise DimensionError(f"support box has {len(box.lower)} axes, domain has n = {domain.n}")
    rules = []
    for axis, (lo, hi, compact) in enumerate(zip(box.lower, box.upper, box.compact)):
        if compact:
            rules.append(_trapezoid_rule(lo, hi, domain.support_points))
        else:
            rules.append(_axis_rule(domain.lower[axis], domain.upper[axis], domain.cells, domain.order))
    grids = np.meshgrid(*[r[0] for r in rules], indexing="ij")
    wgrids = np.meshgrid(*[r[1] for r in rules], indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=-1)
    weights = np.prod(np.stack([g.ravel() for g in wgrids], axis=-1), axis=-1)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


@lru_cache(maxsize=64)
def face_quadrature(domain: BoxDomain) -> Tuple[Tuple[np.ndarray, np.ndarray, np.ndarray], ...]:
    """(points, weights, outward normal) for each of the 2n faces, ordered by axis then lower/upper."""
    faces = []
    n = domain.n
    for axis in range(n):
        others = [a for a in range(n) if a != axis]
        sub_nodes, sub_weights = _tensor_rule([domain.lower[a] for a in others],
                                              [domain.upper[a] for a in others], domain.cells, domain.order)
        for side, value in ((-1.0, domain.lower[axis]), (1.0, domain.upper[axis])):
            points = np.empty((sub_nodes.shape[0], n))
            points[:, others] = sub_nodes
            points[:, axis] = value
            normal = np.zeros(n)
            normal[axis] = side
            faces.append((points, sub_weights, normal))
    return tuple(faces)


def weighted_sum(values: np.ndarray, weights: np.ndarray, nodes: Optional[np.ndarray] = None) -> float:
    values = np.asarray(values, dtype=float)
    finite = np.isfinite(values)
    if not np.all(finite):
        index = int(np.flatnonzero(~finite)[0])
        where = nodes[index].tolist() if nodes is not None else index
        raise QuadratureError(f"integrand is not finite at node {where}", {"node": where})
    return math.fsum((values * weights).tolist())


def integrate(domain: BoxDomain, integrand: Callable[[np.ndarray], np.ndarray]) -> float:
    """Integral over the box of a vectorised integrand f(points (N, n)) -> (N,)."""
    nodes, weights = quadrature(domain)
    values = np.broadcast_to(np.asarray(integrand(nodes), dtype=float), weights.shape)
    return weighted_sum(values, weights, nodes)


class AffineMap(PointMap):
    """u(x) = F x + b."""

    def __init__(self, F, b=None):
        self.F = np.asarray(F, dtype=float)
        self.n = self.F.shape[0]
        self.b = np.zeros(self.n) if b is None else np.asarray(b, dtype=float)
        if self.F.shape != (self.n, self.n) or self.b.shape != (self.n,):
            raise DimensionError(f"affine map needs square F and matching b, got {self.F.shape} and {self.b.shape}")

    def linear_part(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.F, self.b

    def evaluate(self, points):
        P = as_points(points, self.n)
        return P @ self.F.T + self.b, np.broadcast_to(self.F, P.shape + (self.n,)).copy()

    def hessian(self, points):
        P = as_points(points, self.n)
        return np.zeros(P.shape + (self.n, self.n))


def identity_map(n: int) -> AffineMap:
    return AffineMap(np.eye(n))


class AffinePlusBump(AffineMap):
    """u(x) = F x + b + sum_k amplitude_k * bump_k(x) * e_(axis_k)."""

    def __init__(self, F, b=None, centers=(), radii=(), amplitudes=(), axes=()):
        super().__init__(F, b)
        if not len(centers) == len(radii) == len(amplitudes) == len(axes):
            raise ConfigError("affine_bump needs equally many centers, radii, amplitudes and axes")
        self.bumps = [BumpProfile(c, r, a) for c, r, a in zip(centers, radii, amplitudes)]
        self.axes = [int(a) - 1 for a in axes]
        if any(not 0 <= a < self.n for a in self.axes):
            raise ConfigError(f"bump axes must lie in 1..{self.n}")
        if any(b.n != self.n for b in self.bumps):
            raise DimensionError("bump centers must have the map's dimension")
        self._check_injective()

    def _check_injective(self):
        # |grad of the bump part| < 1 / |F^-1| keeps F^-1 u a contraction perturbation of the identity
        bound = sum(abs(b.amplitude) * BUMP_GRADIENT_BOUND / b.radius for b in self.bumps)
        if bound == 0.0:
            return
        F_inv_norm = float(np.linalg.norm(inverse(self.F), 2)) if det(self.F) > 0 else math.inf
        if bound * F_inv_norm >= 1.0:
            raise SupportError(
                f"bump amplitudes too large for injectivity: sum |a|*{BUMP_GRADIENT_BOUND}/R * |F^-1| = "
                f"{bound * F_inv_norm:.3f} >= 1",
                {"bound": bound * F_inv_norm},
            )

    def support_box(self, domain: BoxDomain) -> Optional[SupportBox]:
        """Box holding every bump when all of them lie strictly inside domain, else None."""
        if not self.bumps:
            return None
        lower = np.min([b.center - b.radius for b in self.bumps], axis=0)
        upper = np.max([b.center + b.radius for b in self.bumps], axis=0)
        if np.any(lower <= np.asarray(domain.lower)) or np.any(upper >= np.asarray(domain.upper)):
            return None
        return SupportBox(tuple(float(v) for v in lower), tuple(float(v) for v in upper), (True,) * self.n)

    def evaluate(self, points):
        P = as_points(points, self.n)
        values, grads = super().evaluate(P)
        for bump, axis in zip(self.bumps, self.axes):
            b, db, _ = bump.evaluate(P)
            values[:, axis] += b
            grads[:, axis, :] += db
        return values, grads

    def hessian(self, points):
        P = as_points(points, self.n)
        H = np.zeros(P.shape + (self.n, self.n))
        for bump, axis in zip(self.bumps, self.axes):
            _, _, hb = bump.evaluate(P, derivatives=2)
            H[:, axis] += hb
        return H


class QuadraticMap(AffineMap):
    """u_i(x) = b_i + F_ij x_j + 1/2 Q_ijk x_j x_k, Q symmetrised in (j, k)."""

    def __init__(self, F, b=None, Q=None):
        super().__init__(F, b)
        Q = np.zeros((self.n,) * 3) if Q is None else np.asarray(Q, dtype=float)
        if Q.shape != (self.n,) * 3:
            raise DimensionError(f"quadratic coefficients must have shape {(self.n,) * 3}, got {Q.shape}")
        self.Q = 0.5 * (Q + np.swapaxes(Q, -1, -2))

    def evaluate(self, points):
        P = as_points(points, self.n)
        values, grads = super().evaluate(P)
        values = values + 0.5 * np.einsum("ijk,Nj,Nk->Ni", self.Q, P, P)
        grads = grads + np.einsum("ijk,Nk->Nij", self.Q, P)
        return values, grads

    def hessian(self, points):
        P = as_points(points, self.n)
        return np.broadcast_to(self.Q, (P.shape[0],) + self.Q.shape).copy()


def map_from_config(config: MapConfig) -> AffineMap:
    F = np.asarray(config.F, dtype=float)
    if config.kind == "affine":
        return AffineMap(F, config.b)
    if config.kind == "quadratic":
        return QuadraticMap(F, config.b, config.Q)
    return AffinePlusBump(F, config.b, config.centers or (), config.radii or (),
                          config.amplitudes or (), config.axes or ())


def _inside_region(points: np.ndarray, region: BoxDomain) -> np.ndarray:
    lower = np.asarray(region.lower) - RANGE_SLACK
    upper = np.asarray(region.upper) + RANGE_SLACK
    return np.all((points >= lower) & (points <= upper), axis=-1)


class CompositeMap(PointMap):
    """x -> outer(inner(x)) with the chain-rule gradient."""

    def __init__(self, outer: PointMap, inner: PointMap):
        if outer.n != inner.n:
            raise DimensionError(f"cannot compose maps of dimension {outer.n} and {inner.n}")
        self.outer = outer
        self.inner = inner
        self.n = outer.n

    def evaluate(self, points):
        P = as_points(points, self.n)
        y, inner_grad = self.inner.evaluate(P)
        region = getattr(self.outer, "region", None)
        if region is not None:
            inside = _inside_region(y, region)
            if not np.all(inside):
                index = int(np.flatnonzero(~inside)[0])
                raise RangeEscapeError(
                    f"inner map sends {P[index].tolist()} to {y[index].tolist()}, outside the flow region",
                    {"point": P[index].tolist(), "image": y[index].tolist()},
                )
        z, outer_grad = self.outer.evaluate(y)
        return z, outer_grad @ inner_grad

    def hessian(self, points):
        P = as_points(points, self.n)
        y, inner_grad = self.inner.evaluate(P)
        outer_grad = self.outer.gradient(y)
        outer_hess = self.outer.hessian(y)
        inner_hess = self.inner.hessian(P)
        return (np.einsum("Nijk,Nja,Nkb->Niab", outer_hess, inner_grad, inner_grad)
                + np.einsum("Nij,Njab->Niab", outer_grad, inner_hess))


def compose(outer: PointMap, inner: PointMap) -> CompositeMap:
    return CompositeMap(outer, inner)


def functional_eval(W: EnergyDensity, u: PointMap, domain: BoxDomain) -> float:
    """I(u; box) = integral of W(x, u(x), grad u(x))."""
    if u.n != domain.n or W.n != domain.n:
        raise DimensionError(f"energy n = {W.n}, map n = {u.n}, domain n = {domain.n}")
    nodes, weights = quadrature(domain)
    values, grads = u.evaluate(nodes)
    return weighted_sum(W.value(grads, nodes, values), weights, nodes)


def functional_difference(W: EnergyDensity, u: PointMap, v: PointMap, domain: BoxDomain,
                          box: Optional[SupportBox]) -> float:
    """I(u; box) - I(v; box) for maps that agree outside box, integrated on the support rule of box."""
    if u.n != domain.n or v.n != domain.n or W.n != domain.n:
        raise DimensionError(f"energy n = {W.n}, maps n = {u.n}, {v.n}, domain n = {domain.n}")
    nodes, weights = support_quadrature(domain, box)
    u_values, u_grads = u.evaluate(nodes)
    v_values, v_grads = v.evaluate(nodes)
    return weighted_sum(W.value(u_grads, nodes, u_values) - W.value(v_grads, nodes, v_values), weights, nodes)


def _wedge(u: np.ndarray, normal: np.ndarray, grad: np.ndarray) -> np.ndarray:
    n = u.shape[-1]
    eps = LEVI_CIVITA[n]
    if n == 2:
        return np.einsum("id,jc,Nc,d->Nij", eps, eps, u, normal)
    # 1/2 eps_jcd eps_ief u_c n_e d_f u_d
    return 0.5 * np.einsum("jcd,ief,Nc,e,Ndf->Nij", eps, eps, u, normal, grad)


def enclosed_volume(u: PointMap, domain: BoxDomain) -> float:
    """|u(box)| from boundary data only: (1/n) * boundary integral of u . cof(grad u) n."""
    n = domain.n
    total = []
    for points, weights, normal in face_quadrature(domain):
        values, grads = u.evaluate(points)
        cof = np.ones_like(grads) if n == 1 else cofactor(grads)
        flux = np.einsum("Ni,Nij,j->N", values, cof, normal)
        total.append(weighted_sum(flux, weights, points))
    return math.fsum(total) / n


def _newton_inverse(u: PointMap, z: np.ndarray, x0: np.ndarray, iterations: int = 50, tol: float = 1e-10):
    x = x0.copy()
    for _ in range(iterations):
        values, grads = u.evaluate(x)
        r = values - z
        if np.max(np.abs(r)) < tol:
            break
        x = x - np.linalg.solve(grads, r[..., None])[..., 0]
    values, _ = u.evaluate(x)
    converged = np.max(np.abs(values - z), axis=-1) < 1e-8
    return x, converged


def mc_image_volume(u: PointMap, domain: BoxDomain, n_samples: int = 200000, seed: int = 0,
                    batch: int = 100000) -> Tuple[float, float]:
    """Monte-Carlo estimate of |u(box)| by point membership, with its binomial standard error.

    Points z drawn in a bounding box of the image are inverted by Newton's method
    started from the linearisation of u at the box center.
    """
    n = domain.n
    rng = make_rng(seed)
    nodes, _ = quadrature(domain)
    faces = np.concatenate([f[0] for f in face_quadrature(domain)])
    image = u.apply(np.concatenate([nodes, faces]))
    span = image.max(axis=0) - image.min(axis=0)
    lo = image.min(axis=0) - 0.05 * span
    hi = image.max(axis=0) + 0.05 * span
    box_volume = float(np.prod(hi - lo))

    center = 0.5 * (np.asarray(domain.lower) + np.asarray(domain.upper))
    u_c, A = u.evaluate(center[None, :])
    A_inv = inverse(A[0])
    lower, upper = np.asarray(domain.lower), np.asarray(domain.upper)

    hits = 0
    drawn = 0
    while drawn < n_samples:
        m = min(batch, n_samples - drawn)
        z = rng.uniform(lo, hi, size=(m, n))
        x0 = center + (z - u_c[0]) @ A_inv.T
        x, converged = _newton_inverse(u, z, x0)
        inside = converged & np.all((x >= lower) & (x <= upper), axis=-1)
        hits += int(np.count_nonzero(inside))
        drawn += m
    p = hits / n_samples
    estimate = box_volume * p
    stderr = box_volume * math.sqrt(max(p * (1.0 - p), 0.0) / n_samples)
    logger.debug(f"[SUCCESS] image volume {estimate:.6f} +- {stderr:.2e} from {n_samples} points")
    return estimate, stderr


def boundary_integrals(u: PointMap, domain: BoxDomain, mc_samples: Optional[int] = None,
                       seed: int = 0) -> BoundaryIntegrals:
    """Volume and surface sides of the divergence identities for det, grad u and adj grad u.

    Affine-plus-bump maps with interior bumps integrate the affine part exactly and
    the bump part on its support rule. mc_samples=None runs the Monte-Carlo image
    volume oracle for n = 2 only.
    """
    n = domain.n
    if u.n != n:
        raise DimensionError(f"map n = {u.n}, domain n = {n}")
    box = u.support_box(domain) if isinstance(u, AffinePlusBump) else None
    if box is None:
        nodes, weights = quadrature(domain)
        base = None
    else:
        nodes, weights = support_quadrature(domain, box)
        base = u.F
        if det(base) <= 0.0:
            raise JetError(f"det F = {det(base):.3e} <= 0 for the affine part", {"F": base.tolist()})
    _, grads = u.evaluate(nodes)
    J = det(grads)
    if np.any(J <= 0.0):
        index = int(np.flatnonzero(J <= 0.0)[0])
        raise JetError(f"det grad u = {J[index]:.3e} <= 0 at node {nodes[index].tolist()}",
                       {"node": nodes[index].tolist()})

    def volume(values: np.ndarray, constant: Optional[np.ndarray]) -> np.ndarray:
        if constant is not None:
            values = values - constant
        flat = values.reshape(values.shape[0], -1)
        total = np.array([weighted_sum(flat[:, k], weights, nodes) for k in range(flat.shape[1])])
        total = total.reshape(values.shape[1:])
        return total if constant is None else total + domain.volume * constant

    vol_det = float(volume(J, None if base is None else np.asarray(det(base))))
    vol_grad = volume(grads, base)
    vol_adj = volume(adjugate(grads), None if base is None else adjugate(base)) if n >= 2 else None

    surf_parts: List[np.ndarray] = []
    wedge_parts: List[np.ndarray] = []
    for points, face_weights, normal in face_quadrature(domain):
        values, face_grads = u.evaluate(points)
        flux = values[:, :, None] * normal[None, None, :]
        surf_parts.append(np.array([[weighted_sum(flux[:, i, j], face_weights) for j in range(n)] for i in range(n)]))
        if n >= 2:
            wedge = _wedge(values, normal, face_grads)
            wedge_parts.append(np.array([[weighted_sum(wedge[:, i, j], face_weights) for j in range(n)]
                                         for i in range(n)]))
    surf_u_n = np.array([[math.fsum(p[i, j] for p in surf_parts) for j in range(n)] for i in range(n)])
    surf_wedge = (np.array([[math.fsum(p[i, j] for p in wedge_parts) for j in range(n)] for i in range(n)])
                  if n >= 2 else None)

    image_volume = enclosed_volume(u, domain)
    if mc_samples is None:
        mc_samples = MC_IMAGE_SAMPLES if n == 2 else 0
    mc_value = mc_error = mc_deviation = None
    if mc_samples > 0:
        mc_value, mc_error = mc_image_volume(u, domain, mc_samples, seed)
        mc_deviation = abs(mc_value - image_volume) / max(mc_error, EXACT_TOLERANCE)
        if mc_deviation > MC_SIGMA_BOUND:
            logger.warning(f"[WARNING] Monte-Carlo image volume {mc_value:.6f} is {mc_deviation:.1f} standard errors "
                           f"from the boundary value {image_volume:.6f}")
    return BoundaryIntegrals(
        vol_det=vol_det,
        vol_grad=vol_grad.tolist(),
        vol_adj=vol_adj.tolist() if vol_adj is not None else None,
        surf_u_n=surf_u_n.tolist(),
        surf_u_wedge_n=surf_wedge.tolist() if surf_wedge is not None else None,
        image_volume=image_volume,
        mc_image_volume=mc_value,
        mc_stderr=mc_error,
        mc_deviation=mc_deviation,
        mc_consistent=None if mc_deviation is None else mc_deviation <= MC_SIGMA_BOUND,
        residual_grad=float(np.max(np.abs(vol_grad - surf_u_n))),
        residual_adj=float(np.max(np.abs(vol_adj - surf_wedge))) if vol_adj is not None else None,
        residual_det=abs(vol_det - image_volume),
    )
