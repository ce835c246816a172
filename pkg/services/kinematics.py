"""Compactly supported generators eta, their RK4 flows phi_t with gradients, and conjugations."""
import itertools
import logging
import math
from typing import NamedTuple, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from models.schemas import BoxDomain, FieldKind, FieldSpec, GroupKind, GroupSpec, TestReport, Verdict
from services.algebra import LEVI_CIVITA, inverse, jet_deviation, tangent_deviation
from utils.constants import STEPS_PER_UNIT_TIME
from utils.errors import ConfigError, DimensionError, HessianUnavailableError, SupportError

logger = logging.getLogger(__name__)


class PointMap:
    """A map R^n -> R^n evaluated on stacks of points of shape (N, n)."""

    n: int

    def evaluate(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.evaluate(points)[0]

    def gradient(self, points: np.ndarray) -> np.ndarray:
        return self.evaluate(points)[1]

    def hessian(self, points: np.ndarray) -> np.ndarray:
        raise HessianUnavailableError(f"{type(self).__name__} has no analytic second derivatives")


class SupportBox(NamedTuple):
    """Axis-aligned box holding a generator support; slab axes (compact False) span the whole domain."""
    lower: Tuple[float, ...]
    upper: Tuple[float, ...]
    compact: Tuple[bool, ...]

    def image(self, A: np.ndarray) -> "SupportBox":
        """Bounding box of {A x : x in box}; every axis of a compact box stays compact."""
        if not all(self.compact):
            raise ConfigError("only fully compact supports can be mapped linearly")
        corners = np.array(list(itertools.product(*zip(self.lower, self.upper))))
        mapped = corners @ np.asarray(A, dtype=float).T
        return SupportBox(tuple(float(v) for v in mapped.min(axis=0)), tuple(float(v) for v in mapped.max(axis=0)),
                          self.compact)


def _ball_box(bumps) -> SupportBox:
    lower = np.min([b.center - b.radius for b in bumps], axis=0)
    upper = np.max([b.center + b.radius for b in bumps], axis=0)
    return SupportBox(tuple(float(v) for v in lower), tuple(float(v) for v in upper), (True,) * lower.size)


def as_points(points, n: int) -> np.ndarray:
    P = np.atleast_2d(np.asarray(points, dtype=float))
    if P.shape[-1] != n:
        raise DimensionError(f"expected points with {n} coordinates, got shape {P.shape}")
    return P


class BumpProfile:
    """b(x) = amplitude * exp(-1/(1 - r^2)), r = |x - center| / radius; zero for r >= 1."""

    def __init__(self, center, radius: float, amplitude: float):
        self.center = np.asarray(center, dtype=float).reshape(-1)
        self.radius = float(radius)
        self.amplitude = float(amplitude)
        if self.radius <= 0:
            raise SupportError("bump radius must be positive")
        self.n = self.center.size

    def evaluate(self, points: np.ndarray, derivatives: int = 1):
        d = points - self.center
        R2 = self.radius ** 2
        s = np.sum(d * d, axis=-1) / R2
        inside = s < 1.0
        N, n = points.shape
        value = np.zeros(N)
        grad = np.zeros((N, n))
        hess = np.zeros((N, n, n)) if derivatives >= 2 else None
        if self.amplitude != 0.0 and np.any(inside):
            w = 1.0 / (1.0 - s[inside])
            b = self.amplitude * np.exp(-w)
            v = 2.0 * d[inside] / R2
            g = -w * w
            value[inside] = b
            grad[inside] = (b * g)[:, None] * v
            if hess is not None:
                dg = -2.0 * w ** 3
                hess[inside] = ((b * (g * g + dg))[:, None, None] * v[:, :, None] * v[:, None, :]
                                + (2.0 * b * g / R2)[:, None, None] * np.eye(n))
        return value, grad, hess

    def support_mask(self, points: np.ndarray) -> np.ndarray:
        d = points - self.center
        return np.sum(d * d, axis=-1) < self.radius ** 2


class VectorField:
    """Compactly supported generator with analytic value and gradient."""

    def __init__(self, kind: FieldKind, n: int, spec: Optional[FieldSpec] = None, domain: Optional[BoxDomain] = None):
        self.kind = kind
        self.n = n
        self.spec = spec
        self.domain = domain

    def evaluate(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def value(self, points) -> np.ndarray:
        return self.evaluate(as_points(points, self.n))[0]

    def gradient(self, points) -> np.ndarray:
        return self.evaluate(as_points(points, self.n))[1]

    def support_mask(self, points: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def support_box(self) -> Optional[SupportBox]:
        """Box outside of which the field vanishes identically; None means the whole domain."""
        return None

    def divergence(self, points) -> np.ndarray:
        return np.trace(self.gradient(points), axis1=-2, axis2=-1)

    @property
    def max_amplitude(self) -> float:
        return max(abs(a) for a in self.spec.amplitudes) if self.spec is not None else 0.0


class BumpField(VectorField):
    """eta = sum_k b_k(x) d_k (generic_bump, separable_1d)."""

    def __init__(self, kind, n, bumps, directions, spec=None, domain=None):
        super().__init__(kind, n, spec, domain)
        self.bumps = bumps
        self.directions = [np.asarray(d, dtype=float) for d in directions]

    def evaluate(self, points):
        values = np.zeros(points.shape)
        grads = np.zeros(points.shape + (self.n,))
        for bump, direction in zip(self.bumps, self.directions):
            b, db, _ = bump.evaluate(points)
            values += b[:, None] * direction
            grads += direction[None, :, None] * db[:, None, :]
        return values, grads

    def support_mask(self, points):
        return np.logical_or.reduce([b.support_mask(points) for b in self.bumps])

    def support_box(self):
        return _ball_box(self.bumps)


class StreamField(VectorField):
    """eta = (d psi/dx2, -d psi/dx1) for a bump stream function (div_free_2d, hamiltonian_2d)."""

    def __init__(self, kind, bumps, spec=None, domain=None):
        super().__init__(kind, 2, spec, domain)
        self.bumps = bumps

    def evaluate(self, points):
        dpsi = np.zeros(points.shape)
        hpsi = np.zeros(points.shape + (2,))
        for bump in self.bumps:
            _, db, hb = bump.evaluate(points, derivatives=2)
            dpsi += db
            hpsi += hb
        values = np.stack([dpsi[:, 1], -dpsi[:, 0]], axis=-1)
        grads = np.empty(points.shape + (2,))
        grads[:, 0, :] = hpsi[:, 1, :]
        grads[:, 1, :] = -hpsi[:, 0, :]
        return values, grads

    def support_mask(self, points):
        return np.logical_or.reduce([b.support_mask(points) for b in self.bumps])

    def support_box(self):
        return _ball_box(self.bumps)


class CurlField(VectorField):
    """eta = curl(sum_k b_k a_k) = sum_k grad b_k x a_k (div_free_3d)."""

    def __init__(self, bumps, potentials, spec=None, domain=None):
        super().__init__(FieldKind.DIV_FREE_3D, 3, spec, domain)
        self.bumps = bumps
        self.potentials = [np.asarray(a, dtype=float) for a in potentials]

    def evaluate(self, points):
        eps = LEVI_CIVITA[3]
        values = np.zeros(points.shape)
        grads = np.zeros(points.shape + (3,))
        for bump, a in zip(self.bumps, self.potentials):
            _, db, hb = bump.evaluate(points, derivatives=2)
            values += np.einsum("ijk,Nj,k->Ni", eps, db, a)
            grads += np.einsum("ijk,Njl,k->Nil", eps, hb, a)
        return values, grads

    def support_mask(self, points):
        return np.logical_or.reduce([b.support_mask(points) for b in self.bumps])

    def support_box(self):
        return _ball_box(self.bumps)


class ShearField(VectorField):
    """eta_p = s(x_q), other components zero; s is a sum of one-dimensional bumps in x_q.

    The support is a slab: compact in x_q, full extent along the other axes.
    """

    def __init__(self, n, p, q, bumps, spec=None, domain=None):
        super().__init__(FieldKind.SHEAR, n, spec, domain)
        self.p = p
        self.q = q
        self.bumps = bumps

    def evaluate(self, points):
        coordinate = points[:, self.q:self.q + 1]
        values = np.zeros(points.shape)
        grads = np.zeros(points.shape + (self.n,))
        for bump in self.bumps:
            b, db, _ = bump.evaluate(coordinate)
            values[:, self.p] += b
            grads[:, self.p, self.q] += db[:, 0]
        return values, grads

    def support_mask(self, points):
        coordinate = points[:, self.q:self.q + 1]
        return np.logical_or.reduce([b.support_mask(coordinate) for b in self.bumps])

    def support_box(self):
        if self.domain is None:
            return None
        lower, upper = list(self.domain.lower), list(self.domain.upper)
        lower[self.q] = min(float(b.center[0]) - b.radius for b in self.bumps)
        upper[self.q] = max(float(b.center[0]) + b.radius for b in self.bumps)
        return SupportBox(tuple(lower), tuple(upper), tuple(axis == self.q for axis in range(self.n)))


class LinearField(VectorField):
    """eta(x) = A x; not compactly supported, used only as a closed-form flow oracle."""

    def __init__(self, A):
        A = np.asarray(A, dtype=float)
        super().__init__(FieldKind.GENERIC_BUMP, A.shape[0])
        self.A = A

    def evaluate(self, points):
        return points @ self.A.T, np.broadcast_to(self.A, points.shape + (self.n,)).copy()

    def support_mask(self, points):
        return np.ones(points.shape[0], dtype=bool)


def _inside(lower: float, upper: float, lo: float, hi: float) -> bool:
    return lo < lower and upper < hi


def field_make(spec: FieldSpec, domain: BoxDomain) -> VectorField:
    """Build the generator described by spec; its support must lie strictly inside domain."""
    if spec.n != domain.n:
        raise DimensionError(f"field has n = {spec.n}, domain has n = {domain.n}")
    if spec.kind == FieldKind.SHEAR:
        if spec.p == spec.q:
            raise ConfigError("shear generator requires p != q")
        q = spec.q - 1
        bumps = []
        for center, radius, amplitude in zip(spec.centers, spec.radii, spec.amplitudes):
            c = center[q]
            if not _inside(c - radius, c + radius, domain.lower[q], domain.upper[q]):
                raise SupportError(f"shear bump [{c - radius:.4g}, {c + radius:.4g}] touches the domain boundary on axis {spec.q}")
            bumps.append(BumpProfile([c], radius, amplitude))
        return ShearField(spec.n, spec.p - 1, q, bumps, spec, domain)

    bumps = []
    for center, radius, amplitude in zip(spec.centers, spec.radii, spec.amplitudes):
        for axis in range(spec.n):
            if not _inside(center[axis] - radius, center[axis] + radius, domain.lower[axis], domain.upper[axis]):
                raise SupportError(
                    f"bump at {center} with radius {radius} touches the domain boundary on axis {axis + 1}",
                    {"center": list(center), "radius": radius},
                )
        bumps.append(BumpProfile(center, radius, amplitude))

    if spec.kind in (FieldKind.DIV_FREE_2D, FieldKind.HAMILTONIAN_2D):
        return StreamField(spec.kind, bumps, spec, domain)
    if spec.kind == FieldKind.DIV_FREE_3D:
        return CurlField(bumps, spec.directions, spec, domain)
    if spec.kind == FieldKind.SEPARABLE_1D:
        return BumpField(spec.kind, 1, bumps, [[1.0]] * len(bumps), spec, domain)
    return BumpField(spec.kind, spec.n, bumps, spec.directions, spec, domain)


def field_in_TG(field: VectorField, g: GroupSpec, points) -> TestReport:
    """Infinitesimal jet condition of g on grad eta at the given points."""
    if field.n != g.n:
        raise DimensionError(f"field has n = {field.n}, group has n = {g.n}")
    P = as_points(points, field.n)
    deviation = tangent_deviation(g, field.gradient(P))
    worst = int(np.argmax(deviation)) if deviation.size else 0
    max_dev = float(deviation[worst]) if deviation.size else 0.0
    passed = max_dev <= g.tolerance
    return TestReport(
        condition="field_in_TG",
        verdict=Verdict.PASS if passed else Verdict.FAIL,
        margin=-max_dev,
        residual=max_dev,
        tolerance=g.tolerance,
        samples=int(P.shape[0]),
        witness={"point": P[worst].tolist(), "group": g.kind.value,
                 "field": field.spec.model_dump(mode="json") if field.spec else None},
        caveat="checked at the sample grid only",
    )


def default_steps(tau: float, steps_per_unit: int = STEPS_PER_UNIT_TIME) -> int:
    return max(1, int(math.ceil(steps_per_unit * abs(tau) - 1e-9)))


class FlowMap(PointMap):
    """phi_tau of an autonomous field by classical RK4, with the variational equation for grad phi."""

    def __init__(self, field: VectorField, tau: float, steps: Optional[int] = None):
        self.field = field
        self.tau = float(tau)
        self.steps = default_steps(tau) if steps is None else int(steps)
        if self.steps < 1:
            raise ConfigError("flow needs at least one step")
        self.n = field.n
        self._memo = None

    @property
    def region(self) -> Optional[BoxDomain]:
        return self.field.domain

    def support_box(self) -> Optional[SupportBox]:
        return self.field.support_box()

    def evaluate(self, points):
        # read-only node arrays come from the cached quadrature rules; reuse their flow
        if self._memo is not None and self._memo[0] is points:
            return self._memo[1].copy(), self._memo[2].copy()
        phi, grad = self._integrate(points)
        if isinstance(points, np.ndarray) and not points.flags.writeable:
            self._memo = (points, phi, grad)
            return phi.copy(), grad.copy()
        return phi, grad

    def _integrate(self, points):
        P = as_points(points, self.n)
        phi = P.copy()
        grad = np.broadcast_to(np.eye(self.n), P.shape + (self.n,)).copy()
        if self.tau == 0.0:
            return phi, grad
        # outside the support the field vanishes and the flow is the identity
        moving = self.field.support_mask(P)
        if not np.any(moving):
            return phi, grad
        x = P[moving]
        G = grad[moving]
        h = self.tau / self.steps
        for _ in range(self.steps):
            v1, A1 = self.field.evaluate(x)
            K1 = A1 @ G
            v2, A2 = self.field.evaluate(x + 0.5 * h * v1)
            K2 = A2 @ (G + 0.5 * h * K1)
            v3, A3 = self.field.evaluate(x + 0.5 * h * v2)
            K3 = A3 @ (G + 0.5 * h * K2)
            v4, A4 = self.field.evaluate(x + h * v3)
            K4 = A4 @ (G + h * K3)
            x = x + (h / 6.0) * (v1 + 2.0 * v2 + 2.0 * v3 + v4)
            G = G + (h / 6.0) * (K1 + 2.0 * K2 + 2.0 * K3 + K4)
        phi[moving] = x
        grad[moving] = G
        return phi, grad


def flow_advance(field: VectorField, tau: float, steps: Optional[int] = None) -> FlowMap:
    return FlowMap(field, tau, steps)


def flow_inverse(f: FlowMap) -> FlowMap:
    return FlowMap(f.field, -f.tau, f.steps)


def flow_group_check(f: PointMap, g: GroupSpec, points) -> float:
    deviation = jet_deviation(g, f.gradient(as_points(points, g.n)))
    return float(np.max(deviation)) if deviation.size else 0.0


class AffineRescale(BaseModel):
    """f(x) = x1 + eps (x - x0)."""
    model_config = ConfigDict(frozen=True)

    x0: Tuple[float, ...] = Field(..., description="Source point")
    x1: Tuple[float, ...] = Field(..., description="Target point")
    eps: float = Field(..., gt=0, description="Scale factor")

    @model_validator(mode="after")
    def check_dims(self):
        if len(self.x0) != len(self.x1):
            raise ValueError("x0 and x1 must have the same dimension")
        return self

    def forward(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(self.x1) + self.eps * (points - np.asarray(self.x0))

    def inverse(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(self.x0) + (points - np.asarray(self.x1)) / self.eps


class ConjugatedFlow(PointMap):
    """x -> f(phi(f^-1(x))); the scale factors cancel in the gradient."""

    def __init__(self, flow: PointMap, rescale: AffineRescale):
        self.flow = flow
        self.rescale = rescale
        self.n = flow.n

    def evaluate(self, points):
        P = as_points(points, self.n)
        phi, grad = self.flow.evaluate(self.rescale.inverse(P))
        return self.rescale.forward(phi), grad

    def support_mask(self, points):
        return self.flow.field.support_mask(self.rescale.inverse(as_points(points, self.n)))


def rescale_conjugate(f: PointMap, r: AffineRescale) -> ConjugatedFlow:
    return ConjugatedFlow(f, r)


class LinearConjugate(PointMap):
    """y -> F^-1 phi(F y), gradient F^-1 grad phi(F y) F (conjugation by a jet matrix)."""

    def __init__(self, flow: PointMap, F):
        self.flow = flow
        self.F = np.asarray(F, dtype=float)
        self.F_inv = inverse(self.F)
        self.n = flow.n

    def evaluate(self, points):
        P = as_points(points, self.n)
        phi, grad = self.flow.evaluate(P @ self.F.T)
        return phi @ self.F_inv.T, self.F_inv @ grad @ self.F


def linear_conjugate(f: PointMap, F) -> LinearConjugate:
    return LinearConjugate(f, F)


class FlowDisplacement(PointMap):
    """eta = F (phi - id); F + grad eta = F grad phi, and eta vanishes off the flow's support."""

    def __init__(self, flow: FlowMap, F):
        self.flow = flow
        self.F = np.asarray(F, dtype=float)
        self.n = flow.n

    def support_box(self) -> Optional[SupportBox]:
        return self.flow.support_box()

    def evaluate(self, points):
        phi, grad = self.flow.evaluate(points)
        P = as_points(points, self.n)
        return (phi - P) @ self.F.T, self.F @ (grad - np.eye(self.n))


def flow_displacement(flow: FlowMap, F) -> FlowDisplacement:
    return FlowDisplacement(flow, F)


def _ball(rng: np.random.Generator, domain: BoxDomain, radius_range=(0.2, 0.35)):
    extents = np.asarray(domain.extents)
    radius = float(rng.uniform(*radius_range) * extents.min())
    gap = 0.02 * extents.min()
    lower = np.asarray(domain.lower) + radius + gap
    upper = np.asarray(domain.upper) - radius - gap
    center = rng.uniform(lower, upper)
    return tuple(float(c) for c in center), radius


def _unit_vector(rng: np.random.Generator, n: int) -> Tuple[float, ...]:
    v = rng.standard_normal(n)
    return tuple(float(c) for c in v / np.linalg.norm(v))


def _sign(rng: np.random.Generator) -> float:
    return 1.0 if rng.uniform() < 0.5 else -1.0


def sample_field_spec(g: GroupSpec, domain: BoxDomain, rng: np.random.Generator) -> FieldSpec:
    """Draw a g-admissible generator supported strictly inside domain.

    Amplitudes are scaled by the radius so that |grad eta| stays below about 2,
    which keeps the RK4 jet drift far below the flow gate.
    """
    n = g.n
    if g.kind == GroupKind.SHEAR:
        q = g.q - 1
        lo, hi = domain.lower[q], domain.upper[q]
        extent = hi - lo
        radius = float(rng.uniform(0.2, 0.35) * extent)
        c = float(rng.uniform(lo + radius + 0.02 * extent, hi - radius - 0.02 * extent))
        center = tuple(c if axis == q else 0.5 * (domain.lower[axis] + domain.upper[axis]) for axis in range(n))
        amplitude = _sign(rng) * radius * float(rng.uniform(0.3, 1.0))
        return FieldSpec(kind=FieldKind.SHEAR, n=n, centers=(center,), radii=(radius,),
                         amplitudes=(amplitude,), p=g.p, q=g.q)

    center, radius = _ball(rng, domain)
    if n == 1 or g.kind == GroupKind.SEPARABLE_1D:
        if g.kind == GroupKind.VOLUME_PRESERVING:
            raise ConfigError("the volume preserving group is trivial for n = 1")
        amplitude = _sign(rng) * radius * float(rng.uniform(0.2, 0.8))
        return FieldSpec(kind=FieldKind.SEPARABLE_1D, n=1, centers=(center,), radii=(radius,), amplitudes=(amplitude,))
    if g.kind in (GroupKind.VOLUME_PRESERVING, GroupKind.SYMPLECTIC_2D):
        amplitude = _sign(rng) * radius ** 2 * float(rng.uniform(0.05, 0.2))
        if n == 2:
            kind = FieldKind.HAMILTONIAN_2D if g.kind == GroupKind.SYMPLECTIC_2D else FieldKind.DIV_FREE_2D
            return FieldSpec(kind=kind, n=2, centers=(center,), radii=(radius,), amplitudes=(amplitude,))
        return FieldSpec(kind=FieldKind.DIV_FREE_3D, n=3, centers=(center,), radii=(radius,),
                         amplitudes=(amplitude,), directions=(_unit_vector(rng, 3),))
    amplitude = _sign(rng) * radius * float(rng.uniform(0.2, 0.8))
    return FieldSpec(kind=FieldKind.GENERIC_BUMP, n=n, centers=(center,), radii=(radius,),
                     amplitudes=(amplitude,), directions=(_unit_vector(rng, n),))
