"""Energy densities W(x, y, F) with value, F-gradient and F-Hessian, and the named catalog.

Arrays follow the layout grad[..., i, j] = dW/dF_ij and hess[..., i, j, k, l] = d2W/dF_ij dF_kl.
Every callable is vectorised over leading axes of F.
"""
import logging
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from models.schemas import CharacterKind, CharacterSpec
from services.algebra import LEVI_CIVITA, adjugate, character_group, cofactor, det, inverse, jet_deviation
from utils.constants import ENERGY_DESCRIPTIONS, FD_STEP, FLOW_JET_TOLERANCE, LOGDET_FLOOR
from utils.errors import ConfigError, EnergyDomainError

logger = logging.getLogger(__name__)


class DerivativeBundle(NamedTuple):
    value: np.ndarray
    grad: np.ndarray
    hess: np.ndarray
    asymmetry: float


def _pair_transpose(H: np.ndarray) -> np.ndarray:
    # (ij) <-> (kl)
    return np.swapaxes(np.swapaxes(H, -4, -2), -3, -1)


def _basis(n: int) -> np.ndarray:
    E = np.zeros((n * n, n, n))
    for a in range(n * n):
        E[a, a // n, a % n] = 1.0
    return E


class EnergyDensity:
    def __init__(
        self,
        name: str,
        n: int,
        value_fn: Callable,
        grad_fn: Optional[Callable] = None,
        hess_fn: Optional[Callable] = None,
        homogeneous: bool = True,
        domain_check: Optional[Callable] = None,
        params: Optional[Dict[str, Any]] = None,
    ):
        self.name = name
        self.n = n
        self._value_fn = value_fn
        self._grad_fn = grad_fn
        self._hess_fn = hess_fn
        self.homogeneous = homogeneous
        self._domain_check = domain_check
        self.params = params or {}

    @classmethod
    def from_callable(cls, name: str, n: int, fn: Callable, homogeneous: bool = True) -> "EnergyDensity":
        """Wrap a value-only density; derivatives come from finite differences.

        The caller is responsible for continuity of fn, which cannot be checked numerically.
        """
        return cls(name, n, fn, homogeneous=homogeneous)

    @property
    def derivative_mode(self) -> str:
        return "analytic" if self._grad_fn is not None and self._hess_fn is not None else "finite_difference"

    def __repr__(self) -> str:
        return f"EnergyDensity(name={self.name!r}, n={self.n}, mode={self.derivative_mode})"

    def check_domain(self, F: np.ndarray):
        if self._domain_check is not None:
            self._domain_check(np.asarray(F, dtype=float))

    def _call(self, fn, F, x, y):
        if self.homogeneous:
            return fn(F)
        return fn(x, y, F)

    def value(self, F, x=None, y=None) -> np.ndarray:
        F = np.asarray(F, dtype=float)
        self.check_domain(F)
        return np.asarray(self._call(self._value_fn, F, x, y), dtype=float)

    def grad(self, F, x=None, y=None) -> np.ndarray:
        F = np.asarray(F, dtype=float)
        self.check_domain(F)
        if self._grad_fn is not None and self.homogeneous:
            return np.asarray(self._grad_fn(F), dtype=float)
        return self._fd_grad(F, x, y)

    def hess(self, F, x=None, y=None) -> np.ndarray:
        return self.derivatives(F, x, y).hess

    def derivatives(self, F, x=None, y=None) -> DerivativeBundle:
        F = np.asarray(F, dtype=float)
        value = self.value(F, x, y)
        grad = self.grad(F, x, y)
        if self._hess_fn is not None and self.homogeneous:
            return DerivativeBundle(value, grad, np.asarray(self._hess_fn(F), dtype=float), 0.0)
        raw = self._fd_hess(F, x, y)
        asymmetry = float(np.max(np.abs(raw - _pair_transpose(raw)))) if raw.size else 0.0
        return DerivativeBundle(value, grad, 0.5 * (raw + _pair_transpose(raw)), asymmetry)

    def _step(self, F: np.ndarray) -> np.ndarray:
        # relative step keeps conditioning uniform across magnitudes
        scale = np.maximum(1.0, np.max(np.abs(F), axis=(-2, -1)))
        return FD_STEP * scale

    def _fd_grad(self, F, x, y) -> np.ndarray:
        h = self._step(F)[..., None, None]

        def central(step):
            out = np.empty(F.shape)
            for a, E in enumerate(_basis(self.n)):
                i, j = divmod(a, self.n)
                plus = self._call(self._value_fn, F + step * E, x, y)
                minus = self._call(self._value_fn, F - step * E, x, y)
                out[..., i, j] = (plus - minus) / (2.0 * step[..., 0, 0])
            return out

        return (4.0 * central(0.5 * h) - central(h)) / 3.0

    def _fd_hess(self, F, x, y) -> np.ndarray:
        h = self._step(F)[..., None, None]
        n = self.n

        def central(step):
            out = np.empty(F.shape + (n, n))
            for a, E in enumerate(_basis(n)):
                k, l = divmod(a, n)
                plus = self.grad(F + step * E, x, y)
                minus = self.grad(F - step * E, x, y)
                out[..., k, l] = (plus - minus) / (2.0 * step)
            return out

        return (4.0 * central(0.5 * h) - central(h)) / 3.0


def energy_derivatives(W: EnergyDensity, x, y, F) -> DerivativeBundle:
    return W.derivatives(F, x, y)


def fd_derivative_check(W: EnergyDensity, F, h: float = FD_STEP) -> Tuple[float, float]:
    """Max-norm discrepancy of the density's derivatives against plain central differences.

    The gradient is compared with differences of values, the Hessian with
    differences of the gradient.
    """
    F = np.asarray(F, dtype=float)
    n = W.n
    grad = W.grad(F)
    hess = W.hess(F)
    fd_grad = np.empty_like(grad)
    fd_hess = np.empty_like(hess)
    for a, E in enumerate(_basis(n)):
        i, j = divmod(a, n)
        fd_grad[i, j] = (W.value(F + h * E) - W.value(F - h * E)) / (2.0 * h)
        fd_hess[..., i, j] = (W.grad(F + h * E) - W.grad(F - h * E)) / (2.0 * h)
    return float(np.max(np.abs(grad - fd_grad))), float(np.max(np.abs(hess - fd_hess)))


def _require_positive_det(name: str):
    def check(F):
        J = det(F)
        bad = np.flatnonzero(np.ravel(J) <= LOGDET_FLOOR)
        if bad.size:
            index = int(bad[0])
            raise EnergyDomainError(
                f"{name} needs det F > {LOGDET_FLOOR:g}; got {float(np.ravel(J)[index]):.3e} at node {index}",
                {"node": index, "det": float(np.ravel(J)[index])},
            )
    return check


def _eye4(n: int) -> np.ndarray:
    I = np.eye(n)
    return np.einsum("ik,jl->ijkl", I, I)


def frobenius2(n: int, sign: float = 1.0, name: str = "frobenius2") -> EnergyDensity:
    H = 2.0 * sign * _eye4(n)
    return EnergyDensity(
        name, n,
        value_fn=lambda F: sign * np.sum(F * F, axis=(-2, -1)),
        grad_fn=lambda F: 2.0 * sign * F,
        hess_fn=lambda F: np.broadcast_to(H, F.shape[:-2] + H.shape).copy(),
    )


def _det_hess(F: np.ndarray) -> np.ndarray:
    n = F.shape[-1]
    if n == 1:
        return np.zeros(F.shape[:-2] + (1, 1, 1, 1))
    eps = LEVI_CIVITA[n]
    if n == 2:
        H = np.einsum("ik,jl->ijkl", eps, eps)
        return np.broadcast_to(H, F.shape[:-2] + H.shape).copy()
    return np.einsum("iam,jbn,...mn->...ijab", eps, eps, F)


def _matrix_param(value, n: int, key: str) -> np.ndarray:
    if value is None:
        return np.zeros((n, n))
    M = np.asarray(value, dtype=float)
    if M.shape != (n, n):
        raise ConfigError(f"classical_nll '{key}' must be {n}x{n}, got shape {M.shape}")
    return M


def null_lagrangian(n: int, linear=None, adj=None, det_coefficient: float = 0.0,
                    name: str = "classical_nll", params=None) -> EnergyDensity:
    """W = sum L_ij F_ij + sum A_ij adj(F)_ij + c det F."""
    L = _matrix_param(linear, n, "linear")
    A = _matrix_param(adj, n, "adj")
    c = float(det_coefficient)
    if n == 1 and np.any(A != 0.0):
        raise ConfigError("adjugate terms need n >= 2")
    eps = LEVI_CIVITA.get(n)

    def value(F):
        total = np.einsum("ij,...ij->...", L, F) + c * det(F)
        if n >= 2:
            total = total + np.einsum("ij,...ij->...", A, adjugate(F))
        return total

    def grad(F):
        G = np.broadcast_to(L, F.shape).copy()
        if n >= 2:
            G = G + c * cofactor(F)
            if n == 2:
                G = G + np.einsum("ij,jc,id->cd", A, eps, eps)
            else:
                G = G + np.einsum("ij,jxd,iyf,...df->...xy", A, eps, eps, F)
        else:
            G = G + c
        return G

    def hess(F):
        H = c * _det_hess(F)
        if n == 3:
            H = H + np.einsum("ij,jxd,iyf->xydf", A, eps, eps)
        return H

    return EnergyDensity(name, n, value, grad, hess, params=params)


def logdet(n: int) -> EnergyDensity:
    def grad(F):
        return np.swapaxes(inverse(F), -1, -2)

    def hess(F):
        Finv = inverse(F)
        return -np.einsum("...jk,...li->...ijkl", Finv, Finv)

    return EnergyDensity("logdet", n, lambda F: np.log(det(F)), grad, hess,
                         domain_check=_require_positive_det("logdet"))


def stvk(n: int, lam: float, mu: float) -> EnergyDensity:
    """Saint Venant-Kirchhoff: lam/2 (tr E)^2 + mu tr(E^2), E = (F^T F - I)/2."""
    I = np.eye(n)

    def strain(F):
        return 0.5 * (np.swapaxes(F, -1, -2) @ F - I)

    def stress(F):
        E = strain(F)
        return lam * np.trace(E, axis1=-2, axis2=-1)[..., None, None] * I + 2.0 * mu * E

    def value(F):
        E = strain(F)
        trE = np.trace(E, axis1=-2, axis2=-1)
        return 0.5 * lam * trE ** 2 + mu * np.sum(E * E, axis=(-2, -1))

    def grad(F):
        return F @ stress(F)

    def hess(F):
        S = stress(F)
        FFt = F @ np.swapaxes(F, -1, -2)
        return (np.einsum("ik,...jl->...ijkl", I, S)
                + lam * np.einsum("...ij,...kl->...ijkl", F, F)
                + mu * (np.einsum("...il,...kj->...ijkl", F, F) + np.einsum("...ik,jl->...ijkl", FFt, I)))

    return EnergyDensity("stvk", n, value, grad, hess, params={"lam": lam, "mu": mu})


def neo_hookean(n: int, mu: float, lam: float) -> EnergyDensity:
    """mu/2 (|F|^2 - n) - mu log J + lam/2 (log J)^2."""
    I = np.eye(n)

    def value(F):
        logJ = np.log(det(F))
        return 0.5 * mu * (np.sum(F * F, axis=(-2, -1)) - n) - mu * logJ + 0.5 * lam * logJ ** 2

    def grad(F):
        logJ = np.log(det(F))
        return mu * F + (lam * logJ - mu)[..., None, None] * np.swapaxes(inverse(F), -1, -2)

    def hess(F):
        logJ = np.log(det(F))
        Finv = inverse(F)
        return (mu * np.einsum("ik,jl->ijkl", I, I)
                + (mu - lam * logJ)[..., None, None, None, None] * np.einsum("...jk,...li->...ijkl", Finv, Finv)
                + lam * np.einsum("...ji,...lk->...ijkl", Finv, Finv))

    return EnergyDensity("neo_hookean", n, value, grad, hess,
                         domain_check=_require_positive_det("neo_hookean"), params={"mu": mu, "lam": lam})


def char_log(character: CharacterSpec) -> EnergyDensity:
    """W(F) = log chi(F); finite on the character's group only."""
    n = character.n
    if character.kind == CharacterKind.SHEAR_EXP:
        group = character_group(character).model_copy(update={"tolerance": FLOW_JET_TOLERANCE})
        p, q, c = character.p - 1, character.q - 1, character.c

        def check(F):
            deviation = np.ravel(jet_deviation(group, F))
            bad = np.flatnonzero(deviation > group.tolerance)
            if bad.size:
                raise EnergyDomainError(
                    f"char_log evaluated off the shear group (deviation {deviation[bad[0]]:.3e} at node {int(bad[0])})",
                    {"node": int(bad[0])},
                )

        def grad(F):
            G = np.zeros(F.shape)
            G[..., p, q] = c
            return G

        return EnergyDensity("char_log", n, lambda F: c * F[..., p, q], grad,
                             lambda F: np.zeros(F.shape + (n, n)), domain_check=check,
                             params=character.model_dump(mode="json"))

    a = np.asarray(character.exponents, dtype=float)

    def check_diagonal(F):
        off = F - np.einsum("...ii,ij->...ij", F, np.eye(n))
        if np.any(np.abs(off) > FLOW_JET_TOLERANCE) or np.any(np.diagonal(F, axis1=-2, axis2=-1) <= 0.0):
            raise EnergyDomainError("char_log(diagonal_power) needs positive diagonal matrices")

    def value(F):
        return np.sum(a * np.log(np.diagonal(F, axis1=-2, axis2=-1)), axis=-1)

    def grad(F):
        d = np.diagonal(F, axis1=-2, axis2=-1)
        return np.einsum("...i,ij->...ij", a / d, np.eye(n))

    def hess(F):
        d = np.diagonal(F, axis1=-2, axis2=-1)
        H = np.zeros(F.shape + (n, n))
        for i in range(n):
            H[..., i, i, i, i] = -a[i] / d[..., i] ** 2
        return H

    return EnergyDensity("char_log", n, value, grad, hess, domain_check=check_diagonal,
                         params=character.model_dump(mode="json"))


class ConvexFunction:
    """Separable convex g(t) = sum_k c_k phi(t_k) with phi in {t^2, exp t, t}."""

    KINDS = ("square", "exp", "linear")

    def __init__(self, kind: str, weights: Sequence[float]):
        if kind not in self.KINDS:
            raise ConfigError(f"unknown convex function '{kind}'; expected one of {self.KINDS}")
        self.kind = kind
        self.weights = np.asarray(weights, dtype=float)
        if kind != "linear" and np.any(self.weights < 0.0):
            raise ConfigError(f"'{kind}' needs non-negative weights to stay convex")

    @property
    def m(self) -> int:
        return self.weights.size

    def value(self, t: np.ndarray) -> np.ndarray:
        if self.kind == "square":
            return np.sum(self.weights * t ** 2, axis=-1)
        if self.kind == "exp":
            return np.sum(self.weights * np.exp(t), axis=-1)
        return np.sum(self.weights * t, axis=-1)

    def grad(self, t: np.ndarray) -> np.ndarray:
        if self.kind == "square":
            return 2.0 * self.weights * t
        if self.kind == "exp":
            return self.weights * np.exp(t)
        return np.broadcast_to(self.weights, t.shape).copy()

    def hess_diagonal(self, t: np.ndarray) -> np.ndarray:
        if self.kind == "square":
            return np.broadcast_to(2.0 * self.weights, t.shape).copy()
        if self.kind == "exp":
            return self.weights * np.exp(t)
        return np.zeros(t.shape)


class PolyconvexDensity(EnergyDensity):
    """W = g(w_1(F), ..., w_m(F)) with g convex and w_k null lagrangians."""

    def __init__(self, g: ConvexFunction, w_list: List[EnergyDensity], params=None):
        if g.m != len(w_list):
            raise ConfigError(f"convex function has {g.m} weights but {len(w_list)} components were given")
        n = w_list[0].n
        if any(w.n != n for w in w_list):
            raise ConfigError("polyconvex components must share the dimension")
        self.g = g
        self.w_list = w_list
        super().__init__("polyconvex", n, self._value, self._grad, self._hess, params=params)

    def components(self, F: np.ndarray) -> np.ndarray:
        return np.stack([w.value(F) for w in self.w_list], axis=-1)

    def _value(self, F):
        return self.g.value(self.components(F))

    def _grad(self, F):
        dg = self.g.grad(self.components(F))
        return sum(dg[..., k, None, None] * w.grad(F) for k, w in enumerate(self.w_list))

    def _hess(self, F):
        t = self.components(F)
        dg = self.g.grad(t)
        d2g = self.g.hess_diagonal(t)
        H = 0.0
        for k, w in enumerate(self.w_list):
            gw = w.grad(F)
            H = H + d2g[..., k, None, None, None, None] * np.einsum("...ij,...kl->...ijkl", gw, gw)
            H = H + dg[..., k, None, None, None, None] * w.hess(F)
        return H


def _index(params: Dict[str, Any], key: str, n: int) -> int:
    if key not in params:
        raise ConfigError(f"missing parameter '{key}'")
    value = int(params[key])
    if not 1 <= value <= n:
        raise ConfigError(f"parameter '{key}' = {value} must lie in 1..{n}")
    return value - 1


def _build_adj_component(n, params):
    i, j = _index(params, "i", n), _index(params, "j", n)
    if n < 2:
        raise ConfigError("adj_component needs n >= 2")
    A = np.zeros((n, n))
    A[i, j] = 1.0
    return null_lagrangian(n, adj=A, name="adj_component", params=dict(params))


def _build_linear_component(n, params):
    i, j = _index(params, "i", n), _index(params, "j", n)
    L = np.zeros((n, n))
    L[i, j] = 1.0
    return null_lagrangian(n, linear=L, name="linear_component", params=dict(params))


def _build_classical_nll(n, params):
    allowed = {"linear", "adj", "det"}
    unknown = set(params) - allowed
    if unknown:
        raise ConfigError(f"classical_nll got unknown parameters {sorted(unknown)}")
    return null_lagrangian(n, params.get("linear"), params.get("adj"), params.get("det", 0.0), params=dict(params))


def _build_stvk(n, params):
    lam, mu = float(params.get("lam", 1.0)), float(params.get("mu", 1.0))
    if mu < 0:
        raise ConfigError(f"stvk needs mu >= 0, got {mu}")
    return stvk(n, lam, mu)


def _build_neo_hookean(n, params):
    mu, lam = float(params.get("mu", 1.0)), float(params.get("lam", 1.0))
    if mu <= 0 or lam < 0:
        raise ConfigError("neo_hookean needs mu > 0 and lam >= 0")
    return neo_hookean(n, mu, lam)


def _build_char_log(n, params):
    spec = params.get("character", params)
    if isinstance(spec, CharacterSpec):
        character = spec
    else:
        character = CharacterSpec(**{"n": n, **spec})
    if character.n != n:
        raise ConfigError(f"character has n = {character.n}, expected {n}")
    return char_log(character)


def _build_polyconvex(n, params):
    g_kind = params.get("g", "square")
    components = params.get("w")
    if not components:
        raise ConfigError("polyconvex needs a non-empty 'w' list of null lagrangians")
    w_list = []
    for entry in components:
        if isinstance(entry, EnergyDensity):
            w_list.append(entry)
        else:
            w_list.append(catalog_get(entry["name"], entry.get("params", {}), n))
    weights = params.get("weights", [1.0] * len(w_list))
    return PolyconvexDensity(ConvexFunction(g_kind, weights), w_list,
                             params={"g": g_kind, "weights": list(weights)})


_CATALOG: Dict[str, Callable[[int, Dict[str, Any]], EnergyDensity]] = {
    "adj_component": _build_adj_component,
    "char_log": _build_char_log,
    "classical_nll": _build_classical_nll,
    "det": lambda n, params: null_lagrangian(n, det_coefficient=1.0, name="det"),
    "frobenius2": lambda n, params: frobenius2(n),
    "linear_component": _build_linear_component,
    "logdet": lambda n, params: logdet(n),
    "neg_frobenius2": lambda n, params: frobenius2(n, sign=-1.0, name="neg_frobenius2"),
    "neo_hookean": _build_neo_hookean,
    "polyconvex": _build_polyconvex,
    "stvk": _build_stvk,
}

assert set(_CATALOG) == set(ENERGY_DESCRIPTIONS)


def catalog_names() -> List[str]:
    return sorted(_CATALOG)


def catalog_get(name: str, params: Optional[Dict[str, Any]] = None, n: int = 2) -> EnergyDensity:
    if name not in _CATALOG:
        raise ConfigError(f"unknown energy '{name}'; known: {', '.join(catalog_names())}", {"name": name})
    if not 1 <= n <= 3:
        raise ConfigError(f"dimension must lie in 1..3, got {n}")
    try:
        density = _CATALOG[name](n, dict(params or {}))
    except (TypeError, ValueError, KeyError) as e:
        raise ConfigError(f"invalid parameters for '{name}': {e}", {"name": name}) from e
    logger.debug(f"[CONFIG] catalog entry '{name}' built for n = {n} ({density.derivative_mode})")
    return density
