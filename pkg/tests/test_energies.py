import numpy as np
import pytest

from models.schemas import CharacterKind, CharacterSpec
from services.energies import (ConvexFunction, EnergyDensity, PolyconvexDensity, catalog_get, catalog_names,
                               energy_derivatives, fd_derivative_check, frobenius2, logdet, null_lagrangian)
from services.testers import parhl_residual
from utils.constants import ENERGY_DESCRIPTIONS
from utils.errors import ConfigError, EnergyDomainError

F2 = np.array([[1.2, 0.3], [-0.1, 0.9]])
F3 = np.array([[1.1, 0.2, 0.0], [0.1, 0.9, -0.3], [0.0, 0.25, 1.3]])


def test_catalog_lists_every_described_density():
    assert catalog_names() == sorted(ENERGY_DESCRIPTIONS)


def test_unknown_energy_is_a_config_error():
    with pytest.raises(ConfigError):
        catalog_get("ogden")


def test_bad_parameters_are_config_errors():
    with pytest.raises(ConfigError):
        catalog_get("adj_component", {"i": 3, "j": 1}, 2)
    with pytest.raises(ConfigError):
        catalog_get("classical_nll", {"quadratic": 1.0}, 2)
    with pytest.raises(ConfigError):
        catalog_get("neo_hookean", {"mu": -1.0}, 2)


@pytest.mark.parametrize("name, params, F", [
    ("stvk", {"lam": 1.0, "mu": 0.5}, F2),
    ("stvk", {"lam": 2.0, "mu": 1.0}, F3),
    ("neo_hookean", {"mu": 1.0, "lam": 3.0}, F2),
    ("neo_hookean", {"mu": 0.7, "lam": 1.0}, F3),
    ("logdet", {}, F3),
    ("det", {}, F3),
    ("adj_component", {"i": 1, "j": 3}, F3),
    ("classical_nll", {"linear": np.eye(3).tolist(), "adj": [[0, 1, 0], [0, 0, 0], [2, 0, 0]], "det": -0.5}, F3),
    ("polyconvex", {"g": "exp", "w": [{"name": "det"}, {"name": "adj_component", "params": {"i": 1, "j": 2}}],
                    "weights": [1.0, 0.5]}, F3),
])
def test_analytic_derivatives_match_finite_differences(name, params, F):
    W = catalog_get(name, params, F.shape[0])
    assert W.derivative_mode == "analytic"
    grad_error, hess_error = fd_derivative_check(W, F)
    assert grad_error < 1e-6
    assert hess_error < 1e-6


def test_hessian_has_pair_symmetry():
    W = catalog_get("neo_hookean", {"mu": 1.0, "lam": 2.0}, 3)
    H = W.hess(F3)
    assert np.allclose(H, np.transpose(H, (2, 3, 0, 1)))


def test_values_on_known_points():
    assert frobenius2(2).value(F2) == pytest.approx(np.sum(F2 ** 2))
    assert catalog_get("det", n=3).value(F3) == pytest.approx(np.linalg.det(F3))
    assert catalog_get("stvk", {"lam": 1.0, "mu": 1.0}, 2).value(np.eye(2)) == 0.0
    assert catalog_get("neo_hookean", {}, 3).value(np.eye(3)) == pytest.approx(0.0)
    W = catalog_get("polyconvex", {"w": [{"name": "det"}]}, 2)
    assert W.value(F2) == pytest.approx(np.linalg.det(F2) ** 2)


def test_values_are_vectorised():
    stack = np.stack([F2, 2 * F2, np.eye(2)])
    W = catalog_get("stvk", {}, 2)
    assert W.value(stack).shape == (3,)
    assert W.grad(stack).shape == (3, 2, 2)
    assert W.hess(stack).shape == (3, 2, 2, 2, 2)
    assert W.value(stack)[1] == pytest.approx(float(W.value(2 * F2)))


def test_logdet_outside_its_domain():
    with pytest.raises(EnergyDomainError):
        logdet(2).value(np.array([[-1.0, 0.0], [0.0, 1.0]]))


def test_value_only_density_uses_finite_differences():
    W = EnergyDensity.from_callable("quartic", 2, lambda F: np.sum(F * F, axis=(-2, -1)) ** 2)
    assert W.derivative_mode == "finite_difference"
    bundle = W.derivatives(F2)
    s = np.sum(F2 * F2)
    assert np.allclose(bundle.grad, 4.0 * s * F2, atol=1e-7)
    I = np.eye(2)
    exact = 8.0 * np.einsum("ij,kl->ijkl", F2, F2) + 4.0 * s * np.einsum("ik,jl->ijkl", I, I)
    assert np.allclose(bundle.hess, exact, atol=5e-4)
    assert np.allclose(bundle.hess, np.transpose(bundle.hess, (2, 3, 0, 1)))


def test_inhomogeneous_density_sees_position_and_value():
    W = EnergyDensity.from_callable("weighted", 2, lambda x, y, F: (1.0 + x[..., 0]) * np.sum(F * F, axis=(-2, -1)),
                                    homogeneous=False)
    x = np.array([0.5, 0.0])
    bundle = energy_derivatives(W, x, np.zeros(2), F2)
    assert bundle.value == pytest.approx(1.5 * np.sum(F2 * F2))
    assert np.allclose(bundle.grad, 3.0 * F2, atol=1e-7)


def test_null_lagrangians_have_antisymmetric_hessians():
    for W in (catalog_get("det", n=2), catalog_get("det", n=3), catalog_get("adj_component", {"i": 2, "j": 2}, 3),
              null_lagrangian(3, linear=np.ones((3, 3)), det_coefficient=2.0)):
        F = F2 if W.n == 2 else F3
        assert parhl_residual(W.hess(F)) < 1e-12
    assert parhl_residual(frobenius2(2).hess(F2)) == pytest.approx(4.0)


def test_convex_function_needs_nonnegative_weights():
    with pytest.raises(ConfigError):
        ConvexFunction("square", [1.0, -1.0])
    with pytest.raises(ConfigError):
        ConvexFunction("cosh", [1.0])
    assert ConvexFunction("linear", [-1.0]).value(np.array([2.0])) == -2.0


def test_polyconvex_components():
    det2 = catalog_get("det", n=2)
    W = PolyconvexDensity(ConvexFunction("square", [1.0, 2.0]), [det2, catalog_get("linear_component", {"i": 1, "j": 2})])
    t = W.components(F2)
    assert t == pytest.approx([np.linalg.det(F2), 0.3])
    assert W.value(F2) == pytest.approx(t[0] ** 2 + 2.0 * t[1] ** 2)
    with pytest.raises(ConfigError):
        PolyconvexDensity(ConvexFunction("square", [1.0]), [det2, det2])


def test_shear_character_log_density():
    c = CharacterSpec(kind=CharacterKind.SHEAR_EXP, n=2, c=2.0, p=1, q=2)
    W = catalog_get("char_log", {"character": c}, 2)
    assert W.value(np.array([[1.0, 0.25], [0.0, 1.0]])) == pytest.approx(0.5)
    with pytest.raises(EnergyDomainError):
        W.value(np.array([[1.1, 0.25], [0.0, 1.0]]))
    W = catalog_get("char_log", {"kind": "diagonal_power", "exponents": [1.0, 2.0]}, 2)
    assert W.value(np.diag([np.e, np.e])) == pytest.approx(3.0)
