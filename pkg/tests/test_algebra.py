import math

import numpy as np
import pytest

from models.schemas import CharacterKind, CharacterSpec, GroupKind, GroupSpec
from services.algebra import (SYMPLECTIC_FORM, adjugate, as_matrix, character_eval, character_group, cofactor, det,
                              inverse, jet_member, make_rng, random_jet_element, tangent_deviation)
from utils.errors import CharacterError, DimensionError


@pytest.mark.parametrize("n", [2, 3])
def test_adjugate_inverts_up_to_determinant(n, rng):
    F = rng.standard_normal((5, n, n))
    product = F @ adjugate(F)
    expected = det(F)[:, None, None] * np.eye(n)
    assert np.allclose(product, expected, atol=1e-12)
    assert np.allclose(cofactor(F), np.swapaxes(adjugate(F), -1, -2))
    assert np.allclose(inverse(F), np.linalg.inv(F))


def test_det_matches_numpy(rng):
    F = rng.standard_normal((4, 3, 3))
    assert np.allclose(det(F), np.linalg.det(F))
    assert det(np.array([[2.5]])) == 2.5


def test_as_matrix_rejects_bad_shapes():
    with pytest.raises(DimensionError):
        as_matrix([[1.0, 2.0]])
    with pytest.raises(DimensionError):
        as_matrix(np.eye(2), n=3)
    M = as_matrix(np.eye(2))
    assert not M.flags.writeable


def test_adjugate_undefined_in_one_dimension():
    with pytest.raises(DimensionError):
        adjugate(np.eye(1))


def test_jet_membership_per_group():
    sl = GroupSpec(kind=GroupKind.VOLUME_PRESERVING, n=2)
    assert jet_member(sl, [[2.0, 0.0], [0.0, 0.5]])[0]
    assert not jet_member(sl, [[2.0, 0.0], [0.0, 1.0]])[0]

    full = GroupSpec(kind=GroupKind.FULL_DIFF, n=2)
    assert jet_member(full, [[1.0, 3.0], [0.0, 0.1]])[0]
    assert not jet_member(full, [[-1.0, 0.0], [0.0, 1.0]])[0]

    shear = GroupSpec(kind=GroupKind.SHEAR, n=3, p=1, q=3)
    member, deviation = jet_member(shear, [[1.0, 0.0, 4.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    assert member and deviation == 0.0
    assert not jet_member(shear, [[1.0, 0.2, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])[0]

    symplectic = GroupSpec(kind=GroupKind.SYMPLECTIC_2D, n=2)
    assert jet_member(symplectic, [[1.0, 0.7], [0.0, 1.0]])[0]


def test_tangent_deviation_traces_and_symplectic_condition():
    sl = GroupSpec(kind=GroupKind.VOLUME_PRESERVING, n=2)
    assert tangent_deviation(sl, [[1.0, 5.0], [2.0, -1.0]]) == 0.0
    assert tangent_deviation(sl, [[1.0, 0.0], [0.0, 1.0]]) == 2.0
    symplectic = GroupSpec(kind=GroupKind.SYMPLECTIC_2D, n=2)
    # Hamiltonian matrices satisfy A J + J A^T = 0
    A = SYMPLECTIC_FORM @ np.array([[1.0, 0.3], [0.3, -2.0]])
    assert tangent_deviation(symplectic, A) < 1e-15


@pytest.mark.parametrize("kind, n", [
    (GroupKind.FULL_DIFF, 2),
    (GroupKind.FULL_DIFF, 3),
    (GroupKind.VOLUME_PRESERVING, 3),
    (GroupKind.SYMPLECTIC_2D, 2),
    (GroupKind.SEPARABLE_1D, 1),
])
def test_random_jet_element_is_member_and_deterministic(kind, n):
    g = GroupSpec(kind=kind, n=n)
    F = random_jet_element(g, seed=7)
    assert jet_member(g, F)[0]
    assert np.array_equal(F, random_jet_element(g, seed=7))
    assert np.linalg.cond(F) < 100.0


def test_rng_stream_is_reproducible():
    assert np.array_equal(make_rng(42).standard_normal(5), make_rng(42).standard_normal(5))


def test_shear_character_values():
    c = CharacterSpec(kind=CharacterKind.SHEAR_EXP, n=2, c=1.5, p=1, q=2)
    assert character_eval(c, [[1.0, 0.4], [0.0, 1.0]]) == pytest.approx(math.exp(0.6))
    # homomorphism on the shear group
    a = np.array([[1.0, 0.4], [0.0, 1.0]])
    b = np.array([[1.0, -1.1], [0.0, 1.0]])
    assert character_eval(c, a @ b) == pytest.approx(character_eval(c, a) * character_eval(c, b))
    with pytest.raises(CharacterError):
        character_eval(c, [[1.0, 0.4], [0.1, 1.0]])
    assert character_group(c).kind == GroupKind.SHEAR


def test_diagonal_power_character():
    c = CharacterSpec(kind=CharacterKind.DIAGONAL_POWER, n=2, exponents=(2.0, -1.0))
    assert character_eval(c, [[3.0, 0.0], [0.0, 2.0]]) == pytest.approx(4.5)
    with pytest.raises(CharacterError):
        character_eval(c, [[3.0, 1.0], [0.0, 2.0]])
    with pytest.raises(CharacterError):
        character_group(c)
