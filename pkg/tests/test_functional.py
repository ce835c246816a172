import math

import numpy as np
import pytest

from models.schemas import BoxDomain, FieldKind, FieldSpec, MapConfig
from services.energies import catalog_get, frobenius2
from services.functional import (AffineMap, AffinePlusBump, QuadraticMap, boundary_integrals, compose, enclosed_volume,
                                 face_quadrature, functional_difference, functional_eval, identity_map, integrate,
                                 map_from_config, mc_image_volume, quadrature, support_quadrature, weighted_sum)
from services.kinematics import BumpProfile, SupportBox, field_make, flow_advance
from utils.errors import JetError, QuadratureError, RangeEscapeError, SupportError


def test_quadrature_weights_and_polynomial_exactness():
    domain = BoxDomain(n=2, lower=(0.0, -1.0), upper=(2.0, 1.0), cells=3, order=5)
    nodes, weights = quadrature(domain)
    assert math.fsum(weights) == pytest.approx(4.0)
    # 5-point Gauss is exact to degree 9 in each variable
    value = integrate(domain, lambda x: x[:, 0] ** 9 * x[:, 1] ** 8)
    assert value == pytest.approx(2.0 ** 10 / 10.0 * 2.0 / 9.0, rel=1e-12)
    assert not nodes.flags.writeable and not weights.flags.writeable
    assert quadrature(domain)[0] is nodes


def test_face_quadrature_covers_the_boundary(unit_cube):
    faces = face_quadrature(unit_cube)
    assert len(faces) == 6
    assert math.fsum(math.fsum(w) for _, w, _ in faces) == pytest.approx(6.0)
    points, _, normal = faces[1]
    assert np.all(points[:, 0] == 1.0) and normal.tolist() == [1.0, 0.0, 0.0]


def test_non_finite_integrand_names_the_node(unit_square):
    nodes, weights = quadrature(unit_square)
    values = np.ones(weights.shape)
    values[7] = np.nan
    with pytest.raises(QuadratureError) as info:
        weighted_sum(values, weights, nodes)
    assert info.value.details["node"] == nodes[7].tolist()


def test_functional_of_affine_maps(unit_square):
    F = np.array([[1.5, 0.2], [0.1, 0.8]])
    u = AffineMap(F, b=[1.0, -2.0])
    assert functional_eval(catalog_get("det"), u, unit_square) == pytest.approx(np.linalg.det(F))
    assert functional_eval(frobenius2(2), identity_map(2), unit_square) == pytest.approx(2.0)


def test_map_from_config():
    u = map_from_config(MapConfig(kind="quadratic", F=((0.0, 0.0), (0.0, 0.0)),
                                  Q=(((2.0, 0.0), (0.0, 0.0)), ((0.0, 0.0), (0.0, 0.0)))))
    assert isinstance(u, QuadraticMap)
    values, grads = u.evaluate(np.array([[0.5, 0.3]]))
    assert values[0] == pytest.approx([0.25, 0.0])
    assert grads[0] == pytest.approx(np.array([[1.0, 0.0], [0.0, 0.0]]))
    assert u.hessian(np.array([[0.5, 0.3]]))[0, 0, 0, 0] == 2.0
    bump = map_from_config(MapConfig(kind="affine_bump", F=((1.0, 0.0), (0.0, 1.0)), centers=((0.5, 0.5),),
                                     radii=(0.3,), amplitudes=(0.05,), axes=(2,)))
    assert isinstance(bump, AffinePlusBump)


def test_injectivity_bound_rejects_large_bumps():
    with pytest.raises(SupportError):
        AffinePlusBump(np.eye(2), centers=[(0.5, 0.5)], radii=[0.2], amplitudes=[0.3], axes=[1])


def test_bump_map_hessian_matches_gradient_differences():
    u = AffinePlusBump(np.eye(2), centers=[(0.5, 0.5)], radii=[0.3], amplitudes=[0.1], axes=[1])
    x = np.array([[0.52, 0.41]])
    h = 1e-6
    H = u.hessian(x)[0]
    for b in range(2):
        step = np.zeros(2)
        step[b] = h
        diff = (u.gradient(x + step) - u.gradient(x - step))[0] / (2 * h)
        assert np.allclose(diff, H[:, :, b], atol=1e-6)


def test_composite_chain_rule():
    Q = np.zeros((2, 2, 2))
    Q[0, 0, 1] = Q[0, 1, 0] = 1.0
    Q[1, 1, 1] = 3.0
    outer = QuadraticMap(np.eye(2), Q=Q)
    A = np.array([[1.0, 2.0], [0.5, -1.0]])
    composite = compose(outer, AffineMap(A))
    x = np.array([[0.3, 0.7]])
    _, grad = composite.evaluate(x)
    assert np.allclose(grad[0], outer.gradient(x @ A.T)[0] @ A)
    assert np.allclose(composite.hessian(x)[0], np.einsum("ijk,ja,kb->iab", Q, A, A))


def test_composition_detects_range_escape(unit_square):
    spec = FieldSpec(kind=FieldKind.GENERIC_BUMP, n=2, centers=((0.5, 0.5),), radii=(0.3,), amplitudes=(0.1,),
                     directions=((1.0, 0.0),))
    flow = flow_advance(field_make(spec, unit_square), 0.5, steps=50)
    with pytest.raises(RangeEscapeError):
        compose(flow, AffineMap(2.0 * np.eye(2))).evaluate(np.array([[0.9, 0.9]]))


def test_divergence_identities_for_a_bump_map(unit_square):
    u = AffinePlusBump([[1.2, 0.1], [0.0, 0.9]], b=[0.3, 0.0], centers=[(0.5, 0.45)], radii=[0.3],
                       amplitudes=[0.05], axes=[1])
    result = boundary_integrals(u, unit_square)
    assert result.residual_grad <= 1e-7
    assert result.residual_adj <= 1e-7
    assert result.residual_det <= 1e-7
    assert result.vol_det == pytest.approx(1.08, abs=1e-7)
    # the Monte-Carlo image volume runs by default in two dimensions
    assert result.mc_image_volume is not None and result.mc_stderr > 0.0
    assert result.mc_deviation <= 5.0
    assert result.mc_consistent is True


def test_monte_carlo_oracle_can_be_switched_off(unit_square):
    u = AffinePlusBump(np.eye(2), centers=[(0.5, 0.5)], radii=[0.3], amplitudes=[0.05], axes=[2])
    result = boundary_integrals(u, unit_square, mc_samples=0)
    assert result.mc_image_volume is None and result.mc_consistent is None


def test_divergence_identities_in_three_dimensions(unit_cube):
    Q = np.zeros((3, 3, 3))
    Q[0, 1, 2] = Q[0, 2, 1] = 0.2
    Q[2, 0, 0] = 0.3
    u = QuadraticMap(np.eye(3), Q=Q)
    result = boundary_integrals(u, unit_cube)
    assert result.residual_grad < 1e-12
    assert result.residual_adj < 1e-12
    assert result.residual_det < 1e-12


def test_enclosed_volume_of_affine_image(unit_square):
    F = np.array([[2.0, 0.5], [0.0, 1.5]])
    assert enclosed_volume(AffineMap(F, b=[1.0, 1.0]), unit_square) == pytest.approx(3.0)
    assert enclosed_volume(AffineMap([[4.0]]), BoxDomain.unit(1)) == pytest.approx(4.0)


def test_monte_carlo_image_volume_agrees_with_boundary_volume(unit_square):
    u = AffinePlusBump([[2.0, 0.0], [0.0, 1.0]], centers=[(0.5, 0.5)], radii=[0.3], amplitudes=[0.1], axes=[2])
    estimate, stderr = mc_image_volume(u, unit_square, n_samples=20000, seed=5)
    assert stderr > 0.0
    assert abs(estimate - enclosed_volume(u, unit_square)) < 5.0 * stderr


def test_boundary_integrals_require_orientation_preserving_maps(unit_square):
    with pytest.raises(JetError):
        boundary_integrals(AffineMap([[-1.0, 0.0], [0.0, 1.0]]), unit_square)


class TestSupportQuadrature:
    def test_bump_integrals_converge_beyond_algebraic_rates(self):
        bump = BumpProfile([0.5, 0.45], 0.3, 1.0)
        box = SupportBox((0.2, 0.15), (0.8, 0.75), (True, True))
        values = []
        for points in (80, 160):
            domain = BoxDomain(n=2, lower=(0.0, 0.0), upper=(1.0, 1.0), support_nodes=points)
            nodes, weights = support_quadrature(domain, box)
            values.append(weighted_sum(bump.evaluate(nodes)[0] ** 2, weights, nodes))
        assert values[0] > 0.0
        assert values[0] == pytest.approx(values[1], abs=1e-10)

    def test_shear_derivative_integrates_to_zero(self, unit_square):
        spec = FieldSpec(kind=FieldKind.SHEAR, n=2, centers=((0.5, 0.4),), radii=(0.25,), amplitudes=(0.1,),
                         p=1, q=2)
        field = field_make(spec, unit_square)
        nodes, weights = support_quadrature(unit_square, field.support_box())
        assert abs(weighted_sum(field.gradient(nodes)[:, 0, 1], weights)) <= 1e-10
        # slab axis uses the Gauss rule of the domain, the compact axis stays inside the bump interval
        assert nodes[:, 1].min() > 0.15 and nodes[:, 1].max() < 0.65
        assert math.fsum(weights) == pytest.approx(0.5 * 80 / 81)

    def test_without_a_box_the_domain_rule_is_used(self, unit_square):
        assert support_quadrature(unit_square, None)[0] is quadrature(unit_square)[0]

    def test_rules_are_cached_and_read_only(self, unit_square):
        box = SupportBox((0.2, 0.2), (0.6, 0.6), (True, True))
        nodes, weights = support_quadrature(unit_square, box)
        assert support_quadrature(unit_square, box)[0] is nodes
        assert not nodes.flags.writeable and not weights.flags.writeable
        assert nodes.shape == (unit_square.support_points ** 2, 2)


def test_functional_difference_matches_full_domain_integrals(fine_square):
    spec = FieldSpec(kind=FieldKind.GENERIC_BUMP, n=2, centers=((0.5, 0.5),), radii=(0.3,), amplitudes=(0.1,),
                     directions=((0.6, 0.8),))
    flow = flow_advance(field_make(spec, fine_square), 0.5, steps=100)
    u = AffineMap([[1.2, 0.3], [0.0, 0.9]])
    W = frobenius2(2)
    difference = functional_difference(W, compose(u, flow), u, fine_square, flow.support_box())
    full = functional_eval(W, compose(u, flow), fine_square) - functional_eval(W, u, fine_square)
    assert difference > 0.0
    assert difference == pytest.approx(full, abs=1e-6)
