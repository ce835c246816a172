import numpy as np
import pytest

from conftest import as_point, identity_point
from models.schemas import (BoxDomain, CharacterKind, CharacterSpec, FieldKind, FieldSpec, GroupKind, GroupSpec,
                            LHMode, Side, Subject, ThetaConfig, Verdict)
from services import testers
from services.algebra import det, make_rng
from services.energies import catalog_get, frobenius2
from services.functional import AffineMap, AffinePlusBump, QuadraticMap, quadrature, weighted_sum
from services.kinematics import field_make, flow_advance
from utils.constants import LSC_CAVEAT
from utils.errors import CharacterError, ConfigError, JetError

STEPS = 200


def bump_spec(amplitude=0.1, direction=(1.0, 0.0)) -> FieldSpec:
    return FieldSpec(kind=FieldKind.GENERIC_BUMP, n=2, centers=((0.5, 0.5),), radii=(0.3,),
                     amplitudes=(amplitude,), directions=(direction,))


def parabola() -> QuadraticMap:
    Q = np.zeros((2, 2, 2))
    Q[0, 0, 0] = 2.0
    return QuadraticMap(np.zeros((2, 2)), Q=Q)


class TestQuasiconvexity:
    def test_convex_density_passes(self, frobenius_2d, unit_square):
        report = testers.test_quasiconvexity(frobenius_2d, identity_point(2), unit_square, n_samples=20, seed=1)
        assert report.verdict == Verdict.PASS
        assert report.margin > 0.0
        assert report.samples == 20
        assert len(report.series) == 20

    def test_concave_density_fails_with_refined_witness(self, coarse_square):
        W = frobenius2(2, sign=-1.0, name="neg_frobenius2")
        report = testers.test_quasiconvexity(W, identity_point(2), coarse_square, n_samples=10, seed=1)
        assert report.verdict == Verdict.FAIL
        assert report.margin < -report.tolerance
        assert report.witness["refinement"]["evaluations"] <= 100
        assert report.margin <= report.witness["refinement"]["sampled_margin"]

    def test_flow_displacement(self, frobenius_2d, unit_square):
        report = testers.test_quasiconvexity(frobenius_2d, identity_point(2), unit_square, displacement="flow",
                                             field=bump_spec(), tau=0.5, steps_per_unit=STEPS)
        assert report.verdict == Verdict.PASS
        assert report.witness["displacement"] == "flow"

    def test_same_seed_same_report(self, frobenius_2d, coarse_square):
        a = testers.test_quasiconvexity(frobenius_2d, identity_point(2), coarse_square, n_samples=5, seed=9)
        b = testers.test_quasiconvexity(frobenius_2d, identity_point(2), coarse_square, n_samples=5, seed=9)
        assert a.model_dump() == b.model_dump()

    def test_test_point_outside_gl_plus(self, frobenius_2d):
        with pytest.raises(JetError):
            testers.test_quasiconvexity(frobenius_2d, as_point([[-1.0, 0.0], [0.0, 1.0]]))


class TestLowerInvariance:
    def test_logdet_is_invariant_on_volume_preserving_flows(self, volume_preserving_2d, coarse_square):
        W = catalog_get("logdet")
        for side in (Side.LEFT, Side.RIGHT):
            report = testers.test_lower_invariance(W, volume_preserving_2d, identity_point(2), side, coarse_square,
                                                   n_samples=3, seed=2)
            assert report.verdict == Verdict.PASS
            assert abs(report.margin) < 1e-7
            assert report.witness["side"] == side.value

    def test_concave_density_fails(self, full_diff_2d, coarse_square):
        W = frobenius2(2, sign=-1.0, name="neg_frobenius2")
        report = testers.test_lower_invariance(W, full_diff_2d, identity_point(2), Side.LEFT, coarse_square,
                                               n_samples=3, seed=3, steps_per_unit=STEPS, refine=False)
        assert report.verdict == Verdict.FAIL
        assert report.witness["transitive"] is True
        assert "refinement" not in report.witness

    def test_jet_mismatch(self, frobenius_2d, volume_preserving_2d):
        with pytest.raises(JetError):
            testers.test_lower_invariance(frobenius_2d, volume_preserving_2d, as_point([[2.0, 0.0], [0.0, 1.0]]))

    def test_flows_are_reproducible(self, full_diff_2d, coarse_square):
        a = [(s.spec, s.tau) for s in testers.sample_flows(full_diff_2d, coarse_square, 4, 11, STEPS)]
        b = [(s.spec, s.tau) for s in testers.sample_flows(full_diff_2d, coarse_square, 4, 11, STEPS)]
        assert a == b
        assert all(testers.TAU_RANGE[0] <= tau <= testers.TAU_RANGE[1] for _, tau in a)


def test_refinement_stays_in_its_box():
    margin, amplitude_scale, tau_scale, evaluations = testers._refine(lambda a, t: -a * t, -1.0)
    assert margin < -10.0
    assert amplitude_scale <= 4.0 and tau_scale <= 4.0
    assert evaluations <= 100


def test_refinement_skips_inadmissible_candidates():
    margin, amplitude_scale, _, _ = testers._refine(lambda a, t: None if a > 1.0 else -a, -1.0, coordinates=(0,))
    assert margin == -1.0 and amplitude_scale == 1.0


def test_conjugation_identity_holds_for_any_density(volume_preserving_2d, coarse_square):
    W = catalog_get("stvk", {"lam": 1.0, "mu": 2.0})
    report = testers.test_conjugation_identity(W, volume_preserving_2d, [[2.0, 0.0], [0.0, 0.5]], coarse_square,
                                               n_samples=2, seed=4, steps_per_unit=STEPS)
    assert report.verdict == Verdict.PASS
    assert report.residual <= 1e-7


def test_conjugation_needs_a_complete_group(coarse_square):
    shear = GroupSpec(kind=GroupKind.SHEAR, n=2, p=1, q=2)
    with pytest.raises(ConfigError):
        testers.test_conjugation_identity(frobenius2(2), shear, np.eye(2), coarse_square)


class TestRankOne:
    def test_stvk_under_compression_fails_pointwise(self, stvk_2d):
        report = testers.test_lh_pointwise(stvk_2d, 0.3 * np.eye(2), n_dirs=50, seed=1)
        assert report.verdict == Verdict.FAIL
        assert report.margin == pytest.approx(-0.1557, abs=1e-6)

    def test_acoustic_tensor_under_compression(self, stvk_2d):
        F = 0.3 * np.eye(2)
        b = np.array([0.6, 0.8])
        K = testers.acoustic_tensor(stvk_2d.hess(F), F, b)
        assert np.allclose(K, 0.09 * (-1.73 * np.eye(2) + 0.18 * np.outer(b, b)))

    def test_frobenius_passes_orthogonal_mode(self, frobenius_2d):
        F = np.array([[1.0, 0.5], [0.0, 1.0]])
        report = testers.test_lh_pointwise(frobenius_2d, F, LHMode.ORTHOGONAL_PAIRS, n_dirs=20)
        assert report.verdict == Verdict.PASS
        a, b = np.array(report.witness["a"]), np.array(report.witness["b"])
        assert abs(a @ b) < 1e-12

    def test_integrated_form_matches_pointwise_sign(self, stvk_2d, frobenius_2d, coarse_square):
        F = 0.3 * np.eye(2)
        assert testers.test_legh(stvk_2d, F, coarse_square, field=bump_spec()).verdict == Verdict.FAIL
        report = testers.test_legh(frobenius_2d, np.eye(2), coarse_square, n_samples=3, seed=2)
        assert report.verdict == Verdict.PASS
        assert report.witness["gram_min_eigenvalue"] >= -1e-12

    def test_det_gives_vanishing_form(self, fine_square):
        report = testers.test_legh(catalog_get("det"), np.eye(2), fine_square, field=bump_spec(),
                                   tol=1e-6, equality=True)
        assert report.verdict == Verdict.PASS
        assert report.residual < 1e-6

    def test_parhl(self, frobenius_2d):
        det_report = testers.test_parhl(catalog_get("det"), [[1.3, 0.2], [-0.4, 0.9]])
        assert det_report.verdict == Verdict.PASS and det_report.residual == 0.0
        report = testers.test_parhl(frobenius_2d)
        assert report.verdict == Verdict.FAIL
        assert report.residual == pytest.approx(4.0)


class TestNullLagrangians:
    def test_det_is_a_null_lagrangian(self, full_diff_2d, fine_square):
        report = testers.test_null_lagrangian(catalog_get("det"), full_diff_2d, identity_point(2), fine_square,
                                              n_samples=2, seed=5, tol=1e-6, steps_per_unit=STEPS)
        assert report.verdict == Verdict.PASS
        assert report.residual == pytest.approx(-report.margin)

    def test_frobenius_is_not(self, frobenius_2d, full_diff_2d, coarse_square):
        report = testers.test_null_lagrangian(frobenius_2d, full_diff_2d, identity_point(2), coarse_square,
                                              n_samples=2, seed=5, steps_per_unit=STEPS)
        assert report.verdict == Verdict.FAIL

    def test_shear_character(self, fine_square):
        c = CharacterSpec(kind=CharacterKind.SHEAR_EXP, n=2, c=-2.0, p=1, q=2)
        g = GroupSpec(kind=GroupKind.SHEAR, n=2, p=1, q=2)
        report = testers.test_character_nll(c, g, [[1.0, 0.5], [0.0, 1.0]], fine_square, n_samples=2, seed=6,
                                            tol=1e-6, steps_per_unit=STEPS)
        assert report.verdict == Verdict.PASS
        assert report.condition == "character_nll"

    def test_character_group_mismatch(self, full_diff_2d):
        c = CharacterSpec(kind=CharacterKind.SHEAR_EXP, n=2, p=1, q=2)
        with pytest.raises(CharacterError):
            testers.test_character_nll(c, full_diff_2d)

    def test_diagonal_character_has_no_local_group(self, full_diff_2d):
        c = CharacterSpec(kind=CharacterKind.DIAGONAL_POWER, n=2, exponents=(1.0, 1.0))
        with pytest.raises(CharacterError):
            testers.test_character_nll(c, full_diff_2d)


class TestInnerVariations:
    def test_first_variation_of_a_null_lagrangian_vanishes(self, fine_square):
        u = AffinePlusBump([[1.2, 0.1], [0.0, 0.9]], centers=[(0.5, 0.4)], radii=[0.3], amplitudes=[0.05], axes=[1])
        report = testers.test_first_variation(catalog_get("det"), u, bump_spec(direction=(0.6, 0.8)), fine_square)
        assert report.verdict == Verdict.PASS
        assert report.witness["agreement"] < 1e-5

    def test_first_variation_detects_non_equilibrium(self, frobenius_2d, fine_square):
        report = testers.test_first_variation(frobenius_2d, parabola(), bump_spec(), fine_square)
        assert report.verdict == Verdict.FAIL
        assert report.witness["agreement"] < 1e-5
        assert report.witness["direct"] > 0.0

    def test_equilibrium_residual(self, frobenius_2d, unit_square):
        report = testers.test_equilibrium_residual(frobenius_2d, parabola(), unit_square)
        assert report.residual == pytest.approx(4.0)
        assert report.verdict == Verdict.FAIL
        Q = np.zeros((2, 2, 2))
        Q[0] = [[2.0, 0.0], [0.0, -2.0]]
        Q[1] = [[0.0, 2.0], [2.0, 0.0]]
        harmonic = QuadraticMap(np.zeros((2, 2)), Q=Q)
        assert testers.test_equilibrium_residual(frobenius_2d, harmonic, unit_square).verdict == Verdict.PASS

    def test_exponential_invariance_of_logdet(self, volume_preserving_2d, coarse_square):
        u = AffineMap([[3.0, 0.0], [0.5, 1.0]])
        report = testers.test_exp_invariance(catalog_get("logdet"), volume_preserving_2d, Subject.MAP, u=u,
                                             domain=coarse_square, n_samples=2, seed=7)
        assert report.verdict == Verdict.PASS

    def test_exponential_invariance_rejects_foreign_fields(self, volume_preserving_2d, coarse_square):
        with pytest.raises(JetError):
            testers.test_exp_invariance(catalog_get("logdet"), volume_preserving_2d, Subject.JET, field=bump_spec(),
                                        domain=coarse_square, steps_per_unit=STEPS)

    def test_invariance_residual_on_a_given_flow(self, frobenius_2d, unit_square):
        flow = flow_advance(field_make(bump_spec(), unit_square), 0.5, steps=100)
        residual = testers.invariance_residual(frobenius_2d, flow, unit_square, F=np.eye(2))
        assert residual > 1e-4


def test_theta_functional_is_midpoint_convex():
    report = testers.test_theta_convexity(ThetaConfig(k=2.0, lam=1.0, theta=(0.0, 1.0, 0.5), potential=(0.0, 0.0, 1.0),
                                                      segments=4), seed=3, steps_per_unit=STEPS)
    assert report.verdict == Verdict.PASS
    assert report.margin >= -1e-12


def test_theta_functional_value_for_identity():
    domain = BoxDomain.unit(1)
    nodes, weights = quadrature(domain)
    value = testers.theta_functional(ThetaConfig(k=1.0, theta=(0.0, 2.0)), np.ones(weights.shape), nodes, weights)
    assert value == pytest.approx(2.0)
    with pytest.raises(JetError):
        testers.theta_functional(ThetaConfig(), np.zeros(weights.shape), nodes, weights)


class TestPolyconvexity:
    def test_jensen_margins(self, full_diff_2d, fine_square):
        W = catalog_get("polyconvex", {"g": "square", "w": [{"name": "det"}]})
        report = testers.test_polyconvex_jensen(W, full_diff_2d, identity_point(2), fine_square, n_samples=2,
                                                seed=8, tol=1e-6, precondition_samples=1, steps_per_unit=STEPS)
        assert report.verdict == Verdict.PASS
        assert report.witness["jensen_margin"] >= -1e-12

    def test_needs_a_polyconvex_density(self, frobenius_2d, full_diff_2d):
        with pytest.raises(ConfigError):
            testers.test_polyconvex_jensen(frobenius_2d, full_diff_2d, identity_point(2))

    def test_components_must_be_null_lagrangians(self, full_diff_2d, coarse_square):
        W = catalog_get("polyconvex", {"g": "square", "w": [{"name": "frobenius2"}]})
        with pytest.raises(ConfigError):
            testers.test_polyconvex_jensen(W, full_diff_2d, identity_point(2), coarse_square, n_samples=1,
                                           precondition_samples=1, steps_per_unit=STEPS)


def test_semicontinuity_sequence(frobenius_2d, full_diff_2d, unit_square):
    report = testers.test_semicontinuity_sequence(frobenius_2d, full_diff_2d, Subject.JET, field=bump_spec(),
                                                  levels=3, domain=unit_square, steps_per_unit=STEPS)
    assert report.verdict == Verdict.PASS
    assert report.caveat == LSC_CAVEAT
    taus = [record.tau for record in report.series]
    assert taus == pytest.approx([1.0, 0.5, 0.25])


class TestGroupNesting:
    def test_subgroup_witnesses_are_rerun_on_the_full_group(self, volume_preserving_2d, coarse_square):
        W = frobenius2(2, sign=-1.0, name="neg_frobenius2")
        report = testers.test_group_nesting(W, identity_point(2), volume_preserving_2d, coarse_square, n_samples=3,
                                            seed=9)
        assert report.verdict == Verdict.PASS
        checked = report.witness["witnesses"]
        assert report.witness["subgroup_witnesses"] == report.witness["propagated"] == len(checked) > 0
        assert all(entry["full_verdict"] == "fail" for entry in checked)
        assert all(entry["full_margin"] < -report.tolerance for entry in checked)

    def test_full_group_margin_matches_an_independent_integral(self, volume_preserving_2d, coarse_square):
        W = frobenius2(2, sign=-1.0, name="neg_frobenius2")
        report = testers.test_group_nesting(W, identity_point(2), volume_preserving_2d, coarse_square, n_samples=3,
                                            seed=9)
        first = report.witness["witnesses"][0]
        sample = list(testers.sample_flows(volume_preserving_2d, coarse_square, 3, 9))[first["sample"]]
        # plain Gauss rule on the whole square, no support rule involved
        nodes, weights = quadrature(BoxDomain.unit(2, cells=16))
        raw = weighted_sum(W.value(sample.flow.gradient(nodes)) + 2.0, weights)
        assert first["full_margin"] == pytest.approx(raw / 3.0, abs=1e-6)

    def test_nesting_fails_when_the_full_group_disagrees(self, volume_preserving_2d, coarse_square, monkeypatch):
        W = frobenius2(2, sign=-1.0, name="neg_frobenius2")
        original = testers.test_lower_invariance

        def lenient(*args, **kwargs):
            report = original(*args, **kwargs)
            report.verdict = Verdict.PASS
            return report

        monkeypatch.setattr(testers, "test_lower_invariance", lenient)
        report = testers.test_group_nesting(W, identity_point(2), volume_preserving_2d, coarse_square, n_samples=3,
                                            seed=9)
        assert report.verdict == Verdict.FAIL
        assert report.witness["propagated"] == 0 < report.witness["subgroup_witnesses"]


def test_flow_displacement_margins_match_left_invariance(stvk_2d, full_diff_2d, coarse_square):
    tp = as_point([[1.1, 0.2], [0.0, 0.9]])
    qc = testers.test_quasiconvexity(stvk_2d, tp, coarse_square, n_samples=4, seed=12, displacement="flow",
                                     steps_per_unit=STEPS, refine=False)
    li = testers.test_lower_invariance(stvk_2d, full_diff_2d, tp, Side.LEFT, coarse_square, n_samples=4, seed=12,
                                       steps_per_unit=STEPS, refine=False)
    assert [r.sample for r in qc.series] == [r.sample for r in li.series] == [0, 1, 2, 3]
    for a, b in zip(qc.series, li.series):
        assert a.tau == b.tau
        assert a.margin == pytest.approx(b.margin, abs=1e-9)
    assert qc.witness["tau"] == li.witness["tau"]


def test_exponential_invariance_needs_a_jet_member(volume_preserving_2d, coarse_square):
    with pytest.raises(ConfigError) as info:
        testers.test_exp_invariance(catalog_get("logdet"), volume_preserving_2d, Subject.JET,
                                    F=[[2.0, 0.0], [0.0, 1.0]], domain=coarse_square, n_samples=1, steps_per_unit=STEPS)
    assert info.value.details["deviation"] == pytest.approx(1.0)


def test_conjugation_identity_for_a_shear_jet(volume_preserving_2d, unit_square):
    W = catalog_get("neo_hookean", {"mu": 1.0, "lam": 2.0})
    report = testers.test_conjugation_identity(W, volume_preserving_2d, [[1.0, 0.7], [0.0, 1.0]], unit_square,
                                               n_samples=3, seed=5, steps_per_unit=STEPS)
    assert report.verdict == Verdict.PASS
    assert report.residual <= 1e-7


def random_jets(rng, count, n=2):
    jets = []
    while len(jets) < count:
        F = np.eye(n) + 0.4 * rng.standard_normal((n, n))
        if det(F) > 0.2:
            jets.append(F)
    return jets


class TestIdentitiesAtAcceptanceTolerances:
    @pytest.mark.parametrize("c", [1.0, -2.0])
    @pytest.mark.parametrize("F", [[[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.5], [0.0, 1.0]]])
    def test_character_over_fifty_shear_flows(self, c, F, unit_square):
        character = CharacterSpec(kind=CharacterKind.SHEAR_EXP, n=2, c=c, p=1, q=2)
        g = GroupSpec(kind=GroupKind.SHEAR, n=2, p=1, q=2)
        # RK4 is exact for shear flows, so a few steps suffice
        report = testers.test_character_nll(character, g, F, unit_square, n_samples=50, seed=21, tol=1e-7,
                                            steps_per_unit=4)
        assert report.verdict == Verdict.PASS
        assert report.samples == 50
        assert report.residual <= 1e-7

    def test_classical_null_lagrangians_in_two_dimensions(self, full_diff_2d, unit_square):
        rng = make_rng(31)
        flows = [sample.flow for sample in testers.sample_flows(full_diff_2d, unit_square, 5, 31, steps_per_unit=50)]
        energies = [catalog_get("det"), catalog_get("adj_component", {"i": 1, "j": 2}),
                    catalog_get("linear_component", {"i": 2, "j": 1})]
        energies += [catalog_get("classical_nll", {"linear": rng.standard_normal((2, 2)).tolist(),
                                                   "adj": rng.standard_normal((2, 2)).tolist(),
                                                   "det": float(rng.standard_normal())}) for _ in range(10)]
        jets = [np.eye(2)] + random_jets(rng, 5)
        for W in energies:
            for F in jets:
                scale = unit_square.volume * (1.0 + abs(float(W.value(F[None])[0])))
                for flow in flows:
                    assert testers.invariance_residual(W, flow, unit_square, F=F) / scale <= 1e-6, (W.params, F)

    def test_det_and_adjugate_in_three_dimensions(self):
        cube = BoxDomain.unit(3)
        full = GroupSpec(kind=GroupKind.FULL_DIFF, n=3)
        flows = [sample.flow for sample in testers.sample_flows(full, cube, 2, 33, steps_per_unit=100)]
        F = np.array([[1.1, 0.2, 0.0], [0.0, 0.9, 0.3], [0.1, 0.0, 1.2]])
        for W in (catalog_get("det", n=3), catalog_get("adj_component", {"i": 2, "j": 3}, 3)):
            for jet in (np.eye(3), F):
                scale = cube.volume * (1.0 + abs(float(W.value(jet[None])[0])))
                for flow in flows:
                    assert testers.invariance_residual(W, flow, cube, F=jet) / scale <= 1e-6

    def test_det_quasiconvexity_margins_vanish(self, unit_square):
        report = testers.test_quasiconvexity(catalog_get("det"), identity_point(2), unit_square, n_samples=20,
                                             seed=4, refine=False)
        assert report.verdict == Verdict.PASS
        assert max(abs(r.margin) for r in report.series) <= 1e-7

    def test_null_lagrangian_tester_on_the_default_domain(self, full_diff_2d):
        report = testers.test_null_lagrangian(catalog_get("det"), full_diff_2d, identity_point(2), n_samples=5,
                                              seed=35, tol=1e-6, steps_per_unit=100)
        assert report.verdict == Verdict.PASS
        assert report.residual <= 1e-6
