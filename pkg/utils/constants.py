from models.schemas import ErrorType, TestName

VERSION = "1.0.0"

# tolerances
JET_TOLERANCE = 1e-9
EXACT_TOLERANCE = 1e-12
FLOW_JET_TOLERANCE = 1e-8
INEQUALITY_TOLERANCE = 1e-7
PARHL_TOLERANCE = 1e-10
AGREEMENT_TOLERANCE = 1e-5
LOGDET_FLOOR = 1e-12

# numerics
STEPS_PER_UNIT_TIME = 1000
GAUSS_ORDER = 5
FD_STEP = 1e-5
FIRST_VARIATION_STEP = 1e-4
REFINEMENT_BUDGET = 100
DEFAULT_SAMPLES = 200
JET_CONDITION_BOUND = 100.0
MC_IMAGE_SAMPLES = 20000
MC_SIGMA_BOUND = 5.0
# max over the unit ball of |grad exp(-1/(1-r^2))|, in units of amplitude / radius
BUMP_GRADIENT_BOUND = 0.8

# CLI exit codes
EXIT_PASS = 0
EXIT_FAIL = 1
EXIT_INCONCLUSIVE = 2
EXIT_CONFIG_ERROR = 64

PASS_CAVEAT = "no violation found in {samples} samples; sampling does not prove the condition"
LSC_CAVEAT = "finite consistency check of the semicontinuity chain along tau_k -> 0, not a proof"

ERROR_MESSAGES = {
    ErrorType.CONFIG_ERROR: "The configuration is invalid.",
    ErrorType.DIMENSION_ERROR: "Matrix or point dimensions do not agree.",
    ErrorType.JET_ERROR: "The matrix does not lie in the jet J(G) of the group.",
    ErrorType.CHARACTER_ERROR: "The character cannot be evaluated on this input.",
    ErrorType.SUPPORT_ERROR: "The generator support is not compactly inside the domain.",
    ErrorType.ENERGY_DOMAIN_ERROR: "The energy density is evaluated outside its domain.",
    ErrorType.QUADRATURE_ERROR: "The integrand is not finite at a quadrature node.",
    ErrorType.RANGE_ESCAPE: "The inner map leaves the region of the outer flow.",
    ErrorType.HESSIAN_UNAVAILABLE: "The energy density provides no second derivative.",
    ErrorType.GENERAL_ERROR: "The check could not be completed.",
}

ENERGY_DESCRIPTIONS = {
    "adj_component": "adjugate entry adj(F)_ij, classical null lagrangian",
    "char_log": "log of a group character, null lagrangian at left for its local group",
    "classical_nll": "linear combination of F_ij, adj F_ij and det F, classical null lagrangian",
    "det": "classical null lagrangian",
    "frobenius2": "|F|^2, strictly convex (positive quasiconvexity example)",
    "linear_component": "entry F_ij, classical null lagrangian",
    "logdet": "log det F, SL_n invariant",
    "neg_frobenius2": "-|F|^2, strictly concave (negative quasiconvexity example)",
    "neo_hookean": "compressible neo-Hookean density, polyconvex positive example",
    "polyconvex": "convex function of null lagrangians",
    "stvk": "Saint Venant-Kirchhoff, loses ellipticity under compression",
}

GROUP_DESCRIPTIONS = {
    "full_diff": "compactly supported diffeomorphisms, J = GL+_n",
    "separable_1d": "diffeomorphisms of an interval, J = (0, inf)",
    "shear": "shear diffeomorphisms, J = {I + s E_pq}",
    "symplectic_2d": "area preserving diffeomorphisms of the plane, J = Sp_1(R)",
    "volume_preserving": "volume preserving diffeomorphisms, J = SL_n",
}

TEST_DESCRIPTIONS = {
    TestName.CHARACTER_NLL: "log-character null lagrangian",
    TestName.CONJUGATION_IDENTITY: "left/right conjugation identity",
    TestName.EQUILIBRIUM_RESIDUAL: "equilibrium residual div dW/dF",
    TestName.EXP_INVARIANCE: "exponential invariance",
    TestName.FIRST_VARIATION: "first variation along inner variations",
    TestName.GROUP_NESTING: "subgroup witnesses are FullDiff witnesses",
    TestName.LEGH: "generalized rank-one inequality",
    TestName.LH_POINTWISE: "pointwise Legendre-Hadamard inequality",
    TestName.LOWER_INVARIANCE: "G left/right lower invariance",
    TestName.NULL_LAGRANGIAN: "G null lagrangian equality",
    TestName.PARHL: "Hadamard-Legendre equality antisymmetry",
    TestName.POLYCONVEX_JENSEN: "Jensen margins for polyconvex densities",
    TestName.QUASICONVEXITY: "Morrey quasiconvexity",
    TestName.SEMICONTINUITY: "semicontinuity consistency along flows tau_k -> 0",
    TestName.THETA_CONVEXITY: "convexity of the one-dimensional theta functional",
}

TEST_CONDITIONS = {
    TestName.CHARACTER_NLL: "I(phi) = I(id) for log|chi(grad phi)| along left G flows",
    TestName.CONJUGATION_IDENTITY: "Phi_x(u) = |det F| Phi_y(u o F^-1) under x = F y",
    TestName.EQUILIBRIUM_RESIDUAL: "div dW/dF(grad u) = 0 pointwise in E",
    TestName.EXP_INVARIANCE: "W(F exp(tX)) = W(F) for X in the Lie algebra of J(g)",
    TestName.FIRST_VARIATION: "d/dt I(u o phi_t) at t = 0 equals the integral of (dW/dF : grad u grad V)",
    TestName.GROUP_NESTING: "a G subgroup witness of I(F phi) < I(F) stays a FullDiff witness",
    TestName.LEGH: "Gram form of d2W over the tangent fields of G is nonnegative",
    TestName.LH_POINTWISE: "d2W(F)[a x b, a x b] >= 0 for all rank-one directions",
    TestName.LOWER_INVARIANCE: "I(F phi) >= I(F) (left) or I(phi F) >= I(F) (right) for phi in G",
    TestName.NULL_LAGRANGIAN: "I(F phi) = I(F) for every phi in G",
    TestName.PARHL: "antisymmetric part of d2W over the tangent pair vanishes",
    TestName.POLYCONVEX_JENSEN: "g(avg T(grad u)) <= avg g(T(grad u)) for convex g of minors T",
    TestName.QUASICONVEXITY: "integral of W(F + grad eta) >= |E| W(F) for compactly supported eta",
    TestName.SEMICONTINUITY: "I(u o phi_tau) -> I(u) as tau -> 0",
    TestName.THETA_CONVEXITY: "theta(t) = I(F phi_t) is convex in t",
}


def get_error_message(error_type: ErrorType) -> str:
    return ERROR_MESSAGES.get(error_type, ERROR_MESSAGES[ErrorType.GENERAL_ERROR])
