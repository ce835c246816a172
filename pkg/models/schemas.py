from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from typing import Any, Dict, List, Literal, Optional, Tuple
from enum import Enum


class ErrorType(str, Enum):
    CONFIG_ERROR = "config_error"
    DIMENSION_ERROR = "dimension_error"
    JET_ERROR = "jet_error"
    CHARACTER_ERROR = "character_error"
    SUPPORT_ERROR = "support_error"
    ENERGY_DOMAIN_ERROR = "energy_domain_error"
    QUADRATURE_ERROR = "quadrature_error"
    RANGE_ESCAPE = "range_escape"
    HESSIAN_UNAVAILABLE = "hessian_unavailable"
    GENERAL_ERROR = "general_error"


class GroupKind(str, Enum):
    FULL_DIFF = "full_diff"
    VOLUME_PRESERVING = "volume_preserving"
    SYMPLECTIC_2D = "symplectic_2d"
    SHEAR = "shear"
    SEPARABLE_1D = "separable_1d"


class CharacterKind(str, Enum):
    SHEAR_EXP = "shear_exp"
    DIAGONAL_POWER = "diagonal_power"


class FieldKind(str, Enum):
    GENERIC_BUMP = "generic_bump"
    DIV_FREE_2D = "div_free_2d"
    DIV_FREE_3D = "div_free_3d"
    HAMILTONIAN_2D = "hamiltonian_2d"
    SHEAR = "shear"
    SEPARABLE_1D = "separable_1d"


class Verdict(str, Enum):
    PASS = "pass"
    FAIL = "fail"
    INCONCLUSIVE = "inconclusive"


class Side(str, Enum):
    LEFT = "left"
    RIGHT = "right"


class LHMode(str, Enum):
    ALL_PAIRS = "all_pairs"
    ORTHOGONAL_PAIRS = "orthogonal_pairs"


class Subject(str, Enum):
    MAP = "map"
    JET = "jet"


class TestName(str, Enum):
    __test__ = False

    QUASICONVEXITY = "quasiconvexity"
    LOWER_INVARIANCE = "lower_invariance"
    CONJUGATION_IDENTITY = "conjugation_identity"
    LEGH = "legh"
    LH_POINTWISE = "lh_pointwise"
    PARHL = "parhl"
    NULL_LAGRANGIAN = "null_lagrangian"
    CHARACTER_NLL = "character_nll"
    FIRST_VARIATION = "first_variation"
    EXP_INVARIANCE = "exp_invariance"
    EQUILIBRIUM_RESIDUAL = "equilibrium_residual"
    THETA_CONVEXITY = "theta_convexity"
    POLYCONVEX_JENSEN = "polyconvex_jensen"
    SEMICONTINUITY = "semicontinuity"
    GROUP_NESTING = "group_nesting"


class GroupSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: GroupKind = Field(..., description="Which diffeomorphism group G")
    n: int = Field(..., ge=1, le=3, description="Ambient dimension")
    tolerance: float = Field(1e-9, gt=0, description="Jet membership tolerance")
    p: Optional[int] = Field(None, description="Shear row index (1-based)")
    q: Optional[int] = Field(None, description="Shear column index (1-based)")

    @model_validator(mode="after")
    def check_kind(self):
        if self.kind == GroupKind.SYMPLECTIC_2D and self.n != 2:
            raise ValueError("symplectic_2d requires n = 2")
        if self.kind == GroupKind.SEPARABLE_1D and self.n != 1:
            raise ValueError("separable_1d requires n = 1")
        if self.kind == GroupKind.SHEAR:
            if self.p is None or self.q is None:
                raise ValueError("shear requires p and q")
            if self.p == self.q:
                raise ValueError("shear requires p != q")
            if not (1 <= self.p <= self.n and 1 <= self.q <= self.n):
                raise ValueError(f"shear indices must lie in 1..{self.n}")
        return self

    @property
    def transitive(self) -> bool:
        """Whether generators can carry any sampled point to any other; recorded, never asserted."""
        if self.kind == GroupKind.SHEAR:
            return False
        if self.kind == GroupKind.VOLUME_PRESERVING:
            return self.n >= 2
        return True


class CharacterSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: CharacterKind = Field(..., description="Character family")
    n: int = Field(2, ge=1, le=3, description="Matrix dimension")
    c: float = Field(1.0, description="Exponent scale for shear_exp")
    p: Optional[int] = Field(None, description="Shear row index (1-based)")
    q: Optional[int] = Field(None, description="Shear column index (1-based)")
    exponents: Optional[Tuple[float, ...]] = Field(None, description="Powers a_i for diagonal_power")

    @model_validator(mode="after")
    def check_kind(self):
        if self.kind == CharacterKind.SHEAR_EXP:
            if self.p is None or self.q is None or self.p == self.q:
                raise ValueError("shear_exp requires distinct p and q")
            if not (1 <= self.p <= self.n and 1 <= self.q <= self.n):
                raise ValueError(f"shear_exp indices must lie in 1..{self.n}")
        elif self.exponents is None or len(self.exponents) != self.n:
            raise ValueError("diagonal_power requires one exponent per diagonal entry")
        return self


class BoxDomain(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n: int = Field(..., ge=1, le=3, description="Dimension")
    lower: Tuple[float, ...] = Field(..., description="Lower corner")
    upper: Tuple[float, ...] = Field(..., description="Upper corner")
    cells: int = Field(8, ge=1, description="Cells per axis")
    order: int = Field(5, ge=1, le=20, description="Gauss-Legendre order per cell and axis")
    support_nodes: Optional[int] = Field(
        None, ge=8, le=512,
        description="Trapezoid nodes per compact axis of a generator support; defaults to 128, 80, 40 for n = 1, 2, 3",
    )

    @model_validator(mode="after")
    def check_extent(self):
        if len(self.lower) != self.n or len(self.upper) != self.n:
            raise ValueError("corners must have n coordinates")
        if any(hi <= lo for lo, hi in zip(self.lower, self.upper)):
            raise ValueError("box extent must be positive on every axis")
        return self

    @classmethod
    def unit(cls, n: int, cells: Optional[int] = None, order: int = 5) -> "BoxDomain":
        if cells is None:
            cells = {1: 16, 2: 8, 3: 4}[n]
        return cls(n=n, lower=(0.0,) * n, upper=(1.0,) * n, cells=cells, order=order)

    @property
    def extents(self) -> Tuple[float, ...]:
        return tuple(hi - lo for lo, hi in zip(self.lower, self.upper))

    @property
    def support_points(self) -> int:
        return self.support_nodes if self.support_nodes is not None else {1: 128, 2: 80, 3: 40}[self.n]

    @property
    def volume(self) -> float:
        vol = 1.0
        for extent in self.extents:
            vol *= extent
        return vol


class FieldSpec(BaseModel):
    """Parameters of a compactly supported generator; stored verbatim in report witnesses."""
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: FieldKind = Field(..., description="Generator family")
    n: int = Field(..., ge=1, le=3, description="Dimension")
    centers: Tuple[Tuple[float, ...], ...] = Field(..., description="Bump centers (shear: only the q-th coordinate is used)")
    radii: Tuple[float, ...] = Field(..., description="Bump radii")
    amplitudes: Tuple[float, ...] = Field(..., description="Bump amplitudes")
    directions: Optional[Tuple[Tuple[float, ...], ...]] = Field(
        None, description="Per-bump direction (generic_bump) or potential vector (div_free_3d)"
    )
    p: Optional[int] = Field(None, description="Shear row index (1-based)")
    q: Optional[int] = Field(None, description="Shear column index (1-based)")

    @model_validator(mode="after")
    def check_shapes(self):
        count = len(self.centers)
        if count == 0:
            raise ValueError("at least one bump is required")
        if len(self.radii) != count or len(self.amplitudes) != count:
            raise ValueError("centers, radii and amplitudes must have equal length")
        if any(len(c) != self.n for c in self.centers):
            raise ValueError("every center needs n coordinates")
        if any(r <= 0 for r in self.radii):
            raise ValueError("radii must be positive")
        if self.kind in (FieldKind.GENERIC_BUMP, FieldKind.DIV_FREE_3D):
            if self.directions is None or len(self.directions) != count:
                raise ValueError(f"{self.kind.value} requires one direction per bump")
            if any(len(d) != self.n for d in self.directions):
                raise ValueError("every direction needs n coordinates")
        if self.kind in (FieldKind.DIV_FREE_2D, FieldKind.HAMILTONIAN_2D) and self.n != 2:
            raise ValueError(f"{self.kind.value} requires n = 2")
        if self.kind == FieldKind.DIV_FREE_3D and self.n != 3:
            raise ValueError("div_free_3d requires n = 3")
        if self.kind == FieldKind.SEPARABLE_1D and self.n != 1:
            raise ValueError("separable_1d requires n = 1")
        if self.kind == FieldKind.SHEAR:
            if self.p is None or self.q is None:
                raise ValueError("shear requires p and q")
            if not (1 <= self.p <= self.n and 1 <= self.q <= self.n):
                raise ValueError(f"shear indices must lie in 1..{self.n}")
        return self

    def scaled(self, factor: float) -> "FieldSpec":
        return self.model_copy(update={"amplitudes": tuple(a * factor for a in self.amplitudes)})


class TestPoint(BaseModel):
    __test__ = False
    model_config = ConfigDict(frozen=True, extra="forbid")

    x0: Optional[Tuple[float, ...]] = Field(None, description="Localisation point x0")
    y0: Optional[Tuple[float, ...]] = Field(None, description="Localisation value y0")
    F: Tuple[Tuple[float, ...], ...] = Field(..., description="Jet matrix F, row-major")

    @field_validator("F")
    @classmethod
    def check_square(cls, value):
        n = len(value)
        if n == 0 or n > 3 or any(len(row) != n for row in value):
            raise ValueError("F must be a square matrix of size 1..3")
        return value

    @property
    def n(self) -> int:
        return len(self.F)


class SampleRecord(BaseModel):
    sample: int = Field(..., description="Sample index")
    margin: float = Field(..., description="Normalised margin of the sample")
    tau: Optional[float] = Field(None, description="Flow time")
    amplitude: Optional[float] = Field(None, description="Largest absolute bump amplitude")


class TestReport(BaseModel):
    __test__ = False

    condition: str = Field(..., description="Condition name")
    verdict: Verdict = Field(..., description="pass, fail or inconclusive")
    margin: float = Field(..., description="Worst signed margin")
    tolerance: float = Field(..., description="Tolerance used for the verdict")
    samples: int = Field(0, description="Number of evaluated samples")
    seed: Optional[int] = Field(None, description="Seed of the sampler")
    witness: Dict[str, Any] = Field(default_factory=dict, description="Parameters of the worst sample")
    caveat: str = Field("", description="What a pass does and does not establish")
    residual: Optional[float] = Field(None, description="Scalar residual for identity checks")
    rejected: int = Field(0, description="Samples rejected by the flow jet gate")
    rescaled: int = Field(0, description="Samples rescaled to keep F + grad eta invertible")
    config: Optional[Dict[str, Any]] = Field(None, description="RunConfig that produced the report")
    series: List[SampleRecord] = Field(default_factory=list, exclude=True)


class BoundaryIntegrals(BaseModel):
    """Volume and boundary integrals of a deformation map over a box."""

    vol_det: float = Field(..., description="Integral of det grad u")
    vol_grad: List[List[float]] = Field(..., description="Integral of (grad u)_ij")
    vol_adj: Optional[List[List[float]]] = Field(None, description="Integral of adj(grad u)_ij (n >= 2)")
    surf_u_n: List[List[float]] = Field(..., description="Boundary integral of u_i n_j")
    surf_u_wedge_n: Optional[List[List[float]]] = Field(None, description="Boundary integral of (u ^ n)_ij (n >= 2)")
    image_volume: float = Field(..., description="|u(box)| from the boundary image")
    mc_image_volume: Optional[float] = Field(None, description="Monte-Carlo membership estimate of |u(box)|")
    mc_stderr: Optional[float] = Field(None, description="Standard error of the Monte-Carlo estimate")
    mc_deviation: Optional[float] = Field(None, description="|mc_image_volume - image_volume| in standard errors")
    mc_consistent: Optional[bool] = Field(None, description="Monte-Carlo estimate within 5 standard errors")
    residual_grad: float = Field(..., description="max |vol_grad - surf_u_n|")
    residual_adj: Optional[float] = Field(None, description="max |vol_adj - surf_u_wedge_n|")
    residual_det: float = Field(..., description="|vol_det - image_volume|")


class EnergyConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str = Field(..., description="Catalog name")
    n: Optional[int] = Field(None, ge=1, le=3, description="Dimension; defaults to the test point's")
    params: Dict[str, Any] = Field(default_factory=dict, description="Constructor parameters")


class MapConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: str = Field(..., description="affine, affine_bump or quadratic")
    F: Tuple[Tuple[float, ...], ...] = Field(..., description="Linear part")
    b: Optional[Tuple[float, ...]] = Field(None, description="Translation")
    Q: Optional[Tuple[Tuple[Tuple[float, ...], ...], ...]] = Field(None, description="Quadratic coefficients Q_ijk")
    centers: Optional[Tuple[Tuple[float, ...], ...]] = Field(None, description="Bump centers")
    radii: Optional[Tuple[float, ...]] = Field(None, description="Bump radii")
    amplitudes: Optional[Tuple[float, ...]] = Field(None, description="Bump amplitudes")
    axes: Optional[Tuple[int, ...]] = Field(None, description="Component (1-based) each bump displaces")

    @field_validator("kind")
    @classmethod
    def check_kind(cls, value):
        if value not in ("affine", "affine_bump", "quadratic"):
            raise ValueError(f"unknown map kind '{value}'")
        return value


class ThetaConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    k: float = Field(1.0, description="Stiffness k")
    lam: float = Field(0.0, description="Potential weight lambda")
    theta: Tuple[float, ...] = Field((0.0, 1.0), description="Polynomial coefficients of theta(s), lowest first")
    potential: Tuple[float, ...] = Field((0.0,), description="Polynomial coefficients of F(theta), lowest first")
    length: float = Field(1.0, gt=0, description="Interval length L")
    segments: int = Field(20, ge=1, description="Number of sampled segments")


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    test: TestName = Field(..., description="Tester to run")
    energy: Optional[EnergyConfig] = Field(None, description="Energy density")
    group: Optional[GroupSpec] = Field(None, description="Diffeomorphism group")
    test_point: Optional[TestPoint] = Field(None, description="Triplet (x0, y0, F)")
    domain: Optional[BoxDomain] = Field(None, description="Integration box; unit cube by default")
    samples: int = Field(200, ge=1, description="Number of samples")
    seed: int = Field(0, ge=0, lt=2 ** 64, description="Sampler seed")
    tolerance: Optional[float] = Field(None, gt=0, description="Verdict tolerance")
    output: Optional[str] = Field(None, description="Report path")
    side: Side = Field(Side.LEFT, description="Left or right lower invariance")
    mode: LHMode = Field(LHMode.ALL_PAIRS, description="Pointwise Legendre-Hadamard mode")
    subject: Subject = Field(Subject.JET, description="Map or jet subject for invariance checks")
    equality: bool = Field(False, description="legh: test |Q| <= tol instead of Q >= -tol")
    displacement: Literal["bump", "flow"] = Field("bump", description="quasiconvexity: bump eta or eta = F(phi - id)")
    tau: float = Field(1.0, description="Flow time")
    steps_per_unit: int = Field(1000, ge=1, description="RK4 steps per unit time")
    levels: int = Field(4, ge=1, description="Semicontinuity levels")
    field: Optional[FieldSpec] = Field(None, description="Explicit generator")
    character: Optional[CharacterSpec] = Field(None, description="Character for character_nll")
    map: Optional[MapConfig] = Field(None, description="Deformation map subject")
    theta: Optional[ThetaConfig] = Field(None, description="One-dimensional example parameters")

    @model_validator(mode="after")
    def check_dimensions(self):
        if self.group is not None and self.test_point is not None and self.test_point.n != self.group.n:
            raise ValueError(f"test_point.F has dimension {self.test_point.n} but group.n = {self.group.n}")
        if self.domain is not None and self.group is not None and self.domain.n != self.group.n:
            raise ValueError(f"domain.n = {self.domain.n} but group.n = {self.group.n}")
        return self


class SuiteEntry(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    config: RunConfig = Field(..., description="Check to run")
    expect: Verdict = Field(Verdict.PASS, description="Declared verdict")


class SuiteFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    entries: List[SuiteEntry] = Field(default_factory=list, description="Checks in run order")


class SuiteResultEntry(BaseModel):
    digest: str = Field(..., description="SHA-256 of the canonical config JSON")
    expect: Verdict = Field(..., description="Declared verdict")
    report: TestReport = Field(..., description="Produced report")


class SuiteResult(BaseModel):
    entries: List[SuiteResultEntry] = Field(default_factory=list, description="Results in suite-file order")
    passed: int = Field(0, description="Entries with verdict pass")
    failed: int = Field(0, description="Entries with verdict fail")
    inconclusive: int = Field(0, description="Entries with verdict inconclusive")
    mismatches: List[int] = Field(default_factory=list, description="Indices whose verdict differs from expect")
    duration_seconds: float = Field(0.0, description="Wall-clock duration")
    version: str = Field(..., description="Toolkit version")
    seed: Optional[int] = Field(None, description="Seed override applied to every entry")
