from typing import Optional

from pydantic import BaseModel, ConfigDict, Field


class KernelAxiomsReport(BaseModel):
    kernel: str
    samples: int
    causality_violations: int
    causality_worst: float = Field(description="largest |K| seen on the forbidden side")
    size_ratio: float = Field(description="max |K(x,y)|·|x−y| / C_size")
    smoothness_ratio: float = Field(description="max smoothness quotient / C_size")
    smoothness_constant: float
    passes_causality: bool
    passes_size: bool
    passes_smoothness: bool


class ReverseHolderReport(BaseModel):
    r: float
    lhs: float
    rhs: float
    holds: bool
    pointwise_ratio: float = Field(description="max of M↓_r(wχ)/M↓(wχ) over the interval")
    pointwise_holds: bool


class LocalCharacteristicGap(BaseModel):
    dyadic: float
    local: float
    gap: float


class PictureBoundReport(BaseModel):
    double_integral: float
    cover_bound: float
    joint_characteristic: float
    bound: float
    holds: bool


class TestingReport(BaseModel):
    """Testing constants of (T, w). Weak norms are lower estimates only."""

    K_chi: float
    K_sl: float
    K_gl: float
    K_WB: float
    K_chi_dual: float
    K_sl_dual: float
    K_gl_dual: float
    K_WB_tail_bound: float
    norm_L2w: float
    weak_norm_T: float
    weak_norm_Tprime: float
    weak_norm_is_lower_bound: bool = True
    characteristic: float

    __test__ = False


class SweepRow(BaseModel):
    weight_id: str
    m: int
    char: float
    norm: float
    K_chi: float
    K_sl: float
    K_gl: float
    K_WB: float
    weak2: float
    weak2_dual: float
    ratio1: float
    ratio2: float
    ratio3: float


class CZInvariantReport(BaseModel):
    components: int
    averages_ok: bool
    max_average_excess: float
    g_bounded: bool
    h_mean_zero: bool
    h_l1_ratio: float
    h_l1_ok: bool
    reconstructs: bool

    @property
    def passed(self) -> bool:
        return self.averages_ok and self.g_bounded and self.h_mean_zero and self.h_l1_ok and self.reconstructs


class Weak11Instance(BaseModel):
    f_id: str
    lam: float
    weak_ratio: float
    omega_tilde_mass: float
    e1_mass: float
    e2_mass: float
    level_set_mass: float
    split_covers: bool
    omega_tilde_ratio: float
    extended_check: bool


class Weak11Report(BaseModel):
    a1_characteristic: float
    instances: list[Weak11Instance]
    max_weak_ratio: float
    normalized_ratio: float = Field(description="max weak ratio / ([w] log(e+[w]))")
    max_omega_tilde_ratio: float
    all_extended_checks: bool
    all_splits_cover: bool


class RubioReport(BaseModel):
    C: float
    characteristic: float
    terms: int
    norm_ratio: float
    tail_bound: float
    a1_ratio: float
    a1_bound: float


class ExtrapolationReport(BaseModel):
    characteristic: float
    rubio_a1_characteristics: list[float]
    a1_ratio: float = Field(description="max [w·Rh]_{A1↑(ℍ)} / [w]_{A2↑}")
    l1_norms: list[float]
    max_l1_norm: float
    max_weak_ratio: float = Field(description="max sup_λ λ·(w·Rh)({|Tf| > λ}) / ‖f‖_{L¹(w·Rh)}")
    cauchy_schwarz_holds: bool
    majorant_holds: bool


class TwoWeightInstance(BaseModel):
    f_id: str
    lam: float
    components: int
    nonincreasing: bool
    mass_dominated: bool
    averages_hold: bool
    abel_holds: bool
    weak_ratio: float


class TwoWeightMaximalReport(BaseModel):
    direction: str
    two_weight_constant: float
    instances: list[TwoWeightInstance]
    all_pass: bool
    max_weak_ratio: float


class InvariantResult(BaseModel):
    name: str
    passed: bool
    value: Optional[float] = None
    bound: Optional[float] = None
    detail: str = ""


class FittedConstant(BaseModel):
    name: str
    value: float
    corpus_hash: str
    pinned: Optional[float] = None
    within_pin: Optional[bool] = None


class ReportBundle(BaseModel):
    subcommand: str
    files: list[str] = []
    summary: dict = {}
    invariants: list[InvariantResult] = []
    fitted_constants: list[FittedConstant] = []

    model_config = ConfigDict(arbitrary_types_allowed=True)

    @property
    def failed(self) -> list[InvariantResult]:
        return [inv for inv in self.invariants if not inv.passed]
