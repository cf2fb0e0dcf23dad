from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.config import (
    DEFAULT_EPS,
    DEFAULT_R,
    DENSE_MODE_MAX_M,
    LATTICE_SHIFTS,
    MIN_CHARACTERISTIC_SPAN,
    OUTPUT_DIR,
    PINNED_CONSTANTS_FILE,
    STOP_MULTIPLIER,
    THREADS,
)

SUBCOMMANDS = ("characteristic", "norm", "testing", "sparse", "czdecomp", "weak", "sweep", "verify")


class KernelSpec(BaseModel):
    kind: Literal["hilbert", "log_oscillating", "zero", "expression"] = "hilbert"
    expression: Optional[str] = Field(None, description="numpy expression in x and y, for kind=expression")
    C_size: float = Field(1.0, gt=0)
    eps: float = Field(DEFAULT_EPS, gt=0, le=1)
    band: int = Field(1, ge=1)

    model_config = ConfigDict(extra="forbid")

    @model_validator(mode="after")
    def expression_present(self):
        if self.kind == "expression" and not self.expression:
            raise ValueError("kind 'expression' needs an expression")
        return self


class GridSpec(BaseModel):
    lo: float = 0.0
    hi: float = 1.0
    m: list[int] = Field(default_factory=lambda: [8], min_length=1)

    model_config = ConfigDict(extra="forbid")

    @field_validator("m")
    @classmethod
    def dense_mode_limit(cls, value: list[int]) -> list[int]:
        for m in value:
            if not 1 <= m <= DENSE_MODE_MAX_M:
                raise ValueError(f"m={m} outside 1..{DENSE_MODE_MAX_M} (dense operator mode)")
        return value

    @model_validator(mode="after")
    def ordered(self):
        if not self.hi > self.lo:
            raise ValueError(f"need hi > lo, got [{self.lo}, {self.hi})")
        return self


class WeightFamilySpec(BaseModel):
    kind: Literal["power", "exp_monotone", "cutoff", "random_dyadic"] = "power"
    params: list[dict] = Field(default_factory=lambda: [{"a": 0.0}], min_length=1)
    seeds: list[int] = Field(default_factory=lambda: [0], min_length=1)

    model_config = ConfigDict(extra="forbid")

    def entries(self) -> list[tuple[str, str, dict, int]]:
        """(weight_id, kind, params, seed) for every params × seed combination."""
        out = []
        for params in self.params:
            label = "_".join(f"{k}{v:g}" if isinstance(v, (int, float)) else f"{k}{v}" for k, v in sorted(params.items()))
            for seed in self.seeds:
                out.append((f"{self.kind}_{label or 'default'}_s{seed}", self.kind, params, seed))
        return out


class ExperimentConfig(BaseModel):
    kernel: KernelSpec = Field(default_factory=KernelSpec)
    grid: GridSpec = Field(default_factory=GridSpec)
    weights: WeightFamilySpec = Field(default_factory=WeightFamilySpec)
    r: int = Field(DEFAULT_R, ge=1)
    stopping_multiplier: float = Field(STOP_MULTIPLIER, ge=2)
    shifts: list[float] = Field(default_factory=lambda: list(LATTICE_SHIFTS), min_length=1, description="lattice shifts ω in [-1/4, 1/4]")
    I0: Optional[tuple[float, float]] = Field(None, description="localization interval in grid coordinates")
    lambdas: list[float] = Field(default_factory=lambda: [0.25, 0.5, 0.75], min_length=1, description="heights as fractions of max M↑f")
    test_functions: int = Field(12, ge=1)
    rubio_terms: int = Field(30, ge=1)
    corpus_size: int = Field(100, ge=1)
    min_characteristic_span: float = Field(MIN_CHARACTERISTIC_SPAN, ge=1, description="sweep needs max/min characteristic at least this")
    pins_file: str = PINNED_CONSTANTS_FILE
    output_dir: str = OUTPUT_DIR
    threads: int = Field(THREADS, ge=1)
    seed: int = 0

    model_config = ConfigDict(extra="forbid")

    @field_validator("shifts")
    @classmethod
    def shifts_in_range(cls, value: list[float]) -> list[float]:
        for omega in value:
            if abs(omega) > 0.25:
                raise ValueError(f"shift {omega} outside [-1/4, 1/4]")
        return value

    @field_validator("lambdas")
    @classmethod
    def lambdas_in_range(cls, value: list[float]) -> list[float]:
        for lam in value:
            if not 0 < lam < 1:
                raise ValueError(f"lambda fraction {lam} outside (0, 1)")
        return value
