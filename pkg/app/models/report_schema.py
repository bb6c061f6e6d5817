"""Module defining schemas for verification and comparison reports."""

from __future__ import annotations

import math
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator


class EstimateCheck(BaseModel):
    """One inequality or identity evaluated on a finished run.

    ``le`` passes when lhs <= rhs + tolerance, ``eq_tol`` when |lhs - rhs| <= tolerance.
    """

    model_config = ConfigDict(populate_by_name=True)

    name: str
    lhs: float
    rhs: float
    relation: Literal["le", "eq_tol"]
    tolerance: float = Field(0.0, ge=0)
    passed: bool = Field(alias="pass")
    anchor: str
    details: dict[str, Any] = Field(default_factory=dict)

    @field_validator("lhs", "rhs")
    @classmethod
    def _finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("check sides must be finite")
        return value

    @classmethod
    def evaluate(
        cls,
        name: str,
        lhs: float,
        rhs: float,
        relation: Literal["le", "eq_tol"],
        anchor: str,
        tolerance: float = 0.0,
        **details,
    ) -> EstimateCheck:
        if relation == "le":
            passed = lhs <= rhs + tolerance
        else:
            passed = abs(lhs - rhs) <= tolerance
        return cls(
            name=name,
            lhs=lhs,
            rhs=rhs,
            relation=relation,
            tolerance=tolerance,
            passed=bool(passed),
            anchor=anchor,
            details=details,
        )


class EstimateReport(BaseModel):
    """All checks of one run; ``out_of_theory`` marks runs with 2 < p < 4."""

    p: float
    d: int
    out_of_theory: bool = False
    checks: list[EstimateCheck] = Field(default_factory=list)
    logged: dict[str, Any] = Field(default_factory=dict)

    @property
    def failed(self) -> list[EstimateCheck]:
        return [check for check in self.checks if not check.passed]

    def check(self, name: str) -> EstimateCheck:
        for check in self.checks:
            if check.name == name:
                return check
        raise KeyError(name)


class ComparisonEntry(BaseModel):
    t: float
    metric: Literal["w1", "l1"]
    distance: float
    N_effective: int


class ComparisonReport(BaseModel):
    """Particle-versus-PDE distances at every stored snapshot of one ensemble."""

    label: str
    N: int
    seed: int
    substeps: int
    entries: list[ComparisonEntry] = Field(default_factory=list)
    terminal_tolerance: float | None = None
    support_diameter: float | None = None

    @property
    def terminal(self) -> ComparisonEntry | None:
        return self.entries[-1] if self.entries else None
