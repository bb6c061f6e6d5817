"""Module defining pydantic schemas for experiments, problems and solver settings."""

from __future__ import annotations

import math
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


def support_exponent(p: float, d: int) -> float:
    """Time exponent of the support radius, 1 / (d(p-2) + p)."""
    return 1.0 / (d * (p - 2.0) + p)


class Problem(BaseModel):
    """Parameters of one p-Laplace evolution on the box [-L, L]^d."""

    model_config = ConfigDict(frozen=True)

    p: float = Field(gt=2)
    d: Literal[1, 2]
    L: float = Field(gt=0)
    n: int = Field(gt=0)
    dt: float = Field(gt=0)
    T: float = Field(gt=0)
    epsilon: float = Field(0.0, ge=0)
    delta: float = Field(0.0, ge=0)
    R: float = Field(gt=0)

    @field_validator("n")
    @classmethod
    def _n_even(cls, value: int) -> int:
        if value % 2:
            raise ValueError("n must be even")
        return value

    @property
    def theory_regime(self) -> bool:
        """True when p >= 4, the range covered by the second order estimates."""
        return self.p >= 4

    @property
    def h(self) -> float:
        return 2.0 * self.L / self.n

    @property
    def beta(self) -> float:
        return support_exponent(self.p, self.d)

    @property
    def n_steps(self) -> int:
        return math.ceil(self.T / self.dt - 1e-9)

    def support_growth(self, t: float, mass: float, c_support: float) -> float:
        """R(t) = C t^beta |u0|_1^((p-2) beta)."""
        return c_support * t**self.beta * mass ** ((self.p - 2.0) * self.beta)

    def support_bound(self, t: float, mass: float, c_support: float) -> float:
        """Radius of the ball 2R + R(t) that contains the support at time t."""
        return 2.0 * self.R + self.support_growth(t, mass, c_support)

    def check_box(self, c_support: float, mass: float = 1.0) -> None:
        """Ensures the support stays away from the box boundary up to time T.

        Raises:
            ConfigInvalid: Naming ``L`` when 2R + R(T) >= L.
        """
        from app.exceptions import ConfigInvalid

        bound = self.support_bound(self.T, mass, c_support)
        if bound >= self.L:
            raise ConfigInvalid(
                "L", f"support bound 2R + R(T) = {bound:.4g} does not fit in the box (L = {self.L})"
            )


class ProxConfig(BaseModel):
    """Settings of a single proximal (resolvent) solve."""

    model_config = ConfigDict(frozen=True)

    tol: float = Field(1e-10, gt=0)
    max_iter: int = Field(50, ge=1)
    method: Literal["newton", "fixed-point"] = "newton"
    delta: float = Field(0.0, ge=0)
    linear_solver: Literal["direct", "cg"] = "direct"
    fixed_point_max_iter: int = Field(2000, ge=1)
    fixed_point_damping: float = Field(0.5, gt=0, le=1)
    max_step_splits: int = Field(3, ge=0)


class InitConfig(BaseModel):
    """Initial datum: Barenblatt profile, compact bump, or a field CSV."""

    type: Literal["barenblatt", "bump", "file"]
    params: dict[str, Any] = Field(default_factory=dict)


class ParticleConfig(BaseModel):
    N: int = Field(100_000, ge=0)
    seed: int = Field(42, ge=0, lt=2**64)
    substeps: int = Field(1, ge=1)


class ToleranceConfig(BaseModel):
    tol: float = Field(1e-10, gt=0)
    max_iter: int = Field(50, ge=1)
    method: Literal["newton", "fixed-point"] = "newton"
    linear_solver: Literal["direct", "cg"] = "direct"
    max_step_splits: int = Field(3, ge=0)


class ExperimentConfig(BaseModel):
    """One experiment file. ``delta`` and ``R`` default to values derived from u0."""

    model_config = ConfigDict(extra="forbid")

    p: float = Field(gt=2)
    d: Literal[1, 2]
    L: float = Field(gt=0)
    n: int = Field(gt=0)
    dt: float = Field(gt=0)
    T: float = Field(gt=0)
    epsilon: float = Field(0.0, ge=0)
    delta: float | None = Field(None, ge=0)
    R: float | None = Field(None, gt=0)
    init: InitConfig
    particles: ParticleConfig = Field(default_factory=ParticleConfig)
    tolerances: ToleranceConfig = Field(default_factory=ToleranceConfig)
    snapshot_every: int = Field(50, ge=1)
    superposition_coefficients: tuple[float, float, float] | None = None

    @field_validator("n")
    @classmethod
    def _n_even(cls, value: int) -> int:
        if value % 2:
            raise ValueError("n must be even")
        return value

    @model_validator(mode="after")
    def _dt_within_horizon(self) -> ExperimentConfig:
        if self.dt > self.T:
            raise ValueError("dt must not exceed T")
        return self

    def problem(self, R: float, delta: float) -> Problem:
        """Builds the Problem once R and delta are known."""
        return Problem(
            p=self.p,
            d=self.d,
            L=self.L,
            n=self.n,
            dt=self.dt,
            T=self.T,
            epsilon=self.epsilon,
            delta=delta,
            R=R,
        )

    def prox_config(self, delta: float, defaults: dict | None = None) -> ProxConfig:
        """Merges the experiment tolerances with the global solver defaults."""
        defaults = defaults or {}
        return ProxConfig(
            tol=self.tolerances.tol,
            max_iter=self.tolerances.max_iter,
            method=self.tolerances.method,
            linear_solver=self.tolerances.linear_solver,
            max_step_splits=self.tolerances.max_step_splits,
            delta=delta,
            fixed_point_max_iter=defaults.get("fixed_point_max_iter", 2000),
            fixed_point_damping=defaults.get("fixed_point_damping", 0.5),
        )
