"""Problem definitions: the two-inclusion cookie field, parameter sampling,
manufactured verification problems, and the run-configuration schema."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable, Optional

import numpy as np

__all__ = [
    "ProblemInstance",
    "ManufacturedProblem",
    "CookieProblem",
    "ParameterSample",
    "cookie_kappa",
    "sample_parameters",
    "manufactured_problem",
    "RunConfig",
    "ConfigError",
    "load_config",
]


class ConfigError(ValueError):
    """Invalid run configuration (CLI exit code 1)."""


@dataclass(frozen=True)
class ProblemInstance:
    """A single diffusion problem: pointwise fields over (n, 2) point arrays."""

    name: str
    kappa: Callable[[np.ndarray], np.ndarray]
    f: Callable[[np.ndarray], np.ndarray]
    y: Optional[tuple[float, ...]] = None


@dataclass(frozen=True)
class ManufacturedProblem(ProblemInstance):
    """Verification problem with a known exact solution."""

    u_exact: Callable[[np.ndarray], np.ndarray] = None
    grad_u_exact: Callable[[np.ndarray], np.ndarray] = None


@dataclass(frozen=True)
class CookieProblem:
    """Diffusion field 0.1 + y1*chi_D1 + y2*chi_D2 on the unit square.

    The inclusions are the right-column disks of the 2x2 lattice of cell
    centers; D1 is the lower disk.  Indicators use the strict interior, so
    kappa stays in [base, base + 2] for parameters in [0, 1]^2.
    """

    base: float = 0.1
    radius: float = 0.15
    centers: tuple[tuple[float, float], tuple[float, float]] = (
        (0.75, 0.25), (0.75, 0.75))

    def kappa(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
        yv = np.asarray(y, dtype=np.float64)
        out = np.full(pts.shape[0], self.base)
        for k, c in enumerate(self.centers):
            d2 = (pts[:, 0] - c[0]) ** 2 + (pts[:, 1] - c[1]) ** 2
            out += yv[k] * (d2 < self.radius ** 2)
        return out if np.ndim(x) == 2 else out[0]

    def instance(self, y) -> ProblemInstance:
        yv = np.asarray(y, dtype=np.float64)
        if yv.shape != (len(self.centers),):
            raise ValueError(f"parameter must have shape ({len(self.centers)},)")
        return ProblemInstance(
            name=f"cookie(y={yv[0]:g},{yv[1]:g})",
            kappa=lambda pts: self.kappa(pts, yv),
            f=lambda pts: np.ones(np.atleast_2d(pts).shape[0]),
            y=tuple(float(v) for v in yv),
        )


def cookie_kappa(x, y, problem: CookieProblem = CookieProblem()):
    """Pointwise cookie diffusion field; ``x`` a point or an (n, 2) array."""
    return problem.kappa(x, y)


@dataclass(frozen=True)
class ParameterSample:
    y: np.ndarray
    index: int
    seed: int


def sample_parameters(n: int, seed: int, dim: int = 2) -> list[ParameterSample]:
    """n i.i.d. uniform draws from [0,1]^dim, reproducible for a fixed seed."""
    if n < 1:
        raise ValueError(f"need at least one sample, got n={n}")
    rng = np.random.default_rng(seed)
    ys = rng.random((n, dim))
    return [ParameterSample(y=ys[i].copy(), index=i, seed=seed) for i in range(n)]


def manufactured_problem() -> ManufacturedProblem:
    """-div(grad u) = f with u = sin(pi x1) sin(pi x2) and kappa = 1."""

    def u_exact(pts):
        pts = np.atleast_2d(pts)
        return np.sin(np.pi * pts[:, 0]) * np.sin(np.pi * pts[:, 1])

    def grad_u_exact(pts):
        pts = np.atleast_2d(pts)
        sx, cx = np.sin(np.pi * pts[:, 0]), np.cos(np.pi * pts[:, 0])
        sy, cy = np.sin(np.pi * pts[:, 1]), np.cos(np.pi * pts[:, 1])
        return np.pi * np.column_stack([cx * sy, sx * cy])

    return ManufacturedProblem(
        name="manufactured-sine",
        kappa=lambda pts: np.ones(np.atleast_2d(pts).shape[0]),
        f=lambda pts: 2.0 * np.pi ** 2 * u_exact(pts),
        u_exact=u_exact,
        grad_u_exact=grad_u_exact,
    )


@dataclass
class RunConfig:
    """Configuration shared by the CLI, the AFEM driver and the pipeline."""

    n0: int = 4
    n_steps: int = 3
    marking: str = "dorfler"
    theta: float = 0.5
    tau: Optional[float] = None
    seed: int = 0
    n_samples: int = 100
    radius: float = 0.15
    centers: tuple[tuple[float, float], tuple[float, float]] = (
        (0.75, 0.25), (0.75, 0.75))
    base: float = 0.1
    solver_tol: float = 1e-10
    fixed_mesh: bool = True
    y_ref: tuple[float, float] = (0.5, 0.5)

    def __post_init__(self):
        if self.n0 < 1:
            raise ConfigError(f"n0 must be >= 1, got {self.n0}")
        if self.n_steps < 1:
            raise ConfigError(f"n_steps must be >= 1, got {self.n_steps}")
        if self.marking not in ("dorfler", "threshold"):
            raise ConfigError(f"unknown marking {self.marking!r}")
        if self.marking == "dorfler" and not 0.0 < self.theta <= 1.0:
            raise ConfigError(f"theta must lie in (0, 1], got {self.theta}")
        if self.marking == "threshold" and (self.tau is None or self.tau <= 0):
            raise ConfigError(f"threshold marking needs tau > 0, got {self.tau}")
        if self.n_samples < 1:
            raise ConfigError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.solver_tol <= 0:
            raise ConfigError(f"solver_tol must be positive, got {self.solver_tol}")

    def cookie(self) -> CookieProblem:
        return CookieProblem(base=self.base, radius=self.radius,
                             centers=tuple(tuple(c) for c in self.centers))

    def marking_rule(self):
        from .marking import MarkingRule
        if self.marking == "dorfler":
            return MarkingRule.dorfler(self.theta)
        return MarkingRule.threshold(self.tau)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["centers"] = [list(c) for c in self.centers]
        d["y_ref"] = list(self.y_ref)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "centers" in kwargs:
            kwargs["centers"] = tuple(tuple(float(v) for v in c)
                                      for c in kwargs["centers"])
        if "y_ref" in kwargs:
            kwargs["y_ref"] = tuple(float(v) for v in kwargs["y_ref"])
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return RunConfig.from_dict(data)
