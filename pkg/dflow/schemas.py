"""Configuration sections, run reports and verification summaries.
"""
import enum
from typing import ClassVar, Dict, List, Optional, Union

from pydantic import BaseModel, Extra, root_validator, validator

from .flow.scheduler import Scheduler
from .flow.sensitivity import Route
from .flow.solver import Scheme
from .opt.lbfgs import LineSearch
from .opt.objective import CorruptionOp, CostSpec, LevelFunction, Regularizer
from .util.conf import Config

__all__ = (
    "Section",
    "ExperimentSection", "PriorSection", "SchedulerSection", "SolverSection",
    "CorruptionSection", "RegularizerEntry", "CostSection", "OptimizerConfig",
    "VerifySection", "SampleSection",
    "StopReason", "IterateRecord", "RunReport", "Check", "VerificationSummary",
)


class Section(BaseModel):
    class Config:
        extra = Extra.forbid
        validate_assignment = True


@Config.defaults
class ExperimentSection(Section):
    SECTION: ClassVar[str] = "experiment"

    name: str = "dflow"
    seed: int = 0
    seeds: int = 1
    out_dir: str = "out"

    @validator("seeds")
    def seeds_positive(cls, v):
        if v < 1:
            raise ValueError("must be at least 1")
        return v


@Config.defaults
class PriorSection(Section):
    SECTION: ClassVar[str] = "prior"

    class Recipe(str, enum.Enum):
        TWO_GAUSSIANS = "two_gaussians"
        GAUSSIAN_GRID = "gaussian_grid"
        RING = "ring"
        EMPIRICAL_FROM_FILE = "empirical_from_file"
        STANDARD_NORMAL = "standard_normal"
        SINGLE_POINT = "single_point"
        GAUSSIAN = "gaussian"

    recipe: Recipe = Recipe.TWO_GAUSSIANS
    dim: int = 2
    sep: float = 4.0
    s: float = 0.5
    k: int = 3
    spacing: float = 2.0
    m: int = 8
    radius: float = 1.0
    path: Optional[str] = None
    weights_path: Optional[str] = None
    mean: Optional[List[float]] = None
    cov_diag: Optional[List[float]] = None
    point: Optional[List[float]] = None

    @root_validator(skip_on_failure=True)
    def recipe_fields(cls, values):
        recipe = values["recipe"]

        if values["dim"] < 1:
            raise ValueError("dim must be at least 1")

        if recipe == PriorSection.Recipe.EMPIRICAL_FROM_FILE and not values.get("path"):
            raise ValueError("empirical_from_file needs path")

        if recipe in (PriorSection.Recipe.TWO_GAUSSIANS, PriorSection.Recipe.GAUSSIAN_GRID) and values["s"] <= 0.0:
            raise ValueError("s must be positive")

        if recipe == PriorSection.Recipe.RING and (values["m"] < 1 or values["dim"] < 2):
            raise ValueError("ring needs m >= 1 and dim >= 2")

        for name in ("mean", "cov_diag", "point"):
            vec = values.get(name)

            if vec is not None and len(vec) != values["dim"]:
                raise ValueError(f"{name} has {len(vec)} entries for dim={values['dim']}")

        return values


@Config.defaults
class SchedulerSection(Section):
    SECTION: ClassVar[str] = "scheduler"

    kind: Scheduler.Kind = Scheduler.Kind.COND_OT
    t_max: float = Scheduler.T_MAX
    t_min: float = Scheduler.T_MIN

    @root_validator(skip_on_failure=True)
    def bounds(cls, values):
        if values["kind"] == Scheduler.Kind.CUSTOM:
            raise ValueError("custom schedulers are built in code, not from configuration")

        if not 0.0 < values["t_max"] <= 1.0:
            raise ValueError("t_max must lie in (0, 1]")

        if not 0.0 <= values["t_min"] < values["t_max"]:
            raise ValueError("t_min must lie in [0, t_max)")

        return values


@Config.defaults
class SolverSection(Section):
    SECTION: ClassVar[str] = "solver"

    scheme: Scheme = Scheme.MIDPOINT
    n_steps: int = 3

    @validator("n_steps")
    def steps_positive(cls, v):
        if v < 1:
            raise ValueError("must be at least 1")
        return v


class CorruptionSection(Section):
    class KeepMode(str, enum.Enum):
        CENTER = "center"
        PREFIX = "prefix"
        ALTERNATE = "alternate"
        RANDOM = "random"

    kind: CorruptionOp.Kind = CorruptionOp.Kind.IDENTITY
    keep: Optional[List[int]] = None
    keep_fraction: float = 0.5
    keep_mode: KeepMode = KeepMode.CENTER
    factor: int = 2
    kernel: Optional[List[float]] = None
    kernel_path: Optional[str] = None
    noise_sigma: float = 0.0

    @root_validator(skip_on_failure=True)
    def fields(cls, values):
        if values["noise_sigma"] < 0.0:
            raise ValueError("noise_sigma must be nonnegative")

        if not 0.0 < values["keep_fraction"] <= 1.0:
            raise ValueError("keep_fraction must lie in (0, 1]")

        if values["kind"] == CorruptionOp.Kind.BLUR1D and not (values.get("kernel") or values.get("kernel_path")):
            raise ValueError("blur1d needs kernel or kernel_path")

        return values


class RegularizerEntry(Section):
    kind: Regularizer.Kind
    weight: float = 0.01

    @validator("weight")
    def weight_nonnegative(cls, v):
        if v < 0.0:
            raise ValueError("must be nonnegative")
        return v


@Config.defaults
class CostSection(Section):
    SECTION: ClassVar[str] = "cost"

    class Source(str, enum.Enum):
        PRIOR = "prior"
        FLOW = "flow"

    kind: CostSpec.Kind = CostSpec.Kind.REVERSED_SAMPLING
    corruption: CorruptionSection = CorruptionSection()
    target: Optional[List[float]] = None
    source: Source = Source.PRIOR
    level_function: LevelFunction.Kind = LevelFunction.Kind.SQNORM
    level_coef: Optional[List[float]] = None
    level_c: float = 1.0
    peak: Optional[float] = None
    pseudo_inverse: bool = False
    regularizers: Optional[List[RegularizerEntry]] = None
    chi_d_printed_sign: bool = False

    @root_validator(skip_on_failure=True)
    def level(cls, values):
        if values["level_function"] == LevelFunction.Kind.LINEAR and not values.get("level_coef"):
            raise ValueError("linear level function needs level_coef")

        if values.get("peak") is not None and values["peak"] <= 0.0:
            raise ValueError("peak must be positive")

        return values


@Config.defaults
class OptimizerConfig(Section):
    SECTION: ClassVar[str] = "optimizer"

    max_outer_iters: int = 50
    inner_iters_per_step: int = 20
    lbfgs_history: int = 10
    line_search: LineSearch = LineSearch.STRONG_WOLFE
    c1: float = 1e-4
    c2: float = 0.9
    rho: float = 0.5
    target_value: Optional[Union[float, str]] = None
    grad_tol: float = 1e-8
    grad_route: Route = Route.DISCRETE_ADJOINT
    init: str = "auto"
    blend_alpha: Optional[float] = None
    blend_unit_variance: bool = True
    max_step: Optional[float] = None
    max_wall_time: Optional[float] = None
    renormalize: bool = False
    seed: int = 0

    @root_validator(skip_on_failure=True)
    def contract(cls, values):
        if values["lbfgs_history"] < 1:
            raise ValueError("lbfgs_history must be at least 1")

        if not 0.0 < values["c1"] < values["c2"] < 1.0:
            raise ValueError("line search needs 0 < c1 < c2 < 1")

        if not 0.0 < values["rho"] < 1.0:
            raise ValueError("rho must lie in (0, 1)")

        if values["max_outer_iters"] < 1 or values["inner_iters_per_step"] < 1:
            raise ValueError("iteration counts must be at least 1")

        if values["grad_route"] not in (Route.DISCRETE_ADJOINT, Route.CONTINUOUS_ADJOINT):
            raise ValueError("grad_route must be discrete or continuous")

        if values["init"] not in ("auto", "noise", "blend"):
            raise ValueError("init must be auto, noise or blend")

        alpha = values.get("blend_alpha")

        if alpha is not None and not 0.0 <= alpha <= 1.0:
            raise ValueError("blend_alpha must lie in [0, 1]")

        step = values.get("max_step")

        if step is not None and not step > 0.0:
            raise ValueError("max_step must be positive")

        target = values.get("target_value")

        if isinstance(target, str) and target != "noise":
            raise ValueError("target_value must be a number or 'noise'")

        return values


@Config.defaults
class VerifySection(Section):
    SECTION: ClassVar[str] = "verify"

    theorem1: bool = False
    routes: bool = False
    order: bool = False
    trials: int = 20
    n_steps: int = 200
    fd_step: float = 1e-6
    jacobian_fd_step: float = 1e-5
    fd_tol: float = 1e-6
    route_tol: float = 1e-2
    closed_form_tol: float = 1e-2
    t_max_sweep: List[float] = [1 - 1e-2, 1 - 1e-3, 1 - 1e-4]
    order_reference_steps: int = 4096


@Config.defaults
class SampleSection(Section):
    SECTION: ClassVar[str] = "sample"

    count: int = 16
    n_steps: int = 100
    logdensity: bool = True


class StopReason(str, enum.Enum):
    TARGET_REACHED = "target_reached"
    GRAD_TOL = "grad_tol"
    MAX_ITERS = "max_iters"
    LINE_SEARCH_FAILURE = "line_search_failure"
    WALL_TIME = "wall_time"


class IterateRecord(BaseModel):
    iteration: int
    value: float
    grad_norm: float
    x0_norm: float
    step: float
    evaluations: int
    psnr: Optional[float] = None
    x1: List[float]


class RunReport(BaseModel):
    SCHEMA_VERSION: ClassVar[int] = 1

    schema_version: int = 1
    name: str = "dflow"
    command: str = "run"
    seed: int = 0
    iterates: List[IterateRecord] = []
    final_x0: List[float]
    final_x1: List[float]
    final_value: float
    final_psnr: Optional[float] = None
    target_value: Optional[float] = None
    x_star: Optional[List[float]] = None
    stop_reason: StopReason
    evaluations: int = 0
    wall_time: float = 0.0
    config: Dict = {}

    def summary(self) -> str:
        lines = [
            f"name:        {self.name}",
            f"command:     {self.command}",
            f"seed:        {self.seed}",
            f"stop_reason: {self.stop_reason.value}",
            f"iterations:  {len(self.iterates) - 1 if self.iterates else 0}",
            f"evaluations: {self.evaluations}",
            f"final_value: {self.final_value!r}",
        ]

        if self.final_psnr is not None:
            lines.append(f"final_psnr:  {self.final_psnr!r}")

        if self.x_star is not None:
            err = sum((a - b) ** 2 for a, b in zip(self.final_x1, self.x_star)) ** 0.5
            lines.append(f"x1_error:    {err!r}")

        lines.append(f"wall_time:   {self.wall_time:.3f}s")
        return "\n".join(lines) + "\n"


class Check(BaseModel):
    suite: str
    name: str
    value: float
    tolerance: Optional[float] = None
    passed: Optional[bool] = None
    detail: str = ""


class VerificationSummary(BaseModel):
    schema_version: int = 1
    name: str = "dflow"
    checks: List[Check] = []

    @property
    def passed(self) -> bool:
        return all(c.passed is not False for c in self.checks)

    def table(self) -> str:
        head = f"{'suite':<10} {'check':<44} {'value':>12} {'tol':>10} {'result':>8}"
        rows = [head, "-" * len(head)]

        for c in self.checks:
            tol = "" if c.tolerance is None else f"{c.tolerance:.1e}"
            result = "record" if c.passed is None else ("ok" if c.passed else "FAIL")
            rows.append(f"{c.suite:<10} {c.name:<44} {c.value:>12.4e} {tol:>10} {result:>8}")

        return "\n".join(rows) + "\n"
