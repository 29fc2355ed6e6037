"""Experiment orchestration: cells over seeds, run in a thread pool, reports on disk.
"""
import asyncio
import json
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Sequence

import numpy as np
from attrdict import AttrDict
from deepdiff import DeepDiff
from hydra import log

from ..flow.base import FlowError, NonFiniteState
from ..flow.solver import solve_forward, solve_forward_with_logdensity
from ..opt.objective import CostSpec
from ..opt.optimize import init_source, optimize
from ..schemas import RunReport, VerificationSummary
from ..util.conf import Config
from ..util.io import write_atomic, write_csv, write_json
from .recipes import make_cost, make_field
from .verify import verify

__all__ = "Runner", "EXIT_OK", "EXIT_FAILED", "EXIT_CONFIG", "EXIT_NONFINITE"

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_NONFINITE = 3


class Runner:
    """Runs one command of an experiment over experiment.seeds consecutive seeds.
    """
    class Command:
        RUN = "run"
        INVERT = "invert"
        SAMPLE = "sample"
        VERIFY = "verify"

        ALL = RUN, INVERT, SAMPLE, VERIFY

    conf: AttrDict
    command: str
    jobs: int
    summary: Optional[VerificationSummary] = None

    def __init__(self, conf: AttrDict, command: str = Command.RUN, jobs: int = 1):
        if command not in Runner.Command.ALL:
            raise ValueError(f"Unknown command {command!r}.")

        self.conf = conf
        self.command = command
        self.jobs = max(1, int(jobs))

    @property
    def out_dir(self) -> str:
        return os.path.join(self.conf.experiment.out_dir, self.conf.experiment.name)

    @property
    def seeds(self) -> List[int]:
        first = self.conf.experiment.seed
        return [first + i for i in range(self.conf.experiment.seeds)]

    def cell_dir(self, seed: int) -> str:
        return os.path.join(self.out_dir, self.command, f"seed-{seed:04d}")

    def run(self, suites: Sequence[str] = ()) -> int:
        if self.command == Runner.Command.VERIFY:
            return self.run_verify(suites)

        log.info(f"runner: {self.command} {self.conf.experiment.name} seeds={self.seeds} jobs={self.jobs}")
        results = asyncio.run(self._gather())
        code = EXIT_OK

        for seed, result in zip(self.seeds, results):
            if isinstance(result, NonFiniteState):
                log.critical(f"runner: seed {seed} aborted", exc_info=result)
                code = EXIT_NONFINITE
            elif isinstance(result, BaseException):
                log.critical(f"runner: seed {seed} failed: {result}", exc_info=result)
                code = max(code, EXIT_FAILED)

        return code

    async def _gather(self) -> list:
        loop = asyncio.get_running_loop()

        with ThreadPoolExecutor(max_workers=self.jobs) as pool:
            tasks = [loop.run_in_executor(pool, self.cell, seed) for seed in self.seeds]
            return await asyncio.gather(*tasks, return_exceptions=True)

    def cell(self, seed: int):
        log.info(f"runner: cell seed={seed} started")

        if self.command == Runner.Command.SAMPLE:
            result = self.sample(seed)
        else:
            result = self.optimize(seed)

        log.info(f"runner: cell seed={seed} finished")
        return result

    def cost_section(self):
        section = self.conf.cost

        if self.command == Runner.Command.INVERT and section.kind not in (CostSpec.Kind.RECONSTRUCTION, CostSpec.Kind.NEG_PSNR):
            log.info(f"runner: invert replaces cost.kind={section.kind.value} with reconstruction")
            section = section.copy(update={"kind": CostSpec.Kind.RECONSTRUCTION})

        return section

    def optimize(self, seed: int) -> RunReport:
        conf = self.conf
        n_steps, scheme = conf.solver.n_steps, conf.solver.scheme
        field = make_field(conf)
        spec, x_star = make_cost(self.cost_section(), field, seed, n_steps, scheme)
        cfg = conf.optimizer.copy(update={"seed": seed})
        x0 = init_source(field, spec, cfg, n_steps, scheme, seed=seed)

        report = optimize(field, spec, cfg, x0, n_steps, scheme)
        report = report.copy(update={
            "name": conf.experiment.name,
            "command": self.command,
            "x_star": None if x_star is None else x_star.tolist(),
            "config": Config.dump(conf),
        })

        self.write_report(seed, report, field)
        return report

    def sample(self, seed: int) -> Dict:
        conf = self.conf
        field = make_field(conf)
        n, scheme = conf.sample.n_steps, conf.solver.scheme
        sources = np.random.default_rng([seed, 4]).standard_normal((conf.sample.count, field.dim))
        rows = []

        for i, x0 in enumerate(sources):
            if conf.sample.logdensity:
                traj = solve_forward_with_logdensity(field, x0, n, scheme, store=False)
            else:
                traj = solve_forward(field, x0, n, scheme, store=False)

            row = {"index": i, "log_density": traj.terminal_log_density}
            row.update(_columns("x0", x0))
            row.update(_columns("x1", traj.terminal))
            rows.append(row)

        d = field.dim
        fields = ["index"] + [f"x0_{j}" for j in range(d)] + [f"x1_{j}" for j in range(d)]

        if conf.sample.logdensity:
            fields.append("log_density")

        folder = self.cell_dir(seed)
        write_csv(os.path.join(folder, "samples.csv"), fields, rows)
        Config.write(conf, os.path.join(folder, "config.yml"))
        return {"seed": seed, "count": len(rows)}

    def write_report(self, seed: int, report: RunReport, field) -> None:
        folder = self.cell_dir(seed)
        path = os.path.join(folder, "report.json")
        data = json.loads(report.json())
        self.compare(path, data)

        write_json(path, data)
        write_atomic(os.path.join(folder, "summary.txt"), report.summary())
        Config.write(self.conf, os.path.join(folder, "config.yml"))

        d = len(report.final_x0)
        fields = ["iteration", "value", "grad_norm", "x0_norm", "step", "evaluations", "psnr"] + [f"x1_{j}" for j in range(d)]
        rows = []

        for it in report.iterates:
            row = it.dict(exclude={"x1"})
            row.update(_columns("x1", it.x1))
            rows.append(row)

        write_csv(os.path.join(folder, "iterates.csv"), fields, rows)

        traj = solve_forward(field, np.array(report.final_x0), self.conf.solver.n_steps, self.conf.solver.scheme)
        rows = [dict(t=float(t), **_columns("x", x)) for t, x in zip(traj.grid, traj.states)]
        write_csv(os.path.join(folder, "trajectory.csv"), ["t"] + [f"x_{j}" for j in range(d)], rows)

        log.info(f"runner: report {path} stop={report.stop_reason.value} value={report.final_value:.6g}")

    @staticmethod
    def compare(path: str, data: dict) -> Optional[DeepDiff]:
        """Diff a new report against the one already at path, ignoring timings.
        """
        if not os.path.isfile(path):
            return None

        try:
            with open(path, "r") as f:
                previous = json.load(f)
        except (OSError, ValueError) as exc:
            log.warning(f"runner: unreadable previous report {path}: {exc}")
            return None

        diff = DeepDiff(previous, data, exclude_paths=["root['wall_time']"])

        if diff:
            log.warning(f"runner: {path} differs from the previous report: {', '.join(diff.keys())}")
        else:
            log.info(f"runner: {path} reproduces the previous report")

        return diff

    def run_verify(self, suites: Sequence[str]) -> int:
        suites = list(suites) or [name for name in ("theorem1", "routes", "order") if getattr(self.conf.verify, name)]

        if not suites:
            raise Config.Error("verify: no suite selected (name one on the command line or enable verify.<suite>)")

        try:
            summary = verify(self.conf, suites, self.conf.experiment.seed)
        except NonFiniteState as exc:
            log.critical("runner: verification aborted", exc_info=exc)
            return EXIT_NONFINITE
        except FlowError as exc:
            log.critical(f"runner: verification failed: {exc}", exc_info=exc)
            return EXIT_FAILED

        folder = os.path.join(self.out_dir, self.command)
        write_json(os.path.join(folder, "verify.json"), json.loads(summary.json()))
        write_atomic(os.path.join(folder, "verify.txt"), summary.table())
        Config.write(self.conf, os.path.join(folder, "config.yml"))
        self.summary = summary

        return EXIT_OK if summary.passed else EXIT_FAILED


def _columns(prefix: str, values) -> Dict[str, float]:
    return {f"{prefix}_{j}": float(v) for j, v in enumerate(values)}

