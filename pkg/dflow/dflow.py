"""D-Flow application: run, invert, sample and verify experiments.
"""
import os
from argparse import ArgumentParser

from hydra import log
from hydra.app import HydraApp
from hydra.rpc import HydraRPC
from hydra.test import Test

from . import VERSION
from .harness.runner import EXIT_CONFIG, Runner
from .harness.verify import SUITES
from .util.conf import Config

os.environ["HYPY_NO_RPC_ARGS"] = "1"


@HydraApp.register(name="dflow", desc="Controlled generation by source-point optimization", version=VERSION)
class DFlow(HydraApp):

    @staticmethod
    def parser(parser: ArgumentParser):
        parser.add_argument("command", choices=Runner.Command.ALL, help="What to do with the experiment.")
        parser.add_argument("target", nargs="+", help="Experiment YAML file; 'verify' takes suite names before it.")
        parser.add_argument("--seed", type=int, default=None, help="First seed (experiment.seed).")
        parser.add_argument("--jobs", type=int, default=1, help="Seeds run concurrently.")
        parser.add_argument("--out-dir", default=None, help="Report root (experiment.out_dir).")
        parser.add_argument("--override", action="append", default=[], metavar="KEY=VALUE", help="Dotted config override, repeatable.")

    def render_item(self, name: str, item):
        return self.render(result=HydraRPC.Result({name: item}), name=name)

    def overrides(self):
        items = list(self.args.override)

        if self.args.seed is not None:
            items.append(f"experiment.seed={self.args.seed}")

        if self.args.out_dir is not None:
            items.append(f"experiment.out_dir={self.args.out_dir}")

        return items

    def run(self):
        *suites, path = self.args.target

        if suites and self.args.command != Runner.Command.VERIFY:
            self.render_item("error", f"{self.args.command} takes exactly one config file")
            exit(EXIT_CONFIG)

        unknown = [s for s in suites if s not in SUITES]

        if unknown:
            self.render_item("error", f"unknown suite(s) {', '.join(unknown)}; expected {'|'.join(SUITES)}")
            exit(EXIT_CONFIG)

        try:
            conf = Config.read(path, self.overrides())
            runner = Runner(conf, self.args.command, jobs=self.args.jobs)
            log.info(f"dflow: {self.args.command} {path} -> {runner.out_dir}")
            code = runner.run(suites)
        except (Config.Error, FileNotFoundError) as exc:
            self.render_item("error", str(exc))
            exit(EXIT_CONFIG)

        if runner.summary is not None:
            print(runner.summary.table(), end="")

        self.render_item("result", {"exit": code, "out_dir": runner.out_dir})

        if code:
            exit(code)


@Test.register()
class DFlowTest(Test):

    def test_0_dflow_runnable(self):
        self.assertHydraAppIsRunnable(DFlow, "-h")
