"""Command-line entry point: ``refinelab <command> --config FILE [--set k=v ...] --out DIR``.

Exit codes: 0 success, 1 configuration error, 2 data or file error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from refinelab import __version__
from refinelab import backbone as B
from refinelab import data as D
from refinelab import metrics as M
from refinelab import pipelines as P
from refinelab.checkpoint import CheckpointError, to_bytes
from refinelab.config import Config, ConfigError, int_list, load_config, str_list
from refinelab.rerand import PolicyError, report_json, rerandomize
from refinelab.tensor import NonFiniteGradientError

log = logging.getLogger("refinelab")

COMMANDS = {
    "gen-data": "render the source base split and one novel split per target domain",
    "pretrain": "supervised pre-training on the source base split",
    "rerand": "apply the configured re-randomization policy to a checkpoint",
    "simclr": "contrastive pre-training on an unlabeled target split",
    "eval": "episodic n-way k-shot evaluation of one method",
    "probe-stages": "frozen-backbone linear probe on every stage",
    "ablate-where": "evaluate a family of re-randomization presets",
    "ablate-how": "evaluate the topmost preset under each distribution",
    "report": "merge JSON reports into a table, CSV and plot",
}


class DataFailure(Exception):
    pass


def _workers_default(fallback: int = 1) -> int:
    raw = os.environ.get("REFINE_WORKERS")
    try:
        return max(1, int(raw)) if raw else max(1, fallback)
    except ValueError:
        return max(1, fallback)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="refinelab", description="Re-randomization before fine-tuning: desk-scale lab.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", metavar="FILE", help="experiment config (sectioned key = value); defaults apply when omitted")
        p.add_argument(
            "--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
            help="override one config value; repeatable, recorded in the manifest",
        )
        p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--out", metavar="DIR", default=".", help="directory for artifacts and the manifest (default: .)")
        p.add_argument(
            "--workers", type=int, default=None, metavar="N",
            help="episode worker processes (default: $REFINE_WORKERS, then run.workers); results do not depend on N",
        )
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        if name == "report":
            p.add_argument("inputs", nargs="*", metavar="REPORT.json", help="report files (default: report.inputs)")
    return parser


# -- shared plumbing ---------------------------------------------------------


class Run:
    def __init__(self, args: argparse.Namespace, cfg: Config):
        self.args = args
        self.cfg = cfg
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.inputs: dict[str, bytes] = {}
        self.outputs: dict[str, bytes] = {}
        self.surgery: list[str] = []
        self.extra: dict = {}
        self.t0 = time.perf_counter()

    @property
    def workers(self) -> int:
        if self.args.workers is not None:
            return self.args.workers
        return _workers_default(self.cfg["run"]["workers"])

    def data_dir(self) -> Path:
        p = self.cfg["paths"]["data"]
        return Path(p) if p else self.out

    def checkpoint_path(self, default: str = "pretrained.rfck") -> Path:
        p = self.cfg["paths"]["checkpoint"]
        return Path(p) if p else self.out / default

    def read(self, path: Path) -> bytes:
        try:
            data = path.read_bytes()
        except OSError as exc:
            raise DataFailure(f"cannot read {path}: {exc.strerror}") from None
        self.inputs[str(path)] = data
        return data

    def write(self, name: str, data: bytes | str) -> Path:
        raw = data.encode() if isinstance(data, str) else data
        path = self.out / name
        path.write_bytes(raw)
        self.outputs[name] = raw
        return path

    def dataset(self, name: str) -> D.Dataset:
        return D.dataset_from_bytes(self.read(self.data_dir() / name))

    def stats(self) -> D.PixelStats:
        return D.PixelStats.from_dict(json.loads(self.read(self.data_dir() / "stats.json")))

    def checkpoint(self, default: str = "pretrained.rfck") -> B.ParamRegistry:
        from refinelab.checkpoint import from_bytes

        return from_bytes(self.read(self.checkpoint_path(default)))

    def target(self) -> D.Dataset:
        return self.dataset(f"novel_{self.cfg['data']['target']}.rfds")

    def finish(self) -> None:
        man = P.manifest(
            self.args.command, self.cfg.canonical_text(), {"run": self.cfg.seed, "rerand": self.cfg["rerand"]["seed"]},
            self.inputs, self.outputs, self.surgery, time.perf_counter() - self.t0, self.cfg.overrides,
            {"workers": self.workers, **self.extra},
        )
        path = self.out / f"{self.args.command}.manifest.json"
        path.write_text(json.dumps(man, indent=1, sort_keys=True) + "\n")


def _write_reports(run: Run, stem: str, reports: list[M.EvalReport], plot: str | None = None, baseline=()) -> None:
    run.write(f"{stem}.csv", M.reports_to_csv(reports))
    run.write(f"{stem}.json", M.reports_to_json(reports))
    run.write(f"{stem}.txt", M.render_table(reports))
    if plot:
        run.write(f"{stem}.svg", M.render_plot(reports, plot, baseline=baseline, title=stem))
    print(M.render_table(reports), end="")


# -- commands ----------------------------------------------------------------


def cmd_gen_data(run: Run) -> None:
    d = run.cfg["data"]
    base = int_list(d["base_classes"])
    novel = int_list(d["novel_classes"])
    if set(base) & set(novel):
        raise DataFailure(f"base and novel class sets overlap: {sorted(set(base) & set(novel))}")
    seed = run.cfg.seed
    src = D.generate_shapeworld(D.SOURCE, base, d["base_per_class"], d["image_size"], seed, "base")
    run.write("source.rfds", D.dataset_to_bytes(src))
    stats = D.PixelStats.of(src)
    run.write("stats.json", json.dumps(stats.to_dict(), indent=1) + "\n")
    for name in str_list(d["targets"]):
        spec = D.domain_by_name(name)
        ds = D.generate_shapeworld(spec, novel, d["novel_per_class"], d["image_size"], D.novel_seed(seed), "novel")
        D.assert_disjoint(src, ds)
        run.write(f"novel_{name}.rfds", D.dataset_to_bytes(ds))


def _keep_last_good(run: Run, exc: P.DivergenceError, name: str) -> None:
    if exc.last_good is not None:
        path = run.write(name, to_bytes(exc.last_good))
        print(f"refinelab: last good state saved to {path}", file=sys.stderr)


def cmd_pretrain(run: Run) -> None:
    src = run.dataset("source.rfds")
    try:
        reg, logbook = P.pretrain(run.cfg.pretrain(), src, run.stats(), run.cfg.backbone())
    except P.DivergenceError as exc:
        _keep_last_good(run, exc, "pretrained.last_good.rfck")
        raise
    run.write("pretrained.rfck", to_bytes(reg))
    run.extra["train_log"] = {
        "epoch_loss": logbook.losses, "epoch_accuracy": logbook.accuracies,
        "final_train_accuracy": logbook.final_train_accuracy,
    }
    print(f"final train accuracy {logbook.final_train_accuracy}")


def cmd_rerand(run: Run) -> None:
    reg = run.checkpoint()
    policy = run.cfg.policy(reg)
    run.surgery = rerandomize(reg, policy)
    run.write("rerand.rfck", to_bytes(reg))
    run.write("surgery.json", report_json(run.surgery) + "\n")
    run.extra["policy"] = policy.to_text()
    print(report_json(run.surgery))


def cmd_simclr(run: Run) -> None:
    start = None if run.cfg["simclr"]["start"] == "fresh" else run.checkpoint()
    try:
        reg, logbook = P.simclr_pretrain(start, run.target(), run.cfg.simclr(), run.stats(), run.cfg.backbone())
    except P.DivergenceError as exc:
        _keep_last_good(run, exc, "simclr.last_good.rfck")
        raise
    run.write("simclr.rfck", to_bytes(reg))
    run.extra["train_log"] = {"epoch_loss": logbook.losses, "first_batch_loss": logbook.first_batch_loss}


def _method(run: Run, reg: B.ParamRegistry) -> P.MethodSpec:
    name = run.cfg["eval"]["method"]
    if name == "linear":
        return P.MethodSpec.linear()
    if name in ("refine", "transfer_rr_simclr"):
        return P.MethodSpec(name, run.cfg.policy(reg))
    return P.MethodSpec(name)


def cmd_eval(run: Run) -> None:
    reg = run.checkpoint()
    method = _method(run, reg)
    target = run.target()
    stats = run.stats()
    reports = []
    for k in run.cfg.shots():
        params = run.cfg.eval_params(run.workers)
        params = P.EvalParams(params.n, k, params.k_q, params.T, params.seed, params.workers)
        ev = P.evaluate_detailed(
            reg, method, target, stats, params, run.cfg.finetune(),
            per_episode_rerand=run.cfg["rerand"]["per_episode"],
        )
        run.surgery = ev.surgery
        reports.append(ev.report)
    _write_reports(run, "eval", reports)


def cmd_probe(run: Run) -> None:
    reg = run.checkpoint()
    target = run.target()
    stats = run.stats()
    reports = []
    for k in run.cfg.shots():
        p = run.cfg.eval_params(run.workers)
        reports += P.stage_probe(reg, target, stats, P.EvalParams(p.n, k, p.k_q, p.T, p.seed, p.workers), run.cfg.finetune())
    _write_reports(run, "probe", reports, "stage_trend")


def cmd_ablate_where(run: Run) -> None:
    reg = run.checkpoint()
    r = run.cfg["rerand"]
    presets = P.where_presets(run.cfg["ablate"]["where"], reg, r["distribution"], r["seed"])
    reports = P.ablate_where(
        reg, run.target(), run.stats(), presets, run.cfg.eval_params(run.workers), run.cfg.shots(), run.cfg.finetune()
    )
    base = [rep for rep in reports if rep.method == "none"]
    _write_reports(run, "ablate_where", [rep for rep in reports if rep.method != "none"] or reports,
                   "stage_trend", baseline=base)


def cmd_ablate_how(run: Run) -> None:
    reg = run.checkpoint()
    dists = str_list(run.cfg["ablate"]["distributions"])
    reports = P.ablate_how(
        reg, run.target(), run.stats(), dists, run.cfg.eval_params(run.workers), run.cfg.shots(),
        run.cfg.finetune(), run.cfg["rerand"]["seed"],
    )
    _write_reports(run, "ablate_how", reports, "ablation_bars")


def cmd_report(run: Run) -> None:
    paths = run.args.inputs or str_list(run.cfg["report"]["inputs"])
    if not paths:
        raise ConfigError("report needs input JSON files (positional or report.inputs)")
    reports = []
    for p in paths:
        try:
            items = json.loads(run.read(Path(p)))
            reports += [M.EvalReport.from_dict(d) for d in items]
        except (ValueError, KeyError, TypeError) as exc:
            raise DataFailure(f"{p}: not a report file ({exc})") from None
    _write_reports(run, "report", reports, run.cfg["report"]["plot"])


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "rerand": cmd_rerand,
    "simclr": cmd_simclr,
    "eval": cmd_eval,
    "probe-stages": cmd_probe,
    "ablate-where": cmd_ablate_where,
    "ablate-how": cmd_ablate_how,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"run.seed={args.seed}")
        cfg = load_config(args.config, overrides)
        run = Run(args, cfg)
        HANDLERS[args.command](run)
        run.finish()
    except (ConfigError, PolicyError, P.MethodError, B.RegistryError) as exc:
        print(f"refinelab: config error: {exc}", file=sys.stderr)
        return 1
    except (DataFailure, D.DataError, CheckpointError, OSError) as exc:
        print(f"refinelab: data error: {exc}", file=sys.stderr)
        return 2
    except (P.DivergenceError, NonFiniteGradientError, FloatingPointError) as exc:
        print(f"refinelab: numeric failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
