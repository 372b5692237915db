"""Command-line workflow: simulate, split, estimate, predict, evaluate, report.

A run configuration is a YAML file::

    data: data/choices.csv         # choice data (written by ``simulate``)
    dgp: dgp.yaml                  # synthetic data generator, for ``simulate``
    split: {fraction: 0.2, seed: 42}
    models: [models/mnl.yaml, ...] # model specifications, in report order
    estimation: {draws: 500, seed: 7, tol: 1.0e-6, max_iter: 500, start: {}}
    null_ll: null                  # optional override of the fit-statistic null
    aggregation: null              # optional {group: [alternatives]} for share RMSE
    out: results

Relative paths are resolved against the configuration file's directory.
Outputs land in ``out``: ``data/``, ``split/``, and one directory per model
holding ``estimates.json``, ``estimates.txt`` and ``pred_<case>_<conditioning>.csv``.

Exit codes: 0 success (also for non-converged estimates, which are flagged),
2 usage or configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .data import ChoiceDataset, DataError, SplitDataset, load_dataset, split_dataset, write_dataset
from .dgp import DgpSpec, simulate_dataset
from .estimation import EstimateOptions, EstimationResult, maximize_ll
from .evaluation import Cell, EvaluationError, assemble_report, grid
from .kernels import ModelError
from .likelihood import THREADS_ENV, NumericalError
from .model import ModelSpec
from .prediction import CASES, CONDITIONING, POSTERIOR, PredictionError, PredictionRequest, PredictionTable, predict_case

log = logging.getLogger("choicecast")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 2, 3
SPLIT_FILES = {"estimation": "estimation.csv", "new_individuals": "new_individuals.csv",
               "last_choices": "last_choices.csv"}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    base: Path
    out: Path
    data: Path | None = None
    dgp: Path | None = None
    split_fraction: float = 0.2
    split_seed: int = 0
    models: list[Path] = field(default_factory=list)
    draws: int = 500
    seed: int = 0
    tol: float = 1e-6
    max_iter: int = 500
    start: dict[str, float] = field(default_factory=dict)
    null_ll: float | None = None
    aggregation: dict[str, list[str]] | None = None

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"configuration file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected a mapping at top level")
        return cls.from_dict(raw, path.parent)

    @classmethod
    def from_dict(cls, raw: dict[str, Any], base: Path) -> "RunConfig":
        known = {"data", "dgp", "split", "models", "estimation", "null_ll", "aggregation", "out"}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown configuration key(s): {', '.join(sorted(unknown))}")

        def resolve(p):
            return None if p is None else (base / p).resolve()

        split = raw.get("split") or {}
        est = raw.get("estimation") or {}
        return cls(
            base=base,
            out=resolve(raw.get("out", "results")),
            data=resolve(raw.get("data")),
            dgp=resolve(raw.get("dgp")),
            split_fraction=float(split.get("fraction", 0.2)),
            split_seed=int(split.get("seed", 0)),
            models=[resolve(m) for m in raw.get("models") or []],
            draws=int(est.get("draws", 500)),
            seed=int(est.get("seed", 0)),
            tol=float(est.get("tol", 1e-6)),
            max_iter=int(est.get("max_iter", 500)),
            start={str(k): float(v) for k, v in (est.get("start") or {}).items()},
            null_ll=None if raw.get("null_ll") is None else float(raw["null_ll"]),
            aggregation=raw.get("aggregation"),
        )

    @property
    def data_path(self) -> Path:
        return self.data if self.data is not None else self.out / "data" / "choices.csv"

    @property
    def split_dir(self) -> Path:
        return self.out / "split"

    def load_models(self) -> list[ModelSpec]:
        if not self.models:
            raise ConfigError("no models listed in the configuration")
        specs = []
        for p in self.models:
            if not p.is_file():
                raise ConfigError(f"model specification not found: {p}")
            specs.append(ModelSpec.load(p))
        names = [s.name for s in specs]
        if len(set(names)) != len(names):
            raise ConfigError("model names must be unique")
        return specs


# -- commands ---------------------------------------------------------------------
def cmd_simulate(args, cfg: RunConfig | None, dgp_path: Path) -> int:
    dgp = DgpSpec.load(dgp_path)
    if args.seed is not None:
        dgp.seed = args.seed
    ds, truth = simulate_dataset(dgp)
    target = cfg.data_path if cfg is not None else Path(args.out or ".") / "choices.csv"
    target.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(ds, target)
    truth.write(target.with_name("truth.csv"))
    print(f"wrote {ds.n_individuals} individuals, {ds.n_obs} observations to {target}")
    return EXIT_OK


def _load_data(path: Path) -> ChoiceDataset:
    if not path.is_file():
        raise ConfigError(f"input data not found: {path}")
    return load_dataset(path)


def cmd_split(args, cfg: RunConfig) -> int:
    ds = _load_data(cfg.data_path)
    seed = cfg.split_seed if args.seed is None else args.seed
    sp = split_dataset(ds, cfg.split_fraction, seed)
    out = cfg.split_dir
    out.mkdir(parents=True, exist_ok=True)
    manifest: dict[str, Any] = {"source": cfg.data_path.name, "holdout_fraction": cfg.split_fraction,
                                "seed": seed, "parts": {}}
    for part, fname in SPLIT_FILES.items():
        sub = getattr(sp, part)
        path = out / fname
        if sub is None:
            path.unlink(missing_ok=True)
            manifest["parts"][part] = {"file": None, "individuals": 0, "observations": 0}
            continue
        write_dataset(sub, path)
        manifest["parts"][part] = {"file": fname, "individuals": sub.n_individuals, "observations": sub.n_obs}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    for part, info in manifest["parts"].items():
        print(f"{part:16s} {info['individuals']:7d} individuals {info['observations']:8d} observations")
    return EXIT_OK


def load_split(cfg: RunConfig) -> SplitDataset:
    manifest = cfg.split_dir / "manifest.json"
    if not manifest.is_file():
        raise ConfigError(f"no split found in {cfg.split_dir}; run 'split' first")
    info = json.loads(manifest.read_text(encoding="utf-8"))
    parts = {}
    for part, meta in info["parts"].items():
        parts[part] = None if meta["file"] is None else load_dataset(cfg.split_dir / meta["file"])
    if parts["estimation"] is None:
        raise ConfigError("split has no estimation sample")
    return SplitDataset(parts["estimation"], parts["new_individuals"], parts["last_choices"], info["seed"])


def _selected(cfg: RunConfig, names: list[str] | None) -> list[ModelSpec]:
    specs = cfg.load_models()
    if names:
        missing = set(names) - {s.name for s in specs}
        if missing:
            raise ConfigError(f"unknown model(s): {', '.join(sorted(missing))}")
        specs = [s for s in specs if s.name in names]
    return specs


def cmd_estimate(args, cfg: RunConfig) -> int:
    sp = load_split(cfg)
    for spec in _selected(cfg, args.model):
        opts = EstimateOptions(
            start=cfg.start,
            n_draws=args.draws or cfg.draws,
            seed=cfg.seed if args.seed is None else args.seed,
            tol=cfg.tol,
            max_iter=cfg.max_iter,
            threads=args.threads,
            null_ll=cfg.null_ll,
        )
        result = maximize_ll(spec, sp.estimation, opts)
        out = cfg.out / spec.name
        out.mkdir(parents=True, exist_ok=True)
        result.write(out / "estimates.json")
        (out / "estimates.txt").write_text(result.table(), encoding="utf-8")
        flag = "" if result.converged else "  (NOT CONVERGED)"
        print(f"{spec.name:32s} LL {result.ll:12.3f}  k {result.k:3d}  BIC {result.bic:11.2f}{flag}")
    return EXIT_OK


def _requests(args) -> list[PredictionRequest]:
    cases = [args.case] if args.case else list(CASES)
    conds = [args.conditioning] if args.conditioning else list(CONDITIONING)
    if args.case == "case2" and args.conditioning == POSTERIOR:
        PredictionRequest("case2", POSTERIOR)  # raises with the explanation
    return [PredictionRequest(c, k) for c in cases for k in conds if not (c == "case2" and k == POSTERIOR)]


def pred_path(cfg: RunConfig, model: str, cell: Cell | PredictionRequest) -> Path:
    return cfg.out / model / f"pred_{cell.case}_{cell.conditioning}.csv"


def cmd_predict(args, cfg: RunConfig) -> int:
    requests = _requests(args)
    sp = load_split(cfg)
    for spec in _selected(cfg, args.model):
        est_file = cfg.out / spec.name / "estimates.json"
        if not est_file.is_file():
            raise ConfigError(f"no estimates for {spec.name}; run 'estimate' first")
        result = EstimationResult.load(est_file)
        draws = args.draws or result.n_draws or cfg.draws
        seed = result.seed if result.seed is not None else cfg.seed
        for req in requests:
            # conditionals are only reported for models with random heterogeneity
            if req.conditioning == POSTERIOR and not spec.has_heterogeneity and not args.conditioning:
                continue
            if req.conditioning == POSTERIOR and not spec.panel:
                continue
            pt = predict_case(spec, result.params(), sp, req, draws, seed, args.threads, spec.name)
            path = pred_path(cfg, spec.name, req)
            if pt is None:
                path.unlink(missing_ok=True)
                print(f"{spec.name:32s} {req.case} {req.conditioning:9s} (no observations)")
                continue
            pt.write(path)
            print(f"{spec.name:32s} {req.case} {req.conditioning:9s} {len(pt):7d} rows")
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    specs = cfg.load_models()
    models = [(s.name, s.has_heterogeneity and s.panel) for s in specs]
    tables: dict[Cell, PredictionTable | None] = {}
    for cell in grid(models):
        path = pred_path(cfg, cell.model, cell)
        tables[cell] = PredictionTable.read(path) if path.is_file() else None
    report = assemble_report(models, tables, cfg.aggregation)
    cfg.out.mkdir(parents=True, exist_ok=True)
    report.write(cfg.out)
    missing = sum(r["status"] != "ok" for r in report.rows)
    print(f"{len(report.rows)} cells evaluated, {missing} gap(s); wrote metrics.csv and report.json")
    return EXIT_OK


def render_report(cfg: RunConfig) -> str:
    specs = cfg.load_models()
    lines = ["Model fit on the estimation sample", ""]
    lines.append(f"{'model':32s} {'k':>4s} {'LL':>12s} {'adj.rho2':>9s} {'BIC':>11s} {'conv':>5s}")
    for s in specs:
        f = cfg.out / s.name / "estimates.json"
        if not f.is_file():
            lines.append(f"{s.name:32s} {'NA':>4s}")
            continue
        r = EstimationResult.load(f)
        lines.append(f"{s.name:32s} {r.k:4d} {r.ll:12.2f} {r.adj_rho2:9.4f} {r.bic:11.2f} "
                     f"{'yes' if r.converged else 'no':>5s}")
    report_file = cfg.out / "report.json"
    if report_file.is_file():
        cells = json.loads(report_file.read_text(encoding="utf-8"))["cells"]
        lines += ["", "Prediction performance", "",
                  f"{'model':32s} {'case':6s} {'cond':9s} {'avg P(chosen)':>13s} {'share RMSE':>11s}"]
        for c in cells:
            if c["status"] != "ok":
                lines.append(f"{c['model']:32s} {c['case']:6s} {c['conditioning']:9s} {'NA':>13s} {'NA':>11s}")
            else:
                lines.append(f"{c['model']:32s} {c['case']:6s} {c['conditioning']:9s} "
                             f"{c['avg_chosen_prob']:13.4f} {c['rmse_shares']:11.4f}")
    return "\n".join(lines) + "\n"


def cmd_report(args, cfg: RunConfig) -> int:
    text = render_report(cfg)
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / "report.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


# -- entry point -------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="run configuration (YAML)")
    common.add_argument("--out", type=Path, help="output directory (overrides the configuration)")
    common.add_argument("--seed", type=int, help="seed override (DGP, split or draws, by command)")
    common.add_argument("--draws", type=int, help="number of simulation draws")
    common.add_argument("--threads", type=int,
                        help=f"worker threads for likelihood evaluation (default ${THREADS_ENV} or 1)")
    common.add_argument("--model", action="append", help="restrict to this model name (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="choicecast", description="Discrete choice estimation and prediction.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="generate a synthetic dataset")
    sub.add_parser("split", parents=[common], help="split data into estimation and holdout parts")
    sub.add_parser("estimate", parents=[common], help="estimate every configured model")
    pp = sub.add_parser("predict", parents=[common], help="write prediction tables")
    pp.add_argument("--case", choices=CASES)
    pp.add_argument("--conditioning", choices=CONDITIONING)
    sub.add_parser("evaluate", parents=[common], help="compute metrics from prediction tables")
    sub.add_parser("report", parents=[common], help="print fit and prediction summary")
    return p


def _dispatch(args) -> int:
    cfg_path: Path = args.config
    if not cfg_path.is_file():
        raise ConfigError(f"configuration file not found: {cfg_path}")
    raw = yaml.safe_load(cfg_path.read_text(encoding="utf-8")) or {}
    if args.command == "simulate" and isinstance(raw, dict) and "true_params" in raw:
        return cmd_simulate(args, None, cfg_path)
    cfg = RunConfig.load(cfg_path)
    if args.out is not None:
        cfg.out = args.out.resolve()
    if args.threads is not None and args.threads < 1:
        raise ConfigError("--threads must be at least 1")
    if args.draws is not None and args.draws < 1:
        raise ConfigError("--draws must be at least 1")
    if args.command == "simulate":
        if cfg.dgp is None:
            raise ConfigError("configuration has no 'dgp' entry")
        if not cfg.dgp.is_file():
            raise ConfigError(f"DGP configuration not found: {cfg.dgp}")
        return cmd_simulate(args, cfg, cfg.dgp)
    handler = {"split": cmd_split, "estimate": cmd_estimate, "predict": cmd_predict,
               "evaluate": cmd_evaluate, "report": cmd_report}[args.command]
    return handler(args, cfg)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except NumericalError as exc:
        print(f"choicecast: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, DataError, ModelError, PredictionError, EvaluationError,
            FileNotFoundError, yaml.YAMLError, KeyError, ValueError) as exc:
        print(f"choicecast: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
