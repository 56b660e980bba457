"""Command-line entry point: ``ddmlag collect | train | eval | plot``.

Each command stages its artifacts in a scratch directory and moves them into
``--out-dir`` only after every step succeeded, then appends one entry to the
directory's ``manifest.json``.  Failures print a single ``error[<kind>]:``
line on stderr and exit with the code for that kind (see ``--help``).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import shutil
import sys
import tempfile
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, strip_prefix
from .diffusion import DiffusionPolicy
from .driveworld import PRESETS, ConfigurationError, Scenario, preset
from .evaluation import EvaluationError, comparison_table, evaluate, write_metrics_csv
from .expert import DatasetError, collect, load, save
from .trainer import ABLATIONS, ConfigError, TrainConfig, TrainingError, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_SCHEMA = 4
EXIT_CONFIG = 5
EXIT_RUNTIME = 6

EXIT_HELP = f"""exit codes:
  {EXIT_OK}  success
  {EXIT_USAGE}  usage error (unknown flag, bad value)
  {EXIT_MISSING}  missing input file
  {EXIT_SCHEMA}  input file malformed or schema/dimension mismatch
  {EXIT_CONFIG}  invalid configuration
  {EXIT_RUNTIME}  runtime failure (non-finite training value, I/O error)
"""

MANIFEST = "manifest.json"
PLOT_FILES = ("losses.svg", "lambda_cost.svg", "reward.svg")


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code, self.kind = code, kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, "usage", message)


# ---------------------------------------------------------------- config / inputs

def _read_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_MISSING, "missing-input", f"config file not found: {path}")
    try:
        import tomllib
    except ModuleNotFoundError:
        import tomli as tomllib
    try:
        return tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise CliError(EXIT_CONFIG, "config", f"{path}: {exc}") from None


def _section(config: dict, name: str) -> dict:
    value = config.get(name, {})
    if not isinstance(value, dict):
        raise CliError(EXIT_CONFIG, "config", f"[{name}] must be a table")
    return dict(value)


def _pick(args, table: dict, key: str, default):
    """CLI flag beats config file beats built-in default."""
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    return table.get(key, default)


def _require_file(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_MISSING, "missing-input", f"{what} not found: {path}")
    return p


def _density(value):
    if isinstance(value, str) and value not in ("low", "high"):
        try:
            return float(value)
        except ValueError:
            raise CliError(EXIT_CONFIG, "config", f"density must be low, high or a number: {value}") from None
    return value


def resolve_scenario(name_or_path: str, density) -> Scenario:
    """A preset name, or a path to a scenario text file."""
    if name_or_path in PRESETS:
        return preset(name_or_path, _density(density))
    p = Path(name_or_path)
    if p.suffix or os.sep in name_or_path:
        try:
            return Scenario.from_text(_require_file(name_or_path, "scenario file").read_text())
        except ConfigurationError as exc:
            raise CliError(EXIT_SCHEMA, "schema", f"{name_or_path}: {exc}") from None
    raise CliError(EXIT_CONFIG, "config", f"unknown scenario {name_or_path!r}; presets: {', '.join(PRESETS)}")


def load_policy(path: str) -> DiffusionPolicy:
    p = _require_file(path, "policy checkpoint")
    try:
        meta, arrays = load_checkpoint(p)
        return DiffusionPolicy.from_state(meta["policy"], strip_prefix("policy", arrays))
    except (CheckpointError, KeyError) as exc:
        raise CliError(EXIT_SCHEMA, "schema", f"{path}: not a policy checkpoint ({exc})") from None


# ---------------------------------------------------------------- staging / manifest

class Staging:
    """Scratch directory; ``commit`` creates ``out_dir`` and moves the files in."""

    def __init__(self, out_dir: Path):
        self.out_dir = out_dir
        self.dir = Path(tempfile.mkdtemp(prefix="ddmlag-"))
        self.names: list[str] = []

    def path(self, name: str) -> Path:
        self.names.append(name)
        return self.dir / name

    def commit(self) -> list[str]:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        for name in self.names:
            shutil.move(self.dir / name, self.out_dir / name)
        self.discard()
        return [str(self.out_dir / n) for n in self.names]

    def discard(self) -> None:
        shutil.rmtree(self.dir, ignore_errors=True)


def append_manifest(out_dir: Path, entry: dict) -> None:
    path = out_dir / MANIFEST
    history = {"runs": []}
    if path.is_file():
        try:
            history = json.loads(path.read_text())
        except json.JSONDecodeError:
            raise CliError(EXIT_SCHEMA, "schema", f"{path}: corrupt manifest") from None
    history["runs"].append(entry)
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(history, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


# ---------------------------------------------------------------- commands

def cmd_collect(args, config: dict, stage: Staging, say) -> dict:
    table = _section(config, "collect")
    name = _pick(args, table, "scenario", "straight_curve")
    density = _pick(args, table, "density", "low")
    episodes = int(_pick(args, table, "episodes", 100))
    noise = float(_pick(args, table, "noise", 0.0))
    reckless = float(_pick(args, table, "reckless_fraction", 0.0))
    output = _pick(args, table, "output", "dataset.ddt")
    if episodes < 1:
        raise CliError(EXIT_CONFIG, "config", "episodes must be >= 1")
    if not 0.0 <= reckless <= 1.0 or noise < 0.0:
        raise CliError(EXIT_CONFIG, "config", "noise must be >= 0 and reckless_fraction in [0, 1]")
    scenario = resolve_scenario(name, density)
    ds = collect(scenario, episodes, args.seed, noise=noise, reckless_fraction=reckless)
    save(ds, stage.path(output))
    for w in ds.metadata["warnings"]:
        say(f"warning: {w}")
    say(f"collected {len(ds)} transitions from {episodes} episodes "
        f"(mean return {ds.metadata['mean_return']:.2f}, mean cost {ds.metadata['mean_cost']:.3f})")
    return {"scenario": name, "density": density, "episodes": episodes, "noise": noise,
            "reckless_fraction": reckless, "output": output}


def cmd_train(args, config: dict, stage: Staging, say) -> dict:
    table = _section(config, "train")
    dataset_path = _pick(args, table, "dataset", None)
    if dataset_path is None:
        raise CliError(EXIT_USAGE, "usage", "train needs --dataset")
    scenario_name = _pick(args, table, "scenario", None)
    density = _pick(args, table, "density", None)
    tc_keys = {f.name for f in TrainConfig.__dataclass_fields__.values()}
    values = {k: v for k, v in table.items() if k in tc_keys}
    unknown = set(table) - tc_keys - {"dataset", "scenario", "density"}
    if unknown:
        raise CliError(EXIT_CONFIG, "config", f"unknown [train] keys: {', '.join(sorted(unknown))}")
    for key in ("epochs", "ablation", "eval_interval", "eval_episodes", "hidden", "batch_size"):
        if getattr(args, key, None) is not None:
            values[key] = getattr(args, key)
    values["seed"] = args.seed
    try:
        tc = TrainConfig.from_mapping(values)
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, "config", str(exc)) from None

    try:
        ds = load(_require_file(dataset_path, "dataset"))
    except DatasetError as exc:
        raise CliError(EXIT_SCHEMA, "schema", str(exc)) from None
    if scenario_name is None:
        scenario_name = ds.metadata.get("scenario")
        if density is None:
            density = ds.metadata.get("traffic_density")
    scenario = resolve_scenario(scenario_name, "low" if density is None else density) if scenario_name else None
    try:
        result = train(ds, tc, scenario, log=say)
    except ConfigError as exc:
        raise CliError(EXIT_SCHEMA, "schema", str(exc)) from None
    except TrainingError as exc:
        raise CliError(EXIT_RUNTIME, "training", str(exc)) from None
    result.save(stage.path("policy.ckpt"), stage.path("critics.ckpt"))
    result.report.write_csv(stage.path("report.csv"))
    say(f"trained {tc.epochs} epochs; final lambda {result.pid.lam:.4f}")
    return {"dataset": str(dataset_path), "scenario": scenario_name, "density": density,
            "train": asdict(tc)}


def _parse_compare(items: list[str]) -> dict[str, str]:
    named = {}
    for item in items:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise CliError(EXIT_USAGE, "usage", f"--compare expects NAME=PATH, got {item!r}")
        if name in named:
            raise CliError(EXIT_USAGE, "usage", f"duplicate --compare name {name!r}")
        named[name] = path
    return named


def cmd_eval(args, config: dict, stage: Staging, say) -> dict:
    table = _section(config, "eval")
    name = _pick(args, table, "scenario", "intersection")
    density = _pick(args, table, "density", "low")
    episodes = int(_pick(args, table, "episodes", 20))
    if episodes < 1:
        raise CliError(EXIT_CONFIG, "config", "episodes must be >= 1")
    named = _parse_compare(args.compare or [])
    if args.policy is not None:
        named = {"policy": args.policy, **named}
    if not named:
        raise CliError(EXIT_USAGE, "usage", "eval needs --policy or --compare")
    scenario = resolve_scenario(name, density)
    policies = {n: load_policy(p) for n, p in named.items()}
    summaries = {}
    for n, pol in policies.items():
        try:
            summaries[n] = evaluate(pol, scenario, episodes, args.seed)
        except EvaluationError as exc:
            raise CliError(EXIT_SCHEMA, "schema", f"{named[n]}: {exc}") from None
        agg = summaries[n].aggregate()
        say(f"{n}: reward {agg['mean_reward']:.2f} cost {agg['mean_cost']:.3f} "
            f"safe length {agg['mean_safe_length']:.1f}")
    if len(summaries) == 1:
        write_metrics_csv(next(iter(summaries.values())), stage.path("metrics.csv"))
    else:
        for n, s in summaries.items():
            write_metrics_csv(s, stage.path(f"metrics_{n}.csv"))
        stage.path("comparison.md").write_text(comparison_table(summaries))
    return {"scenario": name, "density": density, "episodes": episodes, "policies": named}


# ---------------------------------------------------------------- plotting

def read_numeric_csv(path: Path, required: list[str]) -> dict[str, np.ndarray]:
    """Columns of a numeric CSV; raises with the offending line number."""
    text = path.read_text()
    if not text.strip():
        raise CliError(EXIT_SCHEMA, "empty-input", f"{path}: empty CSV")
    reader = csv.reader(text.splitlines())
    header = next(reader)
    missing = [c for c in required if c not in header]
    if missing:
        raise CliError(EXIT_SCHEMA, "parse", f"{path}:1: missing columns {', '.join(missing)}")
    cols = {c: [] for c in header}
    for lineno, row in enumerate(reader, start=2):
        if len(row) != len(header):
            raise CliError(EXIT_SCHEMA, "parse", f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        for c, v in zip(header, row):
            try:
                cols[c].append(float(v))
            except ValueError:
                raise CliError(EXIT_SCHEMA, "parse", f"{path}:{lineno}: non-numeric {c}={v!r}") from None
    if not cols[header[0]]:
        raise CliError(EXIT_SCHEMA, "empty-input", f"{path}: no data rows")
    return {c: np.array(v) for c, v in cols.items()}


def _figure(title: str, xlabel: str):
    import matplotlib
    matplotlib.use("svg")
    matplotlib.rcParams["svg.hashsalt"] = "ddmlag"
    matplotlib.rcParams["svg.fonttype"] = "path"
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    return fig, ax


def _save_svg(fig, path: Path) -> None:
    import matplotlib.pyplot as plt
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def plot_report(cols: dict[str, np.ndarray], stage: Staging) -> None:
    epoch = cols["epoch"] + 1
    fig, ax = _figure("Training losses", "epoch")
    for key in ("bc_loss", "q_loss", "critic_loss", "cost_critic_loss"):
        ax.plot(epoch, cols[key], label=key, linewidth=0.8)
    ax.legend()
    _save_svg(fig, stage.path(PLOT_FILES[0]))

    ev = cols["evaluated"] > 0
    fig, ax = _figure("Multiplier and evaluation cost", "epoch")
    ax.plot(epoch, cols["lambda"], label="lambda", linewidth=0.8)
    if ev.any():
        ax.plot(epoch[ev], cols["eval_cost"][ev], "o-", label="eval cost", markersize=3)
    ax.legend()
    _save_svg(fig, stage.path(PLOT_FILES[1]))

    fig, ax = _figure("Evaluation reward", "epoch")
    if ev.any():
        ax.plot(epoch[ev], cols["eval_reward"][ev], "o-", markersize=3)
    _save_svg(fig, stage.path(PLOT_FILES[2]))


def plot_metrics(path: Path, stage: Staging) -> None:
    rows = path.read_text().splitlines()
    if not rows:
        raise CliError(EXIT_SCHEMA, "empty-input", f"{path}: empty CSV")
    header = next(csv.reader(rows[:1]))
    if header[:5] != ["episode", "seed", "reward", "cost", "safe_length"]:
        raise CliError(EXIT_SCHEMA, "parse", f"{path}:1: not a metrics CSV")
    reward, cost, safe = [], [], []
    for lineno, row in enumerate(csv.reader(rows[1:]), start=2):
        if row and row[0] == "aggregate":
            continue
        if len(row) != len(header):
            raise CliError(EXIT_SCHEMA, "parse", f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            reward.append(float(row[2]))
            cost.append(float(row[3]))
            safe.append(float(row[4]))
        except ValueError:
            raise CliError(EXIT_SCHEMA, "parse", f"{path}:{lineno}: non-numeric value") from None
    if not reward:
        raise CliError(EXIT_SCHEMA, "empty-input", f"{path}: no episode rows")
    ep = np.arange(len(reward))
    stem = path.stem
    for suffix, values, label in (("reward", reward, "episode reward"), ("cost", cost, "episode cost"),
                                  ("safe_length", safe, "safe running length [m]")):
        fig, ax = _figure(f"{stem}: {label}", "episode")
        ax.bar(ep, values)
        _save_svg(fig, stage.path(f"{stem}_{suffix}.svg"))


REPORT_REQUIRED = ["epoch", "bc_loss", "q_loss", "critic_loss", "cost_critic_loss", "lambda", "evaluated",
                   "eval_reward", "eval_cost"]


def cmd_plot(args, config: dict, stage: Staging, say) -> dict:
    inputs = [_require_file(p, "CSV") for p in args.inputs]
    for p in inputs:
        first = p.read_text().split("\n", 1)[0]
        if first.startswith("episode,"):
            plot_metrics(p, stage)
        else:
            plot_report(read_numeric_csv(p, REPORT_REQUIRED), stage)
    say(f"wrote {len(stage.names)} plot files")
    return {"inputs": [str(p) for p in inputs]}


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--config", help="TOML file with [collect], [train], [eval] tables; flags override it")
    common.add_argument("--out-dir", default=".", help="directory for artifacts and manifest.json")
    common.add_argument("--quiet", action="store_true", help="suppress progress output")

    parser = _Parser(prog="ddmlag", description="Diffusion policy with PID Lagrangian: collect, train, eval, plot.",
                     epilog=EXIT_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=f"ddmlag {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    kw = dict(parents=[common], epilog=EXIT_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)

    p = sub.add_parser("collect", help="roll the scripted expert into a .ddt dataset", **kw)
    p.add_argument("--scenario", help="preset name or scenario file (default straight_curve)")
    p.add_argument("--density", help="traffic density: low, high or a number")
    p.add_argument("--episodes", type=int)
    p.add_argument("--noise", type=float, help="std of Gaussian action noise")
    p.add_argument("--reckless-fraction", dest="reckless_fraction", type=float,
                   help="share of episodes driven by the non-yielding expert")
    p.add_argument("--output", help="dataset file name inside --out-dir (default dataset.ddt)")

    p = sub.add_parser("train", help="train policy and critics from a dataset", **kw)
    p.add_argument("--dataset")
    p.add_argument("--scenario", help="evaluation scenario (default: the one recorded in the dataset)")
    p.add_argument("--density")
    p.add_argument("--ablation", choices=ABLATIONS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--eval-interval", dest="eval_interval", type=int)
    p.add_argument("--eval-episodes", dest="eval_episodes", type=int)

    p = sub.add_parser("eval", help="evaluate one or more policy checkpoints", **kw)
    p.add_argument("--policy", help="policy checkpoint")
    p.add_argument("--compare", action="append", metavar="NAME=PATH",
                   help="additional named checkpoint; repeat for an ablation table")
    p.add_argument("--scenario")
    p.add_argument("--density")
    p.add_argument("--episodes", type=int)

    p = sub.add_parser("plot", help="render report.csv or metrics.csv files as SVG", **kw)
    p.add_argument("inputs", nargs="+", help="CSV files")
    return parser


COMMANDS = {"collect": cmd_collect, "train": cmd_train, "eval": cmd_eval, "plot": cmd_plot}


def main(argv=None) -> int:
    stage = None
    try:
        args = build_parser().parse_args(argv)
        say = (lambda msg: None) if args.quiet else (lambda msg: print(msg, flush=True))
        config = _read_config(args.config)
        unknown = set(config) - {"collect", "train", "eval", "plot"}
        if unknown:
            raise CliError(EXIT_CONFIG, "config", f"unknown config tables: {', '.join(sorted(unknown))}")
        out_dir = Path(args.out_dir)
        start = time.perf_counter()
        stage = Staging(out_dir)
        settings = COMMANDS[args.command](args, config, stage, say)
        artifacts = stage.commit()
        append_manifest(out_dir, {
            "command": args.command,
            "argv": list(sys.argv[1:] if argv is None else argv),
            "config": settings,
            "seed": args.seed,
            "artifacts": artifacts,
            "version": __version__,
            "duration_s": round(time.perf_counter() - start, 3),
        })
        return EXIT_OK
    except CliError as exc:
        code, kind, msg = exc.code, exc.kind, str(exc)
    except (ConfigError, ConfigurationError) as exc:
        code, kind, msg = EXIT_CONFIG, "config", str(exc)
    except OSError as exc:
        code, kind, msg = EXIT_RUNTIME, "io", str(exc)
    finally:
        if stage is not None:
            stage.discard()
    print(f"error[{kind}]: {' '.join(msg.split())}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
