"""Config files, experiment grids, CSV logs and SVG learning curves.

Config files are flat ``key = value`` text with ``#`` comments.  Keys are
the :class:`~p3olab.trainer.TrainConfig` field names; missing keys take the
preset of the chosen environment.  Metric CSVs start with a schema tag
line, then a header row with the :class:`~p3olab.trainer.MetricsRow` fields
in order.  Floats are written with 9 significant digits, so reading a CSV
back gives each value rounded to 9 significant digits.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .envs import ENVIRONMENTS
from .objectives import VARIANTS
from .trainer import METRIC_FIELDS, History, MetricsRow, TrainConfig, TrainingError, default_config, run_training

SCHEMA_TAG = "# schema: p3olab-metrics/1"
SUMMARY_TAG = "# schema: p3olab-summary/1"
OUT_ENV_VAR = "P3OLAB_OUT"

_INT_FIELDS = {f.name for f in dataclasses.fields(MetricsRow)} & {"iteration", "env_steps"}
_OPTIONAL_FLOATS = {"gamma_v", "max_grad_norm"}
_BOOLS = {"normalize_adv"}


class ConfigError(ValueError):
    pass


class SchemaError(ValueError):
    pass


# config files


def _convert(key: str, raw: str, default):
    text = raw.strip()
    try:
        if key in _OPTIONAL_FLOATS:
            return None if text.lower() in ("none", "") else float(text)
        if key in _BOOLS:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if key == "hidden_sizes":
            return tuple(int(x) for x in text.replace("(", "").replace(")", "").split(",") if x.strip())
        if isinstance(default, bool):
            raise ValueError(text)
        if isinstance(default, int):
            if "." in text or "e" in text.lower():
                as_float = float(text)
                if as_float != int(as_float):
                    raise ValueError(text)
                return int(as_float)
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot read {raw.strip()!r} as {type(default).__name__}") from None


def parse_config(text: str, **overrides) -> TrainConfig:
    """Build a :class:`TrainConfig` from ``key = value`` lines.

    Unknown keys and malformed values raise :class:`ConfigError`.  Keyword
    ``overrides`` win over the file.
    """
    defaults = TrainConfig()
    known = {f.name for f in dataclasses.fields(TrainConfig)}
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"unknown config key {key!r} on line {lineno}")
        if key in values:
            raise ConfigError(f"config key {key!r} given twice")
        values[key] = _convert(key, raw, getattr(defaults, key))
    values.update(overrides)
    env = values.pop("env", defaults.env)
    if env not in ENVIRONMENTS:
        raise ConfigError(f"unknown environment {env!r}")
    try:
        return default_config(env, **values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def read_config(path, **overrides) -> TrainConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_config(text, **overrides)


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_config(config: TrainConfig) -> str:
    """Canonical text for ``config``: every field, in declaration order."""
    return "".join(f"{f.name} = {_format_value(getattr(config, f.name))}\n"
                   for f in dataclasses.fields(TrainConfig))


# CSV logs


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".9g")


def write_metrics_csv(rows: Iterable[MetricsRow], path) -> Path:
    path = Path(path)
    buf = io.StringIO()
    buf.write(SCHEMA_TAG + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_FIELDS)
    for row in rows:
        values = [getattr(row, name) for name in METRIC_FIELDS]
        if not all(np.isfinite(float(v)) for v in values):
            raise ValueError(f"non-finite metric in iteration {row.iteration}")
        writer.writerow([_fmt(v) for v in values])
    path.write_text(buf.getvalue())
    return path


def read_metrics_csv(path) -> list[MetricsRow]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != SCHEMA_TAG:
        raise SchemaError(f"{path}: missing schema tag {SCHEMA_TAG!r}")
    reader = csv.reader(lines[1:])
    header = tuple(next(reader, ()))
    if header != METRIC_FIELDS:
        missing = [c for c in METRIC_FIELDS if c not in header]
        extra = [c for c in header if c not in METRIC_FIELDS]
        raise SchemaError(f"{path}: column mismatch; missing {missing}, unexpected {extra}")
    rows = []
    for rec in reader:
        kw = {k: int(v) if k in _INT_FIELDS else float(v) for k, v in zip(header, rec)}
        rows.append(MetricsRow(**kw))
    return rows


# experiments


@dataclass
class Cell:
    """One (variant, env) pair trained over a list of seeds."""

    variant: str
    env: str
    seeds: Sequence[int]
    overrides: dict = field(default_factory=dict)
    tag: str = ""

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.env not in ENVIRONMENTS:
            raise ValueError(f"unknown environment {self.env!r}")
        if len(self.seeds) == 0:
            raise ValueError("seed list must be nonempty")

    @property
    def label(self) -> str:
        return f"{self.variant}-{self.tag}" if self.tag else self.variant

    def filename(self, seed: int) -> str:
        return f"{self.label}_{self.env}_s{seed}.csv"


@dataclass
class ExperimentSpec:
    cells: list
    out_dir: Optional[str] = None
    base_config: Optional[TrainConfig] = None
    save_params: bool = False

    def __post_init__(self):
        if not self.cells:
            raise ValueError("experiment needs at least one cell")

    def output_dir(self) -> Path:
        return Path(os.environ.get(OUT_ENV_VAR) or self.out_dir or "runs")


@dataclass
class ExperimentResult:
    csv_paths: dict
    summary_path: Path
    failures: dict

    @property
    def exit_status(self) -> int:
        return 1 if self.failures else 0


def cell_config(cell: Cell, seed: int, base: Optional[TrainConfig] = None) -> TrainConfig:
    if base is not None and base.env == cell.env:
        values = {f.name: getattr(base, f.name) for f in dataclasses.fields(TrainConfig)}
        values.pop("env")
        values.update(variant=cell.variant, seed=seed, **cell.overrides)
        return default_config(cell.env, **values)
    return default_config(cell.env, variant=cell.variant, seed=seed, **cell.overrides)


def final_return(rows: Sequence[MetricsRow]) -> float:
    """Greedy evaluation return after the last iteration."""
    return rows[-1].eval_return


def write_summary(groups: dict, path) -> Path:
    """``groups`` maps (label, env) to a list of per-seed final returns."""
    buf = io.StringIO()
    buf.write(SUMMARY_TAG + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("variant", "env", "n_seeds", "mean_final_return", "std_final_return"))
    for (label, env), finals in groups.items():
        arr = np.asarray(finals, dtype=np.float64)
        mean = float(arr.mean()) if arr.size else float("nan")
        std = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        w.writerow((label, env, arr.size, repr(mean), repr(std)))
    Path(path).write_text(buf.getvalue())
    return Path(path)


def read_summary(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != SUMMARY_TAG:
        raise SchemaError(f"{path}: missing schema tag {SUMMARY_TAG!r}")
    out = []
    for rec in csv.DictReader(lines[1:]):
        out.append(dict(variant=rec["variant"], env=rec["env"], n_seeds=int(rec["n_seeds"]),
                         mean=float(rec["mean_final_return"]), std=float(rec["std_final_return"])))
    return out


def run_experiment(spec: ExperimentSpec, log=None) -> ExperimentResult:
    """Train every (cell, seed), write one CSV each and a summary CSV.

    A failing run is recorded in ``failures`` (its partial history is still
    written) and the remaining runs go ahead.
    """
    out = spec.output_dir()
    out.mkdir(parents=True, exist_ok=True)
    paths: dict = {}
    failures: dict = {}
    groups: dict = {}
    for cell in spec.cells:
        finals = groups.setdefault((cell.label, cell.env), [])
        for seed in cell.seeds:
            path = out / cell.filename(seed)
            try:
                history = run_training(cell_config(cell, seed, spec.base_config))
            except (TrainingError, ValueError) as exc:
                failures[path.name] = str(exc)
                partial = getattr(exc, "history", None)
                write_metrics_csv(partial.rows if partial is not None else [], path)
                if log:
                    log(f"{path.name}: FAILED ({exc})")
                continue
            write_metrics_csv(history.rows, path)
            if spec.save_params:
                save_params(history, path.with_suffix(".npz"))
            paths[(cell.label, cell.env, seed)] = path
            # summarize the logged (rounded) values so the CSVs reproduce the summary
            finals.append(float(_fmt(final_return(history.rows))))
            if log:
                log(f"{path.name}: final return {finals[-1]:.6g}")
    summary = write_summary(groups, out / "summary.csv")
    return ExperimentResult(paths, summary, failures)


def ablation_cells(env: str, seeds: Sequence[int], variants=("p3o", "p3o_s", "p3o_k", "p3o_sk"),
                   **overrides) -> list[Cell]:
    return [Cell(v, env, list(seeds), dict(overrides)) for v in variants]


def grid_cells(variant: str, env: str, seeds: Sequence[int], epochs: Sequence[int] = (5, 10),
               minibatch_sizes: Sequence[int] = (32, 64), lrs: Sequence[float] = (1e-4, 3e-4),
               **overrides) -> list[Cell]:
    """Sensitivity grid over (number of epochs, minibatch size, step size)."""
    cells = []
    for e, mb, lr in itertools.product(epochs, minibatch_sizes, lrs):
        tag = f"e{e}-mb{mb}-lr{lr:g}"
        cells.append(Cell(variant, env, list(seeds),
                          {**overrides, "epochs": e, "minibatch_size": mb, "lr_policy": lr, "lr_value": lr}, tag))
    return cells


def save_params(history: History, path) -> Path:
    """Store trained network weights together with the canonical config text."""
    nets = history.nets
    arrays = {f"policy_{i}": a for i, a in enumerate(nets.policy.get_state())}
    arrays.update({f"value_{i}": a for i, a in enumerate(nets.value.get_state())})
    with open(path, "wb") as fh:
        np.savez(fh, config=np.array(format_config(history.config)), **arrays)
    return Path(path)


def load_params(path):
    """Rebuild ``(config, nets)`` from a file written by :func:`save_params`."""
    from .envs import make_env
    from .trainer import Nets

    with np.load(path) as data:
        config = parse_config(str(data["config"]))
        nets = Nets(config, make_env(config.env))
        n_pol, n_val = len(nets.policy.params), len(nets.value.params)
        try:
            nets.policy.set_state([data[f"policy_{i}"] for i in range(n_pol)])
            nets.value.set_state([data[f"value_{i}"] for i in range(n_val)])
        except KeyError as exc:
            raise ValueError(f"{path}: missing weights {exc}") from None
    return config, nets


# plots


def _series_key(path: Path) -> str:
    stem = path.stem
    head, _, seed = stem.rpartition("_s")
    return head if seed.isdigit() else stem


def emit_plot(csv_paths: Sequence, metric: str, out_path, title: Optional[str] = None) -> Path:
    """Line chart of ``metric`` against env steps, one series per run label.

    Runs whose file names differ only in the seed suffix are averaged into a
    mean line with a one-standard-deviation band.
    """
    if metric not in METRIC_FIELDS or metric in ("iteration", "env_steps"):
        raise SchemaError(f"unknown metric {metric!r}; choose from {METRIC_FIELDS[2:]}")
    if not csv_paths:
        raise ValueError("emit_plot: no CSV files given")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    groups: dict = {}
    for p in map(Path, csv_paths):
        groups.setdefault(_series_key(p), []).append(read_metrics_csv(p))

    with matplotlib.rc_context({"svg.hashsalt": "p3olab", "svg.fonttype": "none"}):
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, runs in groups.items():
            n = min(len(r) for r in runs)
            if n == 0:
                continue
            x = np.array([row.env_steps for row in runs[0][:n]])
            y = np.array([[getattr(row, metric) for row in r[:n]] for r in runs])
            ax.plot(x, y.mean(axis=0), label=f"{label} (n={len(runs)})", gid=f"series-{label}")
            if len(runs) > 1:
                sd = y.std(axis=0)
                ax.fill_between(x, y.mean(axis=0) - sd, y.mean(axis=0) + sd, alpha=0.25, gid=f"band-{label}")
        ax.set_xlabel("env_steps")
        ax.set_ylabel(metric)
        if title:
            ax.set_title(title)
        ax.legend(fontsize="small")
        fig.tight_layout()
        out_path = Path(out_path)
        fig.savefig(out_path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return out_path


def history_to_csv(history: History, path) -> Path:
    return write_metrics_csv(history.rows, path)
