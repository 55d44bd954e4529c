"""Declarative desk-scale experiments that check orderings between training setups.

A spec names a synthetic dataset, a base training configuration, a grid of
labelled overrides and a list of ordering assertions.  Every cell is trained
for each seed on each cross-validation fold; assertions are judged on the
seed-and-fold averaged TAR at ``metric_far``.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ._io import atomic_write_text
from .dataset import generate_synthetic, split_folds
from .evaluation import evaluate
from .imprinting import ImprintConfig
from .training import TrainConfig, TrainingError, train

ASSERT_OPS = ("max", "ge")


class ExperimentError(RuntimeError):
    pass


@dataclass(frozen=True)
class Assertion:
    """``left`` is the best cell (``max``) or at least every cell in ``right`` (``ge``).

    With ``slack="sd"`` a ``ge`` comparison tolerates a shortfall of one pooled
    standard deviation of the two cells.
    """

    op: str
    left: str
    right: tuple[str, ...] = ()
    slack: str = "none"

    def __post_init__(self) -> None:
        if self.op not in ASSERT_OPS:
            raise ValueError(f"assertion op must be one of {ASSERT_OPS}")
        if self.slack not in ("none", "sd"):
            raise ValueError("slack must be 'none' or 'sd'")
        if self.op == "ge" and not self.right:
            raise ValueError("'ge' needs at least one right-hand cell")

    def describe(self) -> str:
        if self.op == "max":
            return f"{self.left} is best"
        tail = " (within 1 s.d.)" if self.slack == "sd" else ""
        return f"{self.left} >= {', '.join(self.right)}{tail}"

    def to_dict(self) -> dict:
        return {"op": self.op, "left": self.left, "right": list(self.right), "slack": self.slack}


@dataclass(frozen=True)
class Cell:
    label: str
    overrides: dict = field(default_factory=dict)


@dataclass
class ExperimentSpec:
    name: str
    dataset: dict
    grid: list[Cell]
    base: dict = field(default_factory=dict)
    assertions: list[Assertion] = field(default_factory=list)
    seeds: tuple[int, ...] = (0, 1, 2)
    folds: int = 3
    far_targets: tuple[float, ...] = (0.01, 0.001)
    metric_far: float = 0.01
    max_impostors: int | None = None
    title: str = ""

    def __post_init__(self) -> None:
        self.grid = [c if isinstance(c, Cell) else Cell(c["label"], dict(c.get("set", {}))) for c in self.grid]
        self.assertions = [a if isinstance(a, Assertion) else
                           Assertion(a["op"], a["left"], tuple(a.get("right", ())), a.get("slack", "none"))
                           for a in self.assertions]
        self.seeds = tuple(int(s) for s in self.seeds)
        self.far_targets = tuple(float(f) for f in self.far_targets)
        self.validate()

    def validate(self) -> None:
        if not self.grid:
            raise ValueError(f"experiment {self.name!r} has an empty grid")
        labels = [c.label for c in self.grid]
        if len(set(labels)) != len(labels):
            raise ValueError("grid labels must be unique")
        for a in self.assertions:
            for ref in (a.left, *a.right):
                if ref not in labels:
                    raise ValueError(f"assertion refers to unknown cell {ref!r}")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if self.folds < 2:
            raise ValueError("need at least two folds")
        if self.metric_far not in self.far_targets:
            raise ValueError("metric_far must be one of far_targets")
        for cell in self.grid:
            self.config_for(cell)  # surfaces bad overrides before any training

    def config_for(self, cell: Cell) -> TrainConfig:
        return build_config(self.base, cell.overrides)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "title": self.title,
            "dataset": self.dataset,
            "base": self.base,
            "grid": [{"label": c.label, "set": c.overrides} for c in self.grid],
            "assertions": [a.to_dict() for a in self.assertions],
            "seeds": list(self.seeds),
            "folds": self.folds,
            "far_targets": list(self.far_targets),
            "metric_far": self.metric_far,
            "max_impostors": self.max_impostors,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentSpec":
        known = {"name", "title", "dataset", "base", "grid", "assertions", "seeds", "folds",
                 "far_targets", "metric_far", "max_impostors"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown spec keys: {sorted(unknown)}")
        return cls(**data)


def load_spec(path) -> ExperimentSpec:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"experiment spec not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: not valid JSON ({exc})") from None
    return ExperimentSpec.from_dict(data)


def build_config(base: dict, overrides: dict) -> TrainConfig:
    """Merge overrides into base into the default config.

    ``imprint`` may be ``null`` (SGD head) or a partial dict merged over the
    current imprint settings.  ``steps_factor`` scales the step count.
    """
    merged = TrainConfig().to_dict()
    for layer in (base, overrides):
        layer = dict(layer)
        factor = layer.pop("steps_factor", None)
        for key, value in layer.items():
            if key == "imprint" and value is not None:
                current = merged.get("imprint") or ImprintConfig().to_dict()
                merged["imprint"] = {**current, **value}
            else:
                merged[key] = value
        if factor is not None:
            merged["steps"] = int(round(merged["steps"] * factor))
    unknown = set(merged) - set(TrainConfig().to_dict())
    if unknown:
        raise ValueError(f"unknown training settings: {sorted(unknown)}")
    return TrainConfig.from_dict(merged)


def selfie_counts(spec):
    """Dataset-parameter form of the selfie-count distribution.

    An int or list passes through; ``{"one_plus_poisson": lam}`` draws
    ``1 + Poisson(lam)`` selfies per identity.
    """
    if isinstance(spec, dict):
        if set(spec) != {"one_plus_poisson"}:
            raise ValueError(f"unknown selfie distribution {spec}")
        lam = float(spec["one_plus_poisson"])
        return lambda rng, n: 1 + rng.poisson(lam, n)
    return spec


def make_dataset(params: dict, seed: int):
    kw = dict(params)
    if "selfies_per_identity" in kw:
        kw["selfies_per_identity"] = selfie_counts(kw["selfies_per_identity"])
    return generate_synthetic(seed=seed, **kw)


# ---------------------------------------------------------------- running


@dataclass
class CellResult:
    label: str
    config: TrainConfig
    tars: np.ndarray  # (seeds, folds, fars)
    mean_trace: np.ndarray

    def values(self, far_index: int) -> np.ndarray:
        return self.tars[:, :, far_index].ravel()

    def mean(self, far_index: int) -> float:
        return float(self.values(far_index).mean())

    def std(self, far_index: int) -> float:
        v = self.values(far_index)
        return float(v.std(ddof=1)) if v.size > 1 else 0.0


@dataclass
class AssertionOutcome:
    assertion: Assertion
    passed: bool
    detail: str


@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    cells: list[CellResult]
    outcomes: list[AssertionOutcome]

    @property
    def passed(self) -> bool:
        return all(o.passed for o in self.outcomes)

    def cell(self, label: str) -> CellResult:
        for c in self.cells:
            if c.label == label:
                return c
        raise KeyError(label)


def _run_task(task: tuple) -> tuple[np.ndarray, np.ndarray]:
    """Train and score one (config, seed) over every fold."""
    dataset_params, config_dict, seed, folds, fars, max_impostors = task
    config = TrainConfig.from_dict(config_dict)
    ds = make_dataset(dataset_params, seed)
    split = split_folds(ds, folds, seed)
    tars = np.zeros((folds, len(fars)))
    traces = []
    for fold in range(folds):
        cfg = config.with_updates(seed=1000 * seed + fold)
        try:
            result = train(ds.subset(split.train_identities(fold)), cfg)
        except TrainingError as exc:
            raise TrainingError(f"seed {seed} fold {fold}: {exc}", exc.step, exc.trace) from None
        points, _ = evaluate(result.pair, ds.subset(split.test_identities(fold)), fars,
                             max_impostors, seed=cfg.seed)
        tars[fold] = [p.tar for p in points]
        traces.append(result.losses)
    return tars, np.mean(np.array(traces), axis=0)


_CACHE: dict[str, tuple[np.ndarray, np.ndarray]] = {}


def _task_key(task: tuple) -> str:
    return json.dumps(task, sort_keys=True, default=str)


def run_experiment(spec: ExperimentSpec, jobs: int = 1,
                   progress: Callable[[str], None] | None = None) -> ExperimentResult:
    """Run every grid cell for every seed, then judge the assertions.

    Identical (dataset, config, seed) tasks are computed once per process, so
    a default cell shared by several experiments is trained only once.
    """
    spec.validate()
    configs = [spec.config_for(c) for c in spec.grid]
    tasks = []
    for cfg in configs:
        for seed in spec.seeds:
            tasks.append((spec.dataset, cfg.to_dict(), seed, spec.folds, list(spec.far_targets),
                          spec.max_impostors))
    pending = [t for t in dict.fromkeys(_task_key(t) for t in tasks) if t not in _CACHE]
    by_key = {_task_key(t): t for t in tasks}
    if pending:
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                for key, out in zip(pending, pool.map(_run_task, [by_key[k] for k in pending])):
                    _CACHE[key] = out
        else:
            for key in pending:
                _CACHE[key] = _run_task(by_key[key])
                if progress:
                    progress(f"{spec.name}: finished {len(_CACHE)} tasks")

    cells = []
    for cell, cfg in zip(spec.grid, configs):
        outs = [_CACHE[_task_key((spec.dataset, cfg.to_dict(), s, spec.folds, list(spec.far_targets),
                                  spec.max_impostors))] for s in spec.seeds]
        tars = np.stack([o[0] for o in outs])
        trace = np.mean(np.stack([o[1] for o in outs]), axis=0) if cfg.steps else np.zeros(0)
        cells.append(CellResult(cell.label, cfg, tars, trace))
    k = spec.far_targets.index(spec.metric_far)
    result = ExperimentResult(spec, cells, [])
    result.outcomes = [judge(a, result, k) for a in spec.assertions]
    return result


def clear_cache() -> None:
    _CACHE.clear()


def judge(assertion: Assertion, result: ExperimentResult, far_index: int) -> AssertionOutcome:
    left = result.cell(assertion.left)
    lm = left.mean(far_index)
    right = assertion.right
    if assertion.op == "max":
        right = tuple(c.label for c in result.cells if c.label != assertion.left)
    parts, ok = [], True
    for label in right:
        other = result.cell(label)
        om = other.mean(far_index)
        slack = 0.0
        if assertion.slack == "sd":
            slack = math.sqrt((left.std(far_index) ** 2 + other.std(far_index) ** 2) / 2)
        good = lm >= om - slack
        ok &= good
        parts.append(f"{label}={om:.4f}" + (f" (slack {slack:.4f})" if slack else "") + ("" if good else " !"))
    return AssertionOutcome(assertion, ok, f"{assertion.left}={lm:.4f} vs " + ", ".join(parts))


# ---------------------------------------------------------------- reporting


def _pct(x: float) -> str:
    return f"{100 * x:.2f}"


def _far_label(far: float) -> str:
    return f"{100 * far:g}%"


def report_markdown(result: ExperimentResult) -> str:
    spec = result.spec
    fars = sorted(spec.far_targets)
    idx = [spec.far_targets.index(f) for f in fars]
    lines = [f"# {spec.name}", ""]
    if spec.title:
        lines += [spec.title, ""]
    lines += [
        f"Seeds {', '.join(map(str, spec.seeds))} x {spec.folds} folds; TAR in %, mean ± s.d. over all runs.",
        "",
        "| setting | " + " | ".join(f"TAR@FAR={_far_label(f)}" for f in fars) + " | final loss |",
        "|---" * (len(fars) + 2) + "|",
    ]
    for c in result.cells:
        loss = f"{c.mean_trace[-100:].mean():.4f}" if c.mean_trace.size else "-"
        row = [f"{_pct(c.mean(i))} ± {_pct(c.std(i))}" for i in idx]
        lines.append(f"| {c.label} | " + " | ".join(row) + f" | {loss} |")
    lines += ["", f"## Assertions (TAR@FAR={_far_label(spec.metric_far)})", ""]
    if not result.outcomes:
        lines.append("none")
    for o in result.outcomes:
        lines.append(f"- {'PASS' if o.passed else 'FAIL'}: {o.assertion.describe()} ({o.detail})")
    return "\n".join(lines) + "\n"


def _csv(rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def report_files(result: ExperimentResult) -> dict[str, str]:
    spec = result.spec
    runs = [["cell", "seed", "fold", "far", "tar"]]
    summary = [["cell", "far", "mean", "std"]]
    traces = [["cell", "step", "loss"]]
    for c in result.cells:
        for si, seed in enumerate(spec.seeds):
            for fold in range(spec.folds):
                for k, far in enumerate(spec.far_targets):
                    runs.append([c.label, seed, fold, repr(far), repr(float(c.tars[si, fold, k]))])
        for k, far in enumerate(spec.far_targets):
            summary.append([c.label, repr(far), repr(c.mean(k)), repr(c.std(k))])
        for step, loss in enumerate(c.mean_trace):
            traces.append([c.label, step, repr(float(loss))])
    verdicts = [["assertion", "passed", "detail"]]
    verdicts += [[o.assertion.describe(), str(o.passed).lower(), o.detail] for o in result.outcomes]
    return {
        "report.md": report_markdown(result),
        "runs.csv": _csv(runs),
        "summary.csv": _csv(summary),
        "traces.csv": _csv(traces),
        "assertions.csv": _csv(verdicts),
        "spec.json": json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n",
    }


def emit_report(result: ExperimentResult, directory) -> dict[str, Path]:
    """Write the markdown table and CSVs into ``directory``; returns the paths."""
    if not result.cells:
        raise ValueError("nothing to report: the grid is empty")
    files = report_files(result)
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        out = {}
        for name, text in files.items():
            atomic_write_text(directory / name, text)
            out[name] = directory / name
    except OSError as exc:
        raise OSError(f"cannot write report to {directory}: {exc}") from exc
    return out


# ---------------------------------------------------------------- built-ins

# Desk regime: many identities with a low-dimensional identity signal hidden in
# a wider input, so networks must learn to find it and cannot memorize.
DESK_DATASET = {
    "num_identities": 3000,
    "selfies_per_identity": 1,
    "d_in": 32,
    "domain_shift": 2.0,
    "noise": 0.5,
    "signal_dim": 12,
}
DESK_BASE = {
    "batch_size": 32,
    "steps": 1600,
    "hidden": [64, 64, 64],
    "embedding_dim": 8,
    "learn_scale": False,
    "scale_init": 5.0,
}


def _spec(name, title, grid, assertions, dataset=None, base=None) -> ExperimentSpec:
    return ExperimentSpec(
        name=name,
        title=title,
        dataset=copy.deepcopy(dataset or DESK_DATASET),
        base={**DESK_BASE, **(base or {})},
        grid=[Cell(label, s) for label, s in grid],
        assertions=assertions,
    )


def builtin_specs() -> dict[str, ExperimentSpec]:
    alphas = [0.0, 0.25, 0.5, 0.75, 1.0]
    specs = [
        _spec(
            "alpha_sweep",
            "Update rate of dynamic weight imprinting.",
            [(f"alpha={a:g}", {"imprint": {"alpha": a}}) for a in alphas],
            [Assertion("max", "alpha=1")],
        ),
        _spec(
            "target_mode",
            "Imprint target vector: doc feature, live feature or their average.",
            [(m, {"imprint": {"target_mode": m}}) for m in ("doc", "live", "average")],
            [Assertion("ge", "average", ("doc", "live"))],
        ),
        _spec(
            "sampler",
            "Mini-batch construction on identities with one or more selfies.",
            [(s, {"sampler": s}) for s in ("images", "pairs", "domain-pairs")],
            [Assertion("ge", "domain-pairs", ("images", "pairs"), slack="sd")],
            dataset={**DESK_DATASET, "selfies_per_identity": {"one_plus_poisson": 1.0}},
        ),
        _spec(
            "sharing",
            "Which layers the doc and live networks share.",
            [(m, {"sharing": m}) for m in ("none", "low-1", "low-3", "high-fc", "high-2", "all")],
            [Assertion("ge", "high-fc", ("all",))],
        ),
        _spec(
            "imprint_schedule",
            "Dynamic imprinting against static re-imprinting of all classes.",
            [
                ("dynamic", {}),
                ("static-periodical", {"imprint": {"schedule": "static-periodical", "period": 2}}),
                ("static-fixed", {"imprint": {"schedule": "static-fixed"}}),
            ],
            [Assertion("ge", "dynamic", ("static-periodical",)),
             Assertion("ge", "static-periodical", ("static-fixed",))],
        ),
        _spec(
            "loss_compare",
            "Loss functions at equal steps, plus the SGD-head margin softmax at twice the steps.",
            [
                ("softmax", {"loss": "softmax", "imprint": None}),
                ("am-softmax", {"imprint": None}),
                ("am-softmax-2x", {"imprint": None, "steps_factor": 2}),
                ("contrastive", {"loss": "contrastive", "imprint": None}),
                ("triplet", {"loss": "triplet", "imprint": None}),
                ("diam", {}),
            ],
            [
                Assertion("ge", "diam", ("am-softmax-2x",)),
                Assertion("ge", "am-softmax-2x", ("contrastive", "triplet")),
                Assertion("ge", "contrastive", ("softmax",)),
                Assertion("ge", "triplet", ("softmax",)),
            ],
        ),
    ]
    return {s.name: s for s in specs}


BUILTIN_NAMES = tuple(builtin_specs())


def default_jobs() -> int:
    return max(1, min(4, os.cpu_count() or 1))
