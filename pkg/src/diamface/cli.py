"""Command-line interface: generate, train, eval, experiment, replay.

Exit codes: 0 success, 2 usage error, 3 runtime error, 4 failed experiment
assertion or replay mismatch.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import shutil
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from ._io import atomic_write_text
from .dataset import DatasetFormatError, Domain, generate_synthetic, load_dataset, save_dataset, split_folds
from .evaluation import DESK_FARS, EvalReport, evaluate, roc_points
from .experiments import builtin_specs, emit_report, load_spec, report_files, run_experiment
from .imprinting import SCHEDULES, TARGET_MODES, ImprintConfig
from .network import CheckpointFormatError
from .training import SAMPLERS, TrainConfig, TrainingError, load_checkpoint, save_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_ASSERT = 0, 2, 3, 4
RUN_DIR_ENV = "DIAMFACE_RUN_DIR"
CLI_LOSSES = ("softmax", "am-softmax", "diam", "contrastive", "triplet")


class UsageError(Exception):
    pass


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def default_run_dir() -> Path:
    return Path(os.environ.get(RUN_DIR_ENV, "runs"))


def _manifest(command: str, args: dict, artifacts: dict[str, Path], started: float, **extra) -> dict:
    return {
        "tool": "diamface",
        "version": __version__,
        "command": command,
        "args": args,
        "seed": args.get("seed"),
        "artifacts": {name: sha256_file(p) for name, p in sorted(artifacts.items())},
        **extra,
        "timing": {"seconds": round(time.perf_counter() - started, 3)},
    }


def _write_manifest(path, manifest: dict) -> None:
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- generate


def cmd_generate(a: dict) -> int:
    started = time.perf_counter()
    if a["identities"] < 2:
        raise UsageError("--identities must be at least 2")
    out = Path(a["out"])
    ds = generate_synthetic(a["identities"], a["selfies"], a["dim"], a["shift"], a["noise"],
                            seed=a["seed"], signal_dim=a["signal_dim"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    docs = int(np.sum(ds.domains == Domain.DOC))
    print(f"wrote {out}: {ds.num_identities} identities, {len(ds)} samples "
          f"({docs} doc, {len(ds) - docs} live), d_in={ds.d_in}")
    _write_manifest(out.with_name(out.name + ".manifest.json"),
                    _manifest("generate", a, {out.name: out}, started))
    return EXIT_OK


# ---------------------------------------------------------------- train


def train_config_from_args(a: dict) -> TrainConfig:
    loss = a["loss"]
    head_opt = a["head_opt"] or ("dwi" if loss == "diam" else "sgd")
    if head_opt == "dwi" and loss not in ("diam", "am-softmax"):
        raise UsageError(f"--head-opt dwi needs a margin head, not --loss {loss}")
    if loss == "diam" and head_opt == "sgd":
        raise UsageError("--loss diam always imprints; use --loss am-softmax --head-opt sgd")
    imprint = None
    if head_opt == "dwi":
        imprint = ImprintConfig(a["alpha"], a["target"], a["schedule"], a["period"])
    try:
        return TrainConfig(
            batch_size=a["batch_size"], steps=a["steps"], seed=a["seed"],
            loss="am-softmax" if loss == "diam" else loss, imprint=imprint,
            sampler=a["sampler"], sharing=a["sharing"], hidden=tuple(a["hidden"]),
            embedding_dim=a["embedding_dim"], lr=a["lr"], momentum=a["momentum"],
            weight_decay=a["weight_decay"], margin=a["margin"], scale_init=a["scale"],
            learn_scale=not a["fixed_scale"], contrastive_margin=a["contrastive_margin"],
            triplet_margin=a["triplet_margin"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _select_identities(ds, a: dict, part: str):
    """Restrict a dataset to the train or test identities of ``--fold``."""
    if a["fold"] is None:
        return ds
    if not 0 <= a["fold"] < a["folds"]:
        raise UsageError(f"--fold must lie in [0, {a['folds']})")
    split = split_folds(ds, a["folds"], a["split_seed"])
    ids = split.train_identities(a["fold"]) if part == "train" else split.test_identities(a["fold"])
    return ds.subset(ids)


def cmd_train(a: dict) -> int:
    started = time.perf_counter()
    config = train_config_from_args(a)
    data = Path(a["data"])
    ds = _select_identities(load_dataset(data), a, "train")
    out = Path(a["out"] or default_run_dir() / f"train-{config.label.replace('/', '-')}-seed{config.seed}")
    a["out"] = str(out)
    out.mkdir(parents=True, exist_ok=True)
    extra = {"config": config.to_dict(), "inputs": {"data": sha256_file(data)}}
    try:
        result = train(ds, config)
    except TrainingError as exc:
        atomic_write_text(out / "trace.csv", _trace_prefix(exc.trace))
        _write_manifest(out / "manifest.json",
                        _manifest("train", a, {"trace.csv": out / "trace.csv"}, started,
                                  error=str(exc), **extra))
        print(f"training failed: {exc}; trace prefix saved to {out / 'trace.csv'}", file=sys.stderr)
        return EXIT_RUNTIME
    save_checkpoint(out / "model.ckpt", result, {"dataset_sha256": extra["inputs"]["data"]})
    atomic_write_text(out / "trace.csv", result.trace_csv())
    final = result.losses[-1] if result.losses else float("nan")
    print(f"trained {config.label} for {config.steps} steps on {ds.num_identities} identities; "
          f"final loss {final:.4f}; wrote {out}")
    _write_manifest(out / "manifest.json",
                    _manifest("train", a, {"model.ckpt": out / "model.ckpt", "trace.csv": out / "trace.csv"},
                              started, **extra))
    return EXIT_OK


def _trace_prefix(losses) -> str:
    lines = ["step,loss"] + [f"{i},{l!r}" for i, l in enumerate(losses)]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- eval


def cmd_eval(a: dict) -> int:
    started = time.perf_counter()
    data = Path(a["data"])
    full = load_dataset(data)
    ds = _select_identities(full, a, "test")
    result, meta = load_checkpoint(a["model"])
    d_model = result.pair.doc_net.d_in
    if d_model != ds.d_in:
        raise UsageError(f"model expects {d_model}-dimensional inputs but {data} has d_in={ds.d_in}")
    data_sha = sha256_file(data)
    if meta.get("dataset_sha256") == data_sha and not a["allow_train_eval"]:
        overlap = np.intersect1d(result.source_ids, ds.source_ids)
        if overlap.size:
            raise UsageError(
                f"{overlap.size} evaluation identities were used to train this model; "
                "pick the held-out fold (--fold) or pass --allow-train-eval"
            )
    fars = tuple(a["far"])
    points, scores = evaluate(result.pair, ds, fars, a["max_impostors"], seed=a["seed"])
    report = EvalReport(fars, np.array([[p.tar for p in points]]), np.array([[p.threshold for p in points]]),
                        [roc_points(scores)], dict(scores.meta))
    out = Path(a["out"] or default_run_dir() / f"eval-seed{a['seed']}")
    a["out"] = str(out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "report.csv", report.to_csv())
    atomic_write_text(out / "roc.csv", report.roc_csv())
    for p in points:
        flag = "" if p.reliable else "  (too few impostors for this FAR)"
        print(f"TAR@FAR={100 * p.far_target:g}%: {100 * p.tar:.2f}% (threshold {p.threshold:.4f}){flag}")
    print(f"{len(scores.genuine)} genuine / {len(scores.impostor)} impostor scores; wrote {out}")
    _write_manifest(out / "manifest.json",
                    _manifest("eval", a, {"report.csv": out / "report.csv", "roc.csv": out / "roc.csv"},
                              started, inputs={"data": data_sha, "model": sha256_file(a["model"])}))
    return EXIT_OK


# ---------------------------------------------------------------- experiment


def resolve_spec(name: str):
    specs = builtin_specs()
    if name in specs:
        return specs[name]
    if name.endswith(".json") or os.sep in name:
        return load_spec(name)
    raise UsageError(f"unknown experiment {name!r}; built-ins: {', '.join(specs)} (or a .json spec file)")


def cmd_experiment(a: dict) -> int:
    started = time.perf_counter()
    try:
        spec = resolve_spec(a["name"])
    except (FileNotFoundError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    if a["seeds"] is not None:
        spec.seeds = tuple(range(a["seed"], a["seed"] + a["seeds"]))
    elif a["seed"]:
        spec.seeds = tuple(s + a["seed"] for s in spec.seeds)
    if a["dump_spec"]:
        print(json.dumps(spec.to_dict(), indent=2, sort_keys=True))
        return EXIT_OK
    result = run_experiment(spec, jobs=a["jobs"],
                            progress=None if a["quiet"] else lambda m: print(m, file=sys.stderr))
    out = Path(a["out"] or default_run_dir() / spec.name)
    a["out"] = str(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    # build the whole directory aside, then swap it in
    tmp = Path(tempfile.mkdtemp(dir=out.parent, prefix=f".{out.name}."))
    try:
        paths = emit_report(result, tmp)
        manifest = _manifest("experiment", a, paths, started, config=spec.to_dict())
        _write_manifest(tmp / "manifest.json", manifest)
        if out.exists():
            shutil.rmtree(out)
        os.replace(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    print(report_files(result)["report.md"], end="")
    print(f"wrote {out}")
    return EXIT_OK if result.passed else EXIT_ASSERT


# ---------------------------------------------------------------- replay


def cmd_replay(a: dict) -> int:
    path = Path(a["manifest"])
    try:
        manifest = json.loads(path.read_text())
        command, args = manifest["command"], dict(manifest["args"])
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"{path}: not a run manifest ({exc})") from None
    if a["out"]:
        args["out"] = a["out"]
    code = COMMANDS[command](args)
    if a["check"] and code in (EXIT_OK, EXIT_ASSERT):
        where = Path(args["out"])
        if command == "generate":
            # the dataset is the only artifact; compare it under its new name
            artifacts = {where.name: next(iter(manifest["artifacts"].values()))}
            where = where.parent
        else:
            artifacts = manifest["artifacts"]
        mismatched = [name for name, digest in artifacts.items()
                      if not (where / name).exists() or sha256_file(where / name) != digest]
        if mismatched:
            print(f"replay differs from {path}: {', '.join(mismatched)}", file=sys.stderr)
            return EXIT_ASSERT
        print(f"replay reproduced {len(manifest['artifacts'])} artifacts bitwise")
    return code


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
    "replay": cmd_replay,
}


# ---------------------------------------------------------------- parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="diamface",
        description="Train and evaluate margin-softmax embeddings with dynamic weight imprinting "
                    "on synthetic two-domain data.",
        epilog=f"Default output root: ${RUN_DIR_ENV} (else ./runs). "
               "Exit codes: 0 ok, 2 usage, 3 runtime error, 4 assertion failure.",
    )
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(sp, seed_help="random seed (recorded in the manifest)"):
        sp.add_argument("--seed", type=int, default=0, help=f"{seed_help}; default 0")
        sp.add_argument("--config", metavar="FILE",
                        help="JSON file of option values (or a run manifest); its values override flags")

    g = sub.add_parser("generate", help="write a synthetic dataset file")
    g.add_argument("--identities", type=int, default=200)
    g.add_argument("--selfies", type=int, default=1, help="live samples per identity")
    g.add_argument("--dim", type=int, default=16, help="input dimension d_in")
    g.add_argument("--signal-dim", type=int, default=None,
                   help="dimension of the identity subspace (default: all of d_in)")
    g.add_argument("--shift", type=float, default=0.5, help="doc-side offset magnitude")
    g.add_argument("--noise", type=float, default=0.1, help="per-sample noise std")
    g.add_argument("-o", "--out", required=True, help="dataset file to write")
    common(g)

    t = sub.add_parser("train", help="train a sibling-network model")
    t.add_argument("--data", required=True, help="dataset file")
    t.add_argument("--loss", choices=CLI_LOSSES, default="diam")
    t.add_argument("--head-opt", choices=("sgd", "dwi"), default=None,
                   help="how margin-head weights are updated (default: dwi for diam, sgd otherwise)")
    t.add_argument("--alpha", type=float, default=1.0, help="imprinting update rate")
    t.add_argument("--target", choices=TARGET_MODES, default="average")
    t.add_argument("--schedule", choices=SCHEDULES, default="dynamic")
    t.add_argument("--period", type=int, default=2, help="epochs between static re-imprints")
    t.add_argument("--sampler", choices=SAMPLERS, default="domain-pairs")
    t.add_argument("--sharing", default="high-fc",
                   help="none | all | low-K | high-K | high-fc | 0/1 string per layer")
    t.add_argument("--steps", type=int, default=4000)
    t.add_argument("--batch-size", type=int, default=248)
    t.add_argument("--hidden", type=int, nargs="*", default=[64, 64], help="hidden layer widths")
    t.add_argument("--embedding-dim", type=int, default=32)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--weight-decay", type=float, default=5e-4)
    t.add_argument("--margin", type=float, default=5.0)
    t.add_argument("--scale", type=float, default=16.0, help="initial (or fixed) scale s")
    t.add_argument("--fixed-scale", action="store_true", help="do not learn s")
    t.add_argument("--contrastive-margin", type=float, default=1.0)
    t.add_argument("--triplet-margin", type=float, default=0.5)
    _fold_flags(t, "train on the identities outside this fold")
    t.add_argument("-o", "--out", help="run directory (default: $%s/train-<loss>-seed<seed>)" % RUN_DIR_ENV)
    common(t)

    e = sub.add_parser("eval", help="TAR@FAR of a checkpoint on a dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True, help="checkpoint written by train")
    e.add_argument("--far", type=float, nargs="+", default=list(DESK_FARS))
    e.add_argument("--max-impostors", type=int, default=None, help="seeded impostor subsample size")
    e.add_argument("--allow-train-eval", action="store_true",
                   help="permit scoring identities the model was trained on")
    _fold_flags(e, "score only the identities of this fold")
    e.add_argument("-o", "--out", help="output directory (default: $%s/eval-seed<seed>)" % RUN_DIR_ENV)
    common(e, "seed of the impostor subsample")

    x = sub.add_parser("experiment", help="run a named or JSON-specified ordering experiment")
    x.add_argument("name", help=f"one of {', '.join(builtin_specs())}, or a spec .json path")
    x.add_argument("--seeds", type=int, default=None, help="number of seeds (default: from the spec)")
    x.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    x.add_argument("--dump-spec", action="store_true", help="print the resolved spec as JSON and exit")
    x.add_argument("--quiet", action="store_true")
    x.add_argument("-o", "--out", help="report directory (default: $%s/<name>)" % RUN_DIR_ENV)
    common(x, "first seed; spec seeds are shifted by it")

    r = sub.add_parser("replay", help="re-run a command from its manifest.json")
    r.add_argument("manifest")
    r.add_argument("-o", "--out", help="write to this location instead of the recorded one")
    r.add_argument("--check", action="store_true", help="exit 4 unless every artifact matches bitwise")
    return p


def _fold_flags(sp, help_text: str) -> None:
    sp.add_argument("--fold", type=int, default=None, help=help_text)
    sp.add_argument("--folds", type=int, default=5)
    sp.add_argument("--split-seed", type=int, default=0)


def parse(argv) -> dict:
    parser = build_parser()
    ns = parser.parse_args(argv)
    args = vars(ns)
    config = args.pop("config", None)
    if config:
        try:
            data = json.loads(Path(config).read_text())
        except (OSError, ValueError) as exc:
            parser.error(f"cannot read --config {config}: {exc}")
        if "args" in data and "command" in data:
            data = data["args"]
        unknown = set(data) - set(args)
        if unknown:
            parser.error(f"--config has unknown options: {', '.join(sorted(unknown))}")
        args.update(data)
    return args


def main(argv=None) -> int:
    try:
        args = parse(sys.argv[1:] if argv is None else argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    command = args.pop("command")
    try:
        return COMMANDS[command](args)
    except UsageError as exc:
        print(f"diamface {command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, DatasetFormatError, CheckpointFormatError, OSError, ValueError) as exc:
        print(f"diamface {command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
