"""``fairx`` command line: train, eval, xval, ablate, sweep, synth, correlate.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .attribution import BaselineState
from .autodiff import NonFiniteError
from .data import (
    DataError,
    DatasetManifest,
    apply_stats,
    labels,
    load_csv,
    preprocess,
    stratified_split,
    synth_table,
    write_table,
    Dataset,
    PreprocessStats,
)
from .evaluation import (
    DEFAULT_GRID,
    SWEEP_AXES,
    CvSummary,
    ablation,
    crossvalidate,
    evaluate_run,
    fold_correlation_report,
    sensitivity_sweep,
)
from .model import MlpParams
from .training import ConfigError, TrainConfig, TrainingDivergence, fairx_train

log = logging.getLogger("fairx")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
MODEL_FORMAT = "fairx-model/1"
SPLITS = ("train", "validation", "test")


@dataclass
class RunSpec:
    command: str
    manifest: str | None = None
    config: str | None = None
    out: Path = Path(".")
    seed: int | None = None
    overrides: list[str] = field(default_factory=list)
    threads: int | None = None

    def ensure_out(self) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        return self.out


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def load_config(spec: RunSpec) -> TrainConfig:
    base = TrainConfig.load(spec.config).to_dict() if spec.config else TrainConfig().to_dict()
    for text in spec.overrides:
        key, value = parse_override(text)
        if key not in base:
            raise ConfigError(f"override names unknown config key {key!r}")
        base[key] = value
    if spec.seed is not None:
        base["seed"] = spec.seed
    return TrainConfig.from_dict(base)


def builtin_manifests() -> list[str]:
    root = resources.files("fairx") / "manifests"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def resolve_manifest(name_or_path: str | None) -> DatasetManifest:
    if not name_or_path:
        raise ConfigError("--manifest is required")
    path = Path(name_or_path)
    if path.exists():
        return DatasetManifest.load(path)
    if name_or_path in builtin_manifests():
        m = DatasetManifest.load(resources.files("fairx") / "manifests" / f"{name_or_path}.json")
        m.base_dir = "."  # bundled manifests resolve data through FAIRX_DATA_DIR or the cwd
        return m
    raise DataError(f"manifest {name_or_path!r} not found (built-ins: {builtin_manifests()})")


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _split_seed(spec: RunSpec, config: TrainConfig) -> int:
    return config.seed if spec.seed is None else spec.seed


# -- commands ----------------------------------------------------------------


def cmd_train(spec: RunSpec) -> int:
    config = load_config(spec)
    manifest = resolve_manifest(spec.manifest)
    raw = load_csv(manifest)
    y, a = labels(raw, manifest)
    split_seed = _split_seed(spec, config)
    split = stratified_split(y, a, seed=split_seed)
    ds = preprocess(raw, manifest, split.train)
    params, state, history = fairx_train(config, ds, split.train)
    out = spec.ensure_out()
    write_json(out / "model.json", {
        "format": MODEL_FORMAT,
        "version": __version__,
        "config": config.to_dict(),
        "params": params.to_dict(),
        "baselines": state.to_dict(),
        "preprocessing": ds.stats.to_dict(),
        "feature_names": ds.feature_names,
        "manifest": manifest.to_dict(),
        "split_seed": split_seed,
    })
    history.write_jsonl(out / "history.jsonl")
    metrics = {name: evaluate_run(params, state, ds, split[name], config).to_dict()
               for name in SPLITS}
    write_json(out / "metrics.json", metrics)
    log.info("wrote model.json, history.jsonl and metrics.json to %s", out)
    return EXIT_OK


def load_model(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read model {path}: {e}") from e
    if doc.get("format") != MODEL_FORMAT:
        raise ConfigError(f"{path} is not a {MODEL_FORMAT} document")
    return doc


def cmd_eval(spec: RunSpec, model_path: str, split_name: str) -> int:
    doc = load_model(model_path)
    config = TrainConfig.from_dict(doc["config"])
    manifest = (resolve_manifest(spec.manifest) if spec.manifest
                else DatasetManifest(**doc["manifest"]))
    raw = load_csv(manifest)
    stats = PreprocessStats.from_dict(doc["preprocessing"])
    X = apply_stats(raw, stats)
    y, a = labels(raw, manifest)
    ds = Dataset(X, y, a, stats.feature_names, stats, raw, manifest)
    params = MlpParams.from_dict(doc["params"])
    if params.n_inputs != ds.p:
        raise DataError(f"model expects {params.n_inputs} features, data gives {ds.p}")
    state = BaselineState.from_dict(doc["baselines"])
    if split_name == "all":
        idx = np.arange(ds.n)
    else:
        seed = doc["split_seed"] if spec.seed is None else spec.seed
        idx = stratified_split(y, a, seed=seed)[split_name]
    metrics = evaluate_run(params, state, ds, idx, config)
    write_json(spec.ensure_out() / "metrics.json", {split_name: metrics.to_dict()})
    return EXIT_OK


def _full_dataset(spec: RunSpec) -> Dataset:
    manifest = resolve_manifest(spec.manifest)
    return preprocess(load_csv(manifest), manifest)


def cmd_xval(spec: RunSpec, k: int) -> int:
    config = load_config(spec)
    ds = _full_dataset(spec)
    summary = crossvalidate(config, ds, k, _split_seed(spec, config), spec.threads)
    write_json(spec.ensure_out() / "cv_summary.json", summary.to_dict())
    return EXIT_OK


def cmd_ablate(spec: RunSpec, k: int) -> int:
    config = load_config(spec)
    ds = _full_dataset(spec)
    result = ablation(config, ds, k, _split_seed(spec, config), spec.threads)
    write_json(spec.ensure_out() / "ablation.json", result.to_dict())
    return EXIT_OK


def cmd_sweep(spec: RunSpec, axis: str, values, k: int) -> int:
    config = load_config(spec)
    ds = _full_dataset(spec)
    result = sensitivity_sweep(config, ds, axis, values or DEFAULT_GRID, k,
                               _split_seed(spec, config), spec.threads)
    out = spec.ensure_out()
    write_json(out / "sweep.json", result.to_dict())
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["axis", "lambda", "metric", "mean", "std"])
        w.writeheader()
        w.writerows(result.rows())
    return EXIT_OK


def cmd_synth(spec: RunSpec, n: int, p: int, beta: float, noise: float) -> int:
    seed = 0 if spec.seed is None else spec.seed
    table, manifest = synth_table(n, p, beta, noise, seed)
    out = spec.ensure_out()
    write_table(table, out / manifest.csv)
    write_json(out / "manifest.json", manifest.to_dict())
    return EXIT_OK


def _summaries(obj) -> list[CvSummary]:
    """Every CV summary nested anywhere inside a result document."""
    if isinstance(obj, dict):
        if "folds" in obj and "k" in obj:
            return [CvSummary.from_dict(obj)]
        return [s for v in obj.values() for s in _summaries(v)]
    if isinstance(obj, list):
        return [s for v in obj for s in _summaries(v)]
    return []


def cmd_correlate(spec: RunSpec, inputs: list[str]) -> int:
    summaries = []
    for path in inputs:
        try:
            summaries += _summaries(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"cannot read {path}: {e}") from e
    if not summaries:
        raise DataError("no cross-validation results found in the inputs")
    write_json(spec.ensure_out() / "correlation.json", fold_correlation_report(summaries))
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage mistakes are configuration errors, not data errors
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, manifest_required: bool = True) -> None:
    p.add_argument("--manifest", required=manifest_required,
                   help="manifest JSON path or a built-in name " "(adult, bank, compas, german)")
    p.add_argument("--config", help="TrainConfig JSON file")
    p.add_argument("--out", default=".", help="output directory (created if absent)")
    p.add_argument("--seed", type=int, help="overrides the config seed and the split seed")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="set a config field; repeatable")
    p.add_argument("--threads", type=int, default=None,
                   help="concurrent runs (default: available CPUs)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fairx", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    _common(sub.add_parser("train", help="train one model on a 60/20/20 split"))

    p = sub.add_parser("eval", help="evaluate a saved model")
    _common(p, manifest_required=False)
    p.add_argument("--model", required=True)
    p.add_argument("--split", default="test", choices=[*SPLITS, "all"])

    for name, help_ in (("xval", "k-fold cross-validation"), ("ablate", "four-arm ablation")):
        p = sub.add_parser(name, help=help_)
        _common(p)
        p.add_argument("--k", type=int, default=5)

    p = sub.add_parser("sweep", help="lambda sensitivity sweep")
    _common(p)
    p.add_argument("--axis", choices=SWEEP_AXES, default="lambda_ig")
    p.add_argument("--values", help="comma-separated grid (default 0.1,0.5,1,2,5,10)")
    p.add_argument("--k", type=int, default=5)

    p = sub.add_parser("synth", help="write a synthetic CSV and its manifest")
    p.add_argument("--n", type=int, default=4000)
    p.add_argument("--p", type=int, default=8)
    p.add_argument("--beta", type=float, default=2.0)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".")
    p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("correlate", help="EO gap vs GCIG across fold results")
    p.add_argument("inputs", nargs="+", help="cv_summary.json / ablation.json / sweep.json files")
    p.add_argument("--out", default=".")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _values(text: str | None):
    if text is None:
        return None
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"bad --values list: {text!r}") from e


def dispatch(args: argparse.Namespace) -> int:
    spec = RunSpec(
        command=args.command,
        manifest=getattr(args, "manifest", None),
        config=getattr(args, "config", None),
        out=Path(args.out),
        seed=args.seed if hasattr(args, "seed") else None,
        overrides=getattr(args, "override", []),
        threads=getattr(args, "threads", None),
    )
    c = args.command
    if c == "train":
        return cmd_train(spec)
    if c == "eval":
        return cmd_eval(spec, args.model, args.split)
    if c == "xval":
        return cmd_xval(spec, args.k)
    if c == "ablate":
        return cmd_ablate(spec, args.k)
    if c == "sweep":
        values = _values(args.values)
        if values is not None and not values:
            raise ConfigError("--values is empty")
        return cmd_sweep(spec, args.axis, values, args.k)
    if c == "synth":
        return cmd_synth(spec, args.n, args.p, args.beta, args.noise)
    return cmd_correlate(spec, args.inputs)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return dispatch(args)
    except ConfigError as e:
        print(f"fairx: configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"fairx: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergence, NonFiniteError, FloatingPointError) as e:
        print(f"fairx: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as e:
        # e.g. an empty (label, group) cell in the training rows
        print(f"fairx: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
