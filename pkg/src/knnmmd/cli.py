"""Command-line interface.

Every option can also come from a ``key = value`` config file given with
``--config``; flags given on the command line win over file values.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from knnmmd import __version__
from knnmmd.dataset import (LabeledSet, SplitSpec, load_labeled_set, make_nshot_split,
                            gen_synthetic, separable_scenario, swap_scenario, write_labeled_set)
from knnmmd.errors import ConfigError, DataError, DivergenceError
from knnmmd.harness import (DESK_TRAIN, METHODS, ExperimentConfig, aggregate, emit_report,
                            read_report, run_experiment, run_suite, stage)
from knnmmd.mmd import KernelBank
from knnmmd.net import save_checkpoint
from knnmmd.pseudolabel import HELPSET_MODES, HelpSet, KnnConfig, build_help_set
from knnmmd.reduce import clamp_dimension, fit_reduction, flatten, project, standardize_time
from knnmmd.train import TrainConfig, fit

log = logging.getLogger("knnmmd")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 1, 2, 3

# config key -> (argparse dest, type)
CONFIG_KEYS = {
    "knn.k": ("k", int),
    "knn.epsilon": ("epsilon", float),
    "helpset.top_p": ("top_p", float),
    "helpset.mode": ("helpset_mode", str),
    "reduce.d": ("d", int),
    "mmd.kernels": ("kernels", str),
    "split.n_shots": ("n_shots", int),
    "train.alpha1": ("alpha1", float),
    "train.alpha2": ("alpha2", float),
    "train.lr": ("lr", float),
    "train.batch_size": ("batch_size", int),
    "train.e_min": ("e_min", int),
    "train.e_max": ("e_max", int),
    "train.e_threshold": ("e_threshold", int),
    "train.relax_alpha": ("relax_alpha", float),
    "train.relax_beta": ("relax_beta", float),
    "train.finetune_epochs": ("finetune_epochs", int),
    "run.method": ("method", str),
    "run.seed": ("seed", int),
    "run.split_seed": ("split_seed", int),
    "run.repeats": ("repeats", int),
    "data.source": ("source", str),
    "data.target": ("target", str),
    "synth.scenario": ("scenario", str),
    "synth.classes": ("classes", int),
    "synth.l": ("l", int),
    "synth.s": ("s", int),
    "synth.noise_std": ("noise_std", float),
    "synth.separation": ("separation", float),
    "synth.time_jitter": ("time_jitter", int),
    "synth.seed": ("synth_seed", int),
    "synth.samples_source": ("samples_source", int),
    "synth.samples_target": ("samples_target", int),
}
DEST_TYPES = {dest: typ for dest, typ in CONFIG_KEYS.values()}

DEFAULTS = {
    "k": 1, "epsilon": 1e-8, "top_p": 50.0, "helpset_mode": "global", "d": 128,
    "n_shots": 1, "method": "knn_mmd", "seed": 0, "split_seed": None, "repeats": 1,
    "finetune_epochs": None, "scenario": "swap", "classes": 4, "l": 16, "s": 8,
    "noise_std": 1.0, "separation": 4.0, "time_jitter": 0, "synth_seed": 0,
    "samples_source": 150, "samples_target": 60, "source": None, "target": None,
    "kernels": None,
}


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines into argparse destinations."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        dest, typ = CONFIG_KEYS[key]
        try:
            values[dest] = typ(value)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {value!r}") from exc
    return values


def resolve(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit command-line flags."""
    values = dict(DEFAULTS)
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for dest in list(DEST_TYPES) + ["kernels"]:
        v = getattr(args, dest, None)
        if v is not None:
            values[dest] = v
    return values


def synthetic_spec(v: dict):
    dims = (v["l"], v["s"])
    if v["scenario"] == "swap":
        return swap_scenario(v["classes"], dims, noise_std=v["noise_std"],
                             samples_per_class_source=v["samples_source"],
                             samples_per_class_target=v["samples_target"],
                             time_jitter=v["time_jitter"], seed=v["synth_seed"])
    if v["scenario"] == "separable":
        return separable_scenario(v["classes"], dims, v["separation"], v["noise_std"],
                                  v["samples_source"], v["samples_target"], seed=v["synth_seed"])
    raise ConfigError(f"unknown scenario {v['scenario']!r}; expected swap or separable")


def train_config(v: dict, synthetic: bool) -> TrainConfig:
    base = DESK_TRAIN if synthetic else TrainConfig()
    changes = {k: v[k] for k in ("alpha1", "alpha2", "lr", "batch_size", "e_min", "e_max",
                                 "e_threshold", "relax_alpha", "relax_beta") if v.get(k) is not None}
    if v.get("kernels"):
        changes["bank"] = KernelBank.parse(v["kernels"])
    merged = {f: getattr(base, f) for f in base.__dataclass_fields__}
    merged.update(changes)
    return TrainConfig(**merged)


def experiment_config(v: dict) -> ExperimentConfig:
    files = v["source"] is not None or v["target"] is not None
    spec = None if files else synthetic_spec(v)
    return ExperimentConfig(
        synthetic=spec, source_path=v["source"], target_path=v["target"],
        n_shots=v["n_shots"], knn=KnnConfig(v["k"], v["epsilon"]), d=v["d"],
        top_p=v["top_p"], helpset_mode=v["helpset_mode"], train=train_config(v, not files),
        method=v["method"], repeats=v["repeats"], seed=v["seed"], split_seed=v["split_seed"],
        finetune_epochs=v["finetune_epochs"])


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_synth(args, v) -> int:
    spec = synthetic_spec(v)
    source, target = gen_synthetic(spec, v["seed"])
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_labeled_set(source, out / "source.csv")
    write_labeled_set(target, out / "target.csv")
    print(f"wrote {len(source)} source and {len(target)} target samples to {out}")
    return EXIT_OK


def cmd_split(args, v) -> int:
    target = load_labeled_set(args.target)
    support, test = make_nshot_split(target, SplitSpec(v["n_shots"], v["seed"]))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_labeled_set(support, out / "support.csv")
    write_labeled_set(test, out / "test.csv")
    print(f"support {len(support)}, test {len(test)}")
    return EXIT_OK


def _std(data: LabeledSet) -> LabeledSet:
    return LabeledSet(standardize_time(data.values), data.labels, data.num_classes, data.domain)


def cmd_helpset(args, v) -> int:
    support = _std(load_labeled_set(args.support))
    test = _std(load_labeled_set(args.test))
    Xs, Xt = flatten(support.values), flatten(test.values)
    pooled = np.vstack([Xs, Xt])
    model = fit_reduction(pooled, clamp_dimension(v["d"], pooled))
    hs = build_help_set(project(model, Xs), support.labels, project(model, Xt), test,
                        KnnConfig(v["k"], v["epsilon"]), v["top_p"], v["helpset_mode"])
    out = Path(args.out)
    write_labeled_set(hs.samples, out)
    index_file = out.with_name(out.stem + ".index.csv")
    lines = ["test_index,pseudo_label,confidence"]
    lines += [f"{i},{c},{conf!r}" for i, c, conf in
              zip(hs.source_indices.tolist(), hs.labels.tolist(), hs.confidences.tolist())]
    index_file.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    print(f"help set: {len(hs)} of {len(test)} test samples -> {out}")
    return EXIT_OK


def cmd_train(args, v) -> int:
    source = _std(load_labeled_set(args.source))
    support = _std(load_labeled_set(args.support))
    help_set = None
    if args.help_set:
        data = _std(load_labeled_set(args.help_set))
        help_set = HelpSet(data, np.arange(len(data)), np.ones(len(data)))
    cfg = train_config(v, synthetic=args.desk).with_(seed=v["seed"])
    with stage("train"):
        result = fit(source, help_set, support, cfg, metrics_path=args.metrics)
    if args.checkpoint:
        save_checkpoint(result.network, args.checkpoint)
    print(f"stopped at epoch {result.stop_epoch}, best epoch {result.best_epoch}")
    return EXIT_OK


def _print_record(r) -> None:
    purity = "n/a" if r.help_purity is None else f"{r.help_purity:.4f}"
    print(f"method={r.method} n_shots={r.n_shots} seed={r.seed} test_acc={r.test_accuracy:.4f} "
          f"help_purity={purity} stop_epoch={r.stop_epoch} wall_s={r.wall_time:.2f}")
    print("per_class_acc=" + ",".join(f"{a:.4f}" for a in r.per_class_accuracy))


def cmd_run(args, v) -> int:
    rec = run_experiment(experiment_config(v))
    _print_record(rec)
    if args.report:
        emit_report([rec], args.report)
    return EXIT_OK


def cmd_suite(args, v) -> int:
    base = experiment_config(v)
    methods = args.methods.split(",") if args.methods else [base.method]
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}")
    result = run_suite([base.with_(method=m) for m in methods], vary=args.vary)
    for (m, n), agg in result.aggregates().items():
        print(f"{m} n_shots={n} runs={agg.runs} min={agg.acc_min:.4f} "
              f"mean={agg.acc_mean:.4f} max={agg.acc_max:.4f}")
    for s in result.failures:
        print(f"FAILED {s.method} seed={s.seed}: {s.error}", file=sys.stderr)
    if args.report and result.records:
        emit_report(result.records, args.report)
    if not result.records:
        raise DataError("every run in the suite failed")
    return EXIT_OK


def cmd_report(args, v) -> int:
    records = []
    for path in args.inputs:
        records.extend(read_report(path))
    emit_report(records, args.out)
    for (m, n), agg in aggregate(records).items():
        print(f"{m} n_shots={n} runs={agg.runs} mean={agg.acc_mean:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=int, help="neighbours in the KNN vote")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--top-p", dest="top_p", type=float, help="help-set percentage")
    p.add_argument("--helpset-mode", dest="helpset_mode", choices=HELPSET_MODES)
    p.add_argument("--d", type=int, help="reduced dimension")
    p.add_argument("--n-shots", dest="n_shots", type=int)
    p.add_argument("--kernels", help="kernel bank, e.g. gaussian:0.5,gaussian:1.0")
    for name in ("alpha1", "alpha2", "lr", "relax_alpha", "relax_beta"):
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=float)
    for name in ("batch_size", "e_min", "e_max", "e_threshold", "finetune_epochs"):
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=int)


def _add_data(p: argparse.ArgumentParser) -> None:
    p.add_argument("--source", help="source-domain dataset file")
    p.add_argument("--target", help="target-domain dataset file")
    p.add_argument("--scenario", choices=("swap", "separable"))
    p.add_argument("--classes", type=int)
    p.add_argument("--l", type=int)
    p.add_argument("--s", type=int)
    p.add_argument("--noise-std", dest="noise_std", type=float)
    p.add_argument("--separation", type=float)
    p.add_argument("--time-jitter", dest="time_jitter", type=int)
    p.add_argument("--synth-seed", dest="synth_seed", type=int)
    p.add_argument("--samples-source", dest="samples_source", type=int)
    p.add_argument("--samples-target", dest="samples_target", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="knnmmd", description="KNN-MMD few-shot toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic source/target pair")
    _add_common(p); _add_data(p)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("split", help="n-shot support/test split of a target file")
    _add_common(p)
    p.add_argument("--target", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("helpset", help="build the confidence-ranked help set")
    _add_common(p)
    p.add_argument("--support", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_helpset)

    p = sub.add_parser("train", help="train a network and save a checkpoint")
    _add_common(p)
    p.add_argument("--source", required=True)
    p.add_argument("--support", required=True)
    p.add_argument("--help-set", dest="help_set")
    p.add_argument("--checkpoint")
    p.add_argument("--metrics")
    p.add_argument("--desk", action="store_true", help="use the short desk-scale schedule")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("run", help="one end-to-end experiment")
    _add_common(p); _add_data(p)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--split-seed", dest="split_seed", type=int)
    p.add_argument("--report")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("suite", help="several methods over derived seeds")
    _add_common(p); _add_data(p)
    p.add_argument("--method", choices=METHODS)
    p.add_argument("--methods", help="comma-separated method list")
    p.add_argument("--repeats", type=int)
    p.add_argument("--vary", choices=("seed", "split"), default="seed")
    p.add_argument("--report")
    p.set_defaults(func=cmd_suite)

    p = sub.add_parser("report", help="merge report files")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        values = resolve(args) if args.command != "report" else {}
        return args.func(args, values)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
