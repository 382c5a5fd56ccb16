"""Command-line experiment runner.

Every subcommand reads one JSON config (``--config``) and accepts overrides
named after config keys, e.g. ``--train.learning_rate 3``.  Artifacts go to
``output_dir`` (default ``$SSRMLAB_OUTPUT_ROOT/run`` or ``./runs/run``) and
each embeds the config hash; ``--verify`` re-checks existing artifacts
without running anything.

Subcommands: gen, split, srm, ssrm, eval, calibrate, sweep.
"""

from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import logging
import os
import sys
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable

from ssrmlab import synth
from ssrmlab.backend import (
    FeatureCache,
    FeaturizerSpec,
    ModelSnapshot,
    SnapshotError,
    TrainConfig,
    config_hash,
    fit,
    load_snapshot,
    save_snapshot,
)
from ssrmlab.evaluation import (
    calibration,
    confidence_histogram,
    evaluate,
    ground_truth_histogram,
    probability_calibration,
)
from ssrmlab.experiment import labeled_fraction_sweep
from ssrmlab.prefdata import (
    DatasetError,
    LabeledExample,
    PreferenceDataset,
    SplitSpec,
    load_jsonl,
    randomize_order,
    read_records,
    split,
    write_records,
)
from ssrmlab.ssrm import IterationReport, SsrmConfig, run_ssrm

logger = logging.getLogger("ssrmlab")

OUTPUT_ROOT_ENV = "SSRMLAB_OUTPUT_ROOT"

DEFAULT_CONFIG: dict[str, Any] = {
    "seed": 0,
    "output_dir": None,
    "data": {"path": None, "test_path": None},
    "synth": {"vocab_size": 500, "response_length": 12, "temperature": 1.0,
              "deterministic_labels": False, "seed": None,
              "count": 40000, "test_count": 10000},
    "split": {"labeled_fraction": "1/4", "seed": None, "shuffle": True,
              "randomize_order": True},
    "featurizer": {"hash_dimension": 2**18, "ngram_orders": [1, 2], "hash_seed": 0},
    "train": {"learning_rate": 0.1, "batch_size": 128, "epochs": 1,
              "lr_schedule": "constant", "warmup_steps": 0, "l2": 0.0, "seed": None},
    "ssrm": {"threshold_s": 0.8, "iterations_T": 4, "restart_from_initial": True,
             "order_averaged": False, "dump_augmented": False},
    "eval": {"snapshot": None, "n_bins": 10},
    "sweep": {"fractions": ["1/16", "1/8", "1/4", "1/2", "1"]},
}


class ConfigError(ValueError):
    pass


class VerificationError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def _merge(base: dict, update: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where}{key} must be an object")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


def _coerce(default: Any, text: str) -> Any:
    if isinstance(default, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, str):
        return text
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _flat_keys(cfg: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in cfg.items():
        if isinstance(v, dict):
            out.update(_flat_keys(v, f"{prefix}{k}."))
        else:
            out[f"{prefix}{k}"] = v
    return out


def _set_dotted(cfg: dict, dotted: str, value: Any) -> None:
    *parents, leaf = dotted.split(".")
    node = cfg
    for p in parents:
        node = node[p]
    node[leaf] = value


class Experiment:
    """A resolved configuration plus the paths and objects derived from it."""

    def __init__(self, config: dict[str, Any]):
        self.config = _merge(DEFAULT_CONFIG, config)
        c = self.config
        seed = c["seed"]
        for section in ("synth", "split", "train"):
            if c[section]["seed"] is None:
                c[section]["seed"] = seed
        out = c["output_dir"]
        if out is None:
            out = str(Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / "run")
        self.out = Path(out)
        try:
            self.split_spec = SplitSpec(Fraction(str(c["split"]["labeled_fraction"])),
                                        c["split"]["seed"], c["split"]["shuffle"])
            self.featurizer = FeaturizerSpec(c["featurizer"]["hash_dimension"],
                                             tuple(c["featurizer"]["ngram_orders"]),
                                             c["featurizer"]["hash_seed"])
            self.train = TrainConfig(**c["train"])
            s = c["ssrm"]
            self.ssrm = SsrmConfig(s["threshold_s"], s["iterations_T"], s["restart_from_initial"],
                                   self.train, s["order_averaged"])
            self.fractions = [Fraction(str(f)) for f in c["sweep"]["fractions"]]
        except (TypeError, ValueError, ZeroDivisionError) as e:
            raise ConfigError(str(e)) from e
        self.hash = config_hash({k: v for k, v in c.items() if k != "output_dir"})

    # paths
    def path(self, name: str) -> Path:
        return self.out / name

    @property
    def data_path(self) -> Path:
        p = self.config["data"]["path"]
        return Path(p) if p else self.path("train.jsonl")

    @property
    def test_path(self) -> Path:
        p = self.config["data"]["test_path"]
        return Path(p) if p else self.path("test.jsonl")

    def snapshot_path(self, t: int) -> Path:
        return self.path(f"snapshot_t{t}.npz")

    @property
    def eval_snapshot_path(self) -> Path:
        p = self.config["eval"]["snapshot"]
        return Path(p) if p else self.snapshot_path(self.ssrm.iterations_T - 1)

    def meta(self, kind: str, **extra) -> dict[str, Any]:
        return {"kind": kind, "config_hash": self.hash, **extra}


def load_config(path: str | Path | None, overrides: dict[str, str] | None = None) -> Experiment:
    raw: dict[str, Any] = {}
    if path is not None:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    merged = _merge(DEFAULT_CONFIG, raw)
    flat = _flat_keys(DEFAULT_CONFIG)
    for key, text in (overrides or {}).items():
        if key not in flat:
            raise ConfigError(f"unknown config key {key}")
        current = _flat_keys(merged)[key]
        _set_dotted(merged, key, _coerce(current if current is not None else flat[key], text))
    return Experiment(merged)


# ---------------------------------------------------------------------------
# Artifact helpers
# ---------------------------------------------------------------------------

def _write_json(path: Path, obj: dict[str, Any]) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(path: Path, config_hash_: str, header: list[str], rows: list[list[Any]]) -> None:
    buf = io.StringIO()
    buf.write(f"# config_hash={config_hash_}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    path.write_text(buf.getvalue(), encoding="utf-8")


def embedded_hash(path: Path) -> str | None:
    """Config hash recorded inside an artifact, or None if absent."""
    suffix = path.suffix
    if suffix == ".npz":
        return load_snapshot(path).provenance.get("config_hash")
    text = path.read_text(encoding="utf-8")
    if suffix == ".csv":
        first = text.split("\n", 1)[0]
        return first.split("=", 1)[1] if first.startswith("# config_hash=") else None
    if suffix == ".json":
        return json.loads(text).get("config_hash")
    if suffix == ".jsonl":
        lines = [json.loads(line) for line in text.splitlines() if line.strip()]
        if not lines:
            return None
        if "_meta" in lines[0]:
            return lines[0]["_meta"].get("config_hash")
        hashes = {obj.get("config_hash") for obj in lines}
        return hashes.pop() if len(hashes) == 1 else None
    return None


def verify_artifacts(exp: Experiment, paths: list[Path]) -> None:
    for p in paths:
        if not p.exists():
            raise VerificationError(f"missing artifact {p}")
        try:
            found = embedded_hash(p)
        except (SnapshotError, ValueError, OSError) as e:
            raise VerificationError(f"unreadable artifact {p}: {e}") from e
        if found != exp.hash:
            raise VerificationError(f"{p}: config hash {found} != {exp.hash}")


def format_data_size(size: int, pseudo_fraction: float) -> str:
    """Render a training-set size the way result tables do, e.g. ``406.3K (56.9%)``."""
    if size >= 1000:
        count = f"{size / 1000:.2f}".rstrip("0").rstrip(".") + "K"
    else:
        count = str(size)
    share = "0" if pseudo_fraction == 0 else f"{100 * pseudo_fraction:.1f}%"
    return f"{count} ({share})"


def _load_labeled(path: Path) -> list[LabeledExample]:
    ds = load_jsonl(path)
    if ds.unlabeled:
        raise DatasetError(f"{path}: {ds.n} records lack labels")
    return list(ds.labeled)


def _load_pools(exp: Experiment) -> PreferenceDataset:
    lab = load_jsonl(exp.path("labeled.jsonl"))
    unl = load_jsonl(exp.path("unlabeled.jsonl"))
    return PreferenceDataset(lab.labeled, unl.unlabeled)


def _test_set(exp: Experiment, required: bool) -> list[LabeledExample] | None:
    if not exp.test_path.exists():
        if required:
            raise FileNotFoundError(f"test set {exp.test_path} not found")
        return None
    return _load_labeled(exp.test_path)


# ---------------------------------------------------------------------------
# Commands; each returns the artifacts it wrote
# ---------------------------------------------------------------------------

def cmd_gen(exp: Experiment) -> list[Path]:
    s = exp.config["synth"]
    if s["count"] <= 0 or s["test_count"] <= 0:
        raise ConfigError("synth.count and synth.test_count must be positive")
    world = synth.sample_world(s["vocab_size"], s["seed"], response_length=s["response_length"],
                               temperature=s["temperature"],
                               deterministic_labels=s["deterministic_labels"])
    train = synth.generate(world, s["count"], synth.TRAIN_STREAM, "tr")
    test = synth.generate(world, s["test_count"], synth.TEST_STREAM, "te")
    bayes = synth.bayes_accuracy(world)
    exp.out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, items in (("train", train), ("test", test)):
        meta = exp.meta(f"synth_{name}", bayes_accuracy=bayes.value, bayes_stderr=bayes.stderr)
        write_records(exp.path(f"{name}.jsonl"), [it.example for it in items], meta)
        synth.write_oracle(exp.path(f"{name}.oracle.jsonl"), items, exp.meta(f"oracle_{name}"))
        written += [exp.path(f"{name}.jsonl"), exp.path(f"{name}.oracle.jsonl")]
    return written


def cmd_split(exp: Experiment) -> list[Path]:
    ds = load_jsonl(exp.data_path)
    examples = list(ds.labeled)
    if exp.config["split"]["randomize_order"]:
        examples = randomize_order(examples, exp.split_spec.seed)
    parts = split(examples, exp.split_spec)
    unlabeled = [*parts.unlabeled, *ds.unlabeled]
    exp.out.mkdir(parents=True, exist_ok=True)
    split_meta = {"labeled_fraction": str(exp.split_spec.labeled_fraction),
                  "seed": exp.split_spec.seed, "source": str(exp.data_path)}
    write_records(exp.path("labeled.jsonl"), parts.labeled, exp.meta("labeled", split=split_meta, m=parts.m))
    write_records(exp.path("unlabeled.jsonl"), unlabeled,
                  exp.meta("unlabeled", split=split_meta, n=len(unlabeled)))
    logger.info("split %d examples: m=%d n=%d", len(examples), parts.m, len(unlabeled))
    return [exp.path("labeled.jsonl"), exp.path("unlabeled.jsonl")]


def cmd_srm(exp: Experiment) -> list[Path]:
    labeled = _load_labeled(exp.path("labeled.jsonl"))
    model = fit(ModelSnapshot.zeros(exp.featurizer), labeled, exp.train,
                provenance={"config_hash": exp.hash, "iteration": 0})
    exp.out.mkdir(parents=True, exist_ok=True)
    save_snapshot(model, exp.path("srm.npz"))
    return [exp.path("srm.npz")]


def summary_rows(reports: list[IterationReport], m: int) -> tuple[list[str], list[list[str]]]:
    """Per-iteration table: category accuracies, average, and data size."""
    categories = sorted({c for r in reports if r.eval for c in r.eval.per_category})
    header = ["model", *categories]
    if categories:
        header += ["Average", "Overall"]
    header.append("# Data (Pseudo-labeled portion)")
    rows = []
    for r in reports:
        name = ("Partial SRM" if m else "Initial") if r.t == 0 else f"SSRM [t={r.t}]"
        row = [name]
        if categories:
            row += [f"{r.eval.per_category.get(c, float('nan')):.4f}" for c in categories]
            row += [f"{r.eval.category_average:.4f}", f"{r.eval.overall_accuracy:.4f}"]
        row.append(format_data_size(r.d_t_size, r.pseudo_fraction))
        rows.append(row)
    return header, rows


def render_table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) for i, h in enumerate(header)]
    lines = [" | ".join(h.ljust(w) for h, w in zip(header, widths)),
             "-+-".join("-" * w for w in widths)]
    lines += [" | ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows]
    return "\n".join(lines) + "\n"


def cmd_ssrm(exp: Experiment) -> list[Path]:
    data = _load_pools(exp)
    test = _test_set(exp, required=False)
    exp.out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    dump = exp.config["ssrm"]["dump_augmented"]

    def on_iteration(t, model, d_t):
        save_snapshot(model, exp.snapshot_path(t))
        written.append(exp.snapshot_path(t))
        if dump:
            p = exp.path(f"augmented_t{t}.jsonl")
            write_records(p, d_t, exp.meta("augmented", t=t))
            written.append(p)

    cache = FeatureCache(exp.featurizer)
    _, reports = run_ssrm(ModelSnapshot.zeros(exp.featurizer), data, exp.ssrm, test,
                          cache=cache, run_hash=exp.hash, on_iteration=on_iteration)
    with open(exp.path("reports.jsonl"), "w", encoding="utf-8", newline="\n") as f:
        for r in reports:
            f.write(json.dumps({"config_hash": exp.hash, **r.to_dict()}, sort_keys=True) + "\n")
    header, rows = summary_rows(reports, data.m)
    _write_csv(exp.path("summary.csv"), exp.hash, header, rows)
    sys.stdout.write(render_table(header, rows))
    return [*written, exp.path("reports.jsonl"), exp.path("summary.csv")]


def cmd_eval(exp: Experiment) -> list[Path]:
    model = load_snapshot(exp.eval_snapshot_path)
    test = _test_set(exp, required=True)
    report = evaluate(model, test)
    exp.out.mkdir(parents=True, exist_ok=True)
    _write_json(exp.path("eval.json"), {"config_hash": exp.hash, "snapshot": str(exp.eval_snapshot_path),
                                        "test": str(exp.test_path), **report.to_dict()})
    rows = [[c, f"{a:.4f}", report.category_counts[c]] for c, a in report.per_category.items()]
    rows.append(["overall", f"{report.overall_accuracy:.4f}", report.n_examples])
    _write_csv(exp.path("eval.csv"), exp.hash, ["category", "accuracy", "count"], rows)
    logger.info("accuracy %.4f on %d examples", report.overall_accuracy, report.n_examples)
    return [exp.path("eval.json"), exp.path("eval.csv")]


def cmd_calibrate(exp: Experiment) -> list[Path]:
    model = load_snapshot(exp.eval_snapshot_path)
    test = _test_set(exp, required=True)
    n_bins = exp.config["eval"]["n_bins"]
    cache = FeatureCache(model.featurizer)
    argmax_rep = calibration(model, test, n_bins, cache)
    prob_rep = probability_calibration(model, test, n_bins, cache)
    hist = confidence_histogram(model, [ex.triplet for ex in test], n_bins, cache)
    truth_hist = ground_truth_histogram(model, test, n_bins, cache)
    exp.out.mkdir(parents=True, exist_ok=True)
    _write_json(exp.path("calibration.json"), {
        "config_hash": exp.hash,
        "snapshot": str(exp.eval_snapshot_path),
        "argmax_confidence": argmax_rep.to_dict(),
        "probability_a": prob_rep.to_dict(),
        "confidence_histogram": hist,
        "ground_truth_probability_histogram": truth_hist,
        "note": "ece is the count-weighted absolute gap over equal-width bins",
    })
    header = ["curve", "lower", "upper", "mean_confidence", "empirical_accuracy", "count"]
    rows = []
    for curve, rep in (("argmax_confidence", argmax_rep), ("probability_a", prob_rep)):
        rows += [[curve, f"{b.lower:.4f}", f"{b.upper:.4f}", f"{b.mean_confidence:.6f}",
                  f"{b.empirical_accuracy:.6f}", b.count] for b in rep.bins]
    _write_csv(exp.path("calibration.csv"), exp.hash, header, rows)
    logger.info("ECE %.4f", argmax_rep.ece)
    return [exp.path("calibration.json"), exp.path("calibration.csv")]


def cmd_sweep(exp: Experiment) -> list[Path]:
    examples = _load_labeled(exp.data_path)
    if exp.config["split"]["randomize_order"]:
        examples = randomize_order(examples, exp.split_spec.seed)
    test = _test_set(exp, required=True)
    results = labeled_fraction_sweep(examples, exp.fractions, exp.ssrm, test,
                                     ModelSnapshot.zeros(exp.featurizer), exp.split_spec.seed)
    exp.out.mkdir(parents=True, exist_ok=True)
    _write_json(exp.path("sweep.json"), {
        "config_hash": exp.hash,
        "results": [{"labeled_fraction": str(f), "accuracy": a} for f, a in results],
    })
    _write_csv(exp.path("sweep.csv"), exp.hash, ["labeled_fraction", "accuracy"],
               [[str(f), f"{a:.4f}"] for f, a in results])
    return [exp.path("sweep.json"), exp.path("sweep.csv")]


COMMANDS: dict[str, tuple[Callable[[Experiment], list[Path]], str]] = {
    "gen": (cmd_gen, "generate a synthetic train/test world with oracle side files"),
    "split": (cmd_split, "randomize response order and split into labeled/unlabeled pools"),
    "srm": (cmd_srm, "supervised fit on the labeled pool only"),
    "ssrm": (cmd_ssrm, "run the self-training loop"),
    "eval": (cmd_eval, "accuracy of a snapshot on the test set"),
    "calibrate": (cmd_calibrate, "reliability bins, ECE and confidence histogram"),
    "sweep": (cmd_sweep, "single-iteration SSRM across labeled fractions"),
}

_EXPECTED: dict[str, Callable[[Experiment], list[Path]]] = {
    "gen": lambda e: [e.path(n) for n in ("train.jsonl", "train.oracle.jsonl",
                                          "test.jsonl", "test.oracle.jsonl")],
    "split": lambda e: [e.path("labeled.jsonl"), e.path("unlabeled.jsonl")],
    "srm": lambda e: [e.path("srm.npz")],
    "ssrm": lambda e: [*(e.snapshot_path(t) for t in range(e.ssrm.iterations_T)),
                       e.path("reports.jsonl"), e.path("summary.csv")],
    "eval": lambda e: [e.path("eval.json"), e.path("eval.csv")],
    "calibrate": lambda e: [e.path("calibration.json"), e.path("calibration.csv")],
    "sweep": lambda e: [e.path("sweep.json"), e.path("sweep.csv")],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssrmlab", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--verify", action="store_true",
                       help="check existing artifacts against the config hash instead of running")
        p.add_argument("-v", "--verbose", action="store_true")
        for key in _flat_keys(DEFAULT_CONFIG):
            p.add_argument(f"--{key}", dest=f"override:{key}", metavar="VALUE")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k.split(":", 1)[1]: v for k, v in vars(args).items()
                 if k.startswith("override:") and v is not None}
    try:
        exp = load_config(args.config, overrides)
        if args.verify:
            verify_artifacts(exp, _EXPECTED[args.command](exp))
            print(f"verified {args.command} artifacts against config hash {exp.hash[:12]}")
            return 0
        written = COMMANDS[args.command][0](exp)
        verify_artifacts(exp, written)
    except (ConfigError, DatasetError, SnapshotError, VerificationError,
            FileNotFoundError, ValueError, FloatingPointError) as e:
        print(f"ssrmlab {args.command}: error: {e}", file=sys.stderr)
        return 1
    for p in written:
        logger.info("wrote %s", p)
    return 0


if __name__ == "__main__":
    sys.exit(main())
