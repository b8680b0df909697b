"""``sirank`` command line: generate data, train, evaluate, compare, audit.

Exit codes::

    0  success
    1  gradient audit failed
    2  bad command-line usage
    3  configuration error
    4  data error (missing/unreadable/inconsistent input)
    5  numeric failure (non-finite loss or parameters)

Log verbosity comes from ``SIRANK_LOG_LEVEL`` (default ``WARNING``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import errors
from .data import (
    CsvSchema,
    Dataset,
    PerturbationSpec,
    SyntheticConfig,
    gen_synthetic,
    load_csv,
    load_letor,
    perturb,
    save_letor,
    split,
)
from .metrics import mean_ndcg
from .scorer import FeaturePartition, SirScorer, init_scorer, load_scorer, save_scorer
from .training import TrainConfig, grad_audit, train

log = logging.getLogger("sirank")

EXIT_OK = 0
EXIT_AUDIT_FAILED = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_NUMERIC = 5

CONFIG_ERRORS = (errors.InvalidConfig,)
DATA_ERRORS = (
    errors.ParseError,
    errors.EmptyDataset,
    errors.MissingColumn,
    errors.TooFewQueries,
    errors.NonPositiveFeature,
    errors.InconsistentQueryFeatures,
    errors.DimensionMismatch,
    errors.PartitionMismatch,
    errors.AllZeroLabels,
    FileNotFoundError,
    IsADirectoryError,
    PermissionError,
)
NUMERIC_ERRORS = (errors.NonFiniteLoss, FloatingPointError)

VARIANT_NAMES = {
    ("listnet", False): "ListNet (SIR)",
    ("listnet", True): "ListNet",
    ("listmle", False): "ListMLE (SIR)",
    ("listmle", True): "ListMLE",
}


class ConfigError(errors.InvalidConfig):
    pass


# -- configuration ----------------------------------------------------------


@dataclass
class ExperimentConfig:
    source: dict
    partition: FeaturePartition | None
    train: TrainConfig
    perturbation: PerturbationSpec
    out: Path
    fmt: str = "table"
    seed: int = 0
    train_fraction: float = 0.7
    valid_fraction: float = 0.1
    ndcg_k: int | None = 10
    skip_zero_label_queries: bool = False
    raw: dict = field(default_factory=dict)


def _read_config_file(path) -> dict:
    if path is None:
        return {}
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return cfg


def build_config(args) -> ExperimentConfig:
    """Merge defaults, the config file and command-line flags (flags win)."""
    raw = _read_config_file(getattr(args, "config", None))
    known = {
        "seed", "data", "partition", "split", "train", "perturb",
        "ndcg_k", "out", "format", "skip_zero_label_queries",
    }
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")

    seed = int(args.seed if getattr(args, "seed", None) is not None else raw.get("seed", 0))
    source = dict(raw.get("data") or {"synthetic": {}})
    if len(source) != 1 or next(iter(source)) not in ("synthetic", "letor", "csv"):
        raise ConfigError("data must name exactly one source: synthetic, letor or csv")
    if "synthetic" in source:
        syn = dict(source["synthetic"] or {})
        syn.setdefault("seed", seed)
        source["synthetic"] = syn

    partition = None
    if raw.get("partition") is not None:
        partition = FeaturePartition.from_dict(raw["partition"])

    tdict = dict(raw.get("train") or {})
    tdict["seed"] = seed
    if getattr(args, "loss", None):
        tdict["loss"] = args.loss
    if getattr(args, "variant", None):
        tdict["baseline_mode"] = args.variant == "baseline"
    ndcg_k = raw.get("ndcg_k", 10)
    if getattr(args, "ndcg_k", None) is not None:
        ndcg_k = args.ndcg_k
    if ndcg_k is not None and int(ndcg_k) < 1:
        raise ConfigError("ndcg_k must be >= 1")
    tdict["ndcg_k"] = ndcg_k
    tcfg = TrainConfig.from_dict(tdict)

    if getattr(args, "perturb", None) is not None:
        spec = PerturbationSpec.parse(args.perturb)
    elif raw.get("perturb") is not None:
        try:
            spec = PerturbationSpec(tuple(tuple(e) for e in raw["perturb"]))
        except (TypeError, ValueError):
            raise ConfigError("perturb must be a list of [column, factor] pairs") from None
    elif "synthetic" in source:
        syn_cfg = SyntheticConfig.from_dict(source["synthetic"])
        spec = PerturbationSpec(((syn_cfg.informative_column, 100.0),))
    else:
        spec = PerturbationSpec()

    out = getattr(args, "out", None) or raw.get("out") or "sirank-out"
    fmt = getattr(args, "format", None) or raw.get("format", "table")
    if fmt not in ("table", "json"):
        raise ConfigError(f"format must be 'table' or 'json', got {fmt!r}")
    split_cfg = raw.get("split") or {}
    return ExperimentConfig(
        source=source,
        partition=partition,
        train=tcfg,
        perturbation=spec,
        out=Path(out),
        fmt=fmt,
        seed=seed,
        train_fraction=float(split_cfg.get("train_fraction", 0.7)),
        valid_fraction=float(split_cfg.get("valid_fraction", 0.1)),
        ndcg_k=ndcg_k,
        skip_zero_label_queries=bool(raw.get("skip_zero_label_queries", False)),
        raw=raw,
    )


def load_source(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """``(train, test)`` for the configured source; a single file is split by query."""
    kind, spec = next(iter(cfg.source.items()))
    if kind == "synthetic":
        syn = SyntheticConfig.from_dict(spec)
        if cfg.partition is not None and cfg.partition != syn.partition:
            raise ConfigError("synthetic data fixes its own partition; drop the partition key")
        return split(gen_synthetic(syn), cfg.train_fraction, cfg.seed)

    def read(path):
        if kind == "letor":
            if cfg.partition is None:
                raise ConfigError("LETOR data needs a 'partition' in the config")
            return load_letor(path, cfg.partition)
        schema = CsvSchema.from_dict(spec.get("schema") or {})
        ds = load_csv(path, schema)
        part = cfg.partition or ds.partition
        if part is None:
            raise ConfigError("CSV data needs a partition (config or schema)")
        return ds.with_partition(part)

    if "path" not in spec:
        raise ConfigError(f"{kind} source needs a 'path'")
    data = read(spec["path"])
    if spec.get("test_path"):
        return data, read(spec["test_path"])
    return split(data, cfg.train_fraction, cfg.seed)


def train_valid(cfg: ExperimentConfig, train_full: Dataset) -> tuple[Dataset, Dataset]:
    if cfg.valid_fraction <= 0:
        return train_full, train_full
    return split(train_full, 1.0 - cfg.valid_fraction, cfg.seed)


# -- reports ----------------------------------------------------------------


@dataclass
class EvalRow:
    model: str
    unperturbed: float
    perturbed: float | None
    unperturbed_full: float
    perturbed_full: float | None


@dataclass
class EvalReport:
    rows: list
    metadata: dict

    def to_dict(self) -> dict:
        return {
            "metadata": self.metadata,
            "rows": [vars(r) for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        k = self.metadata.get("ndcg_k")
        blocks = [(f"NDCG@{k}" if k else "NDCG", "unperturbed", "perturbed")]
        if k:
            blocks.append(("NDCG (full list)", "unperturbed_full", "perturbed_full"))
        width = max(len("Model"), *(len(r.model) for r in self.rows))
        lines = []
        for title, a, b in blocks:
            lines.append(title)
            lines.append(f"{'Model':<{width}}  {'Unperturbed':>11}  {'Perturbed':>9}")
            lines.append("-" * (width + 24))
            for r in self.rows:
                pa = _fmt3(getattr(r, a))
                pb = _fmt3(getattr(r, b))
                lines.append(f"{r.model:<{width}}  {pa:>11}  {pb:>9}")
            lines.append("")
        m = self.metadata
        lines.append(f"seed {m.get('seed')}  dataset {m.get('dataset_fingerprint', '')[:16]}")
        if m.get("perturbation"):
            pert = ", ".join(f"col {c} x{f:g}" for c, f in m["perturbation"])
            lines.append(f"perturbation: {pert}")
        return "\n".join(lines) + "\n"


def _fmt3(v) -> str:
    return "-" if v is None else f"{v:.3f}"


def evaluate(scorer: SirScorer, name: str, test: Dataset, spec: PerturbationSpec, cfg) -> EvalRow:
    if scorer.partition != test.partition:
        raise errors.PartitionMismatch("model and dataset partitions differ")
    skip = cfg.skip_zero_label_queries
    unp = mean_ndcg(test, scorer, cfg.ndcg_k, skip)
    unp_full = mean_ndcg(test, scorer, None, skip)
    per = per_full = None
    if spec:
        pert = perturb(test, spec)
        per = mean_ndcg(pert, scorer, cfg.ndcg_k, skip)
        per_full = mean_ndcg(pert, scorer, None, skip)
    return EvalRow(name, unp, per, unp_full, per_full)


def _metadata(cfg: ExperimentConfig, test: Dataset) -> dict:
    return {
        "seed": cfg.seed,
        "ndcg_k": cfg.ndcg_k,
        "dataset_fingerprint": test.fingerprint(),
        "n_test_queries": len(test),
        "perturbation": cfg.perturbation.to_list(),
        "train_config": {k: v for k, v in cfg.train.to_dict().items() if k not in ("loss", "baseline_mode")},
        "tuning": "equal budget, equal seed; no hyperparameter search",
    }


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _emit(report: EvalReport, cfg: ExperimentConfig, stem: str):
    _write(cfg.out / f"{stem}.json", report.to_json())
    _write(cfg.out / f"{stem}.txt", report.to_table())
    sys.stdout.write(report.to_table() if cfg.fmt == "table" else report.to_json())


# -- commands ---------------------------------------------------------------


def cmd_gen_synthetic(args) -> int:
    cfg = build_config(args)
    if "synthetic" not in cfg.source:
        raise ConfigError("gen-synthetic needs a synthetic data source")
    syn = SyntheticConfig.from_dict(cfg.source["synthetic"])
    ds = gen_synthetic(syn)
    cfg.out.mkdir(parents=True, exist_ok=True)
    save_letor(ds, cfg.out / "synthetic.txt")
    _write(cfg.out / "partition.json", json.dumps(syn.partition.to_dict()) + "\n")
    print(f"wrote {len(ds)} queries to {cfg.out / 'synthetic.txt'} (fingerprint {ds.fingerprint()[:16]})")
    return EXIT_OK


def run_training(cfg: ExperimentConfig, tcfg: TrainConfig, train_full: Dataset):
    fit, valid = train_valid(cfg, train_full)
    report = train(fit, valid, tcfg)
    report.model.metadata.update(
        seed=tcfg.seed,
        dataset_fingerprint=train_full.fingerprint(),
        name=VARIANT_NAMES[(tcfg.loss, tcfg.baseline_mode)],
    )
    log.info("trained %s in %.1fs", report.model.metadata["name"], report.seconds)
    return report


def cmd_train(args) -> int:
    cfg = build_config(args)
    train_full, _ = load_source(cfg)
    cfg.perturbation.validate(train_full.partition)
    report = run_training(cfg, cfg.train, train_full)
    cfg.out.mkdir(parents=True, exist_ok=True)
    save_scorer(report.model, cfg.out / "model.json")
    _write(cfg.out / "train_report.json", json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    print(
        f"{report.model.metadata['name']}: best valid NDCG {max(report.valid_ndcg):.3f} "
        f"at epoch {report.best_epoch}; model at {cfg.out / 'model.json'}"
    )
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = build_config(args)
    model_path = Path(args.model)
    if not model_path.exists():
        raise FileNotFoundError(f"model file not found: {model_path}")
    scorer = load_scorer(model_path)
    if args.data:
        if cfg.partition is None:
            cfg.partition = scorer.partition
        test = load_letor(args.data, cfg.partition)
    else:
        _, test = load_source(cfg)
    if scorer.partition != test.partition:
        raise errors.PartitionMismatch(
            f"model partition {scorer.partition.to_dict()} != data partition {test.partition.to_dict()}"
        )
    name = scorer.metadata.get("name", "SIR" if not scorer.baseline else "baseline")
    row = evaluate(scorer, name, test, cfg.perturbation, cfg)
    _emit(EvalReport([row], _metadata(cfg, test)), cfg, "eval_report")
    return EXIT_OK


def cmd_experiment(args) -> int:
    cfg = build_config(args)
    train_full, test = load_source(cfg)
    cfg.perturbation.validate(test.partition)
    rows = []
    for loss in ("listnet", "listmle"):
        for baseline in (True, False):
            tcfg = replace(cfg.train, loss=loss, baseline_mode=baseline)
            report = run_training(cfg, tcfg, train_full)
            name = VARIANT_NAMES[(loss, baseline)]
            stem = name.lower().replace(" ", "_").replace("(", "").replace(")", "")
            save_scorer(report.model, cfg.out / "models" / f"{stem}.json")
            _write(
                cfg.out / "models" / f"{stem}.train_report.json",
                json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
            )
            rows.append(evaluate(report.model, name, test, cfg.perturbation, cfg))
    _emit(EvalReport(rows, _metadata(cfg, test)), cfg, "report")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = build_config(args)
    syn = SyntheticConfig(n_queries=4, items_per_query=5, M=3, K1=2, K2=2, seed=cfg.seed)
    data = gen_synthetic(syn)
    corrupt = {"wide.w": 2.0} if args.inject_fault else None
    results = {}
    ok = True
    for loss in ("listnet", "listmle"):
        scorer = init_scorer(syn.partition, None, (4,), L=2, seed=cfg.seed)
        audit = grad_audit(scorer, loss, data, h=args.h, tol=args.tol, corrupt=corrupt)
        results[loss] = audit.to_dict()
        ok = ok and audit.passed
    text = json.dumps({"passed": ok, "audits": results}, indent=2, sort_keys=True) + "\n"
    if args.out:
        _write(Path(args.out) / "gradcheck.json", text)
    sys.stdout.write(text)
    return EXIT_OK if ok else EXIT_AUDIT_FAILED


# -- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sirank", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        return p

    def run_opts(p):
        p.add_argument("--perturb", metavar="COL:FACTOR[,COL:FACTOR...]")
        p.add_argument("--ndcg-k", type=int, dest="ndcg_k")
        p.add_argument("--format", choices=("table", "json"))
        return p

    common(sub.add_parser("gen-synthetic", help="write a synthetic LETOR dataset"))
    p = run_opts(common(sub.add_parser("train", help="train one model variant")))
    p.add_argument("--variant", choices=("baseline", "sir"))
    p.add_argument("--loss", choices=("listnet", "listmle"))
    p = run_opts(common(sub.add_parser("eval", help="evaluate a saved model")))
    p.add_argument("--model", required=True)
    p.add_argument("--data", help="LETOR file to evaluate instead of the configured test split")
    run_opts(common(sub.add_parser("experiment", help="train and compare all four variants")))
    p = common(sub.add_parser("gradcheck", help="finite-difference audit of the backward pass"))
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)
    return parser


COMMANDS = {
    "gen-synthetic": cmd_gen_synthetic,
    "train": cmd_train,
    "eval": cmd_eval,
    "experiment": cmd_experiment,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("SIRANK_LOG_LEVEL", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    try:
        with np.errstate(over="raise", invalid="raise", divide="raise"):
            return COMMANDS[args.command](args)
    except CONFIG_ERRORS as e:
        print(f"sirank: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DATA_ERRORS as e:
        msg = e.strerror + f": {e.filename}" if isinstance(e, OSError) and e.filename else str(e)
        print(f"sirank: data error: {msg}", file=sys.stderr)
        return EXIT_DATA
    except NUMERIC_ERRORS as e:
        print(f"sirank: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
