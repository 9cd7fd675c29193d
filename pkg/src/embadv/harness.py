"""Experiment matrix, config resolution and the ``embadv`` command line.

Every setting has one flat key (``learning_rate``, ``epsilon``, ``seeds`` ...).
Values come from built-in defaults, then an optional config file (JSON object
or ``key = value`` lines), then command-line flags.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import statistics
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

from .adversarial import AdvConfig
from .data import DatasetFormatError, DatasetSpec, generate, load, save, split
from .metrics import default_attack, evaluate
from .model import init_params, load_checkpoint, save_checkpoint
from .optim import OBJECTIVE_NAMES, TrainConfig, train

log = logging.getLogger("embadv")

SUMMARY_FIELDS = ("objective", "n", "clean_mean", "clean_std", "robust_mean", "robust_std",
                  "wall_clock_mean", "wall_clock_ratio")
WALL_CLOCK_FIELDS = ("wall_clock_seconds", "wall_clock_mean", "wall_clock_ratio")


REFERENCE_DATA = DatasetSpec(task_kind="ranking", num_examples=3000, vocab_size=64, seq_len=12,
                             num_options=4, key_token_count=16, label_noise_rate=0.05, seed=0)
REFERENCE_TRAIN = TrainConfig(learning_rate=0.03, batch_size=32,
                              adv=AdvConfig(epsilon=0.05, init="uniform"))


class ConfigError(ValueError):
    pass


def _floats(value) -> tuple:
    if isinstance(value, str):
        value = [v for v in value.split(",") if v.strip()]
    return tuple(float(v) for v in value)


def _ints(value) -> tuple:
    if isinstance(value, str):
        value = [v for v in value.split(",") if v.strip()]
    return tuple(int(v) for v in value)


def _names(value) -> tuple:
    if isinstance(value, str):
        value = value.split(",")
    return tuple(str(v).strip().lower() for v in value if str(v).strip())


def _seeds(value):
    # a bare count ("5") or an explicit list ("0,3,7")
    if isinstance(value, int) and not isinstance(value, bool):
        return value
    if isinstance(value, str) and "," not in value:
        return int(value)
    return _ints(value)


def _optional(parse):
    def inner(value):
        if value is None or (isinstance(value, str) and value.lower() in ("", "none", "null")):
            return None
        return parse(value)
    return inner


def _bool(value) -> bool:
    if isinstance(value, str):
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return bool(value)


# key -> (parser, default); defaults are the reference desk-scale experiment
SETTINGS = {
    # data
    "task": (str, "ranking"),
    "num_examples": (int, 3000),
    "vocab_size": (int, 64),
    "seq_len": (int, 12),
    "num_options": (int, 4),
    "candidates": (int, 4),
    "key_tokens": (int, 16),
    "noise": (float, 0.05),
    "data_seed": (int, 0),
    "data": (_optional(str), None),
    "split": (_floats, (2 / 3, 1 / 6, 1 / 6)),
    # model
    "d_emb": (int, 16),
    "hidden": (_ints, (32,)),
    "activation": (str, "relu"),
    "embedding_scale": (float, 1.0),
    # training
    "objective": (str, "standard"),
    "learning_rate": (float, 0.03),
    "batch_size": (int, 32),
    "max_epochs": (int, 10),
    "warmup_ratio": (float, 0.1),
    "clip_norm": (float, 1.0),
    "dropout": (float, 0.1),
    "seed": (int, 0),
    # perturbation used in training
    "epsilon": (float, 0.05),
    "step_size": (_optional(float), None),
    "steps": (int, 1),
    "alpha": (float, 1.0),
    "init": (str, "uniform"),
    # evaluation attack; eval_epsilon defaults to epsilon
    "eval_epsilon": (_optional(float), None),
    "eval_step_size": (_optional(float), None),
    "eval_steps": (int, 5),
    # matrix
    "objectives": (_names, OBJECTIVE_NAMES),
    "seeds": (_seeds, 5),
    "workers": (int, 1),
    "checkpoints": (_bool, False),
    # gradcheck
    "trials": (int, 100),
    "tol": (float, 1e-4),
    "h": (float, 1e-5),
}


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse a JSON object or flat ``key = value`` lines (``#`` starts a comment)."""
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            raw = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}: invalid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{source}: JSON config must be an object")
        return raw
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        raw[key] = value
    return raw


def resolve_settings(config_path=None, overrides: Optional[dict] = None) -> dict:
    """Defaults, then the config file, then ``overrides``; each value parsed and checked."""
    layers = []
    if config_path is not None:
        path = Path(config_path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        layers.append((str(path), parse_config_text(text, str(path))))
    layers.append(("command line", overrides or {}))
    settings = {k: default for k, (_, default) in SETTINGS.items()}
    for source, raw in layers:
        for key, value in raw.items():
            key = key.replace("-", "_")
            if key not in SETTINGS:
                raise ConfigError(f"{source}: unknown setting {key!r}")
            try:
                settings[key] = SETTINGS[key][0](value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{source}: bad value for {key!r}: {value!r} ({exc})") from None
    return settings


@dataclass(frozen=True)
class ModelConfig:
    d_emb: int = 16
    hidden: tuple = (32,)
    activation: str = "relu"
    embedding_scale: float = 1.0

    def build(self, vocab_size: int, dropout_rate: float, seed: int):
        return init_params(vocab_size=vocab_size, d_emb=self.d_emb, hidden=self.hidden,
                           activation=self.activation, dropout_rate=dropout_rate,
                           embedding_scale=self.embedding_scale, seed=seed)


@dataclass(frozen=True)
class ExperimentConfig:
    data: DatasetSpec = REFERENCE_DATA
    data_path: Optional[str] = None
    split: tuple = (2 / 3, 1 / 6, 1 / 6)
    objectives: tuple = OBJECTIVE_NAMES
    seeds: tuple = (0, 1, 2, 3, 4)
    train: TrainConfig = REFERENCE_TRAIN
    model: ModelConfig = field(default_factory=ModelConfig)
    attack: AdvConfig = field(default_factory=default_attack)
    out_dir: str = "out"
    workers: int = 1
    checkpoints: bool = False

    def __post_init__(self):
        if not self.objectives:
            raise ValueError("at least one objective is required")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        unknown = [o for o in self.objectives if o not in OBJECTIVE_NAMES]
        if unknown:
            raise ValueError(f"unknown objectives {unknown}; choose from {OBJECTIVE_NAMES}")
        if len(set(self.objectives)) != len(self.objectives) or len(set(self.seeds)) != len(self.seeds):
            raise ValueError("objectives and seeds must not repeat")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def cell_config(self, objective: str, seed: int) -> dict:
        """Everything that determines one cell's outcome, in canonical form."""
        data = {"path": self.data_path, "sha256": _file_digest(self.data_path)} \
            if self.data_path else self.data.to_dict()
        return {
            "data": data,
            "split": list(self.split),
            "model": {**asdict(self.model), "hidden": list(self.model.hidden)},
            "train": replace(self.train, objective=objective, seed=seed).to_dict(),
            "attack": self.attack.to_dict(),
        }

    def to_dict(self) -> dict:
        return {
            "data": self.data.to_dict(),
            "data_path": self.data_path,
            "split": list(self.split),
            "objectives": list(self.objectives),
            "seeds": list(self.seeds),
            "train": self.train.to_dict(),
            "model": {**asdict(self.model), "hidden": list(self.model.hidden)},
            "attack": self.attack.to_dict(),
        }


def _file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_hash(cell: dict) -> str:
    return hashlib.sha256(canonical_json(cell).encode()).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def experiment_from_settings(s: dict) -> ExperimentConfig:
    data = DatasetSpec(task_kind=s["task"], num_examples=s["num_examples"],
                       vocab_size=s["vocab_size"], seq_len=s["seq_len"],
                       num_options=s["num_options"], candidates_per_question=s["candidates"],
                       key_token_count=s["key_tokens"], label_noise_rate=s["noise"],
                       seed=s["data_seed"])
    adv = AdvConfig(epsilon=s["epsilon"], step_size=s["step_size"], steps=s["steps"],
                    alpha=s["alpha"], init=s["init"])
    train_cfg = TrainConfig(learning_rate=s["learning_rate"], batch_size=s["batch_size"],
                            max_epochs=s["max_epochs"], warmup_ratio=s["warmup_ratio"],
                            clip_norm=s["clip_norm"], dropout_rate=s["dropout"], seed=s["seed"],
                            objective=s["objective"], adv=adv)
    eval_eps = s["epsilon"] if s["eval_epsilon"] is None else s["eval_epsilon"]
    attack = default_attack(eval_eps)
    if s["eval_step_size"] is not None or s["eval_steps"] != attack.steps:
        attack = AdvConfig(epsilon=eval_eps, steps=s["eval_steps"],
                           step_size=s["eval_step_size"] if s["eval_step_size"] is not None
                           else attack.step_size)
    seeds = s["seeds"]
    if isinstance(seeds, int):
        if seeds < 1:
            raise ValueError("seeds count must be >= 1")
        seeds = tuple(range(s["seed"], s["seed"] + seeds))
    model = ModelConfig(d_emb=s["d_emb"], hidden=tuple(s["hidden"]), activation=s["activation"],
                        embedding_scale=s["embedding_scale"])
    return ExperimentConfig(data=data, data_path=s["data"], split=tuple(s["split"]),
                            objectives=tuple(s["objectives"]), seeds=tuple(seeds),
                            train=train_cfg, model=model, attack=attack,
                            workers=s["workers"], checkpoints=s["checkpoints"])


def load_splits(cfg: ExperimentConfig):
    dataset = load(cfg.data_path) if cfg.data_path else generate(cfg.data)
    parts = split(dataset, cfg.split)
    if len(parts) != 3:
        raise ValueError(f"split needs three fractions (train, dev, test), got {len(cfg.split)}")
    if min(len(p) for p in parts) == 0:
        raise ValueError(f"split {cfg.split} of {len(dataset)} examples leaves an empty part")
    return parts


@dataclass
class RunRecord:
    objective: str
    seed: int
    config_hash: str
    status: str = "ok"
    report: Optional[dict] = None
    dev_accuracy: Optional[float] = None
    best_epoch: Optional[int] = None
    wall_clock_seconds: float = 0.0
    error: Optional[str] = None

    @property
    def name(self) -> str:
        return f"{self.objective}-{self.seed}"

    def to_dict(self) -> dict:
        return asdict(self)


def run_cell(cfg: ExperimentConfig, objective: str, seed: int, splits=None,
             out_dir: Optional[Path] = None) -> RunRecord:
    """Train and evaluate one (objective, seed) cell; failures become a failed record."""
    cell = cfg.cell_config(objective, seed)
    record = RunRecord(objective, seed, config_hash(cell))
    log_buf = io.StringIO()
    start = time.perf_counter()
    try:
        train_set, dev, test = splits if splits is not None else load_splits(cfg)
        tcfg = replace(cfg.train, objective=objective, seed=seed)
        params = cfg.model.build(train_set.spec.vocab_size, tcfg.dropout_rate, seed)
        best, epochs = train(params, train_set, tcfg, dev, log_fh=log_buf)
        report = evaluate(best, test, cfg.attack)
        dev_accs = [r["dev_accuracy"] for r in epochs]
        record.dev_accuracy = max(dev_accs)
        record.best_epoch = dev_accs.index(record.dev_accuracy) + 1
        record.report = report.to_dict()
        if out_dir is not None and cfg.checkpoints:
            (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
            save_checkpoint(best, out_dir / "checkpoints" / f"{record.name}.npz")
    except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the matrix
        record.status = "failed"
        record.error = f"{type(exc).__name__}: {exc}"
        log.debug("cell %s failed:\n%s", record.name, traceback.format_exc())
    record.wall_clock_seconds = time.perf_counter() - start
    if out_dir is not None:
        write_run(out_dir, record, log_buf.getvalue())
    return record


def write_run(out_dir: Path, record: RunRecord, epoch_log: str):
    runs = out_dir / "runs"
    runs.mkdir(parents=True, exist_ok=True)
    (runs / f"{record.name}.jsonl").write_text(epoch_log)
    (runs / f"{record.name}.report.json").write_text(
        json.dumps(record.to_dict(), sort_keys=True, indent=2) + "\n")


def _cell_worker(args):
    cfg, objective, seed, splits, out_dir = args
    return run_cell(cfg, objective, seed, splits, out_dir)


def summarize(records, objectives) -> dict:
    """Per-objective mean and sample standard deviation over successful cells."""
    rows = []
    for obj in objectives:
        ok = [r for r in records if r.objective == obj and r.status == "ok"]
        clean = [r.report["accuracy"] for r in ok]
        robust = [r.report["robust_accuracy"] for r in ok]
        walls = [r.wall_clock_seconds for r in ok]
        rows.append({
            "objective": obj,
            "n": len(ok),
            "clean_mean": statistics.fmean(clean) if ok else None,
            "clean_std": statistics.stdev(clean) if len(ok) > 1 else None,
            "robust_mean": statistics.fmean(robust) if ok else None,
            "robust_std": statistics.stdev(robust) if len(ok) > 1 else None,
            "wall_clock_mean": statistics.fmean(walls) if ok else None,
        })
    base = next((r["wall_clock_mean"] for r in rows if r["objective"] == "standard"), None)
    for r in rows:
        r["wall_clock_ratio"] = (r["wall_clock_mean"] / base
                                 if base and r["wall_clock_mean"] is not None else None)
    failed = [{"objective": r.objective, "seed": r.seed, "error": r.error}
              for r in records if r.status != "ok"]
    return {"objectives": rows, "failed": failed}


def write_summary(out_dir: Path, summary: dict):
    (out_dir / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in summary["objectives"]:
        writer.writerow({k: "" if row[k] is None else row[k] for k in SUMMARY_FIELDS})
    (out_dir / "summary.csv").write_text(buf.getvalue())


def compare(cfg: ExperimentConfig, out_dir=None):
    """Run every (objective, seed) cell on one shared split; returns (records, summary)."""
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits = load_splits(cfg)
    (out / "data").mkdir(exist_ok=True)
    for name, part in zip(("train", "dev", "test"), splits):
        save(part, out / "data" / f"{name}.jsonl")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n")
    cells = [(cfg, obj, seed, splits, out) for obj in cfg.objectives for seed in cfg.seeds]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            records = list(pool.map(_cell_worker, cells))
    else:
        records = []
        for cell in cells:
            records.append(_cell_worker(cell))
            r = records[-1]
            log.info("%s %s %s", r.name, r.status,
                     "" if r.report is None else
                     f"clean={r.report['accuracy']:.3f} robust={r.report['robust_accuracy']:.3f}")
    summary = summarize(records, cfg.objectives)
    write_summary(out, summary)
    return records, summary


def strip_wall_clock(obj):
    """Drop wall-clock fields recursively, for comparing two runs byte for byte."""
    if isinstance(obj, dict):
        return {k: strip_wall_clock(v) for k, v in obj.items() if k not in WALL_CLOCK_FIELDS}
    if isinstance(obj, list):
        return [strip_wall_clock(v) for v in obj]
    return obj


# ---------------------------------------------------------------- command line

FLAG_GROUPS = {
    "data": ("task", "num_examples", "vocab_size", "seq_len", "num_options", "candidates",
             "key_tokens", "noise", "data_seed"),
    "split": ("data", "split"),
    "model": ("d_emb", "hidden", "activation", "embedding_scale"),
    "train": ("objective", "learning_rate", "batch_size", "max_epochs", "warmup_ratio",
              "clip_norm", "dropout", "epsilon", "step_size", "steps", "alpha", "init"),
    "attack": ("eval_epsilon", "eval_step_size", "eval_steps"),
    "matrix": ("objectives", "seeds", "workers", "checkpoints"),
    "gradcheck": ("trials", "tol", "h"),
}

COMMANDS = {
    "generate": ("write a synthetic dataset and its train/dev/test split", ("data", )),
    "train": ("train one model and evaluate it on the test split",
              ("data", "split", "model", "train", "attack")),
    "evaluate": ("score a checkpoint on a dataset file", ("attack",)),
    "compare": ("run the objective x seed matrix and write a summary",
                ("data", "split", "model", "train", "attack", "matrix")),
    "gradcheck": ("finite-difference audit of every op and objective", ("gradcheck",)),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="embadv",
                                     description="Embedding-space adversarial fine-tuning at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (help_text, groups) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON object or key = value file; flags override it")
        p.add_argument("--seed", help="run seed (dataset seed for generate)")
        p.add_argument("--out", help="output directory")
        if name == "evaluate":
            p.add_argument("--checkpoint", required=True, help="checkpoint .npz written by train")
            p.add_argument("--data", required=True, help="dataset .jsonl to score")
        for group in groups:
            for key in FLAG_GROUPS[group]:
                p.add_argument("--" + key.replace("_", "-"), dest=key, metavar=key.upper())
    return parser


def _overrides(args, keys) -> dict:
    out = {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}
    if args.seed is not None:
        out["seed"] = args.seed
    return out


def _emit(obj, out_dir: Optional[Path], filename: str):
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    sys.stdout.write(text)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / filename).write_text(text)


def cmd_generate(cfg: ExperimentConfig, s: dict, out: Path) -> int:
    dataset = generate(cfg.data)
    out.mkdir(parents=True, exist_ok=True)
    save(dataset, out / "dataset.jsonl")
    for name, part in zip(("train", "dev", "test"), split(dataset, cfg.split)):
        save(part, out / f"{name}.jsonl")
    print(f"wrote {len(dataset)} groups to {out}")
    return 0


def cmd_train(cfg: ExperimentConfig, s: dict, out: Path) -> int:
    cfg = replace(cfg, checkpoints=True)
    splits = load_splits(cfg)
    record = run_cell(cfg, cfg.train.objective, cfg.train.seed, splits, out_dir=out)
    print(json.dumps(record.to_dict(), sort_keys=True, indent=2))
    if record.status != "ok":
        print(f"embadv train: error: {record.error}", file=sys.stderr)
        return 1
    return 0


def cmd_evaluate(cfg: ExperimentConfig, out: Optional[Path], checkpoint: str, data: str) -> int:
    params = load_checkpoint(checkpoint)
    report = evaluate(params, load(data), cfg.attack)
    _emit(report.to_dict(), out, "report.json")
    return 0


def cmd_compare(cfg: ExperimentConfig, s: dict, out: Path) -> int:
    records, summary = compare(cfg, out)
    for row in summary["objectives"]:
        def fmt(v):
            return "   n/a" if v is None else f"{v:6.3f}"
        print(f"{row['objective']:<9} n={row['n']} clean {fmt(row['clean_mean'])} "
              f"+- {fmt(row['clean_std'])}  robust {fmt(row['robust_mean'])} "
              f"+- {fmt(row['robust_std'])}  time x{fmt(row['wall_clock_ratio'])}")
    for f in summary["failed"]:
        print(f"FAILED {f['objective']}-{f['seed']}: {f['error']}", file=sys.stderr)
    return 1 if summary["failed"] else 0


def cmd_gradcheck(s: dict, out: Optional[Path]) -> int:
    from .gradcheck import run_suite

    results = run_suite(trials=s["trials"], seed=s["seed"], h=s["h"], tol=s["tol"])
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name:<18} trials={r.trials} failures={r.failures} "
              f"max_rel_err={r.max_error:.2e}")
    ok = all(r.passed for r in results)
    print(f"{sum(r.passed for r in results)}/{len(results)} cases passed at tol={s['tol']:g}")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "gradcheck.json").write_text(
            json.dumps([r.to_dict() for r in results], indent=2) + "\n")
    return 0 if ok else 1


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    keys = [k for g in COMMANDS[args.command][1] for k in FLAG_GROUPS[g]]
    overrides = _overrides(args, keys)
    if args.command == "generate" and "seed" in overrides:
        overrides["data_seed"] = overrides.pop("seed")
    try:
        settings = resolve_settings(args.config, overrides)
        try:
            cfg = experiment_from_settings(settings)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if args.command == "gradcheck":
            return cmd_gradcheck(settings, Path(args.out) if args.out else None)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, Path(args.out) if args.out else None,
                                args.checkpoint, args.data)
        out = Path(args.out or "out")
        handler = {"generate": cmd_generate, "train": cmd_train, "compare": cmd_compare}
        return handler[args.command](cfg, settings, out)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"embadv: error: {exc}", file=sys.stderr)
        return 2
    except (DatasetFormatError, ValueError, OSError) as exc:
        print(f"embadv {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
