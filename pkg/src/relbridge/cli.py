"""Command-line entry point.

``relbridge run --config run.json`` trains and evaluates one or more models
over a list of seeds and appends per-seed rows to ``report.jsonl`` in the
output directory, re-rendering ``report.txt`` (mean ± sample std per model)
after every row.  A run config looks like::

    {"dataset": "TML1M", "data_dir": "data/TML1M",
     "model": ["bridge", "tnn_only", "random"],
     "bridge": {"lr": 0.01}, "preset": "default",
     "seeds": [0, 1, 2, 3, 4], "output_dir": "runs/tml1m", "workers": 1}

``dataset`` may also be ``{"dir": path}`` for any dataset directory with a
``schema.json``, or ``{"synth": {...}}`` for a generated dataset (regenerated
per seed).  Exit codes: 0 ok, 1 bad config (nothing written), 2 runtime failure.
"""
import argparse
import hashlib
import json
import logging
import statistics
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .bridge import COMPACT_PRESET, BridgeConfig, random_accuracy, save_checkpoint, train, write_history
from .datasets import SJTU, SynthSpec, load_dataset_dir, load_sjtu, save_dataset, synth_relational, write_split
from .errors import ConfigurationError, RelBridgeError
from .nn import component_rng

log = logging.getLogger("relbridge")

MODELS = ("bridge", "tnn_only", "random")
PRESETS = {"default": {}, "compact": COMPACT_PRESET}
DEFAULT_SEEDS = [0, 1, 2, 3, 4]
_KEYS = {"dataset", "data_dir", "model", "bridge", "preset", "seeds", "output_dir", "workers"}


@dataclass
class RunConfig:
    dataset: object
    models: list
    seeds: list = field(default_factory=lambda: list(DEFAULT_SEEDS))
    data_dir: str = None
    bridge: dict = field(default_factory=dict)
    preset: str = "default"
    output_dir: str = "runs"
    workers: int = 1

    @classmethod
    def from_dict(cls, d):
        """Validate everything that can be checked without touching data."""
        if not isinstance(d, dict):
            raise ConfigurationError("run config must be a JSON object")
        unknown = set(d) - _KEYS
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        if "dataset" not in d:
            raise ConfigurationError("config needs a 'dataset'")
        models = d.get("model", "bridge")
        models = [models] if isinstance(models, str) else list(models)
        bad = [m for m in models if m not in MODELS]
        if bad or not models:
            raise ConfigurationError(f"unknown model {bad or models}; choose from {list(MODELS)}")
        seeds = d.get("seeds", DEFAULT_SEEDS)
        if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds):
            raise ConfigurationError("seeds must be a nonempty list of non-negative integers")
        preset = d.get("preset", "default")
        if preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        workers = d.get("workers", 1)
        if not isinstance(workers, int) or workers < 1:
            raise ConfigurationError("workers must be a positive integer")
        cfg = cls(d["dataset"], models, list(seeds), d.get("data_dir"), dict(d.get("bridge", {})),
                  preset, d.get("output_dir", "runs"), workers)
        cfg.bridge_config(seeds[0])
        cfg._check_dataset()
        return cfg

    def bridge_config(self, seed, use_graph=True):
        settings = {**PRESETS[self.preset], **self.bridge, "seed": seed}
        if "seed" in self.bridge:
            raise ConfigurationError("set seeds through 'seeds', not inside 'bridge'")
        cfg = BridgeConfig.from_dict(settings)
        cfg.use_graph = cfg.use_graph and use_graph
        return cfg

    def _check_dataset(self):
        ds = self.dataset
        if isinstance(ds, str):
            if ds not in SJTU:
                raise ConfigurationError(f"unknown dataset {ds!r}; choose from {sorted(SJTU)} or use {{'dir': ...}}")
            if not self.data_dir or not Path(self.data_dir).is_dir():
                raise ConfigurationError(f"dataset {ds} needs an existing 'data_dir'")
        elif isinstance(ds, dict) and set(ds) == {"synth"}:
            SynthSpec.from_dict(ds["synth"])
        elif isinstance(ds, dict) and set(ds) == {"dir"}:
            if not (Path(ds["dir"]) / "schema.json").exists():
                raise ConfigurationError(f"{ds['dir']}: no schema.json")
        else:
            raise ConfigurationError("dataset must be a name, {'dir': path} or {'synth': spec}")

    @property
    def dataset_label(self):
        ds = self.dataset
        if isinstance(ds, str):
            return ds
        if "dir" in ds:
            return Path(ds["dir"]).name
        return f"synth-{SynthSpec.from_dict(ds['synth']).signal}"


def load_for_seed(run_cfg, seed):
    ds = run_cfg.dataset
    if isinstance(ds, str):
        return load_sjtu(ds, run_cfg.data_dir)
    if "dir" in ds:
        return load_dataset_dir(ds["dir"])
    return synth_relational(SynthSpec.from_dict(ds["synth"]), seed=seed)


def _config_hash(resolved):
    return hashlib.sha256(json.dumps(resolved, sort_keys=True).encode()).hexdigest()[:16]


def resolved_config(run_cfg, model, seed):
    out = {"dataset": run_cfg.dataset, "data_dir": run_cfg.data_dir, "model": model, "seed": seed}
    if model != "random":
        out["bridge"] = run_cfg.bridge_config(seed, use_graph=model == "bridge").to_dict()
    return out


def run_one(job):
    """Train/evaluate one (model, seed); runs in a worker process when ``workers > 1``."""
    run_cfg, model, seed, run_dir = job
    start = time.perf_counter()
    dataset = load_for_seed(run_cfg, seed)
    resolved = resolved_config(run_cfg, model, seed)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(resolved, indent=2), encoding="utf-8")
    row = {"dataset": run_cfg.dataset_label, "model": model, "seed": seed}
    if model == "random":
        labels = dataset.labels()
        rng = component_rng(seed, "random-baseline")
        row.update(test_acc=random_accuracy(labels, dataset.split.test, dataset.n_classes, rng))
    else:
        result = train(dataset, run_cfg.bridge_config(seed, use_graph=model == "bridge"))
        write_history(result.history, run_dir / "history.jsonl")
        save_checkpoint(result.model, run_dir / "checkpoint.npz")
        row.update(
            test_acc=result.evaluate("test"),
            val_acc=result.best_val_acc,
            best_epoch=result.best_epoch,
            epochs_run=len(result.history),
        )
    row.update(seconds=round(time.perf_counter() - start, 3), config=resolved, config_hash=_config_hash(resolved))
    return row


def read_report(path):
    path = Path(path)
    if not path.exists():
        return []
    rows = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            rows.append(json.loads(line))
    return rows


def summarize(rows):
    """``{(dataset, model): (n, mean, sample std or None)}``; the latest row per seed wins."""
    latest = {}
    for r in rows:
        latest[(r["dataset"], r["model"], r["seed"])] = r["test_acc"]
    groups = {}
    for (ds, model, _), acc in latest.items():
        groups.setdefault((ds, model), []).append(acc)
    out = {}
    for key, accs in groups.items():
        std = statistics.stdev(accs) if len(accs) > 1 else None
        out[key] = (len(accs), statistics.fmean(accs), std)
    return out


def render_table(rows):
    lines = [f"{'dataset':<16}{'model':<10}{'seeds':>6}  test accuracy"]
    for (ds, model), (n, mean, std) in sorted(summarize(rows).items()):
        cell = f"{mean:.3f}" if std is None else f"{mean:.3f}±{std:.3f}"
        lines.append(f"{ds:<16}{model:<10}{n:>6}  {cell}")
    return "\n".join(lines) + "\n"


def _append(report, row):
    with report.open("a", encoding="utf-8") as fh:
        fh.write(json.dumps(row) + "\n")
        fh.flush()
    report.with_name("report.txt").write_text(render_table(read_report(report)), encoding="utf-8")


def run(config_path):
    try:
        raw = json.loads(Path(config_path).read_text(encoding="utf-8"))
        run_cfg = RunConfig.from_dict(raw)
    except (OSError, json.JSONDecodeError, ConfigurationError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1

    out = Path(run_cfg.output_dir)
    report = out / "report.jsonl"
    try:
        out.mkdir(parents=True, exist_ok=True)
        done = {(r["model"], r["seed"], r.get("config_hash")) for r in read_report(report)}
        jobs = []
        for model in run_cfg.models:
            for seed in run_cfg.seeds:
                key = (model, seed, _config_hash(resolved_config(run_cfg, model, seed)))
                if key in done:
                    log.info("skipping %s seed %d: already in the report", model, seed)
                    continue
                jobs.append((run_cfg, model, seed, str(out / "runs" / f"{model}-seed{seed}")))
        if run_cfg.workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=run_cfg.workers) as pool:
                for row in pool.map(run_one, jobs):
                    _append(report, row)
                    log.info("%s seed %d: test accuracy %.4f", row["model"], row["seed"], row["test_acc"])
        else:
            for job in jobs:
                row = run_one(job)
                _append(report, row)
                log.info("%s seed %d: test accuracy %.4f", row["model"], row["seed"], row["test_acc"])
        table = render_table(read_report(report))
        (out / "report.txt").write_text(table, encoding="utf-8")
        print(table, end="")
    except (RelBridgeError, OSError, ValueError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        if report.exists():
            (out / "report.txt").write_text(render_table(read_report(report)), encoding="utf-8")
        return 2
    return 0


def split(dataset, directory, seed, force=False, per_class=20, n_val=500, n_test=1000):
    directory = Path(directory)
    target = directory / "split.json"
    if target.exists() and not force:
        print(f"{target} exists; pass --force to regenerate")
        return 0
    try:
        ds = load_sjtu(dataset, directory) if dataset in SJTU else load_dataset_dir(directory)
        s = ds.make_split(seed=seed, per_class=per_class, n_val=n_val, n_test=n_test)
        write_split(s, target)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (RelBridgeError, OSError, ValueError) as exc:
        print(f"split failed: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {target}: train {s.train.size}, val {s.val.size}, test {s.test.size} (seed {seed})")
    return 0


def synth(spec_path, out_dir, seed=None):
    try:
        raw = json.loads(Path(spec_path).read_text(encoding="utf-8"))
        raw_seed = raw.pop("seed", 0)
        spec = SynthSpec.from_dict(raw)
    except (OSError, json.JSONDecodeError, ConfigurationError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    seed = raw_seed if seed is None else seed
    try:
        ds = synth_relational(spec, seed=seed)
        save_dataset(ds, out_dir)
    except (RelBridgeError, OSError, ValueError) as exc:
        print(f"synth failed: {exc}", file=sys.stderr)
        return 2
    sizes = ", ".join(f"{name} {t.row_count}" for name, t in ds.tables.items())
    print(f"wrote {out_dir}: {sizes}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="relbridge", description="Relational table learning with BRIDGE.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="train and evaluate models over seeds")
    p.add_argument("--config", required=True, help="run config JSON")
    p = sub.add_parser("split", help="write split.json for a dataset directory")
    p.add_argument("--dataset", required=True, help=f"one of {sorted(SJTU)}, or any name for a schema.json directory")
    p.add_argument("--dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true", help="overwrite an existing split.json")
    p.add_argument("--per-class", type=int, default=20, help="training rows per class")
    p.add_argument("--val", type=int, default=500, help="validation rows")
    p.add_argument("--test", type=int, default=1000, help="test rows")
    p = sub.add_parser("synth", help="generate a synthetic relational dataset")
    p.add_argument("--spec", required=True, help="JSON with SynthSpec fields and an optional seed")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "run":
        return run(args.config)
    if args.command == "split":
        return split(args.dataset, args.dir, args.seed, args.force, args.per_class, args.val, args.test)
    return synth(args.spec, args.out, args.seed)


if __name__ == "__main__":
    sys.exit(main())
