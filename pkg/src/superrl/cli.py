"""Command-line entry point.

Every command reads one JSON config file whose keys mirror ``TrainConfig``
plus ``out_dir``. Flags only override top-level scalars. Exit codes:
0 success (or a dense probe decision), 2 sparse probe decision, 1 error.

    superrl defaults > run.json
    superrl gen-data run.json
    superrl probe run.json
    superrl train run.json --seed 1
    superrl compare configs/ --jobs 4
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import os
import sys
from pathlib import Path

from .envs import DemoSet, Dataset, dump_instances, load_instances, make_dataset
from .errors import ConfigError, NumericError
from .numerics import Rng
from .policy import save_checkpoint
from .switch import run_probe
from .trainer import Trainer, TrainConfig, compare_regimes, summarize, train, with_overrides

EXIT_OK, EXIT_ERROR, EXIT_SPARSE = 0, 1, 2
OUT_ENV = "SUPERRL_OUT"
DEFAULT_OUT = "runs"
DATA_FILES = ("train.jsonl", "test.jsonl", "demos.jsonl")


def default_document() -> dict:
    return {**TrainConfig().to_dict(), "out_dir": DEFAULT_OUT}


def load_config(path: str | Path, args: argparse.Namespace | None = None) -> tuple[TrainConfig, Path]:
    """Parse a config file, apply flag overrides, and resolve the output directory.

    Output precedence: ``--out``, then ``$SUPERRL_OUT``, then ``out_dir`` in the file.
    """
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    out_dir = doc.pop("out_dir", DEFAULT_OUT)
    config = TrainConfig.from_dict(doc)
    out = None
    if args is not None:
        config = with_overrides(config, seed=getattr(args, "seed", None), steps=getattr(args, "steps", None))
        out = getattr(args, "out", None)
    out = out or os.environ.get(OUT_ENV) or out_dir
    return config, Path(out)


def _dataset_key(config: TrainConfig) -> dict:
    return {"env": config.env.to_dict(), "seed": config.seed, "n_train": config.n_train, "n_test": config.n_test}


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_dataset(config: TrainConfig, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    data = make_dataset(config.env, config.n_train, config.n_test, Rng(config.seed).split(0))
    for name, items in zip(DATA_FILES, (data.train, data.test, data.demos.entries)):
        dump_instances(out / name, items)
    manifest = {
        **_dataset_key(config),
        "files": {name: _sha256(out / name) for name in DATA_FILES},
        # the only field that changes between identical invocations
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def read_dataset(config: TrainConfig, out: Path) -> Dataset | None:
    """Load a dataset written by ``gen-data``; None when the directory has none."""
    manifest_path = out / "manifest.json"
    if not manifest_path.exists():
        return None
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    key = _dataset_key(config)
    if {k: manifest.get(k) for k in key} != key:
        raise ConfigError(f"dataset in {out} was generated from a different config")
    for name, digest in manifest["files"].items():
        if _sha256(out / name) != digest:
            raise ConfigError(f"{out / name} does not match its manifest hash")
    train_set, test_set, demos = (load_instances(out / name) for name in DATA_FILES)
    return Dataset(train_set, test_set, DemoSet(tuple(demos)))


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------- commands


def cmd_defaults(args) -> int:
    sys.stdout.write(_dump(default_document()))
    return EXIT_OK


def cmd_gen_data(args) -> int:
    config, out = load_config(args.config, args)
    manifest = write_dataset(config, out)
    print(f"wrote {', '.join(DATA_FILES)} and manifest.json to {out} (seed {manifest['seed']})")
    return EXIT_OK


def cmd_probe(args) -> int:
    config, out = load_config(args.config, args)
    tr = Trainer(config, read_dataset(config, out))
    _, choice = run_probe(tr, config.switch_config)
    report = _dump(choice.report())
    out.mkdir(parents=True, exist_ok=True)
    (out / "probe.json").write_text(report, encoding="utf-8")
    sys.stdout.write(report)
    return EXIT_SPARSE if choice.is_hybrid else EXIT_OK


def cmd_train(args) -> int:
    config, out = load_config(args.config, args)
    log = train(config, read_dataset(config, out))
    out.mkdir(parents=True, exist_ok=True)
    log.save(out / "runlog.jsonl")
    save_checkpoint(out / "checkpoint.json", log.final_params)
    summary = summarize(config, log)
    (out / "summary.json").write_text(_dump(summary), encoding="utf-8")
    print(f"{summary['regime']} on {summary['env']}: em={summary['em']:.4f} smoothed={summary['smoothed_em']:.4f}")
    return EXIT_OK


def cmd_compare(args) -> int:
    paths = sorted(Path(args.config_dir).glob("*.json"))
    if not paths:
        raise ConfigError(f"no *.json configs in {args.config_dir}")
    loaded = [load_config(p, args) for p in paths]
    configs = [c for c, _ in loaded]
    out = Path(args.out or os.environ.get(OUT_ENV) or loaded[0][1])
    table = compare_regimes(configs, workers=args.jobs)
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.csv").write_text(table.to_csv(), encoding="utf-8", newline="")
    (out / "comparison.json").write_text(table.to_json() + "\n", encoding="utf-8")
    sys.stdout.write(table.to_csv())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="superrl", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def overrides(p, with_config=True):
        if with_config:
            p.add_argument("config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--steps", type=int, help="override the step budget")
        p.add_argument("--out", help=f"output directory (beats ${OUT_ENV} and out_dir)")

    sub.add_parser("defaults", help="print the default config").set_defaults(func=cmd_defaults)
    p = sub.add_parser("gen-data", help="write train/test/demo files and a manifest")
    overrides(p)
    p.set_defaults(func=cmd_gen_data)
    p = sub.add_parser("probe", help="run the reward-density probe (exit 0 dense, 2 sparse)")
    overrides(p)
    p.set_defaults(func=cmd_probe)
    p = sub.add_parser("train", help="train one config and write runlog, checkpoint and summary")
    overrides(p)
    p.set_defaults(func=cmd_train)
    p = sub.add_parser("compare", help="train every config in a directory and tabulate")
    p.add_argument("config_dir", help="directory of JSON configs sharing one env")
    overrides(p, with_config=False)
    p.add_argument("--jobs", type=int, default=1, help="parallel processes (results are identical)")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
