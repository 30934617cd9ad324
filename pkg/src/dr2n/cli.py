"""``dr2n`` command line: generate, train, eval, ablate, attn.

Configs are flat JSON objects whose keys carry a section prefix, e.g.
``{"world.num_classes": 8, "model.hidden": 64, "schedule.warmup_steps": 200,
"train.steps": 1500, "seed": 0}``. Command-line flags override file values.

Exit codes: 0 ok, 2 config error, 3 I/O error, 4 numeric divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path

from threadpoolctl import threadpool_limits

from .model import MODEL_VARIANTS, Model, ModelConfig, Prediction, load_checkpoint
from .relational import edges_to_dot, top_k_edges
from .synthworld import (
    DatasetFormatError, WorldConfig, config_hash, generate_many, load_flat_config, read_jsonl, split_seeds,
    write_jsonl,
)
from .traineval import (
    AblationSettings, DivergenceError, Schedule, TrainConfig, evaluate, run_ablation, train,
)

log = logging.getLogger("dr2n")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGENCE = 0, 2, 3, 4
THREADS_ENV = "DR2N_THREADS"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- run config

@dataclass
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    model: dict = field(default_factory=dict)
    schedule: Schedule = field(default_factory=Schedule)
    steps: int = 1500
    batch_size: int = 16
    n_train: int = 1200
    n_eval: int = 300
    variant: str = "dr2n"
    seed: int = 0

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        sections: dict[str, dict] = {"world": {}, "model": {}, "schedule": {}, "train": {}, "": {}}
        for key, value in flat.items():
            prefix, _, name = key.rpartition(".")
            if prefix not in sections:
                raise ConfigError(f"unknown config section in key {key!r}")
            sections[prefix][name] = value
        try:
            world = WorldConfig.from_dict(sections["world"])
            schedule = Schedule(**sections["schedule"])
            top = {**sections["train"], **sections[""]}
            allowed = {"steps", "batch_size", "n_train", "n_eval", "variant", "seed"}
            unknown = set(top) - allowed
            if unknown:
                raise ConfigError(f"unknown config keys: {sorted(unknown)}")
            cfg = cls(world=world, model=sections["model"], schedule=schedule, **top)
            cfg.model_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cfg

    def to_flat(self) -> dict:
        flat = {f"world.{k}": v for k, v in self.world.to_dict().items()}
        flat.update({f"model.{k}": v for k, v in self.model.items()})
        flat.update({f"schedule.{k}": v for k, v in self.schedule.to_dict().items()})
        flat.update({"train.steps": self.steps, "train.batch_size": self.batch_size,
                     "train.n_train": self.n_train, "train.n_eval": self.n_eval,
                     "variant": self.variant, "seed": self.seed})
        return flat

    def config_hash(self) -> str:
        return config_hash(self.to_flat())

    def model_config(self) -> ModelConfig:
        w = self.world
        base = dict(variant=self.variant, num_classes=w.num_classes, horizon=w.horizon,
                    hidden=w.feature_dim, init_seed=self.seed)
        return ModelConfig(**{**base, **self.model})

    def train_config(self) -> TrainConfig:
        return TrainConfig(steps=self.steps, batch_size=self.batch_size, seed=self.seed, schedule=self.schedule)


def load_run_config(args) -> RunConfig:
    try:
        flat = load_flat_config(args.config) if args.config else {}
    except ValueError as exc:
        raise ConfigError(f"{args.config}: {exc}") from exc
    cfg = RunConfig.from_flat(flat)
    for attr in ("seed", "steps", "variant"):
        value = getattr(args, attr, None)
        if value is not None:
            setattr(cfg, attr, value)
    if cfg.variant not in MODEL_VARIANTS:
        raise ConfigError(f"variant must be one of {MODEL_VARIANTS}")
    return cfg


def _stamp(cfg: RunConfig) -> dict:
    return {"config_hash": cfg.config_hash(), "world_hash": cfg.world.config_hash(), "seed": cfg.seed}


def _dataset_world_hash(episodes) -> str | None:
    hashes = {ep.meta.get("world_hash") for ep in episodes}
    return hashes.pop() if len(hashes) == 1 else None


def _read_dataset(path) -> list:
    episodes = read_jsonl(path)
    if not episodes:
        raise ConfigError(f"{path}: dataset is empty")
    return episodes


# ---------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    cfg = load_run_config(args)
    seeds = split_seeds(cfg.seed, args.split, args.count)
    write_jsonl(args.out, generate_many(cfg.world, seeds), meta=_stamp(cfg))
    log.info("wrote %d episodes to %s", args.count, args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args)
    episodes = _read_dataset(args.dataset)
    start = 0
    if args.resume:
        model, extra = load_checkpoint(args.resume)
        start = int(extra.get("step", 0))
        if extra.get("config_hash") != cfg.config_hash():
            log.warning("resuming %s trained under config %s, current config is %s",
                        args.resume, extra.get("config_hash"), cfg.config_hash())
    else:
        model = Model(cfg.model_config())
    data_hash = _dataset_world_hash(episodes)
    if data_hash and data_hash != cfg.world.config_hash():
        log.warning("dataset world hash %s differs from config world hash %s", data_hash, cfg.world.config_hash())
    log_path = Path(args.loss_log or f"{args.out}.loss.csv")
    mode = "a" if args.resume and log_path.exists() else "w"
    with open(log_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(["step", "loss", "lr", "config_hash"])
        h = cfg.config_hash()
        train(model, episodes, cfg.train_config(), start_step=start,
              on_step=lambda s, loss, lr: writer.writerow([s, repr(loss), repr(lr), h]))
    model.save(args.out, extra={**_stamp(cfg), "step": cfg.steps, "variant": cfg.variant,
                                "data_world_hash": data_hash})
    log.info("saved %s after %d steps", args.out, cfg.steps)
    return EXIT_OK


def cmd_eval(args) -> int:
    model, extra = load_checkpoint(args.checkpoint)
    episodes = _read_dataset(args.dataset)
    data_hash = _dataset_world_hash(episodes)
    trained_on = extra.get("data_world_hash") or extra.get("world_hash")
    if data_hash and trained_on and data_hash != trained_on:
        log.warning("config hash mismatch: checkpoint trained on world %s, dataset is world %s",
                    trained_on, data_hash)
    preds = None
    if args.preds:
        with open(args.preds) as fh:
            preds = [Prediction.from_record(json.loads(line)) for line in fh if line.strip()]
    t_list = args.t
    k_list = args.k_percent
    if t_list is None and k_list is None:
        t_list = list(range(model.config.horizon + 1))
    if t_list and max(t_list) > model.config.horizon:
        raise ConfigError(f"--t values must lie in [0, {model.config.horizon}]")
    if t_list and preds is None and args.save_preds:
        preds = model.predict(episodes)
        with open(args.save_preds, "w") as fh:
            for p in preds:
                fh.write(json.dumps(p.to_record()) + "\n")
    meta = {"variant": model.config.variant, "seed": extra.get("seed"),
            "config_hash": extra.get("config_hash"), "checkpoint": str(args.checkpoint),
            "dataset": str(args.dataset), "dataset_world_hash": data_hash}
    report = evaluate(model, episodes, t_list=t_list, k_list=k_list, metadata=meta, preds=preds)
    out = Path(args.out)
    out.with_suffix(".json").write_text(report.to_json())
    out.with_suffix(".csv").write_text(report.to_csv())
    print(report.to_csv(), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_run_config(args)
    variants = args.variants or list(MODEL_VARIANTS)
    settings = AblationSettings(world=cfg.world, n_train=cfg.n_train, n_eval=cfg.n_eval,
                                train=cfg.train_config(), model_overrides=dict(cfg.model),
                                k_list=tuple(args.k_percent or (10, 20, 30, 40, 50)))
    result = run_ablation(variants, settings, args.seeds)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    h = cfg.config_hash()
    stamp = f"# config_hash={h} seeds={' '.join(map(str, args.seeds))}\n"
    (out / "grid.csv").write_text(stamp + result.grid_csv())
    if cfg.world.mode == "multi-actor":
        t1 = min(1, cfg.world.horizon)
        for v in variants:
            (out / f"delta_horizon_{v}.csv").write_text(
                stamp + result.delta_csv(result.horizon_delta(v, 0, t1), f"ap_t0_minus_t{t1}"))
        if "dr2n" in variants and "gru" in variants:
            (out / "delta_dr2n_vs_gru.csv").write_text(
                stamp + result.delta_csv(result.variant_delta("dr2n", "gru", t1), f"ap_dr2n_minus_gru_t{t1}"))
    reports = {v: {str(s): json.loads(result.reports[v][s].to_json()) for s in result.seeds} for v in variants}
    (out / "reports.json").write_text(json.dumps({"config_hash": h, "config": cfg.to_flat(),
                                                  "reports": reports}, indent=2))
    print(result.grid_csv(), end="")
    return EXIT_OK


def cmd_attn(args) -> int:
    model, extra = load_checkpoint(args.checkpoint)
    if model.config.variant not in ("dr2n", "gat"):
        raise ConfigError(f"variant {model.config.variant!r} has no learned attention; need dr2n or gat")
    episodes = _read_dataset(args.dataset)
    if not 0 <= args.episode < len(episodes):
        raise ConfigError(f"--episode must lie in [0, {len(episodes) - 1}]")
    pred = model.predict([episodes[args.episode]])[0]
    if not 0 <= args.node < pred.num_nodes:
        raise ConfigError(f"--node must lie in [0, {pred.num_nodes - 1}]")
    records = []
    for step, alpha in enumerate(pred.attention, start=1):
        records.extend(top_k_edges(alpha, args.node, args.top_k, step=step))
    doc = {"config_hash": extra.get("config_hash"), "seed": extra.get("seed"), "variant": model.config.variant,
           "episode": args.episode, "node": args.node, "top_k": args.top_k, "edges": records}
    out = Path(args.out)
    out.with_suffix(".json").write_text(json.dumps(doc, indent=2))
    out.with_suffix(".dot").write_text(edges_to_dot(records, name=f"attn_e{args.episode}_n{args.node}"))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(
        prog="dr2n", formatter_class=fmt,
        description="Relational action forecasting on a synthetic multi-agent world.",
        epilog=f"Set {THREADS_ENV}=N to cap BLAS threads and DR2N_WORKERS=N for parallel ablation runs.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="flat JSON run config (world.*, model.*, schedule.*, train.*)")
        if seed:
            p.add_argument("--seed", type=int, default=None, help="run seed; overrides the config (default 0)")

    p = sub.add_parser("generate", help="write a JSONL episode dataset", formatter_class=fmt)
    common(p)
    p.add_argument("--out", required=True, help="output .jsonl path")
    p.add_argument("--count", type=int, default=1000, help="number of episodes")
    p.add_argument("--split", choices=("train", "eval", "test"), default="train", help="seed stream to draw from")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model and write a checkpoint + CSV loss log", formatter_class=fmt)
    common(p)
    p.add_argument("--dataset", required=True, help="training JSONL")
    p.add_argument("--out", required=True, help="checkpoint path (JSON)")
    p.add_argument("--variant", choices=MODEL_VARIANTS, default=None, help="model variant (default dr2n)")
    p.add_argument("--steps", type=int, default=None, help="total SGD steps (default 1500)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--loss-log", help="CSV loss log path (default: <out>.loss.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="mAP per t or accuracy@K for a checkpoint", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="report path prefix; writes .json and .csv")
    p.add_argument("--t", type=int, nargs="+", default=None, help="horizons for mAP (default 0..T)")
    p.add_argument("--k-percent", type=float, nargs="+", default=None, help="observed fractions for accuracy@K")
    p.add_argument("--save-preds", help="write predictions JSONL")
    p.add_argument("--preds", help="score saved predictions instead of running the model")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train/evaluate every variant over seeds", formatter_class=fmt)
    common(p, seed=False)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--variant", dest="variants", choices=MODEL_VARIANTS, nargs="+", default=None,
                   help="variants to run (default all)")
    p.add_argument("--steps", type=int, default=None, help="SGD steps per run")
    p.add_argument("--k-percent", type=float, nargs="+", default=None, help="K list for clip worlds")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("attn", help="export top-k attention edges as JSON + DOT", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--episode", type=int, default=0, help="episode index in the dataset")
    p.add_argument("--node", type=int, default=0, help="receiving node")
    p.add_argument("--top-k", type=int, default=3)
    p.add_argument("--out", required=True, help="path prefix; writes .json and .dot")
    p.set_defaults(func=cmd_attn)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get(THREADS_ENV)
    try:
        limit = threadpool_limits(int(threads)) if threads else nullcontext()
    except ValueError:
        print(f"error: {THREADS_ENV} must be an integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        with limit:
            return args.func(args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except DatasetFormatError as exc:
        print(f"error: {getattr(args, 'dataset', '')}: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
