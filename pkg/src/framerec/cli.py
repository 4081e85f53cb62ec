"""Command-line entry point.

Subcommands: synth, prepare, train, evaluate, ablate, noise-sweep, sweep,
export-embeddings. Every command takes --config PATH / --seed N / --out DIR,
writes only inside --out, and drops a config echo there; rerunning with the
same config and seed reproduces all non-timing outputs byte for byte.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error.
"""

import argparse
import os
import sys

from . import experiments
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, config_to_dict, default_config, parse_config, write_config_echo
from .data import (four_core_filter, leave_one_out_split, load_features,
                   parse_interactions, save_features, synth_generate,
                   write_interactions)
from .evaluation import evaluate
from .model import build_model
from .schedule import build_schedule
from .seeds import derive_seed
from .training import fit, write_timing_log, write_train_log

import dataclasses


def _load_config(args) -> RunConfig:
    if args.config:
        if not os.path.exists(args.config):
            raise ConfigError(f"config file not found: {args.config}")
        cfg = parse_config(args.config)
    else:
        cfg = default_config()
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(
            cfg, train=dataclasses.replace(cfg.train, seed=int(args.seed)))
    return cfg


def _prepare_out(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _echo(cfg: RunConfig, out_dir: str):
    write_config_echo(cfg, os.path.join(out_dir, "config_echo.yaml"))


def _load_dataset(cfg: RunConfig):
    if not cfg.data.interactions:
        raise ConfigError("data.interactions must point at an interactions TSV")
    if not cfg.data.features:
        raise ConfigError("data.features must point at a feature manifest")
    records = four_core_filter(parse_interactions(cfg.data.interactions))
    dataset = leave_one_out_split(records, cfg.backbone.max_len)
    store = load_features(cfg.data.features)
    return dataset, store


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(args)
    records, store = synth_generate(cfg.data.synth, derive_seed(cfg.train.seed, "synthetic-data"))
    write_interactions(os.path.join(out, "interactions.tsv"), records)
    save_features(store, out)
    _echo(cfg, out)
    return 0


def cmd_prepare(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(args)
    if not cfg.data.interactions:
        raise ConfigError("data.interactions must point at an interactions TSV")
    records = parse_interactions(cfg.data.interactions)
    filtered = four_core_filter(records)
    dataset = leave_one_out_split(filtered, cfg.backbone.max_len)
    write_interactions(os.path.join(out, "interactions.tsv"), filtered)
    with open(os.path.join(out, "split_summary.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"records_in\t{len(records)}\n")
        fh.write(f"records_kept\t{len(filtered)}\n")
        fh.write(f"users\t{len(dataset.users)}\n")
        fh.write(f"items\t{dataset.n_items}\n")
    _echo(cfg, out)
    return 0


def _write_report(report, out_dir: str, stem: str):
    with open(os.path.join(out_dir, f"{stem}.json"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report.to_json())
    writer = experiments.ResultWriter(
        os.path.join(out_dir, f"{stem}.csv"),
        experiments.CONDITION_COLUMNS + experiments.METRIC_COLUMNS)
    writer.write(experiments.report_row(report))
    writer.close()


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(args)
    dataset, store = _load_dataset(cfg)
    result = fit(dataset, store, cfg)
    write_train_log(os.path.join(out, "train_log.jsonl"), result.log)
    write_timing_log(os.path.join(out, "timing.jsonl"), result.log)
    save_checkpoint(
        os.path.join(out, "checkpoint.bin"), result.model.state_dict(),
        config_to_dict(cfg),
        extra={"best_epoch": result.best_epoch, "best_val_ndcg": result.best_val_ndcg})
    condition = {"variant": cfg.train.variant, "sigma": 0.0,
                 "lambda_T": cfg.train.lambda_T, "lambda_N": cfg.train.lambda_N,
                 "T": cfg.train.T, "seed": cfg.train.seed}
    for split in ("val", "test"):
        report = evaluate(result.model, dataset, store, result.sched, cfg,
                          split=split, condition=condition)
        _write_report(report, out, f"eval_{split}")
    _echo(cfg, out)
    return 0


def _load_model(cfg: RunConfig, dataset, store, checkpoint_path: str):
    state, _echo_cfg, extra = load_checkpoint(checkpoint_path)
    model = build_model(cfg, dataset.n_items, store.n_frames, store.d_v, store.d_h)
    model.load_state_dict(state)
    sched = build_schedule(cfg.train.T, cfg.train.beta_start, cfg.train.beta_end)
    return model, sched, extra


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(args)
    dataset, store = _load_dataset(cfg)
    model, sched, _extra = _load_model(cfg, dataset, store, args.checkpoint)
    condition = {"variant": cfg.train.variant, "sigma": 0.0,
                 "lambda_T": cfg.train.lambda_T, "lambda_N": cfg.train.lambda_N,
                 "T": cfg.train.T, "seed": cfg.train.seed}
    report = evaluate(model, dataset, store, sched, cfg, condition=condition)
    _write_report(report, out, f"eval_{report.split}")
    _echo(cfg, out)
    return 0


def _run_plan(args, runner) -> int:
    cfg = _load_config(args)
    out = _prepare_out(args)
    dataset, store = _load_dataset(cfg)
    plan = experiments.plan_from_config(cfg, out_dir=out)
    runner(plan, dataset, store)
    _echo(cfg, out)
    return 0


def cmd_ablate(args) -> int:
    return _run_plan(args, experiments.run_ablation)


def cmd_noise_sweep(args) -> int:
    return _run_plan(args, experiments.run_noise_sweep)


def cmd_sweep(args) -> int:
    return _run_plan(args, experiments.run_sensitivity)


def cmd_export(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(args)
    dataset, store = _load_dataset(cfg)
    model, sched, _extra = _load_model(cfg, dataset, store, args.checkpoint)
    if args.users:
        user_ids = [u for u in args.users.split(",") if u]
    else:
        user_ids = [u.user_id for u in dataset.users]
    experiments.export_embeddings(model, dataset, store, sched, cfg, user_ids,
                                  os.path.join(out, "embeddings.csv"))
    _echo(cfg, out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="framerec",
        description="Hierarchical diffusion denoising for sequential "
                    "micro-video recommendation")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, *, needs_seed=True, needs_checkpoint=False,
            users_flag=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default="", help="YAML config file")
        p.add_argument("--seed", type=int, required=needs_seed,
                       help="master seed for all randomness")
        p.add_argument("--out", required=True, help="output directory")
        if needs_checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint file")
        if users_flag:
            p.add_argument("--users", default="",
                           help="comma-separated user ids (default: all)")
        p.set_defaults(func=func)
        return p

    add("synth", cmd_synth, "generate a synthetic dataset with features")
    add("prepare", cmd_prepare, "parse, 4-core filter, and split interactions",
        needs_seed=False)
    add("train", cmd_train, "train a model and evaluate it")
    add("evaluate", cmd_evaluate, "evaluate a checkpoint", needs_checkpoint=True)
    add("ablate", cmd_ablate, "run the ablation variants")
    add("noise-sweep", cmd_noise_sweep, "feature-noise robustness sweep")
    add("sweep", cmd_sweep, "lambda x T sensitivity grids")
    add("export-embeddings", cmd_export, "export preference/item/frame vectors",
        needs_checkpoint=True, users_flag=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - map any runtime failure to exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entrypoint():
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
