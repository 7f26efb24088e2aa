"""Command-line entry point: data generation, both training stages,
evaluation, and ablations.  Exit codes: 0 success, 1 runtime failure,
2 configuration error."""

from __future__ import annotations

import functools
import json
import os
import sys
from pathlib import Path

import click

from .config import load_run_config
from .encoders import ModelSpec
from .errors import ConfigError, TmcirError
from .evaluation import (
    ABLATION_KINDS,
    AblationSettings,
    evaluate,
    run_ablation,
    write_ablation_csv,
)
from .fusion import FusionConfig
from .training import (
    load_checkpoint,
    save_checkpoint,
    train_alignment,
    train_fusion,
    write_log,
)
from .world import generate_dataset, read_dataset, write_dataset


def _apply_thread_cap() -> None:
    cap = os.environ.get("TMCIR_THREADS")
    if not cap:
        return
    try:
        limit = int(cap)
    except ValueError:
        raise ConfigError(f"config: TMCIR_THREADS must be an integer, got {cap!r}")
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(limits=limit)
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(limit)


def _command(func):
    """Map package errors to the documented exit codes."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            _apply_thread_cap()
            func(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
        except (TmcirError, OSError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)

    return wrapper


@click.group()
def main():
    """Composed-retrieval pipeline over the synthetic attribute-grid world."""


@main.command("gen-data")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@_command
def gen_data(config_path, out_dir):
    """Generate a seeded dataset (train/val/test/candidates JSON lines)."""
    cfg = load_run_config(config_path)
    dataset = generate_dataset(cfg.world, cfg.data_seed)
    counts = write_dataset(dataset, out_dir)
    (Path(out_dir) / "run_config.json").write_text(
        json.dumps(cfg.to_dict(), indent=2) + "\n", encoding="utf-8")
    for name, count in counts.items():
        click.echo(f"{name}: {count}")


@main.command("train-align")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--supervision", type=click.Choice(["pseudo", "real"]), default=None,
              help="Override the stage-1 supervision source.")
@_command
def train_align(config_path, data_dir, out_dir, supervision):
    """Stage 1: contrastive alignment fine-tuning on (instruction, target) pairs."""
    cfg = load_run_config(config_path)
    dataset = read_dataset(data_dir)
    align_cfg = cfg.align
    if supervision is not None:
        from .evaluation import _cfg_kw
        from .training import TrainConfig
        align_cfg = TrainConfig(**{**_cfg_kw(align_cfg), "supervision": supervision})
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, log = train_alignment(dataset, align_cfg, cfg.spec,
                                checkpoint_path=out / "align.ckpt")
    crc = save_checkpoint(out / "align.ckpt", ckpt)
    write_log(out / "align_log.jsonl", log)
    final = next((r.loss for r in reversed(log) if r.loss == r.loss), float("nan"))
    click.echo(f"final loss: {final:.6f}")
    click.echo(f"checkpoint: {out / 'align.ckpt'} (crc32 {crc:08x})")


@main.command("train-fuse")
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--init", "init_path", default=None, type=click.Path(),
              help="Stage-1 checkpoint to start from.")
@click.option("--from-scratch", is_flag=True,
              help="Skip stage-1 initialization (pre-trained-analogue arm).")
@click.option("--no-fusion", is_flag=True,
              help="Train the pooling-only ablation query path.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@_command
def train_fuse(config_path, data_dir, init_path, from_scratch, no_fusion, out_dir):
    """Stage 2: fusion training aligning composed queries with targets."""
    cfg = load_run_config(config_path)
    dataset = read_dataset(data_dir)
    if init_path is None and not from_scratch:
        raise ConfigError("config: train-fuse needs --init or --from-scratch")
    init = load_checkpoint(init_path) if init_path is not None else None
    fuse_cfg = cfg.fuse
    if no_fusion:
        from .evaluation import _cfg_kw
        from .training import TrainConfig
        fuse_cfg = TrainConfig(**{**_cfg_kw(fuse_cfg), "use_fusion": False})
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, log = train_fusion(dataset, fuse_cfg, cfg.spec, init=init,
                             checkpoint_path=out / "fuse.ckpt")
    crc = save_checkpoint(out / "fuse.ckpt", ckpt)
    write_log(out / "fuse_log.jsonl", log)
    click.echo(f"final loss: {log[-1].loss if log else float('nan'):.6f}")
    click.echo(f"checkpoint: {out / 'fuse.ckpt'} (crc32 {crc:08x})")


@main.command("eval")
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path())
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--ks", default=None, help="Comma-separated recall cutoffs, e.g. '1,5'.")
@click.option("--split", default="test", type=click.Choice(["train", "val", "test"]))
@_command
def eval_cmd(ckpt_path, data_dir, out_path, ks, split):
    """Rank every query of a split and write the metrics report."""
    ckpt = load_checkpoint(ckpt_path)
    dataset = read_dataset(data_dir)
    spec = ModelSpec(**ckpt.config["spec"])
    train_echo = ckpt.config.get("train", {})
    fusion_cfg = FusionConfig(**train_echo.get("fusion", {}))
    use_fusion = bool(train_echo.get("use_fusion", True)) \
        and "projection.w" in ckpt.store
    if ks is not None:
        try:
            k_list = tuple(int(k) for k in ks.split(","))
        except ValueError:
            raise ConfigError(f"config: bad --ks value {ks!r}")
    else:
        k_list = (1, 5, 10, 50)
    report = evaluate(dataset, ckpt.store, spec, fusion_cfg,
                      use_fusion=use_fusion, ks=k_list,
                      config_echo={"checkpoint": ckpt.config})
    Path(out_path).write_text(report.to_json() + "\n", encoding="utf-8")
    for k in k_list:
        click.echo(f"R@{k}: {report.recall_at[k]:.4f}")
    for k, v in sorted(report.subset_recall_at.items()):
        click.echo(f"Rs@{k}: {v:.4f}")


@main.command("ablate")
@click.option("--kind", required=True, type=click.Choice(list(ABLATION_KINDS)))
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@_command
def ablate(kind, config_path, out_dir):
    """Run one ablation family: per-variant reports plus a combined CSV."""
    cfg = load_run_config(config_path)
    dataset = generate_dataset(cfg.world, cfg.data_seed)
    st = AblationSettings(spec=cfg.spec, align=cfg.align, fuse=cfg.fuse,
                          ks=cfg.eval.ks, subset_ks=cfg.eval.subset_ks,
                          subset_size=cfg.eval.subset_size,
                          eval_seed=cfg.train_seed)
    results = run_ablation(kind, dataset, st)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for r in results:
        if r.report is not None:
            (out / f"{r.variant}.json").write_text(r.report.to_json() + "\n",
                                                   encoding="utf-8")
        else:
            click.echo(f"{r.variant}: FAILED: {r.error}", err=True)
    write_ablation_csv(out / f"ablation_{kind}.csv", results)
    if all(r.report is None for r in results):
        raise TmcirError("all ablation variants failed")
    for r in results:
        if r.report is not None:
            r1 = r.report.recall_at.get(1)
            click.echo(f"{r.variant}: R@1={r1:.4f}" if r1 is not None
                       else f"{r.variant}: done")


if __name__ == "__main__":
    main()
