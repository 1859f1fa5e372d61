"""Command-line pipeline: generate data, train, prune, reweight, sample, evaluate.

Every command is a pure function of (config, input artifacts); rerunning with
the same config writes byte-identical artifacts. Stages communicate through
fixed file names inside the run directory.

Exit codes: 0 success, 2 config error, 3 data error, 4 artifact version
mismatch.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import dataset as dsmod
from . import diffusion, metrics, pruning, reweighting
from .config import PipelineConfig, config_hash, load_config, stage_seed
from .dataset import DatasetSpec, LabeledDataset
from .encoder import (
    IdentityEncoder,
    embed,
    load_encoder,
    pca_encoder,
    save_encoder,
    train_classifier,
)
from .errors import ConfigError, DataError, VersionError
from .numerics import round_half_up

log = logging.getLogger("corediff")

DATASET_FILE = "dataset.lds"
ENCODER_FILE = "encoder.enc"
SCORES_FILE = "scores.csv"
CORESET_FILE = "coreset.csv"
REFERENCE_FILE = "reference.dmc"
WEIGHTS_FILE = "weights.csv"
TRAJECTORY_FILE = "weights_trajectory.csv"
MODEL_FILE = "model.dmc"
LOSS_TRACE_FILE = "loss_trace.csv"
LOSS_TRACE_REF_FILE = "loss_trace_ref.csv"
SAMPLES_FILE = "samples.lds"
REPORT_FILE = "report.csv"
REPORT_PER_CLASS_FILE = "report_per_class.csv"
REPORT_SVG_FILE = "report.svg"
SPEEDUP_FILE = "speedup.csv"


def _provenance(cfg: PipelineConfig, stage: str) -> dict:
    return {
        "corediff_version": __version__,
        "config_sha256": config_hash(cfg),
        "seed": cfg.seed,
        "stage": stage,
        "stage_seed": stage_seed(cfg.seed, stage),
    }


def _out_dir(cfg: PipelineConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve_dataset(cfg: PipelineConfig) -> LabeledDataset:
    if cfg.dataset.path is not None:
        path = Path(cfg.dataset.path)
        if not path.is_file():
            raise ConfigError(f"dataset file not found: {path}")
        return dsmod.load(path)
    spec = DatasetSpec(
        generator=cfg.dataset.generator,
        K=cfg.dataset.K,
        per_class=cfg.dataset.per_class,
        d=cfg.dataset.d,
        seed=stage_seed(cfg.seed, "dataset"),
    )
    return dsmod.generate(spec)


def _resolve_encoder(cfg: PipelineConfig, ds: LabeledDataset):
    enc_cfg = cfg.encoder
    if enc_cfg.path is not None:
        path = Path(enc_cfg.path)
        if not path.is_file():
            raise ConfigError(f"encoder file not found: {path}")
        return load_encoder(path)
    if enc_cfg.kind == "identity":
        return IdentityEncoder(ds.d)
    if enc_cfg.kind == "classifier":
        return train_classifier(
            ds, enc_cfg.hidden_widths, enc_cfg.epochs,
            seed=stage_seed(cfg.seed, "encoder"), batch_size=enc_cfg.batch_size,
        )
    if enc_cfg.kind == "pca":
        return pca_encoder(ds, enc_cfg.components)
    raise ConfigError(f"unknown encoder.kind {enc_cfg.kind!r}")


def _schedule(cfg: PipelineConfig) -> diffusion.NoiseSchedule:
    return diffusion.make_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)


def _new_model(cfg: PipelineConfig, ds: LabeledDataset) -> diffusion.DenoiserModel:
    return diffusion.DenoiserModel(
        d=ds.d, K=ds.K, widths=cfg.train.widths,
        time_dim=cfg.train.time_dim, cond_dim=cfg.train.cond_dim,
        seed=stage_seed(cfg.seed, "model-init"),
    )


def _train_config(cfg: PipelineConfig, weights=None, anneal=False) -> diffusion.TrainConfig:
    return diffusion.TrainConfig(
        epochs=cfg.train.epochs,
        batch_size=cfg.train.batch_size,
        lr=cfg.train.lr,
        seed=stage_seed(cfg.seed, "train"),
        p_uncond=cfg.train.p_uncond,
        class_weights=weights,
        anneal_ratio=cfg.train.anneal_ratio if anneal else None,
        weight_mode=cfg.train.weight_mode,
    )


def _write_loss_trace(path, result: diffusion.TrainResult, provenance: dict) -> None:
    lines = [f"# {k}={v}" for k, v in provenance.items()]
    lines.append("epoch,mean_loss")
    for i, loss in enumerate(result.loss_trace, start=1):
        lines.append(f"{i},{format(loss, '.17g')}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _require(out: Path, name: str) -> Path:
    path = out / name
    if not path.is_file():
        raise ConfigError(f"required artifact not found: {path} (run the earlier stage first)")
    return path


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(cfg: PipelineConfig) -> int:
    out = _out_dir(cfg)
    ds = _resolve_dataset(cfg)
    dsmod.save(ds, out / DATASET_FILE)
    print(f"wrote {out / DATASET_FILE}: n={ds.n} K={ds.K} d={ds.d} name={ds.name}")
    return 0


def cmd_train_ref(cfg: PipelineConfig) -> int:
    out = _out_dir(cfg)
    ds = _resolve_dataset(cfg)
    sched = _schedule(cfg)
    model = _new_model(cfg, ds)
    result = diffusion.train(model, ds, _train_config(cfg), sched)
    diffusion.save_checkpoint(out / REFERENCE_FILE, model, sched)
    _write_loss_trace(out / LOSS_TRACE_REF_FILE, result, _provenance(cfg, "train-ref"))
    print(f"reference model trained: final mean loss {result.loss_trace[-1]:.6f}")
    return 0


def cmd_prune(cfg: PipelineConfig) -> int:
    out = _out_dir(cfg)
    ds = _resolve_dataset(cfg)
    method = cfg.pruning.method
    ratio = cfg.pruning.data_ratio
    prov = _provenance(cfg, "prune")
    if method == "uniform_random":
        coreset = pruning.select_uniform_random(ds, ratio, seed=stage_seed(cfg.seed, "prune"))
    else:
        enc = _resolve_encoder(cfg, ds)
        save_encoder(enc, out / ENCODER_FILE)
        emb = embed(enc, ds)
        if method == "gaussian":
            table = pruning.score_gaussian(
                emb, reg=cfg.pruning.cov_reg, labels=ds.labels,
                per_class=cfg.pruning.per_class_gaussian,
            )
        else:
            table = pruning.score_moderate(emb, ds.labels)
        pruning.write_scores_csv(out / SCORES_FILE, table, ds.labels, provenance=prov)
        coreset = pruning.select(table, ds.labels, ratio, K=ds.K)
    pruning.write_coreset_csv(out / CORESET_FILE, coreset, provenance=prov)
    counts = " ".join(f"{j}:{c}" for j, c in enumerate(coreset.per_class_counts))
    print(f"coreset [{coreset.method}] kept {coreset.size}/{ds.n} per-class {counts}")
    return 0


def cmd_reweight(cfg: PipelineConfig) -> int:
    out = _out_dir(cfg)
    prov = _provenance(cfg, "reweight")
    coreset, _ = pruning.read_coreset_csv(_require(out, CORESET_FILE))
    ds = _resolve_dataset(cfg)
    if not cfg.dro.enabled:
        weights = reweighting.ClassWeights.uniform(ds.K)
        reweighting.write_weights_csv(out / WEIGHTS_FILE, weights, provenance=prov)
        print("DRO off: wrote uniform class weights")
        return 0
    coreset_ds, empty = dsmod.subset(ds, coreset.indices)
    if empty:
        raise DataError(f"coreset classes {list(empty)} are empty; cannot reweight")
    reference, sched = diffusion.load_checkpoint(_require(out, REFERENCE_FILE))
    dro_cfg = reweighting.DroConfig(
        proxy_epochs=cfg.dro.proxy_epochs,
        eta=cfg.dro.eta,
        smoothing=cfg.dro.smoothing,
        proxy_seed=stage_seed(cfg.seed, "reweight"),
        batch_size=cfg.dro.batch_size,
        proxy_lr=cfg.dro.proxy_lr,
    )
    result = reweighting.run_dro(coreset_ds, reference, dro_cfg, sched)
    prov_w = dict(prov)
    prov_w["clipped_margin_fraction"] = format(result.clipped_fraction, ".17g")
    reweighting.write_weights_csv(out / WEIGHTS_FILE, result.weights, provenance=prov_w)
    reweighting.write_trajectory_csv(out / TRAJECTORY_FILE, result, provenance=prov)
    alphas = " ".join(format(a, ".4f") for a in result.weights.alpha)
    print(f"clipped margin fraction: {result.clipped_fraction:.4f}")
    print(f"average class weights: {alphas}")
    return 0


def cmd_train(cfg: PipelineConfig) -> int:
    out = _out_dir(cfg)
    ds = _resolve_dataset(cfg)
    coreset, _ = pruning.read_coreset_csv(_require(out, CORESET_FILE))
    coreset_ds, empty = dsmod.subset(ds, coreset.indices)
    if empty:
        log.warning("coreset is missing classes %s", list(empty))
    weights = None
    weights_path = out / WEIGHTS_FILE
    if weights_path.is_file():
        cw, _ = reweighting.read_weights_csv(weights_path)
        if cw.K != ds.K:
            raise DataError(f"weights file has {cw.K} classes, dataset has {ds.K}")
        weights = cw.alpha
    sched = _schedule(cfg)
    model = _new_model(cfg, ds)
    anneal = cfg.train.anneal_ratio is not None
    result = diffusion.train(
        model, coreset_ds, _train_config(cfg, weights=weights, anneal=anneal),
        sched, full_ds=ds if anneal else None,
    )
    diffusion.save_checkpoint(out / MODEL_FILE, model, sched)
    _write_loss_trace(out / LOSS_TRACE_FILE, result, _provenance(cfg, "train"))
    print(f"model trained on {coreset_ds.n}/{ds.n} samples: "
          f"final mean loss {result.loss_trace[-1]:.6f}")
    return 0


def cmd_sample(cfg: PipelineConfig) -> int:
    out = _out_dir(cfg)
    model, sched = diffusion.load_checkpoint(_require(out, MODEL_FILE))
    per_class = cfg.sample.per_class
    chunks, labels = [], []
    for c in range(model.K):
        seed = stage_seed(cfg.seed, f"sample.{c}")
        if cfg.sample.sampler == "ddim":
            xs = diffusion.sample_ddim(
                model, sched, c, cfg.sample.guidance, per_class, cfg.sample.steps, seed
            )
        else:
            xs = diffusion.sample_ddpm(
                model, sched, c, cfg.sample.guidance, per_class, seed
            )
        chunks.append(xs)
        labels.append(np.full(per_class, c, dtype=np.int64))
    generated = LabeledDataset(
        samples=np.concatenate(chunks).astype(np.float32),
        labels=np.concatenate(labels),
        K=model.K, d=model.d, name="generated",
    )
    dsmod.save(generated, out / SAMPLES_FILE)
    print(f"wrote {out / SAMPLES_FILE}: {generated.n} samples "
          f"({per_class} per class, {cfg.sample.sampler})")
    return 0


def cmd_eval(cfg: PipelineConfig) -> int:
    out = _out_dir(cfg)
    ds = _resolve_dataset(cfg)
    generated = dsmod.load(_require(out, SAMPLES_FILE))
    enc = _resolve_encoder(cfg, ds)
    scores_path = out / SCORES_FILE
    if scores_path.is_file():
        table, _, _ = pruning.read_scores_csv(scores_path)
        if table.encoder_id != enc.encoder_id:
            raise ConfigError(
                f"mixed-encoder comparison refused: scores used {table.encoder_id!r}, "
                f"eval resolved {enc.encoder_id!r}"
            )
    report = metrics.evaluate(
        ds, generated, enc, seed=stage_seed(cfg.seed, "eval"),
        reg=cfg.eval.cov_reg, bandwidth=cfg.eval.bandwidth,
    )
    prov = _provenance(cfg, "eval")
    metrics.write_report_csv(out / REPORT_FILE, report, provenance=prov)
    metrics.write_per_class_csv(out / REPORT_PER_CLASS_FILE, report)
    if cfg.eval.emit_svg:
        metrics.write_svg_bars(out / REPORT_SVG_FILE, report)
    per_class = " ".join(format(v, ".4f") for v in report.per_class_frechet)
    print(f"frechet={report.frechet:.6f} mmd_sq={report.mmd_sq:.6g} per-class {per_class}")
    return 0


def _coreset_size(cfg: PipelineConfig, ds: LabeledDataset) -> int:
    ratio = cfg.pruning.data_ratio
    if cfg.pruning.method in ("moderate_ds", "uniform_random"):
        counts = ds.class_counts()
        return int(sum(min(c, max(1, round_half_up(ratio * c))) for c in counts if c > 0))
    return min(ds.n, max(1, round_half_up(ratio * ds.n)))


def _step_work(cfg: PipelineConfig, ds: LabeledDataset) -> int:
    """Total samples processed by SGD over the whole schedule (exact)."""
    n_coreset = _coreset_size(cfg, ds)
    epochs = cfg.train.epochs
    if cfg.train.anneal_ratio is None:
        return epochs * n_coreset
    coreset_epochs = min(epochs, math.ceil(cfg.train.anneal_ratio * epochs))
    return coreset_epochs * n_coreset + (epochs - coreset_epochs) * ds.n


def _measure_sgd_seconds_per_sample(cfg: PipelineConfig, ds: LabeledDataset) -> float:
    sched = _schedule(cfg)
    model = _new_model(cfg, ds)
    rng = np.random.default_rng(0)
    x = ds.samples[: min(ds.n, 4 * cfg.train.batch_size)].astype(np.float64)
    y = ds.labels[: x.shape[0]]
    loss_fn = diffusion.loss_batch
    loss_fn(model, x[: cfg.train.batch_size], y[: cfg.train.batch_size], sched, rng=rng)
    start = time.perf_counter()
    seen = 0
    for s in range(0, x.shape[0], cfg.train.batch_size):
        xb, yb = x[s:s + cfg.train.batch_size], y[s:s + cfg.train.batch_size]
        _, grads = loss_fn(model, xb, yb, sched, p_uncond=cfg.train.p_uncond, rng=rng)
        model.sgd_step(grads, cfg.train.lr)
        seen += xb.shape[0]
    return (time.perf_counter() - start) / max(seen, 1)


def cmd_speedup(cfg: PipelineConfig, baseline: PipelineConfig, out_path: Path) -> int:
    if cfg.train.epochs != baseline.train.epochs:
        raise ConfigError(
            f"speedup comparison needs equal epochs "
            f"({cfg.train.epochs} vs {baseline.train.epochs})"
        )
    if cfg.train.batch_size != baseline.train.batch_size:
        raise ConfigError(
            f"speedup comparison needs equal batch sizes "
            f"({cfg.train.batch_size} vs {baseline.train.batch_size})"
        )
    ds = _resolve_dataset(cfg)
    ds_base = _resolve_dataset(baseline)
    work = _step_work(cfg, ds)
    work_base = _step_work(baseline, ds_base)
    ratio = work_base / work
    lines = [f"# {k}={v}" for k, v in _provenance(cfg, "speedup").items()]
    lines.append("metric,value")
    lines.append(f"step_count_ratio,{format(ratio, '.17g')}")
    lines.append(f"samples_processed_config,{work}")
    lines.append(f"samples_processed_baseline,{work_base}")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"step-count ratio (baseline/config): {ratio:.6g}")
    per_sample = _measure_sgd_seconds_per_sample(cfg, ds)
    per_sample_base = _measure_sgd_seconds_per_sample(baseline, ds_base)
    wall_ratio = (per_sample_base * work_base) / max(per_sample * work, 1e-12)
    print(f"estimated wall-clock ratio (informational): {wall_ratio:.3g}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing and dispatch
# ---------------------------------------------------------------------------

_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-ref": cmd_train_ref,
    "prune": cmd_prune,
    "reweight": cmd_reweight,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="corediff",
        description="Prune, reweight, train, and evaluate a desk-scale diffusion model.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="pipeline config (YAML)")
        p.add_argument("--out", default=None, help="output directory override")
        p.add_argument("--seed", type=int, default=None, help="global seed override")
    p = sub.add_parser("speedup")
    p.add_argument("--config", required=True, help="config under test (YAML)")
    p.add_argument("--baseline", required=True, help="baseline config (YAML)")
    p.add_argument("--out", default=None, help="output directory override")
    p.add_argument("--seed", type=int, default=None, help="global seed override")
    return parser


def main(argv=None) -> int:
    level = os.environ.get("COREDIFF_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, out_override=args.out, seed_override=args.seed)
        if args.command == "speedup":
            baseline = load_config(args.baseline, seed_override=args.seed)
            out_path = _out_dir(cfg) / SPEEDUP_FILE
            return cmd_speedup(cfg, baseline, out_path)
        return _COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except VersionError as exc:
        print(f"version error: {exc}", file=sys.stderr)
        return 4
    except (DataError, IndexError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


def entrypoint() -> None:
    sys.exit(main())
