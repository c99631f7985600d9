"""Run orchestration: training with logging and checkpoints, evaluation,
the ablation grid, and codebook export.

Every run directory is self-describing: the config echo plus the seed
reproduce the CSVs bit-for-bit. Evaluation metrics are per-image means in
dataset order, so they do not depend on how the eval set is chunked.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import tensor_io
from .checkpoint import CsvLog, load_checkpoint, read_rows, save_checkpoint, truncate_to_step
from .codebook import dump_codebook, usage_stats
from .config import ConfigError, ExperimentConfig, apply_grid_entry, experiment_hash, write_echo
from .data import batch_indices, build_dataset, epoch_of_step, split_dataset
from .dual_quantizer import DualQuantizerState
from .metrics import (
    UtilizationReport,
    emit_utilization,
    frechet_gaussian,
    gaussian_stats,
    l1_metric,
    l2_metric,
    psnr,
    sanitize_for_json,
    series_from_codebook,
)
from .model import ModelState, StepReport, init_model, reconstruct, training_step

EVAL_COLUMNS = ("step", "psnr", "l1", "l2", "fid_star")
ABLATION_COLUMNS = ("label", "global", "local", "codebook_total", "fid_star", "psnr", "l1", "l2")
_EVAL_CHUNK = 32


@dataclass
class RunResult:
    out_dir: str
    steps_csv: str
    eval_csv: str
    final_checkpoint: str
    best_checkpoint: str
    utilization_json: str
    utilization_csv: str
    last_eval: dict


def _chunks(n, size):
    for lo in range(0, n, size):
        yield lo, min(lo + size, n)


def _reconstruct_all(state: ModelState, images: np.ndarray) -> np.ndarray:
    out = np.empty_like(images)
    for lo, hi in _chunks(images.shape[0], _EVAL_CHUNK):
        out[lo:hi] = reconstruct(state, images[lo:hi])[0]
    return out


def _latent_features(state: ModelState, images: np.ndarray) -> np.ndarray:
    rows = []
    for lo, hi in _chunks(images.shape[0], _EVAL_CHUNK):
        z_q = reconstruct(state, images[lo:hi])[1]
        rows.append(z_q.reshape(z_q.shape[0], -1))
    return np.concatenate(rows, axis=0)


def _pixel_features(images: np.ndarray, grid: int = 8) -> np.ndarray:
    n, c, h, w = images.shape
    fh, fw = h // grid, w // grid
    pooled = images.reshape(n, c, grid, fh, grid, fw).mean(axis=(3, 5))
    return pooled.reshape(n, -1)


def evaluate_state(state: ModelState, images: np.ndarray, fid_features: str = "latent") -> dict:
    """Reconstruction metrics plus the Gaussian Fréchet stand-in.

    fid_star is a closed-form Fréchet distance between Gaussians fit to
    pluggable features; it is not Inception-FID.
    """
    recon = _reconstruct_all(state, images)
    psnrs = [psnr(images[i], recon[i]) for i in range(images.shape[0])]
    l1s = [l1_metric(images[i], recon[i]) for i in range(images.shape[0])]
    l2s = [l2_metric(images[i], recon[i]) for i in range(images.shape[0])]
    if fid_features == "pixels":
        feats_real = _pixel_features(images)
        feats_recon = _pixel_features(recon)
    else:
        feats_real = _latent_features(state, images)
        feats_recon = _latent_features(state, recon)
    fid = frechet_gaussian(*gaussian_stats(feats_real), *gaussian_stats(feats_recon))
    return {
        "step": state.step,
        "n_images": int(images.shape[0]),
        "psnr": float(np.mean(psnrs)),
        "l1": float(np.mean(l1s)),
        "l2": float(np.mean(l2s)),
        "fid_star": fid,
        "fid_features": fid_features,
        "fid_note": "Gaussian Frechet distance on model features; not Inception-FID",
    }


def _utilization_report(state: ModelState, exp_hash: str) -> UtilizationReport:
    if isinstance(state.quantizer, DualQuantizerState):
        series = [series_from_codebook("global", state.quantizer.global_cb),
                  series_from_codebook("local", state.quantizer.local_cb)]
    else:
        series = [series_from_codebook("global", state.quantizer.cb)]
    return UtilizationReport(series=series, step=state.step, config_hash=exp_hash)


def run_train(cfg: ExperimentConfig, resume: str | None = None, force: bool = False,
              stop_after: int | None = None) -> RunResult:
    """Train to ``cfg.train.steps`` (or ``stop_after``, to simulate an
    interruption), logging every step and checkpointing at eval cadence."""
    if not cfg.out_dir:
        raise ConfigError("run_train needs an output directory (out_dir or --out)")
    out_dir = cfg.out_dir
    os.makedirs(out_dir, exist_ok=True)
    exp_hash = experiment_hash(cfg)
    write_echo(cfg, out_dir)

    images = build_dataset(cfg.dataset, cfg.train.image_size)
    train_set, val_set, _ = split_dataset(images)
    n_train = train_set.shape[0]

    steps_path = os.path.join(out_dir, "steps.csv")
    eval_path = os.path.join(out_dir, "eval.csv")
    final_dir = os.path.join(out_dir, "checkpoints", "final")
    best_dir = os.path.join(out_dir, "checkpoints", "best")

    if resume is not None:
        state, manifest = load_checkpoint(resume)
        stored = manifest.get("experiment_hash")
        if stored != exp_hash and not force:
            raise ConfigError(
                f"resume refused: checkpoint config hash {stored} != current {exp_hash} "
                "(pass --force to override)"
            )
        for path in (steps_path, eval_path):
            if os.path.exists(path):
                truncate_to_step(path, state.step)
    else:
        state = init_model(cfg.train)

    best_l1 = float("inf")
    if resume is not None and os.path.exists(eval_path):
        _, rows = read_rows(eval_path)
        for r in rows:
            best_l1 = min(best_l1, float(r[2]))

    steps_csv = CsvLog(steps_path, StepReport.CSV_COLUMNS)
    eval_csv = CsvLog(eval_path, EVAL_COLUMNS)
    last_dir = os.path.join(out_dir, "checkpoints", "last")
    last_eval: dict = {}
    target = cfg.train.steps if stop_after is None else min(cfg.train.steps, stop_after)
    prev_epoch = epoch_of_step(n_train, cfg.train.batch, state.step - 1) if state.step > 0 else 0

    try:
        while state.step < target:
            step = state.step
            epoch = epoch_of_step(n_train, cfg.train.batch, step)
            if epoch > prev_epoch:
                _reset_windows(state)
            prev_epoch = epoch
            idx = batch_indices(cfg.train.seed, n_train, cfg.train.batch, step)
            report = training_step(state, train_set[idx])
            steps_csv.append(report.csv_values())
            if report.step % cfg.eval_every == 0 or report.step == cfg.train.steps:
                ev = evaluate_state(state, val_set, cfg.fid_features)
                eval_csv.append((report.step, ev["psnr"], ev["l1"], ev["l2"], ev["fid_star"]))
                last_eval = ev
                save_checkpoint(state, last_dir, experiment=cfg.to_dict(),
                                experiment_hash=exp_hash)
                if ev["l1"] < best_l1:
                    best_l1 = ev["l1"]
                    save_checkpoint(state, best_dir, experiment=cfg.to_dict(),
                                    experiment_hash=exp_hash)
    finally:
        steps_csv.close()
        eval_csv.close()

    save_checkpoint(state, final_dir, experiment=cfg.to_dict(), experiment_hash=exp_hash)
    if not os.path.exists(os.path.join(best_dir, "manifest.json")):
        save_checkpoint(state, best_dir, experiment=cfg.to_dict(), experiment_hash=exp_hash)
    report = _utilization_report(state, exp_hash)
    util_json, util_csv = emit_utilization(report, os.path.join(out_dir, "utilization"))
    return RunResult(out_dir=out_dir, steps_csv=steps_path, eval_csv=eval_path,
                     final_checkpoint=final_dir, best_checkpoint=best_dir,
                     utilization_json=util_json, utilization_csv=util_csv, last_eval=last_eval)


def _reset_windows(state: ModelState):
    if isinstance(state.quantizer, DualQuantizerState):
        state.quantizer.global_cb.reset_window()
        state.quantizer.local_cb.reset_window()
    else:
        state.quantizer.cb.reset_window()


def run_eval(checkpoint: str, split: str = "val", out_path: str | None = None,
             dataset: dict | None = None, fid_features: str | None = None) -> dict:
    """Evaluate a checkpoint on one split of its (or an overridden) dataset."""
    state, manifest = load_checkpoint(checkpoint)
    exp = manifest.get("experiment") or {}
    spec = dataset if dataset is not None else exp.get("dataset")
    if spec is None:
        raise ConfigError("checkpoint carries no dataset spec; pass one explicitly")
    kind = fid_features or exp.get("fid_features", "latent")
    images = build_dataset(spec, state.config.image_size)
    train_set, val_set, test_set = split_dataset(images)
    subset = {"train": train_set, "val": val_set, "test": test_set}.get(split)
    if subset is None:
        raise ConfigError(f"unknown split {split!r}")
    ev = evaluate_state(state, subset, kind)
    ev["split"] = split
    ev["checkpoint"] = checkpoint
    if isinstance(state.quantizer, DualQuantizerState):
        for name, cb in (("global", state.quantizer.global_cb), ("local", state.quantizer.local_cb)):
            perp, act = usage_stats(cb)
            ev[f"perplexity_{name[0]}"] = perp
            ev[f"active_{name[0]}"] = act
    else:
        perp, act = usage_stats(state.quantizer.cb)
        ev["perplexity_g"], ev["active_g"] = perp, act
        ev["perplexity_l"], ev["active_l"] = 0.0, 0.0
    if out_path:
        tensor_io.atomic_write_bytes(
            out_path, json.dumps(sanitize_for_json(ev), indent=1, sort_keys=True).encode()
        )
    return ev


def _grid_worker(payload: tuple) -> tuple:
    raw, label, run_dir = payload
    from .config import config_from_dict

    cfg = config_from_dict(raw)
    cfg.out_dir = run_dir
    result = run_train(cfg)
    ev = result.last_eval
    desc_g = f"{'T' if cfg.train.transformer_on else 'S'}-{cfg.train.split_global}"
    desc_l = f"S-{cfg.train.split_local}"
    return (label, desc_g, desc_l, cfg.train.codebook_total,
            ev["fid_star"], ev["psnr"], ev["l1"], ev["l2"])


def grid_width(n_entries: int) -> int:
    width = min(n_entries, os.cpu_count() or 1)
    cap = os.environ.get("DUALVQ_THREADS")
    if cap:
        width = max(1, min(width, int(cap)))
    return width


def run_ablation(cfg: ExperimentConfig, out_dir: str | None = None) -> str:
    """Train every grid entry and tabulate final metrics, one row per entry."""
    if not cfg.grid:
        raise ConfigError("run_ablation needs a non-empty grid")
    out_dir = out_dir or cfg.out_dir
    if not out_dir:
        raise ConfigError("run_ablation needs an output directory")
    os.makedirs(out_dir, exist_ok=True)

    payloads = []
    for entry in cfg.grid:
        derived = apply_grid_entry(cfg, entry)
        raw = derived.to_dict()
        raw.pop("grid", None)
        payloads.append((raw, entry.label, os.path.join(out_dir, "runs", entry.label)))

    width = grid_width(len(payloads))
    if width > 1:
        with ProcessPoolExecutor(max_workers=width) as pool:
            rows = list(pool.map(_grid_worker, payloads))
    else:
        rows = [_grid_worker(p) for p in payloads]

    path = os.path.join(out_dir, "ablation.csv")
    from .checkpoint import format_cell

    lines = [",".join(ABLATION_COLUMNS)]
    for row in rows:
        cells = [str(row[0]), str(row[1]), str(row[2])] + [format_cell(v) for v in row[3:]]
        lines.append(",".join(cells))
    tensor_io.atomic_write_bytes(path, ("\n".join(lines) + "\n").encode())
    return path


def export_codebook(checkpoint: str, which: str, out_path: str):
    state, _ = load_checkpoint(checkpoint)
    if isinstance(state.quantizer, DualQuantizerState):
        table = {"global": state.quantizer.global_cb, "local": state.quantizer.local_cb}
    else:
        table = {"global": state.quantizer.cb}
    if which not in table:
        raise ConfigError(f"no {which!r} codebook in this checkpoint (have {sorted(table)})")
    dump_codebook(table[which], out_path)
