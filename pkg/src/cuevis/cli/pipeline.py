"""The experiment stages behind the command line, each writing one run directory.

Every run directory gets ``config.json`` (the resolved configuration plus the
stage inputs) and, once the stage has finished, ``outputs.json`` listing the
files it produced with their sha256. A directory whose ``outputs.json``
exists and whose recorded stage key matches is reused as is.
"""
from __future__ import annotations

import csv
import hashlib
import json
import time
from pathlib import Path
from typing import Optional

import numpy as np

from cuevis.cli.config import dataset_config, section_hash
from cuevis.cues import CueTrainConfig, cue_train, eval_cues, initial_generator, read_eval, read_log, write_eval
from cuevis.estimator import (
    EstimatorParams,
    EstimatorTrainConfig,
    estimator_train,
    evaluation_report,
    predict_poses,
    write_report,
)
from cuevis.geometry import DEFAULT_INTRINSICS
from cuevis.renderer import (
    NERF_INTRINSICS,
    FieldParams,
    PretrainConfig,
    SamplerParams,
    heldout_psnr,
    load_generator,
    photometric_pretrain,
    save_generator,
)
from cuevis.scene import build_dataset, load_split
from cuevis.scene.dataset import DatasetConfig
from cuevis.scene.poses import named_pose_set

CONFIG_FILE = "config.json"
OUTPUTS_FILE = "outputs.json"


# -- provenance ----------------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def start_run(out, cfg: dict, stage: str, key: str, inputs: Optional[dict] = None) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / OUTPUTS_FILE).unlink(missing_ok=True)
    doc = {"stage": stage, "key": key, "inputs": inputs or {}, "config": cfg}
    (out / CONFIG_FILE).write_text(json.dumps(doc, indent=1, sort_keys=True))
    return out


def finish_run(out) -> Path:
    out = Path(out)
    files = sorted(p for p in out.rglob("*") if p.is_file() and p.name != OUTPUTS_FILE)
    listing = [{"path": str(p.relative_to(out)), "bytes": p.stat().st_size, "sha256": _sha256(p)} for p in files]
    (out / OUTPUTS_FILE).write_text(json.dumps({"files": listing}, indent=1))
    return out / OUTPUTS_FILE


def is_complete(out, stage: str, key: str) -> bool:
    out = Path(out)
    try:
        doc = json.loads((out / CONFIG_FILE).read_text())
    except (OSError, json.JSONDecodeError):
        return False
    return (out / OUTPUTS_FILE).exists() and doc.get("stage") == stage and doc.get("key") == key


def _write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


# -- stages ----------------------------------------------------------------------

def run_dataset(cfg: dict, out, threads: int = 1, n_images: Optional[int] = None) -> Path:
    n = cfg["dataset"]["n_images"] if n_images is None else n_images
    key = section_hash(cfg, "dataset") + f"-n{n}"
    out = start_run(out, cfg, "dataset", key, {"n_images": n})
    build_dataset(n, cfg["seed"], out, dataset_config(cfg), threads=threads)
    finish_run(out)
    return out


def estimator_key(cfg: dict) -> str:
    return section_hash(cfg, "dataset", "estimator")


def run_train_estimator(cfg: dict, dataset_dir, out, log=print) -> Path:
    e = cfg["estimator"]
    tc = EstimatorTrainConfig(
        heads=e["heads"],
        steps=e["steps"],
        batch_size=e["batch_size"],
        lr=e["lr"],
        w_heatmap=e["w_heatmap"],
        w_pose=e["w_pose"],
        sigma_px=e["sigma_px"],
        augment=e["augment"],
        seed=cfg["seed"] % 2**63,
    )
    out = start_run(out, cfg, "train-estimator", estimator_key(cfg), {"dataset": str(dataset_dir)})
    train = load_split(dataset_dir, "train")
    res = estimator_train(train.images, train.poses, tc, callback=lambda r: log(f"estimator step {r['step']} loss {r['loss']:.5f}"))
    _write_csv(
        out / "train_log.csv",
        ("step", "loss", "wall_ms"),
        [(r["step"], repr(r["loss"]), int(round(1000 * r["wall_s"]))) for r in res.history],
    )
    res.params.save(out / "estimator", {"estimator": e, "seed": cfg["seed"]})
    report = {}
    for split in ("val", "test"):
        try:
            data = load_split(dataset_dir, split)
        except ValueError:
            continue
        report[split] = evaluation_report(predict_poses(res.params, data.images), data.poses)
    write_report(out / "report.json", report)
    finish_run(out)
    return out


def nerf_key(cfg: dict) -> str:
    return section_hash(cfg, "nerf_pretrain")


def _half_res(images: np.ndarray) -> np.ndarray:
    x = images.astype(np.float64) / 255.0
    n, H, W, _ = x.shape
    return x.reshape(n, H // 2, 2, W // 2, 2, 3).mean(axis=(2, 4))


def run_pretrain_nerf(cfg: dict, out, threads: int = 1, log=print) -> Path:
    """Photometric pretraining on its own small ray-traced set.

    Images are ray-traced at the estimator resolution and box-filtered to
    half resolution; the last ``n_heldout`` views are held out for PSNR.
    """
    c = cfg["nerf_pretrain"]
    out = start_run(out, cfg, "pretrain-nerf", nerf_key(cfg))
    data_dir = out / "data"
    n = c["n_train"] + c["n_heldout"]
    ds_cfg = DatasetConfig(split=(c["n_train"], 0, c["n_heldout"]), light_cone_deg=c["light_cone_deg"])
    build_dataset(n, cfg["seed"], data_dir, ds_cfg, threads=threads)
    train, held = load_split(data_dir, "train"), load_split(data_dir, "test")
    seed = cfg["seed"] % 2**63
    params = FieldParams.init(np.random.default_rng(seed), c["resolution"], c["features"], c["hidden"])
    sampler = SamplerParams.empty(c["grid_resolution"], c["n_coarse"], c["n_fine"], params.aabb)
    pc = PretrainConfig(
        steps=c["steps"],
        batch_rays=c["batch_rays"],
        lr_planes=c["lr_planes"],
        lr_mlp=c["lr_mlp"],
        refresh_every=c["refresh_every"],
        seed=seed,
    )
    t0 = time.perf_counter()
    res = photometric_pretrain(
        _half_res(train.images), train.poses, NERF_INTRINSICS, params, sampler, pc,
        callback=lambda r: log(f"pretrain step {r['step']} loss {r['loss']:.6f}"),
    )
    train_s = time.perf_counter() - t0
    psnr = heldout_psnr(_half_res(held.images), held.poses, NERF_INTRINSICS, res.params, res.sampler, threads)
    _write_csv(
        out / "pretrain_log.csv",
        ("step", "loss", "wall_ms"),
        [(r["step"], repr(r["loss"]), int(round(1000 * r["wall_s"]))) for r in res.history],
    )
    save_generator(out / "generator", res.params, res.sampler, {"nerf_pretrain": c, "seed": cfg["seed"]})
    (out / "pretrain.json").write_text(
        json.dumps({"heldout_psnr_db": psnr, "train_seconds": train_s, "n_train": len(train), "n_heldout": len(held)}, indent=1)
    )
    finish_run(out)
    return out


def cue_config(cfg: dict) -> CueTrainConfig:
    c = dict(cfg["cue_train"])
    c["betas"] = tuple(c["betas"])
    return CueTrainConfig(seed=cfg["seed"] % 2**63, **c)


def run_train_cues(cfg: dict, dataset_dir, estimator_path, generator_path, out, log=print) -> Path:
    cc = cue_config(cfg)
    inputs = {"dataset": str(dataset_dir), "estimator": str(estimator_path), "generator": str(generator_path)}
    out = start_run(out, cfg, "train-cues", section_hash(cfg, "cue_train"), inputs)
    train = load_split(dataset_dir, "train")
    est = EstimatorParams.load(estimator_path)
    params, sampler, _ = load_generator(generator_path)
    gen = initial_generator(cc, (params, sampler))
    every = max(1, cc.updates // 20)
    cue_train(
        train.poses, train.masks, gen, est, cc, out_dir=out,
        callback=lambda r: log(f"cue update {r['update_index']} loss {r['loss']:.6f} E_R {r['E_R_deg']:.2f}")
        if r["update_index"] % every == 0 else None,
    )
    finish_run(out)
    return out


def eval_poses(cfg: dict, dataset_dir=None) -> tuple:
    """(poses, reference or None) for the configured evaluation set."""
    name = cfg["eval"]["poses"]
    if name in ("val", "test", "train"):
        if dataset_dir is None:
            raise ValueError(f"eval poses {name!r} need --dataset")
        data = load_split(dataset_dir, name)
        return data.poses, (data.images, data.masks)
    return named_pose_set(name), None


def run_eval(cfg: dict, estimator_path, generator_path, out, dataset_dir=None) -> Path:
    inputs = {"estimator": str(estimator_path), "generator": str(generator_path), "dataset": str(dataset_dir)}
    out = start_run(out, cfg, "eval", section_hash(cfg, "eval", "cue_train"), inputs)
    poses, reference = eval_poses(cfg, dataset_dir)
    est = EstimatorParams.load(estimator_path)
    params, sampler, _ = load_generator(generator_path)
    res = eval_cues(params, sampler, est, poses, reference, dilation_px=cfg["cue_train"]["dilation_px"])
    write_eval(out, res, cfg["eval"]["grid_columns"])
    finish_run(out)
    return out


# -- ablation ------------------------------------------------------------------------

def with_section(cfg: dict, section: str, **values) -> dict:
    out = json.loads(json.dumps(cfg))
    out[section].update(values)
    return out


def run_ablate(
    cfg: dict,
    out,
    estimators=("heatmap+pose", "pose-only"),
    modes=("combined",),
    encodings=("frozen",),
    seeds=(0,),
    threads: int = 1,
    log=print,
) -> Path:
    """Every (estimator heads, cue supervision, encoding, cue seed) arm.

    Shared stages live in hash-named subdirectories and are only rebuilt
    when their config sections change; finished arms are reused too.
    The comparison table covers every finished arm in ``out``.
    """
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    ds_dir = root / f"dataset-{section_hash(cfg, 'dataset')}"
    if not is_complete(ds_dir, "dataset", section_hash(cfg, "dataset") + f"-n{cfg['dataset']['n_images']}"):
        log(f"building dataset in {ds_dir}")
        run_dataset(cfg, ds_dir, threads)
    nerf_dir = root / f"nerf-{nerf_key(cfg)}"
    if not is_complete(nerf_dir, "pretrain-nerf", nerf_key(cfg)):
        log(f"pretraining the field in {nerf_dir}")
        run_pretrain_nerf(cfg, nerf_dir, threads, log)
    arms = []
    for heads in estimators:
        ecfg = with_section(cfg, "estimator", heads=heads)
        est_dir = root / f"estimator-{heads.replace('+', '-')}-{estimator_key(ecfg)}"
        if not is_complete(est_dir, "train-estimator", estimator_key(ecfg)):
            log(f"training the {heads} estimator in {est_dir}")
            run_train_estimator(ecfg, ds_dir, est_dir, log)
        for mode in modes:
            for enc in encodings:
                for seed in seeds:
                    acfg = with_section(ecfg, "cue_train", supervision=mode, encoding=enc)
                    acfg["seed"] = int(seed)
                    name = f"{heads.replace('+', '-')}_{mode}_{enc}_s{seed}"
                    arm_dir = root / "arms" / name
                    key = section_hash(acfg, "dataset", "estimator", "nerf_pretrain", "cue_train", "eval")
                    if not is_complete(arm_dir, "arm", key):
                        log(f"cue training arm {name}")
                        start_run(arm_dir, acfg, "arm", key, {"estimator": str(est_dir), "nerf": str(nerf_dir)})
                        run_train_cues(acfg, ds_dir, est_dir / "estimator", nerf_dir / "generator", arm_dir / "train", log)
                        run_eval(acfg, est_dir / "estimator", arm_dir / "train" / "generator", arm_dir / "eval")
                        finish_run(arm_dir)
                    arms.append(arm_dir)
    report_tables(sorted((root / "arms").iterdir()), root)
    return root


# -- reporting --------------------------------------------------------------------------

REPORT_COLUMNS = (
    "run", "estimator", "supervision", "encoding", "seed", "updates", "final_loss",
    "ref_median_E_R_deg", "ref_mean_E_R_deg", "ref_median_E_T_m", "ref_mean_E_T_m",
    "cue_median_E_R_deg", "cue_mean_E_R_deg", "cue_median_E_T_m", "cue_mean_E_T_m",
)


def _find(run: Path, name: str) -> Optional[Path]:
    hits = sorted(run.rglob(name))
    return hits[0] if hits else None


def summarize_run(run) -> dict:
    """One report row; raises FileNotFoundError when the run has no logs."""
    run = Path(run)
    ev = _find(run, "eval.csv")
    if ev is None:
        raise FileNotFoundError(f"{run}: no eval.csv")
    rows = read_eval(ev)
    log_path = _find(run, "cue_log.csv")
    log = read_log(log_path) if log_path else []
    try:
        cfg = json.loads((run / CONFIG_FILE).read_text())["config"]
    except (OSError, json.JSONDecodeError, KeyError):
        cfg = json.loads((ev.parent / CONFIG_FILE).read_text())["config"]

    def stat(fn, key):
        return float(fn([r[key] for r in rows]))

    return {
        "run": run.name,
        "estimator": cfg["estimator"]["heads"],
        "supervision": cfg["cue_train"]["supervision"],
        "encoding": cfg["cue_train"]["encoding"],
        "seed": cfg["seed"],
        "updates": log[-1]["update_index"] if log else 0,
        "final_loss": log[-1]["loss"] if log else float("nan"),
        "ref_median_E_R_deg": stat(np.median, "ref_E_R_deg"),
        "ref_mean_E_R_deg": stat(np.mean, "ref_E_R_deg"),
        "ref_median_E_T_m": stat(np.median, "ref_E_T_m"),
        "ref_mean_E_T_m": stat(np.mean, "ref_E_T_m"),
        "cue_median_E_R_deg": stat(np.median, "cue_E_R_deg"),
        "cue_mean_E_R_deg": stat(np.mean, "cue_E_R_deg"),
        "cue_median_E_T_m": stat(np.median, "cue_E_T_m"),
        "cue_mean_E_T_m": stat(np.mean, "cue_E_T_m"),
    }


def _fmt(v) -> str:
    return f"{v:.4g}" if isinstance(v, float) else str(v)


def _group_table(rows: list, key: str, fixed: tuple) -> list:
    """Median metrics per value of ``key``, compared only among runs that
    agree on every column in ``fixed``; contexts with one value are left out."""
    out = []
    for ctx in sorted({tuple(r[c] for c in fixed) for r in rows}):
        sub = [r for r in rows if tuple(r[c] for c in fixed) == ctx]
        values = sorted({r[key] for r in sub})
        if len(values) < 2:
            continue
        for value in values:
            grp = [r for r in sub if r[key] == value]
            out.append(
                [f"{', '.join(ctx)}: {value}", len(grp)]
                + [float(np.median([r[c] for r in grp])) for c in ("ref_median_E_R_deg", "cue_median_E_R_deg", "ref_median_E_T_m", "cue_median_E_T_m")]
            )
    return out


def report_tables(run_dirs, out) -> dict:
    """``report.csv`` and ``report.md`` for every run with logs; others are listed as skipped."""
    rows, skipped = [], []
    for run in run_dirs:
        try:
            rows.append(summarize_run(run))
        except (FileNotFoundError, KeyError, json.JSONDecodeError, ValueError) as exc:
            skipped.append(f"{run}: {exc}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "report.csv", REPORT_COLUMNS, [[r[c] if not isinstance(r[c], float) else repr(r[c]) for c in REPORT_COLUMNS] for r in rows])
    lines = ["# Cue evaluation", "", "| " + " | ".join(REPORT_COLUMNS) + " |", "|" + "---|" * len(REPORT_COLUMNS)]
    lines += ["| " + " | ".join(_fmt(r[c]) for c in REPORT_COLUMNS) + " |" for r in rows]
    head = ["group", "runs", "ref E_R med", "cue E_R med", "ref E_T med", "cue E_T med"]
    comparisons = (
        ("encoding", ("estimator", "supervision"), "Frozen vs trainable encoding"),
        ("estimator", ("supervision", "encoding"), "Estimator supervision"),
        ("supervision", ("estimator", "encoding"), "Cue supervision"),
    )
    for key, fixed, title in comparisons:
        groups = _group_table(rows, key, fixed)
        if groups:
            lines += ["", f"## {title}", "", "| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
            lines += ["| " + " | ".join(_fmt(v) for v in g) + " |" for g in groups]
    if skipped:
        lines += ["", "## Skipped", ""] + [f"- {s}" for s in skipped]
    (out / "report.md").write_text("\n".join(lines) + "\n")
    return {"rows": rows, "skipped": skipped, "csv": out / "report.csv", "md": out / "report.md"}
