"""Acceptance criteria 1-9, one test each, at their stated tolerances.

Criteria 6-8 read a finished ablation directory (``CUEVIS_EXPERIMENT``,
default ``/root/runs/ablation``). Missing stages are computed through the
same ``ablate`` pipeline the command line uses, which takes hours on one
CPU; with the directory in place these tests only read its logs.
"""
import json
import os
import time
import zlib
from pathlib import Path

import numpy as np
import pytest

from conftest import record
from test_autodiff import OP_CASES
from test_cues import _estimator, _field, _manual_run
from test_estimator import _perturbed

from cuevis.autodiff import Adam, Tensor, backward, checkpoint_digest, fd_check, no_grad, ops, tensors_digest
from cuevis.cli import main
from cuevis.cli.config import resolve_config
from cuevis.cli.pipeline import run_ablate
from cuevis.cues import (
    CueTrainConfig,
    cue_loss,
    cue_train,
    initial_generator,
    pose_schedule,
    read_eval,
    read_log,
    render_mask,
)
from cuevis.cues.trainer import step_rng
from cuevis.estimator import EstimatorParams, forward, pnp_solve, target_heatmaps
from cuevis.geometry import (
    DEFAULT_INTRINSICS,
    CameraIntrinsics,
    Pose,
    Quaternion,
    angular_error,
    project_points,
    translation_error,
)
from cuevis.losses import heatmap_l2_loss, speed_loss
from cuevis.renderer import FieldParams, SamplerParams, field_eval, render_image, render_rays
from cuevis.scene import EVAL_LIGHT, KEYPOINTS, raytrace_reference, sample_pose
from cuevis.scene.spacecraft import SpacecraftModel

K = DEFAULT_INTRINSICS
EXPERIMENT = Path(os.environ.get("CUEVIS_EXPERIMENT", "/root/runs/ablation"))
SEEDS = (0, 1, 2)

pytestmark = pytest.mark.slow


def _verdict(number, checks: dict, extra: str = ""):
    failed = [k for k, ok in checks.items() if not ok]
    detail = ("all checks passed" if not failed else "failed: " + ", ".join(failed)) + (f"; {extra}" if extra else "")
    record(number, not failed, detail)
    assert not failed, detail


# -- 1 ---------------------------------------------------------------------------------

def _ops_fd() -> dict:
    out = {}
    for name, build in sorted(OP_CASES.items()):
        rng = np.random.default_rng(zlib.crc32(b"acc" + name.encode()))
        ok = True
        for _ in range(10):
            x0, fn = build(rng)
            proj = rng.standard_normal(fn(Tensor(x0)).shape)
            rep = fd_check(lambda t: ops.sum(ops.mul(fn(t), proj)), Tensor(np.array(x0, dtype=np.float64)), h=1e-5, tol=1e-4)
            ok &= rep.passed
        out[f"op {name}"] = ok
    return out


def _render_chain(instance: int) -> bool:
    rng = np.random.default_rng(1000 + instance)
    params = FieldParams.init(np.random.default_rng(instance), resolution=6, features=3, hidden=8, dtype=np.float64)
    s = SamplerParams.empty(4, 2, 2, params.aabb)
    K2 = CameraIntrinsics(4.0, 4.0, 0.5, 0.5, 2, 2)
    pose = Pose(Quaternion.random(rng), (0.0, 0.0, 2.5))
    target = rng.random((2, 2, 3))
    name = ("plane_xy", "plane_xz", "plane_yz")[instance % 3]

    def f(x):
        params.leaves[name] = x
        diff = ops.sub(render_image(pose, K2, params, s), target)
        return ops.sum(ops.mul(diff, diff))

    # smooth chain; smaller steps only add roundoff on the weakest cells
    return fd_check(f, Tensor(params.leaves[name].data.copy()), h=1e-5, tol=1e-3).passed


def _estimator_chain(instance: int) -> bool:
    rng = np.random.default_rng(2000 + instance)
    params = EstimatorParams.init(rng).copy(np.float64)
    params.freeze()
    pose = sample_pose(rng, K)
    target = target_heatmaps(pose, K)[None]

    def f(x):
        out = forward(x, params)
        return ops.add(speed_loss((out.q, out.t), (pose.q[None], pose.t[None])), heatmap_l2_loss(out.heatmaps, target))

    x = Tensor(rng.random((1, 3, 128, 192)))
    r0, c0 = rng.integers(0, 112), rng.integers(0, 168)
    idx = np.ravel_multi_index(
        (np.zeros(12, int), rng.integers(0, 3, 12), r0 + rng.integers(0, 16, 12), c0 + rng.integers(0, 24, 12)), x.shape
    )
    return fd_check(f, x, h=1e-5, tol=1e-3, indices=idx, abs_floor=1e-9).passed


def _cue_chain(instance: int) -> bool:
    rng = np.random.default_rng(3000 + instance)
    params, sampler = _field(instance, dtype=np.float64)
    est = _estimator(instance, np.float64)
    pose = sample_pose(rng, K)
    full = np.zeros((128, 192), bool)
    u = int(pose.t[0] / pose.t[2] * K.fx + K.cx) // 2 * 2
    v = int(pose.t[1] / pose.t[2] * K.fy + K.cy) // 2 * 2
    r0, c0 = np.clip(v - 8, 0, 112), np.clip(u - 12, 0, 168)
    full[r0 : r0 + 16, c0 : c0 + 24] = True
    half = render_mask(full, 0)
    cfg = CueTrainConfig(w_heatmap=1.0, w_pose=1.0)
    name = ("plane_xy", "plane_xz", "plane_yz")[instance % 3]

    def f(x):
        params.leaves[name] = x
        return cue_loss(pose, half, params, sampler, est, cfg)[0]

    x = Tensor(params.leaves[name].data.copy(), requires_grad=True)
    backward(f(x))
    # the cells the loss depends on most; the rest sit below roundoff
    idx = np.argsort(np.abs(x.grad.reshape(-1)))[-8:]
    return fd_check(f, Tensor(params.leaves[name].data.copy()), h=1e-6, tol=1e-3, indices=idx, abs_floor=1e-9).passed


def test_criterion_1_gradient_correctness():
    t0 = time.process_time()
    checks = _ops_fd()
    checks["plane cell -> render -> loss"] = all(_render_chain(i) for i in range(10))
    checks["image pixel -> estimator -> loss"] = all(_estimator_chain(i) for i in range(10))
    checks["plane cell -> cue step loss"] = all(_cue_chain(i) for i in range(10))
    cpu = time.process_time() - t0
    checks["cpu time < 5 min"] = cpu < 300
    _verdict(1, checks, f"{len(OP_CASES)} op cases + 3 chains x 10 instances in {cpu:.0f} s CPU")


# -- 2 ---------------------------------------------------------------------------------

def _random_rays(rng, n):
    origins = rng.uniform(-1, 1, (n, 3)) * 3.0
    dirs = -origins + rng.normal(scale=0.6, size=(n, 3))
    return origins, dirs / np.linalg.norm(dirs, axis=1, keepdims=True)


def test_criterion_2_volume_rendering_invariants():
    rng = np.random.default_rng(42)
    params = FieldParams.init(rng, resolution=16, features=8, hidden=16, dtype=np.float64, plane_init=(0.5, 1.5))
    params.leaves["density.b2"].data[0] = 2.0
    sampler = SamplerParams.empty(8, 16, 16, params.aabb).refreshed(params)
    o, d = _random_rays(rng, 10_000)
    with no_grad():
        res = render_rays(o, d, params, sampler, rng)
    w = res.weights
    checks = {
        "rays hit the box": len(res.batch) > 5000,
        "weights in [0, 1]": bool(np.all((w >= 0) & (w <= 1))),
        "sum of weights <= 1 + 1e-9": bool(np.all(w.sum(1) <= 1 + 1e-9)),
    }

    empty = params.copy()
    empty.leaves["density.b2"].data[0] = -1e4
    with no_grad():
        black = render_rays(o, d, empty, SamplerParams.empty(8, 16, 16, params.aabb), rng).color.data
    checks["empty space renders exactly black"] = bool(np.all(black == 0))

    opaque = params.copy()
    # sigma * delta >> 1 even where a fine sample sits microns behind the first one
    opaque.leaves["density.b2"].data[0] = 1e9
    grid = SamplerParams.empty(8, 16, 16, params.aabb)
    with no_grad():
        res = render_rays(o, d, opaque, grid, np.random.default_rng(7))
        first = res.batch.positions[:, 0]
        rgb, _ = field_eval(first, res.batch.dirs, opaque)
    err = np.abs(res.color.data[res.batch.ray_index] - rgb.data).max()
    checks["opaque limit = first sample colour (1e-6)"] = err < 1e-6
    _verdict(2, checks, f"{len(res.batch)} of 10000 rays hit; max sum w {w.sum(1).max():.12f}; opaque err {err:.1e}")


# -- 3 ---------------------------------------------------------------------------------

def test_criterion_3_pnp_oracle():
    rng = np.random.default_rng(3)
    worst_r, worst_t, monotone = 0.0, 0.0, True
    for _ in range(100):
        pose = sample_pose(rng, K)
        uv = project_points(pose, K, KEYPOINTS)
        res = pnp_solve(uv, np.ones(len(KEYPOINTS)), K, _perturbed(pose, rng))
        worst_r = max(worst_r, angular_error(res.pose.q, pose.q))
        worst_t = max(worst_t, translation_error(res.pose.t, pose.t))
        monotone &= bool(np.all(np.diff(res.costs) <= 0))
    checks = {"E_R < 0.1 deg": worst_r < 0.1, "E_T < 1e-3 m": worst_t < 1e-3, "cost non-increasing": monotone}
    _verdict(3, checks, f"worst over 100 poses: E_R {worst_r:.2e} deg, E_T {worst_t:.2e} m")


# -- 4 ---------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def labelled():
    rng = np.random.default_rng(11)
    poses = [sample_pose(rng, K) for _ in range(10)]
    masks = np.stack([raytrace_reference(p, K, SpacecraftModel(), EVAL_LIGHT)[1] for p in poses])
    return poses, masks


def test_criterion_4_accumulation_equivalence(labelled):
    poses, masks = labelled
    # N = 10: one accumulated update vs one Adam step on the gradient of the batch-mean loss
    # double precision, so the comparison sees the algorithm rather than the
    # float32 summation order that Adam amplifies on near-zero gradients
    gen, est = _field(2, dtype=np.float64), _estimator(2, np.float64)
    cfg = CueTrainConfig(accumulation_steps=10, total_steps=10, encoding="trainable", sampler_refresh=0, seed=6)
    res = cue_train(poses, masks, gen, est, cfg)
    params, sampler = gen[0].copy(), gen[1]
    params.set_trainable(planes=True)
    sched = pose_schedule(len(poses), cfg.total_steps, cfg.seed)
    params.zero_grad()
    terms = [
        cue_loss(poses[k], render_mask(masks[k], cfg.dilation_px), params, sampler, est, cfg, step_rng(cfg, s))[0]
        for s, k in enumerate(sched)
    ]
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    backward(ops.mul(total, 1.0 / len(terms)))
    Adam(params.trainable_arrays(), lr=cfg.learning_rates(), betas=cfg.betas).step(params.grads())
    diff = max(float(np.abs(res.params.leaves[k].data.astype(np.float64) - v).max()) for k, v in params.arrays().items())

    # N = 1: bit-exact against stepping after every image
    gen1, est1 = _field(1), _estimator(1)
    cfg1 = CueTrainConfig(accumulation_steps=1, total_steps=4, encoding="trainable", sampler_refresh=0, seed=5)
    res1 = cue_train(poses, masks, gen1, est1, cfg1)
    ref1 = _manual_run(poses, masks, gen1, est1, cfg1, batched=False)
    exact = all(np.array_equal(res1.params.leaves[k].data, v) for k, v in ref1.arrays().items())
    _verdict(4, {"N=10 within 1e-6": diff <= 1e-6, "N=1 bit-exact": exact}, f"N=10 max abs diff {diff:.2e}")


# -- 5 ---------------------------------------------------------------------------------

def test_criterion_5_frozen_contracts(labelled, tmp_path):
    poses, masks = labelled
    params, sampler = _field(3)
    est = _estimator(3)
    est.save(tmp_path / "est")
    file_before = checkpoint_digest(tmp_path / "est")
    before = tensors_digest(est.arrays())
    cfg = CueTrainConfig(accumulation_steps=2, total_steps=10, seed=1)
    res = cue_train(poses, masks, initial_generator(cfg, (params, sampler)), est, cfg)
    est.save(tmp_path / "est_after")
    planes = all(np.array_equal(res.params.leaves[n].data, params.leaves[n].data) for n in params.names("planes"))
    checks = {
        "estimator tensors unchanged": tensors_digest(est.arrays()) == before,
        "estimator checkpoint hash unchanged": checkpoint_digest(tmp_path / "est_after") == file_before,
        "planes unchanged": planes,
        "sampler grid unchanged": np.array_equal(res.sampler.grid, sampler.grid),
        "MLPs did train": any(
            not np.array_equal(res.params.leaves[n].data, params.leaves[n].data) for n in params.names("color")
        ),
    }
    _verdict(5, checks)


# -- 6-8: the desk-scale experiment ---------------------------------------------------------

@pytest.fixture(scope="module")
def experiment():
    cfg = resolve_config()
    run_ablate(cfg, EXPERIMENT, ("heatmap+pose", "pose-only"), ("combined",), ("frozen",), SEEDS, log=lambda m: None)
    run_ablate(cfg, EXPERIMENT, ("heatmap+pose",), ("combined",), ("trainable",), SEEDS, log=lambda m: None)
    return EXPERIMENT


def _arm(root: Path, heads: str, enc: str, seed: int) -> Path:
    return root / "arms" / f"{heads.replace('+', '-')}_combined_{enc}_s{seed}"


def _medians(arm: Path) -> dict:
    rows = read_eval(arm / "eval" / "eval.csv")
    return {k: float(np.median([r[k] for r in rows])) for k in ("cue_E_R_deg", "cue_E_T_m", "ref_E_R_deg", "ref_E_T_m")}


def test_criterion_6_nerf_pretraining(experiment):
    (nerf,) = experiment.glob("nerf-*")
    info = json.loads((nerf / "pretrain.json").read_text())
    checks = {
        "200 training images": info["n_train"] == 200,
        "held-out PSNR >= 25 dB": info["heldout_psnr_db"] >= 25.0,
        "within 30 min": info["train_seconds"] <= 1800,
    }
    _verdict(6, checks, f"PSNR {info['heldout_psnr_db']:.2f} dB after {info['train_seconds'] / 60:.1f} min")


def test_estimator_accuracy(experiment):
    """Held-out accuracy of the combined estimator used by every cue arm."""
    (est,) = experiment.glob("estimator-heatmap-pose-*")
    val = json.loads((est / "report.json").read_text())["val"]["summary"]
    assert val["median_E_R_deg"] <= 10.0 and val["median_E_T_m"] <= 0.25, val


def test_criterion_7_cues_suffice(experiment):
    checks, notes = {}, []
    for seed in SEEDS:
        m = _medians(_arm(experiment, "heatmap+pose", "frozen", seed))
        checks[f"seed {seed}: cue E_R <= 3x ref"] = m["cue_E_R_deg"] <= 3 * m["ref_E_R_deg"]
        checks[f"seed {seed}: cue E_R <= 15 deg"] = m["cue_E_R_deg"] <= 15.0
        checks[f"seed {seed}: cue E_T <= 3x ref"] = m["cue_E_T_m"] <= 3 * m["ref_E_T_m"]
        notes.append(
            f"s{seed} cue {m['cue_E_R_deg']:.1f} deg/{m['cue_E_T_m']:.2f} m vs ref {m['ref_E_R_deg']:.1f} deg/{m['ref_E_T_m']:.2f} m"
        )
    _verdict(7, checks, "; ".join(notes))


def _moving_average(x: np.ndarray, window: int = 50) -> np.ndarray:
    c = np.cumsum(np.insert(x, 0, 0.0))
    return (c[window:] - c[:-window]) / window


def plateau_updates(frozen_loss, trainable_loss, window: int = 50) -> tuple:
    """Updates each run needs to get within 10% of the frozen run's total
    drop above its final smoothed loss (inf if never)."""
    fa, ta = _moving_average(np.asarray(frozen_loss), window), _moving_average(np.asarray(trainable_loss), window)
    level = fa[-1] + 0.1 * (fa[0] - fa[-1])

    def first(a):
        hit = np.flatnonzero(a <= level)
        return float(hit[0] + window) if hit.size else float("inf")

    return first(fa), first(ta)


def test_plateau_updates_on_synthetic_curves():
    u = np.arange(1000)
    fast, slow = 1 + np.exp(-u / 50), 1 + 2 * np.exp(-u / 300)
    f, t = plateau_updates(fast, slow)
    assert f < t / 2
    assert plateau_updates(fast, np.full(1000, 3.0))[1] == float("inf")


def test_criterion_8_ablation_directions(experiment):
    worse, faster, notes = 0, 0, []
    for seed in SEEDS:
        comb = _medians(_arm(experiment, "heatmap+pose", "frozen", seed))["cue_E_R_deg"]
        pose_only = _medians(_arm(experiment, "pose-only", "frozen", seed))["cue_E_R_deg"]
        worse += pose_only > comb
        fl = [r["loss"] for r in read_log(_arm(experiment, "heatmap+pose", "frozen", seed) / "train" / "cue_log.csv")]
        tl = [r["loss"] for r in read_log(_arm(experiment, "heatmap+pose", "trainable", seed) / "train" / "cue_log.csv")]
        f, t = plateau_updates(fl, tl)
        faster += f <= t / 2
        notes.append(f"s{seed} cue E_R pose-only {pose_only:.1f} vs combined {comb:.1f} deg, plateau {f:.0f} vs {t:.0f} updates")
    checks = {
        "pose-only estimator worse (majority of seeds)": worse * 2 > len(SEEDS),
        "frozen plateau <= half of trainable (majority of seeds)": faster * 2 > len(SEEDS),
    }
    _verdict(8, checks, "; ".join(notes))


# -- 9 ---------------------------------------------------------------------------------

TINY = {
    "dataset": {"n_images": 12},
    "estimator": {"steps": 4, "batch_size": 2},
    "nerf_pretrain": {
        "n_train": 6, "n_heldout": 2, "steps": 10, "batch_rays": 64, "resolution": 16, "features": 8,
        "hidden": 16, "grid_resolution": 8, "n_coarse": 8, "n_fine": 8, "refresh_every": 5,
    },
    "cue_train": {"accumulation_steps": 2, "total_steps": 6, "sampler_refresh": 1},
    "eval": {"poses": "grid4"},
}


def _csv_without_wall(path: Path) -> list:
    lines = path.read_text().splitlines()
    header = lines[0].split(",")
    keep = [i for i, h in enumerate(header) if h != "wall_ms"]
    return [[cells[i] for i in keep] for cells in (line.split(",") for line in lines)]


def _logs(root: Path) -> dict:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.suffix == ".csv":
            out[str(p.relative_to(root))] = _csv_without_wall(p)
        elif p.name in ("manifest.jsonl", "pretrain.json"):
            text = json.loads(p.read_text()) if p.suffix == ".json" else p.read_text()
            if isinstance(text, dict):
                text.pop("train_seconds", None)
            out[str(p.relative_to(root))] = text
    return out


def _pipeline(root: Path, cfg: Path, threads: int) -> None:
    c = ["--config", str(cfg), "--quiet", "--threads", str(threads)]
    assert main(["dataset", "--out", str(root / "ds"), *c]) == 0
    assert main(["train-estimator", "--dataset", str(root / "ds"), "--out", str(root / "est"), *c]) == 0
    assert main(["pretrain-nerf", "--out", str(root / "nerf"), *c]) == 0
    gen = ["--estimator", str(root / "est" / "estimator"), "--generator", str(root / "nerf" / "generator")]
    assert main(["train-cues", "--dataset", str(root / "ds"), *gen, "--out", str(root / "cues"), *c]) == 0
    gen[-1] = str(root / "cues" / "generator")
    assert main(["eval", *gen, "--out", str(root / "eval"), *c]) == 0
    assert main(["ablate", "--out", str(root / "ab"), "--estimators", "heatmap+pose", "--seeds", "0,1", *c]) == 0
    assert main(["report", str(root / "eval"), str(root / "cues"), "--out", str(root / "report")]) == 0


def test_criterion_9_determinism(tmp_path):
    cfg = tmp_path / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    runs = {}
    for name, threads in (("a", 1), ("b", 1), ("c", 3)):
        _pipeline(tmp_path / name, cfg, threads)
        runs[name] = _logs(tmp_path / name)
    stages = ("ds", "est", "nerf", "cues", "eval", "ab", "report")
    checks = {}
    for stage in stages:
        pick = lambda logs: {k: v for k, v in logs.items() if k.startswith(stage + "/")}
        checks[f"{stage}: logs present"] = bool(pick(runs["a"]))
        checks[f"{stage}: single-worker repeat identical"] = pick(runs["a"]) == pick(runs["b"])
        checks[f"{stage}: 3 workers identical"] = pick(runs["a"]) == pick(runs["c"])
    _verdict(9, checks, f"{len(runs['a'])} log files compared per run (wall-clock columns excluded)")
