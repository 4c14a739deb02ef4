import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special, stats

from cuevis.autodiff import Tensor, backward, fd_check, no_grad, ops
from cuevis.geometry import CameraIntrinsics, Pose, Quaternion, Ray, ray_bundle
from cuevis.renderer.encoding import (
    PLANE_AXES,
    SH_C0,
    SH_C1,
    angles_to_direction,
    encode_direction,
    encode_position,
    plane_features,
    sh_basis,
)
from cuevis.renderer.field import FieldParams, SamplePoint, field_eval, field_eval_points
from cuevis.renderer.pretrain import PretrainConfig, heldout_psnr, photometric_pretrain
from cuevis.renderer.render import composite, render_image, render_pixels, render_rays
from cuevis.renderer.sampler import SamplerParams, ray_aabb, sample_ray, sample_rays

UNIT = ((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))
TINY = CameraIntrinsics(12.0, 12.0, 1.5, 1.5, 4, 4)


def small_field(seed=0, dtype=np.float64, **kw):
    kw.setdefault("resolution", 8)
    kw.setdefault("features", 4)
    kw.setdefault("hidden", 8)
    return FieldParams.init(np.random.default_rng(seed), dtype=dtype, **kw)


def front_pose(d=3.0):
    return Pose(Quaternion.identity(), (0.0, 0.0, d))


# ---- position encoding


def _loop_bilinear(plane, u, v):
    R1, R2, F = plane.shape
    gu, gv = u * (R1 - 1), v * (R2 - 1)
    i, j = min(int(np.floor(gu)), R1 - 2), min(int(np.floor(gv)), R2 - 2)
    fu, fv = gu - i, gv - j
    out = np.zeros(F)
    for f in range(F):
        out[f] = (
            (1 - fu) * (1 - fv) * plane[i, j, f]
            + fu * (1 - fv) * plane[i + 1, j, f]
            + (1 - fu) * fv * plane[i, j + 1, f]
            + fu * fv * plane[i + 1, j + 1, f]
        )
    return out


def test_ones_planes_give_ones():
    planes = [Tensor(np.ones((5, 5, 3))) for _ in range(3)]
    pts = np.random.default_rng(0).uniform(-2, 2, size=(50, 3))
    out = encode_position(pts, planes, ((-1.0,) * 3, (1.0,) * 3))
    assert np.array_equal(out.data, np.ones((50, 3)))


def test_grid_node_is_exact():
    rng = np.random.default_rng(1)
    planes = [rng.random((5, 5, 3)) for _ in range(3)]
    node = np.array([1, 3, 4])
    p = node / 4.0
    out = plane_features([Tensor(x) for x in planes], p[None]).data[0]
    want = np.ones(3)
    for plane, (a, b) in zip(planes, PLANE_AXES):
        want = want * plane[node[a], node[b]]
    assert np.array_equal(out, want)


def test_position_encoding_loop_oracle():
    rng = np.random.default_rng(2)
    planes = [rng.random((7, 6, 4)) for _ in range(3)]
    pts = rng.random((40, 3))
    out = plane_features([Tensor(x) for x in planes], pts).data
    for row, p in zip(out, pts):
        want = np.ones(4)
        for plane, (a, b) in zip(planes, PLANE_AXES):
            want = want * _loop_bilinear(plane, p[a], p[b])
        assert np.abs(row - want).max() < 1e-12


def test_positions_outside_box_are_clamped():
    rng = np.random.default_rng(3)
    planes = [Tensor(rng.random((4, 4, 2))) for _ in range(3)]
    inside = encode_position(np.array([[1.0, 0.0, -1.0]]), planes, ((-1.0,) * 3, (1.0,) * 3)).data
    outside = encode_position(np.array([[5.0, 0.0, -9.0]]), planes, ((-1.0,) * 3, (1.0,) * 3)).data
    assert np.array_equal(inside, outside)


# ---- direction encoding


def test_sh_degree_zero_constant():
    dirs = angles_to_direction(np.random.default_rng(0).uniform(0, np.pi, 20), np.random.default_rng(1).uniform(0, 6, 20))
    assert np.allclose(sh_basis(dirs, 0)[:, 0], 0.28209479, atol=1e-8)
    assert SH_C0 == pytest.approx(1 / (2 * np.sqrt(np.pi)), abs=1e-15)


def test_sh_plus_z_degree_one():
    y = encode_direction(0.0, 0.0, 1)[0]
    c = np.sqrt(3 / (4 * np.pi))
    assert np.allclose(y[1:], [0.0, c, 0.0], atol=1e-15)
    assert SH_C1 == pytest.approx(c, abs=1e-15)


def _real_sh_scipy(theta, phi, degree):
    # real SH from scipy's complex ones, with the Condon-Shortley phase removed
    cols = []
    for l in range(degree + 1):
        for m in range(-l, l + 1):
            y = special.sph_harm_y(l, abs(m), theta, phi)
            if m < 0:
                cols.append(np.sqrt(2) * (-1) ** m * y.imag)
            elif m == 0:
                cols.append(y.real)
            else:
                cols.append(np.sqrt(2) * (-1) ** m * y.real)
    return np.stack(cols, axis=1)


def test_sh_matches_scipy_reference():
    rng = np.random.default_rng(4)
    theta, phi = np.arccos(rng.uniform(-1, 1, 200)), rng.uniform(-np.pi, np.pi, 200)
    ours = encode_direction(theta, phi, 2)
    assert np.abs(ours - _real_sh_scipy(theta, phi, 2)).max() < 1e-12


def test_sh_bad_degree():
    with pytest.raises(ValueError):
        sh_basis(np.array([[0, 0, 1.0]]), 3)


# ---- field


def test_zero_weights_field():
    params = FieldParams.zeros_like(small_field())
    rng = np.random.default_rng(0)
    dirs = rng.normal(size=(30, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    rgb, sigma = field_eval(rng.uniform(-1, 1, (30, 3)), dirs, params)
    assert np.allclose(sigma.data, np.log(2), atol=1e-12)
    assert np.allclose(rgb.data, 0.5, atol=1e-12)


def test_density_nonnegative_many_params():
    rng = np.random.default_rng(5)
    for k in range(10):
        params = small_field(seed=k)
        for leaf in params.leaves.values():
            leaf.data[...] = rng.normal(0, 3, size=leaf.shape)
        pts = rng.uniform(-1.5, 1.5, (1000, 3))
        dirs = rng.normal(size=(1000, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        rgb, sigma = field_eval(pts, dirs, params)
        assert np.all(sigma.data >= 0)
        assert np.all((rgb.data >= 0) & (rgb.data <= 1))


@pytest.mark.parametrize("name", ["plane_xy", "plane_yz", "density.w0", "density.b2", "color.w0", "color.w2"])
def test_field_eval_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    params = small_field(seed=1)
    pts = rng.uniform(-1.1, 1.1, (10, 3))
    dirs = rng.normal(size=(10, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    wr, ws = rng.normal(size=(10, 3)), rng.normal(size=10)
    leaf = params.leaves[name]

    def f(x):
        params.leaves[name] = x
        rgb, sigma = field_eval(pts, dirs, params)
        return ops.add(ops.sum(ops.mul(rgb, wr)), ops.sum(ops.mul(sigma, ws)))

    report = fd_check(f, Tensor(leaf.data.copy(), requires_grad=True), h=1e-5, tol=1e-4)
    assert report.passed, str(report)


def test_field_eval_points_rows():
    params = small_field()
    pts = [SamplePoint((0.1, 0.2, 0.3), 0.5, 1.0, 0.1), SamplePoint((0.0, -0.5, 0.9), 2.0, -1.0, 0.1)]
    rows = field_eval_points(pts, params)
    rgb, sigma = field_eval(np.array([p.position for p in pts]), angles_to_direction([0.5, 2.0], [1.0, -1.0]), params)
    assert np.allclose(rows, np.concatenate([rgb.data, sigma.data[:, None]], 1))
    assert field_eval_points([], params).shape == (0, 4)


def test_trainable_groups_control_gradients():
    params = small_field()
    params.set_trainable(planes=False)
    rgb, sigma = field_eval(np.zeros((3, 3)), np.tile([0, 0, 1.0], (3, 1)), params)
    backward(ops.add(ops.sum(rgb), ops.sum(sigma)))
    assert all(params.leaves[n].grad is None for n in params.names("planes"))
    assert all(params.leaves[n].grad is not None for n in params.names("density"))
    assert "plane_xy" not in params.trainable_arrays()
    with pytest.raises(KeyError):
        params.set_trainable(bogus=True)


def test_field_checkpoint_roundtrip(tmp_path):
    params = small_field(dtype=np.float32)
    params.set_trainable(planes=False)
    params.save(tmp_path / "f")
    back = FieldParams.load(tmp_path / "f")
    assert back.trainable == params.trainable
    for k, v in params.arrays().items():
        assert np.array_equal(back.arrays()[k], v)


def test_field_rejects_bad_input():
    with pytest.raises(ValueError, match="aabb"):
        FieldParams(small_field().arrays(), aabb=((0, 0, 0), (1, 0, 1)))
    arrays = small_field().arrays()
    arrays["density.b0"] = arrays["density.b0"] + np.nan
    with pytest.raises(ValueError, match="non-finite"):
        FieldParams(arrays)


# ---- sampler


def test_slab_unit_cube():
    tn, tf, hit = ray_aabb([[0.5, 0.5, -1.0]], [[0.0, 0.0, 1.0]], UNIT)
    assert hit[0] and tn[0] == 1.0 and tf[0] == 2.0


def test_ray_missing_box_has_no_samples():
    s = SamplerParams.empty(4, 8, 8, UNIT)
    assert sample_ray(Ray(np.array([5.0, 5.0, -1.0]), np.array([0.0, 0.0, 1.0])), s) == []
    assert sample_ray(Ray(np.array([0.5, 0.5, 3.0]), np.array([0.0, 0.0, 1.0])), s) == []


def test_samples_inside_box_and_positive_deltas():
    s = SamplerParams.empty(4, 8, 8, UNIT)
    pts = sample_ray(Ray(np.array([0.5, 0.5, -1.0]), np.array([0.1, 0.0, 1.0])), s, np.random.default_rng(0))
    assert len(pts) == 16
    pos = np.array([p.position for p in pts])
    assert np.all((pos >= 0) & (pos <= 1))
    assert all(p.delta > 0 for p in pts)
    depths = pos[:, 2]
    assert np.all(np.diff(depths) > 0)


@pytest.mark.parametrize("level", [0.0, 1e-8])
def test_uniform_occupancy_fine_samples_uniform(level):
    s = SamplerParams(np.full((4, 4, 4), level), 32, 32, UNIT)
    rng = np.random.default_rng(6)
    n_rays = 10_000
    o = np.column_stack([rng.uniform(0.1, 0.9, (n_rays, 2)), np.full(n_rays, -1.0)])
    d = np.tile([0.0, 0.0, 1.0], (n_rays, 1))
    batch = sample_rays(o, d, s, rng)
    # one fine sample per ray, so draws are independent
    fine = batch.t[batch.is_fine].reshape(n_rays, 32)[np.arange(n_rays), rng.integers(0, 32, n_rays)] - 1.0
    ks = stats.kstest(fine, "uniform")
    assert ks.statistic < 0.05


def test_importance_sampling_concentrates():
    grid = np.zeros((4, 4, 4))
    grid[:, :, 2] = 50.0  # slab at z in [0.5, 0.75)
    s = SamplerParams(grid, 16, 64, UNIT)
    batch = sample_rays([[0.5, 0.5, -1.0]], [[0.0, 0.0, 1.0]], s)
    z = batch.positions[0, :, 2]
    assert np.mean((z >= 0.5) & (z < 0.75)) > 0.7


def test_sampler_validation():
    with pytest.raises(ValueError):
        SamplerParams(-np.ones((2, 2, 2)))
    with pytest.raises(ValueError):
        SamplerParams(np.zeros((2, 2, 2)), 0, 4)
    with pytest.raises(ValueError):
        SamplerParams(np.zeros((2, 3, 2)))


# ---- compositing and rendering


def test_composite_empty_space():
    rgb = Tensor(np.random.default_rng(0).random((5, 6, 3)))
    color, w = composite(rgb, Tensor(np.zeros((5, 6))), np.full((5, 6), 0.1))
    assert np.all(color.data == 0) and np.all(w.data == 0)


def test_composite_opaque_single_sample():
    color, _ = composite(Tensor(np.array([[[1.0, 0.0, 0.0]]])), Tensor(np.array([[1e6]])), np.array([[1.0]]))
    assert np.allclose(color.data, [[1, 0, 0]], atol=1e-12)


def test_composite_two_samples_closed_form():
    rgb = Tensor(np.array([[[1.0, 0, 0], [0, 0, 1.0]]]))
    sigma = Tensor(np.array([[1.0, 1e9]]))
    color, w = composite(rgb, sigma, np.array([[1.0, 1.0]]))
    e = np.exp(-1)
    assert np.allclose(color.data[0], [1 - e, 0, e], atol=1e-12)
    assert np.allclose(color.data[0], [0.6321, 0, 0.3679], atol=1e-4)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_weights_are_a_subprobability(seed):
    rng = np.random.default_rng(seed)
    R, S = 50, 16
    sigma = np.exp(rng.uniform(-10, 10, (R, S)))
    deltas = rng.uniform(1e-4, 1.0, (R, S))
    _, w = composite(Tensor(rng.random((R, S, 3))), Tensor(sigma), deltas)
    assert np.all(w.data >= 0) and np.all(w.data <= 1)
    assert np.all(w.data.sum(1) <= 1 + 1e-9)


def test_empty_field_renders_black_for_any_sample_count():
    params = small_field()
    params.leaves["density.b2"].data[0] = -1e4  # softplus underflows to exactly 0
    for n in (4, 8):
        s = SamplerParams.empty(4, n, n, params.aabb)
        img = render_image(front_pose(), TINY, params, s).data
        assert np.all(img == 0)


def test_render_pixels_empty_list():
    out = render_pixels(front_pose(), TINY, np.zeros((0, 2)), small_field(), SamplerParams.empty(4, 4, 4))
    assert out.shape == (0, 3)


def test_empty_mask_is_black():
    img = render_image(front_pose(), TINY, small_field(), SamplerParams.empty(4, 4, 4), mask=np.zeros((4, 4), bool))
    assert np.all(img.data == 0)


def test_full_mask_matches_per_pixel():
    params, s = small_field(), SamplerParams.empty(4, 4, 4)
    img = render_image(front_pose(), TINY, params, s).data
    for i, j in TINY.all_pixels():
        px = render_pixels(front_pose(), TINY, [[i, j]], params, s).data[0]
        assert np.array_equal(img[j, i], px)


def test_half_mask_is_restriction():
    params, s = small_field(), SamplerParams.empty(4, 4, 4)
    full = render_image(front_pose(), TINY, params, s).data
    mask = np.zeros((4, 4), bool)
    mask[:, :2] = True
    half = render_image(front_pose(), TINY, params, s, mask=mask).data
    assert np.array_equal(half[mask], full[mask])
    assert np.all(half[~mask] == 0)


def test_threads_do_not_change_renders():
    params, s = small_field(dtype=np.float32), SamplerParams.empty(4, 8, 8)
    K = CameraIntrinsics(40.0, 40.0, 7.5, 5.5, 16, 12)
    o, d = ray_bundle(front_pose(), K, K.all_pixels())
    with no_grad():
        a = render_rays(o, d, params, s, chunk=17, threads=1).color.data
        b = render_rays(o, d, params, s, chunk=17, threads=4).color.data
    assert a.tobytes() == b.tobytes()


def test_render_rejects_bad_mask():
    with pytest.raises(ValueError):
        render_image(front_pose(), TINY, small_field(), SamplerParams.empty(4, 4, 4), mask=np.ones((3, 3), bool))


@pytest.mark.parametrize("instance", range(10))
def test_end_to_end_plane_cell_gradient(instance):
    # plane cell -> 2x2 render with 4 samples per ray -> scalar loss
    rng = np.random.default_rng(100 + instance)
    params = small_field(seed=instance, resolution=6, features=3)
    s = SamplerParams.empty(4, 2, 2, params.aabb)
    K2 = CameraIntrinsics(4.0, 4.0, 0.5, 0.5, 2, 2)
    pose = Pose(Quaternion.random(rng), (0.0, 0.0, 2.5))
    target = rng.random((2, 2, 3))
    name = ["plane_xy", "plane_xz", "plane_yz"][instance % 3]

    def f(x):
        params.leaves[name] = x
        img = render_image(pose, K2, params, s)
        diff = ops.sub(img, target)
        return ops.sum(ops.mul(diff, diff))

    leaf = params.leaves[name]
    report = fd_check(f, Tensor(leaf.data.copy(), requires_grad=True), h=1e-6, tol=1e-3)
    assert report.passed, str(report)


# ---- pretraining


def _constant_views(n, color, K):
    rng = np.random.default_rng(0)
    poses = [Pose(Quaternion.random(rng), (0.0, 0.0, 2.6)) for _ in range(n)]
    return np.broadcast_to(np.asarray(color), (n, K.height, K.width, 3)).copy(), poses


def test_constant_color_scene_fits():
    K = CameraIntrinsics(10.0, 10.0, 3.5, 3.5, 8, 8)
    images, poses = _constant_views(12, (0.8, 0.3, 0.5), K)
    params = small_field(dtype=np.float32)
    s = SamplerParams.empty(4, 8, 8, params.aabb)
    cfg = PretrainConfig(steps=200, batch_rays=256, lr_planes=5e-2, lr_mlp=5e-2, refresh_every=50, seed=1)
    res = photometric_pretrain(images[:10], poses[:10], K, params, s, cfg)
    assert heldout_psnr(images[10:], poses[10:], K, res.params, res.sampler) > 40


def test_zero_steps_leave_params_unchanged():
    params = small_field(dtype=np.float32)
    s = SamplerParams.empty(4, 4, 4, params.aabb)
    images, poses = _constant_views(2, (0.5, 0.5, 0.5), TINY)
    res = photometric_pretrain(images, poses, TINY, params, s, PretrainConfig(steps=0))
    for k, v in params.arrays().items():
        assert res.params.arrays()[k].tobytes() == v.tobytes()
    assert res.sampler.grid.tobytes() == s.grid.tobytes()


def test_pretrain_does_not_mutate_inputs():
    params = small_field(dtype=np.float32)
    before = {k: v.copy() for k, v in params.arrays().items()}
    images, poses = _constant_views(2, (0.5, 0.5, 0.5), TINY)
    photometric_pretrain(images, poses, TINY, params, SamplerParams.empty(4, 4, 4), PretrainConfig(steps=3, batch_rays=8))
    assert all(np.array_equal(before[k], v) for k, v in params.arrays().items())


def test_pretrain_divergence_is_reported():
    params = small_field(dtype=np.float32)
    images, poses = _constant_views(2, (0.5, 0.5, 0.5), TINY)
    cfg = PretrainConfig(steps=50, batch_rays=8, lr_planes=1e38, lr_mlp=1e38)
    with pytest.raises(FloatingPointError, match="diverged at step"):
        photometric_pretrain(images, poses, TINY, params, SamplerParams.empty(4, 4, 4), cfg)


def test_pretrain_rejects_empty_dataset():
    with pytest.raises(ValueError):
        photometric_pretrain(np.zeros((0, 4, 4, 3)), [], TINY, small_field(), SamplerParams.empty(4, 4, 4))


# ---- estimator-style wrapper


def test_generator_fit_predict_save_load(tmp_path):
    from sklearn.base import clone

    from cuevis.renderer import NeRFGenerator

    images, poses = _constant_views(3, (0.6, 0.2, 0.1), TINY)
    X = np.array([np.concatenate([p.q, p.t]) for p in poses])
    gen = NeRFGenerator(TINY, resolution=6, features=4, hidden=8, grid_resolution=4, n_coarse=4, n_fine=4, steps=5, batch_rays=16)
    assert clone(gen).get_params()["steps"] == 5
    gen.fit(X, images)
    out = gen.predict(X[:2])
    assert out.shape == (2, 4, 4, 3)
    gen.save(tmp_path / "g")
    back = NeRFGenerator.load(tmp_path / "g", TINY)
    assert back.steps == 5
    np.testing.assert_array_equal(back.predict(X[:2]), out)
    assert np.isfinite(gen.score(X, images))


def test_generator_validates_inputs():
    from sklearn.exceptions import NotFittedError

    from cuevis.renderer import NeRFGenerator

    gen = NeRFGenerator(TINY, steps=1)
    with pytest.raises(NotFittedError):
        gen.predict(np.array([[1, 0, 0, 0, 0, 0, 3.0]]))
    with pytest.raises(ValueError, match="shape"):
        gen.fit(np.zeros((2, 6)), np.zeros((2, 4, 4, 3)))
    with pytest.raises(ValueError, match="zero quaternion"):
        gen.fit(np.zeros((1, 7)), np.zeros((1, 4, 4, 3)))
    with pytest.raises(ValueError, match="images"):
        gen.fit(np.array([[1, 0, 0, 0, 0, 0, 3.0]]), np.zeros((1, 5, 4, 3)))
