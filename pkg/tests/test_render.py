from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gausslock import core, generator, render, scenes
from gausslock.render import Camera, collapse_report, psnr, splat_render
from gausslock.traps import OpacityMask

from conftest import TRAP_STATISTIC, random_cloud, trap_descent


def cloud(mu, s, o, c, q=None):
    mu = np.atleast_2d(np.asarray(mu, float))
    n = mu.shape[0]
    q = np.tile([1.0, 0, 0, 0], (n, 1)) if q is None else np.asarray(q, float)
    return core.GaussianCloud(mu, np.atleast_2d(np.asarray(s, float)), q, np.asarray(o, float).reshape(n),
                              np.atleast_2d(np.asarray(c, float)))


def test_transparent_cloud_is_white():
    c = random_cloud(0)
    c = core.GaussianCloud(c.mu, c.s, c.q, np.full(c.n, 1e-12), c.c)
    for cam in render.default_cameras(16):
        assert np.array_equal(splat_render(c, cam), np.ones((16, 16, 3)))


def test_single_gaussian_matches_closed_form():
    g = cloud([0.0, 0.0, 0.0], [0.2, 0.1, 0.3], 0.9, [0.2, 0.4, 0.6])
    img = splat_render(g, Camera("+z", 32, 32))
    # +z view: image x runs along world x, image y against world y; pixel centres at k + 0.5
    centre = np.arange(32) + 0.5 - 16.0
    dx, dy = centre[None, :], centre[:, None]
    sx, sy = 0.2 * 16, 0.1 * 16
    alpha = 0.9 * np.exp(-0.5 * (dx**2 / sx**2 + dy**2 / sy**2))
    expect = alpha[..., None] * np.array([0.2, 0.4, 0.6]) + (1 - alpha[..., None])
    assert np.abs(img - expect).max() < 1e-5
    lum = img.sum(axis=2)
    row, col = np.unravel_index(np.argmin(lum), lum.shape)
    assert (row, col) in {(15, 15), (15, 16), (16, 15), (16, 16)}
    # darkness falls off monotonically from the centre along each axis until the
    # footprint fades into the white background
    for ray in (lum[16, 16:], lum[16:, 16]):
        step = np.diff(ray)
        assert np.all(step >= 0)
        assert np.all(step[ray[:-1] < 3.0 - 1e-9] > 0)


def test_front_gaussian_occludes_back():
    # x = y = 1/16 puts the centre exactly on pixel (8, 8) of a 16 px image
    at = 1.0 / 16.0
    front = cloud([[at, -at, 0.5]], [[0.5, 0.5, 0.05]], [1.0 - 1e-12], [[0.0, 0.0, 1.0]])
    both = cloud([[at, -at, 0.5], [at, -at, -0.5]], [[0.5, 0.5, 0.05]] * 2, [1.0 - 1e-12] * 2,
                 [[0, 0, 1.0], [1.0, 0, 0]])
    cam = Camera("+z", 16, 16)
    # the +z camera looks down -z, so z = 0.5 is in front; alpha clamps at 0.999
    diff = np.abs(splat_render(both, cam)[8, 8] - splat_render(front, cam)[8, 8]).max()
    assert diff < 1e-3


def test_psnr_examples():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a) == 99.0
    assert psnr(a, np.ones_like(a)) == 0.0
    assert psnr(np.full_like(a, 0.5), np.full_like(a, 0.6)) == pytest.approx(20.0, abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_psnr_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((6, 6, 3)), rng.random((6, 6, 3))
    assert psnr(a, b) == psnr(b, a)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31))
def test_render_ignores_input_order(seed):
    c = random_cloud(seed % 1000, 32)
    perm = np.random.default_rng(seed).permutation(c.n)
    shuffled = core.GaussianCloud(c.mu[perm], c.s[perm], c.q[perm], c.o[perm], c.c[perm])
    for cam in render.default_cameras(16)[::2]:
        assert np.array_equal(splat_render(c, cam), splat_render(shuffled, cam))


def test_render_deterministic():
    c = random_cloud(3)
    cam = Camera("-y", 24, 24)
    assert np.array_equal(splat_render(c, cam), splat_render(c, cam))


def test_collapse_report_examples():
    rng = np.random.default_rng(0)
    n = 20000
    iso = cloud(rng.normal(size=(n, 3)), np.ones((n, 3)), np.full(n, 0.5), rng.random((n, 3)),
                q=rng.normal(size=(n, 4)) / 1.0)
    iso = core.GaussianCloud(iso.mu, iso.s, iso.q / np.linalg.norm(iso.q, axis=1, keepdims=True), iso.o, iso.c)
    rep = collapse_report(iso)
    assert rep.pos_cond == pytest.approx(1.0, abs=0.1)
    assert rep.rot_coherence == pytest.approx(1.0 / 3.0, abs=0.02)
    assert rep.opa_median == 0.5
    aligned = core.GaussianCloud(iso.mu[:50], iso.s[:50], np.tile([1.0, 0, 0, 0], (50, 1)), iso.o[:50], iso.c[:50])
    assert collapse_report(aligned).rot_coherence == pytest.approx(1.0, abs=1e-12)


def test_collapse_report_minima():
    rep = collapse_report(random_cloud(5), OpacityMask(np.array([0, 1])))
    assert rep.pos_cond >= 1 and rep.scale_aniso >= 1 and 1 / 3 <= rep.rot_coherence <= 1 and rep.color_cond >= 1
    assert rep.opa_masked_mean >= 0


@pytest.mark.parametrize("trap", list(TRAP_STATISTIC))
def test_trap_descent_moves_its_statistic(trap):
    key, sign = TRAP_STATISTIC[trap]
    _, reports = trap_descent(trap, 11, 200)
    assert sign * (getattr(reports[-1], key) - getattr(reports[0], key)) > 0


@pytest.fixture(scope="module")
def target():
    _, _, t = scenes.make_benchmark("ideal", 1)
    return t.subset(range(3))


def test_evaluate_identity_is_capped(target):
    w = generator.init_weights(seed=2)
    clouds = [core.activate(r) for r in generator.forward(w, target.conds())]
    same = replace(target, samples=tuple(replace(smp, cloud=c) for smp, c in zip(target.samples, clouds)))
    table = render.evaluate(w, same, render.default_cameras(16)[:2])
    assert table.psnr_mean == 99.0 and all(r["psnr_db"] == 99.0 for r in table.rows)


def test_evaluate_transparent_model_sees_white(target):
    w = generator.init_weights(seed=0)
    W, b = w.layers[-1]
    b = np.zeros_like(b)
    b.reshape(256, 14)[:, core.OPACITY] = -60.0
    w = w.with_params({"W3": np.zeros_like(W), "b3": b})
    cams = render.default_cameras(16)[:3]
    table = render.evaluate(w, target, cams)
    white = np.mean([psnr(np.ones((16, 16, 3)), splat_render(s.cloud, c)) for s in target.samples for c in cams])
    assert table.psnr_mean == pytest.approx(white, abs=1e-12)
    per_scene = [np.mean([r["psnr_db"] for r in table.rows if r["scene_id"] == sid]) for sid in target.scene_ids]
    assert table.psnr_mean == pytest.approx(np.mean(per_scene), abs=1e-12)


def test_csv_columns(target, tmp_path):
    table = render.evaluate(generator.init_weights(seed=0), target, render.default_cameras(8)[:2])
    table.write_csv(tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == ",".join(render.CSV_COLUMNS)
    assert len(lines) == 1 + 3 * 2


def test_ppm_round_trip(tmp_path, rng):
    img = np.round(rng.random((7, 9, 3)) * 255) / 255
    render.write_ppm(img, tmp_path / "a.ppm")
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n9 7\n255\n")
    assert np.array_equal(render.read_ppm(tmp_path / "a.ppm"), img)


def test_camera_validation():
    with pytest.raises(ValueError):
        Camera("+w")
    with pytest.raises(ValueError):
        Camera("+z", 4, 4)
