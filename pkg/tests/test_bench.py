import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dbmi.bench import (
    Dataset,
    ImageTask,
    LowDimTask,
    channel_matrix,
    channel_mi,
    check_image_geometry,
    gen_conditional_matrix,
    gen_image_task,
    gen_lowdim_task,
    read_pgm,
    render_rectangle,
    sample_image,
    sample_image_latents,
    sample_lowdim,
    solve_eps,
    task_from_meta,
    tile_grid,
    write_pgm,
)
from dbmi.core import StateSpace, ValidationError, make_rng
from dbmi.estimate import plugin_mi
from dbmi.oracle import JointPMF, exact_mi_direct


def test_conditional_matrix_properties():
    P = gen_conditional_matrix(10, 0.5, make_rng(0))
    assert np.all(P > 0)
    np.testing.assert_allclose(P.sum(1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(P, gen_conditional_matrix(10, 0.5, make_rng(0)))
    with pytest.raises(ValidationError):
        gen_conditional_matrix(1, 0.5, make_rng(0))


def test_conditional_matrix_wide_kernel_is_near_uniform():
    P = np.mean([gen_conditional_matrix(5, 1e6, make_rng(s)) for s in range(400)], axis=0)
    np.testing.assert_allclose(P, 0.2, atol=0.02)


def test_lowdim_task_examples():
    space = StateSpace(4, 1)
    assert LowDimTask(space, np.eye(4)[None]).mi_total == pytest.approx(np.log(4), abs=1e-12)
    rows = np.tile([0.1, 0.2, 0.3, 0.4], (4, 1))[None]
    assert abs(LowDimTask(space, rows).mi_total) <= 1e-12


def test_lowdim_mi_matches_oracle():
    task = gen_lowdim_task(2, 10, 0.5, make_rng(1))
    assert task.mi_total == pytest.approx(exact_mi_direct(task.joint_pmf()), abs=1e-10)
    assert task.mi_total == pytest.approx(sum(task.mi_per_dim), abs=1e-12)


@settings(max_examples=10, deadline=None)
@given(st.integers(2, 5), st.integers(1, 3), st.integers(0, 2**32))
def test_lowdim_mi_matches_oracle_property(S, D, seed):
    if S**D > 4096:
        return
    task = gen_lowdim_task(D, S, 0.5, make_rng(seed))
    assert task.mi_total == pytest.approx(exact_mi_direct(task.joint_pmf()), abs=1e-10)


def test_sample_lowdim():
    task = gen_lowdim_task(1, 4, 0.5, make_rng(2))
    ds = sample_lowdim(task, 100_000, make_rng(3))
    assert abs(plugin_mi(ds.x0, ds.x1) - task.mi_total) <= 0.02
    freq = np.bincount(ds.x0[:, 0], minlength=4) / len(ds)
    assert np.all(np.abs(freq - 0.25) <= 3 * np.sqrt(0.25 * 0.75 / len(ds)))
    ident = LowDimTask(StateSpace(5, 3), np.stack([np.eye(5)] * 3))
    ds = sample_lowdim(ident, 500, make_rng(0))
    np.testing.assert_array_equal(ds.x0, ds.x1)


def test_channel_mi_examples():
    assert channel_mi(10, 0.0) == pytest.approx(np.log(11), abs=1e-15)
    assert abs(channel_mi(10, 10 / 11)) <= 1e-15
    for eps in (0.1, 0.37, 0.8):
        joint = JointPMF(StateSpace(6, 1), channel_matrix(6, eps) / 6)
        assert channel_mi(5, eps) == pytest.approx(exact_mi_direct(joint), abs=1e-12)


def test_channel_mi_decreasing():
    eps = np.linspace(0, 10 / 11, 200)
    vals = [channel_mi(10, e) for e in eps]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_solve_eps():
    assert solve_eps(10, np.log(11)) == 0.0
    assert solve_eps(10, 0.0) == pytest.approx(10 / 11)
    e = solve_eps(10, 0.25)
    assert abs(channel_mi(10, e) - 0.25) <= 1e-10
    with pytest.raises(ValidationError):
        solve_eps(5, 2.0)


def test_render_examples():
    img = render_rectangle([0, 0, 0, 0], 32, 10).reshape(32, 32)
    assert img.sum() == 100 and img[:10, :10].all()
    img = render_rectangle([10, 10, 10, 10], 32, 10).reshape(32, 32)
    assert img.sum() == 400 and img[10:30, 10:30].all()
    with pytest.raises(ValidationError):
        render_rectangle([13, 0, 10, 0], 32, 10)


def test_render_injective_exhaustive():
    lat = np.array(list(itertools.product(range(6), repeat=4)))
    imgs = render_rectangle(lat, 16, 5)
    assert len(np.unique(imgs, axis=0)) == len(lat)


def test_geometry_checks():
    check_image_geometry(16, 5, 5)
    check_image_geometry(32, 10, 10)
    with pytest.raises(ValidationError):
        check_image_geometry(16, 10, 10)


def test_image_task():
    task = gen_image_task(32, 10, 10, 4.0)
    assert task.mi_total == pytest.approx(4.0, abs=4e-10)
    assert task.space == StateSpace(2, 1024)
    zero = gen_image_task(16, 5, 5, 0.0)
    assert zero.eps == pytest.approx(5 / 6)
    assert task_from_meta(task.meta()) == task
    for target in (1, 2, 4, 6, 8):
        assert gen_image_task(32, 10, 10, target).mi_total == pytest.approx(target, abs=1e-9)


def test_latent_channel_plugin():
    task = gen_image_task(16, 5, 5, 2.0)
    z0, z1 = sample_image_latents(task, 1_000_000, make_rng(4))
    assert abs(plugin_mi(z0[:, :1], z1[:, :1]) - channel_mi(5, task.eps)) <= 0.01


def test_image_plugin_equals_latent_plugin():
    """Rendering is injective, so the empirical tables agree up to relabeling."""
    task = gen_image_task(16, 5, 5, 2.0)
    ds, z0, z1 = sample_image(task, 3000, make_rng(5), return_latents=True)
    assert plugin_mi(ds.x0, ds.x1) == plugin_mi(z0, z1)
    assert set(np.unique(ds.x0)) <= {0, 1}


def test_dataset_roundtrip(tmp_path):
    task = gen_lowdim_task(3, 7, 0.5, make_rng(6))
    ds = sample_lowdim(task, 123, make_rng(7))
    ds.meta["seed"] = 7
    ds.save(tmp_path / "a.dbmids")
    back = Dataset.load(tmp_path / "a.dbmids")
    np.testing.assert_array_equal(back.x0, ds.x0)
    np.testing.assert_array_equal(back.x1, ds.x1)
    assert back.meta == ds.meta
    back.save(tmp_path / "b.dbmids")
    assert (tmp_path / "a.dbmids").read_bytes() == (tmp_path / "b.dbmids").read_bytes()
    assert task_from_meta(back.meta).mi_total == task.mi_total


def test_dataset_layout(tmp_path):
    ds = Dataset(np.array([[1, 2]]), np.array([[3, 4]]), {"S": 5, "D": 2})
    ds.save(tmp_path / "d")
    raw = (tmp_path / "d").read_bytes()
    assert raw[:8] == b"DBMIDS\x00\x01"
    hlen = int.from_bytes(raw[8:12], "little")
    assert raw[12 + hlen :] == bytes([1, 2, 3, 4])


def test_dataset_corrupt(tmp_path):
    (tmp_path / "bad").write_bytes(b"nope")
    with pytest.raises(ValidationError):
        Dataset.load(tmp_path / "bad")
    ds = Dataset(np.array([[1, 2]]), np.array([[3, 4]]), {"S": 5, "D": 2})
    ds.save(tmp_path / "d")
    (tmp_path / "t").write_bytes((tmp_path / "d").read_bytes()[:-1])
    with pytest.raises(ValidationError):
        Dataset.load(tmp_path / "t")


def test_tile_grid_and_pgm(tmp_path):
    imgs = np.zeros((10, 16 * 16), int)
    imgs[3] = 1
    grid = tile_grid(imgs, 16)
    assert grid.shape == (2 * 16 + 1, 5 * 16 + 4)
    assert np.all(grid[16, :] == 128) and np.all(grid[:, 16] == 128)
    assert np.all(grid[:16, 51:67] == 255)
    write_pgm(tmp_path / "g.pgm", grid, comment="seed 1")
    np.testing.assert_array_equal(read_pgm(tmp_path / "g.pgm"), grid)
    with pytest.raises(ValidationError):
        tile_grid(imgs[:9], 16)


def test_image_task_rejects_bad_geometry():
    with pytest.raises(ValidationError):
        ImageTask(16, 10, 10, 0.1, 1.0)
