import numpy as np
import pytest

from ccnn.patches import (
    ImageShape,
    apply_pool,
    build_pool_matrix,
    extract_patches,
    extract_patches_batch,
    plan_patches,
)

from oracles import pool_matrix_oracle, pool_windows


def test_plan_grid_formula():
    plan = plan_patches(ImageShape(1, 28, 28), 5, stride=1, pad=0)
    assert (plan.grid_h, plan.grid_w) == (24, 24)
    assert plan.n_patches == 576
    assert plan.patch_dim == 25

    plan = plan_patches(ImageShape(3, 32, 32), 5, stride=2, pad=2)
    assert (plan.grid_h, plan.grid_w) == (16, 16)
    assert plan.patch_dim == 75


def test_plan_rejects_bad_geometry():
    with pytest.raises(ValueError):
        plan_patches(ImageShape(1, 4, 4), 5)
    with pytest.raises(ValueError):
        plan_patches(ImageShape(1, 4, 4), 2, stride=0)
    with pytest.raises(ValueError):
        plan_patches(ImageShape(1, 4, 4), 0)
    with pytest.raises(ValueError):
        plan_patches(ImageShape(1, 4, 4), 2, pad=-1)
    with pytest.raises(ValueError):
        ImageShape(0, 4, 4)


def test_extract_corner_patch_with_padding():
    image = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
    plan = plan_patches(ImageShape(1, 3, 3), 3, stride=1, pad=1)
    Z = extract_patches_batch(image, plan)
    assert Z.shape == (1, 9, 9)
    np.testing.assert_array_equal(
        Z[0, 0], [0, 0, 0, 0, 1, 2, 0, 4, 5])
    np.testing.assert_array_equal(
        Z[0, 4], [1, 2, 3, 4, 5, 6, 7, 8, 9])
    np.testing.assert_array_equal(
        Z[0, 8], [5, 6, 0, 8, 9, 0, 0, 0, 0])


def test_extract_rows_are_channel_major():
    rng = np.random.default_rng(3)
    image = rng.normal(size=(1, 2, 4, 4))
    plan = plan_patches(ImageShape(2, 4, 4), 2)
    Z = extract_patches_batch(image, plan)
    # patch at grid position (1, 2): channel 0 block then channel 1 block
    want = np.concatenate([
        image[0, 0, 1:3, 2:4].ravel(), image[0, 1, 1:3, 2:4].ravel()])
    np.testing.assert_array_equal(Z[0, 1 * 3 + 2], want)


def test_extract_matches_naive_loops():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(3, 2, 7, 6))
    plan = plan_patches(ImageShape(2, 7, 6), 3, stride=2, pad=1)
    Z = extract_patches_batch(X, plan)
    pad = np.pad(X, ((0, 0), (0, 0), (1, 1), (1, 1)))
    for i in range(3):
        p = 0
        for gy in range(plan.grid_h):
            for gx in range(plan.grid_w):
                y0, x0 = gy * 2, gx * 2
                want = pad[i, :, y0:y0 + 3, x0:x0 + 3].ravel()
                np.testing.assert_array_equal(Z[i, p], want)
                p += 1


def test_extract_single_image_matches_batch():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(2, 1, 5, 5))
    plan = plan_patches(ImageShape(1, 5, 5), 2)
    Z = extract_patches_batch(X, plan)
    np.testing.assert_array_equal(extract_patches(X[0], plan), Z[0])


def test_extract_rejects_wrong_shape():
    plan = plan_patches(ImageShape(1, 5, 5), 2)
    with pytest.raises(ValueError):
        extract_patches_batch(np.zeros((2, 1, 6, 5)), plan)


def test_pool_matrix_frozen_3x3_grid():
    plan = plan_patches(ImageShape(1, 5, 5), 3)  # grid 3x3
    pool = build_pool_matrix(plan, 2, 2)
    assert (pool.pooled_h, pool.pooled_w) == (2, 2)
    G = pool.matrix.toarray()
    want = np.zeros((4, 9))
    want[0, [0, 1, 3, 4]] = 0.25
    want[1, [2, 5]] = 0.5
    want[2, [6, 7]] = 0.5
    want[3, 8] = 1.0
    np.testing.assert_allclose(G, want)


def test_pool_identity_when_side_one():
    plan = plan_patches(ImageShape(1, 6, 6), 3)
    pool = build_pool_matrix(plan, 1, 1)
    G = pool.matrix.toarray()
    np.testing.assert_array_equal(G, np.eye(plan.n_patches))


def test_pool_rows_sum_to_one_and_match_oracle():
    rng = np.random.default_rng(6)
    for _ in range(20):
        gh, gw = rng.integers(1, 9, size=2)
        shape = ImageShape(1, int(gh) + 2, int(gw) + 2)
        plan = plan_patches(shape, 3)
        side = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 4))
        pool = build_pool_matrix(plan, side, stride)
        G = pool.matrix.toarray()
        np.testing.assert_allclose(G.sum(axis=1), 1.0, atol=1e-12)
        want = pool_matrix_oracle(plan.grid_h, plan.grid_w, side, stride)
        np.testing.assert_allclose(G, want, atol=1e-12)
        assert pool.n_pooled == len(
            pool_windows(plan.grid_h, plan.grid_w, side, stride))


def test_pool_rejects_bad_config():
    plan = plan_patches(ImageShape(1, 5, 5), 2)
    with pytest.raises(ValueError):
        build_pool_matrix(plan, 0, 1)
    with pytest.raises(ValueError):
        build_pool_matrix(plan, 1, 0)


def test_pool_side_covering_grid_is_global_average():
    plan = plan_patches(ImageShape(1, 5, 5), 2)  # grid 4x4
    pool = build_pool_matrix(plan, plan.grid_h + 3, plan.grid_h + 3)
    G = pool.matrix.toarray()
    assert G.shape == (1, plan.n_patches)
    np.testing.assert_allclose(G, 1.0 / plan.n_patches)


def test_apply_pool_2d_and_3d():
    rng = np.random.default_rng(7)
    plan = plan_patches(ImageShape(1, 5, 5), 2)  # grid 4x4
    pool = build_pool_matrix(plan, 2, 2)
    Z = rng.normal(size=(plan.n_patches, 6))
    np.testing.assert_allclose(apply_pool(pool, Z),
                               pool.matrix.toarray() @ Z)
    Zs = rng.normal(size=(5, plan.n_patches, 6))
    got = apply_pool(pool, Zs)
    assert got.shape == (5, pool.n_pooled, 6)
    for i in range(5):
        np.testing.assert_allclose(got[i], pool.matrix.toarray() @ Zs[i])
