import logging
import math

import numpy as np
import pytest

from ccnn.datasets import Dataset
from ccnn.errors import ConfigError, FormatError
from ccnn.kernels import KernelSpec, activation, c_sigma
from ccnn.model import (
    CcnnModel,
    LayerSpec,
    classify,
    convexify_on_features,
    describe,
    fit_stage,
    forward_batch,
    layer_forward,
    load_model,
    predict,
    predict_scores,
    radius_from_bounds,
    retrieve_filters,
    save_model,
    train_multi_layer,
    train_two_layer,
    validate_stack,
)
from ccnn.optimize import OptConfig
from ccnn.patches import ImageShape, extract_patches_batch, plan_patches
from ccnn.serialize import save_features


def small_dataset(rng, n=24, c=1, h=8, w=8, d2=3):
    images = rng.random((n, c, h, w)).astype(np.float32)
    labels = rng.integers(0, d2, size=n).astype(np.int64)
    return Dataset(images, labels)


def fast_spec(**kwargs):
    base = dict(kernel="gaussian", gamma=0.5, features="random", m=16, r=4,
                R=3.0, patch_side=3, stride=1, pad=0, pool_side=2,
                pool_stride=2, seed=0)
    base.update(kwargs)
    return LayerSpec(**base)


def fast_opt(**kwargs):
    base = dict(epochs=2, batch_size=8, step_size=0.5, radius=3.0, seed=0)
    base.update(kwargs)
    return OptConfig(**base)


# ---------------------------------------------------------------------------
# LayerSpec


def test_layer_spec_validation():
    fast_spec()
    with pytest.raises(ConfigError):
        fast_spec(kernel="poly")
    with pytest.raises(ConfigError):
        fast_spec(features="fourier")
    with pytest.raises(ConfigError):
        fast_spec(kernel="inverse_poly", features="random")
    with pytest.raises(ConfigError):
        fast_spec(kernel="gaussian", features="identity")
    with pytest.raises(ConfigError):
        fast_spec(gamma=0.0)
    with pytest.raises(ConfigError):
        fast_spec(r=0)
    with pytest.raises(ConfigError):
        fast_spec(R=-1.0)
    with pytest.raises(ConfigError):
        fast_spec(scale="ball")


def test_layer_spec_scale_auto_resolution():
    assert fast_spec().scale_mode == "unit_sphere"
    assert fast_spec(kernel="inverse_poly", features="exact",
                     ).scale_mode == "unit_ball"
    assert fast_spec(kernel="linear", features="identity",
                     ).scale_mode == "unit_ball"
    assert fast_spec(scale="none").scale_mode == "none"


def test_radius_from_bounds_formula():
    act = activation("sin")
    spec = KernelSpec("inverse_poly")
    want = c_sigma(act, spec, 1.5) * 2.0 * 3 * math.sqrt(4)
    assert radius_from_bounds(act, spec, 1.5, 2.0, 3, 4) == pytest.approx(
        want, rel=1e-12)
    with pytest.raises(ValueError):
        radius_from_bounds(act, spec, -1.0, 1.0, 1, 2)


# ---------------------------------------------------------------------------
# Stages


def test_fit_stage_shapes_and_features(rng):
    ds = small_dataset(rng)
    stage = fit_stage(ds.images, fast_spec())
    assert stage.plan.grid_h == 6
    assert stage.pool.n_pooled == 9
    Zs = stage.patch_features(ds.images)
    assert Zs.shape == (24, 9, 16)
    # chunking does not change values
    np.testing.assert_allclose(stage.patch_features(ds.images, chunk=5), Zs,
                               atol=1e-12)


def test_fit_stage_identity_linear_reproduces_patches(rng):
    ds = small_dataset(rng, h=6, w=6)
    spec = fast_spec(kernel="linear", features="identity", lcn=False,
                     zca=False, scale="none", patch_side=3, stride=3,
                     pool_side=1, pool_stride=1)
    stage = fit_stage(ds.images, spec)
    Zs = stage.patch_features(ds.images)
    plan = plan_patches(ImageShape(1, 6, 6), 3, 3)
    want = extract_patches_batch(ds.images, plan).astype(np.float64)
    np.testing.assert_array_equal(Zs, want)


def test_fit_stage_rejects_bad_geometry(rng):
    ds = small_dataset(rng, h=4, w=4)
    with pytest.raises(ConfigError):
        fit_stage(ds.images, fast_spec(patch_side=5))


def test_stage_gcn_changes_features(rng):
    # per-patch standardization absorbs an affine per-image rescale, so
    # compare without lcn where gcn is actually observable
    ds = small_dataset(rng)
    kw = dict(lcn=False, zca=False)
    plain = fit_stage(ds.images, fast_spec(**kw))
    gcn = fit_stage(ds.images, fast_spec(gcn=True, **kw))
    assert not np.allclose(plain.patch_features(ds.images),
                           gcn.patch_features(ds.images))


# ---------------------------------------------------------------------------
# Filter retrieval and forward passes


def test_retrieve_filters_truncates_svd(rng):
    A = np.diag([3.0, 2.0, 1.0])
    U, V = retrieve_filters(A, 2)
    assert U.shape == (3, 2)
    np.testing.assert_allclose(U.T @ U, np.eye(2), atol=1e-12)
    # U V^T is the best rank-2 approximation, error = dropped singular value
    assert np.linalg.norm(A - U @ V.T, 2) == pytest.approx(1.0, abs=1e-12)


def test_retrieve_filters_warns_on_tied_split(caplog):
    A = np.eye(3)
    with caplog.at_level(logging.WARNING, logger="ccnn.model"):
        retrieve_filters(A, 2)
    assert any("tied" in r.getMessage() for r in caplog.records)


def test_retrieve_filters_validates_rank(rng):
    A = rng.normal(size=(4, 6))
    with pytest.raises(ValueError):
        retrieve_filters(A, 0)
    with pytest.raises(ValueError):
        retrieve_filters(A, 5)


def test_layer_forward_matches_definition(rng):
    ds = small_dataset(rng)
    model, layer = train_two_layer(ds, fast_spec(), fast_opt())
    x = ds.images[3]
    H = layer_forward(layer, x)
    F = layer.stage.patch_features(x[None])[0]  # (P', m)
    np.testing.assert_allclose(H, layer.U.T @ F.T, atol=1e-12)
    assert H.shape == (4, 9)

    batch = forward_batch(layer, ds.images[:5])
    assert batch.shape == (5, 4, 3, 3)
    np.testing.assert_allclose(batch[3], H.reshape(4, 3, 3), atol=1e-12)


# ---------------------------------------------------------------------------
# Training


def test_train_two_layer_feasible_and_deterministic(rng):
    ds = small_dataset(rng)
    model, layer = train_two_layer(ds, fast_spec(), fast_opt())
    s = np.linalg.svd(model.head.A, compute_uv=False)
    assert s.sum() <= fast_spec().R + 1e-8
    assert len(model.meta["records"][0]) == 2

    model2, _ = train_two_layer(ds, fast_spec(), fast_opt())
    np.testing.assert_array_equal(model.head.A, model2.head.A)
    np.testing.assert_array_equal(layer.U, model2.layers[0].U)


def test_train_two_layer_replaces_radius_with_spec_R(rng):
    ds = small_dataset(rng)
    spec = fast_spec(R=0.25)
    model, _ = train_two_layer(ds, spec, fast_opt(radius=99.0))
    s = np.linalg.svd(model.head.A, compute_uv=False)
    assert s.sum() <= 0.25 + 1e-8


def test_train_two_layer_rejects_single_class(rng):
    images = rng.random((6, 1, 8, 8)).astype(np.float32)
    ds = Dataset(images, np.zeros(6, dtype=np.int64))
    with pytest.raises(ValueError):
        train_two_layer(ds, fast_spec(), fast_opt())


def test_predict_and_classify_shapes(rng):
    ds = small_dataset(rng)
    model, _ = train_two_layer(ds, fast_spec(), fast_opt())
    scores = predict_scores(model, ds.images[:4])
    assert scores.shape == (4, 3)
    one = predict(model, ds.images[0])
    np.testing.assert_allclose(one, scores[0], atol=1e-12)
    labels = classify(model, ds.images[:4])
    np.testing.assert_array_equal(labels, scores.argmax(axis=1))
    assert classify(model, ds.images[0]) == labels[0]


def test_validate_stack_shapes_and_errors():
    specs = [fast_spec(patch_side=3, pool_side=2, pool_stride=2),
             fast_spec(patch_side=2, pool_side=1, pool_stride=1)]
    shapes = validate_stack(ImageShape(1, 8, 8), specs)
    assert shapes[1] == ImageShape(4, 3, 3)
    assert shapes[2] == ImageShape(4, 2, 2)

    bad = [fast_spec(patch_side=7)]
    with pytest.raises(ConfigError, match="layer 1"):
        validate_stack(ImageShape(1, 6, 6), bad)
    deep = [fast_spec(patch_side=3, pool_side=2, pool_stride=2),
            fast_spec(patch_side=9)]
    with pytest.raises(ConfigError, match="layer 2"):
        validate_stack(ImageShape(1, 8, 8), deep)
    with pytest.raises(ConfigError):
        train_multi_layer(small_dataset(np.random.default_rng(0)), [],
                          fast_opt())


def test_train_multi_layer_depth_two(rng):
    ds = small_dataset(rng)
    specs = [fast_spec(),
             fast_spec(patch_side=2, pool_side=1, pool_stride=1, m=12, r=3,
                       R=2.0, gamma=1.0)]
    model = train_multi_layer(ds, specs, fast_opt())
    assert len(model.layers) == 2
    assert len(model.meta["records"]) == 2
    assert model.head.stage is model.layers[-1].stage
    scores = predict_scores(model, ds.images[:3])
    assert scores.shape == (3, 3)


def test_stage_two_matches_convexify_on_exported_features(rng, tmp_path):
    """Training stage 2 in the stack equals training on exported features."""
    ds = small_dataset(rng)
    spec2 = fast_spec(patch_side=2, pool_side=1, pool_stride=1, m=12, r=3,
                      R=2.0, gamma=1.0)
    specs = [fast_spec(), spec2]
    opt = fast_opt()
    model = train_multi_layer(ds, specs, opt, cache_dir=tmp_path)

    H = forward_batch(model.layers[0], ds.images)
    path = tmp_path / "exported.ccnf"
    save_features(path, H)
    alone = convexify_on_features(path, ds.labels, spec2, opt, d2=3)
    np.testing.assert_array_equal(alone.head.A, model.head.A)
    np.testing.assert_array_equal(alone.layers[0].U, model.layers[1].U)


def test_convexify_accepts_arrays(rng):
    feats = rng.normal(size=(20, 3, 4, 4)).astype(np.float32)
    labels = rng.integers(0, 2, size=20)
    spec = fast_spec(patch_side=2, pool_side=1, pool_stride=1, m=10, r=2,
                     R=1.0)
    model = convexify_on_features(feats, labels, spec, fast_opt())
    assert model.d2 == 2
    with pytest.raises(ValueError):
        convexify_on_features(rng.normal(size=(5, 4)), labels[:5], spec,
                              fast_opt())


# ---------------------------------------------------------------------------
# Model files


def trained_model(rng, **spec_kwargs):
    ds = small_dataset(rng)
    model, _ = train_two_layer(ds, fast_spec(**spec_kwargs), fast_opt())
    return ds, model


def test_save_load_round_trip_exact(rng, tmp_path):
    ds, model = trained_model(rng)
    path = tmp_path / "m.ccnn"
    save_model(model, path)
    back = load_model(path)
    np.testing.assert_array_equal(back.head.A, model.head.A)
    np.testing.assert_array_equal(back.layers[0].U, model.layers[0].U)
    assert back.d2 == model.d2
    assert back.meta == model.meta
    np.testing.assert_array_equal(predict_scores(back, ds.images),
                                  predict_scores(model, ds.images))


def test_save_load_all_feature_variants(rng, tmp_path):
    variants = [
        dict(kernel="gaussian", gamma=0.5, features="random"),
        dict(kernel="gaussian", gamma=0.5, features="nystrom", m=12),
        dict(kernel="inverse_poly", gamma=0.2, features="exact"),
        dict(kernel="linear", gamma=0.2, features="identity", lcn=False),
    ]
    for i, kw in enumerate(variants):
        ds, model = trained_model(rng, **kw)
        path = tmp_path / f"m{i}.ccnn"
        save_model(model, path)
        back = load_model(path)
        np.testing.assert_array_equal(predict_scores(back, ds.images[:4]),
                                      predict_scores(model, ds.images[:4]))


def test_load_model_rejects_corruption(rng, tmp_path):
    _, model = trained_model(rng)
    path = tmp_path / "m.ccnn"
    save_model(model, path)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0x40
    bad = tmp_path / "bad.ccnn"
    bad.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="checksum"):
        load_model(bad)
    bad.write_bytes(b"NOPE" + path.read_bytes()[4:])
    with pytest.raises(FormatError, match="magic"):
        load_model(bad)
    bad.write_bytes(path.read_bytes()[: len(raw) // 2])
    with pytest.raises(FormatError):
        load_model(bad)


def test_load_model_rejects_future_version(rng, tmp_path):
    _, model = trained_model(rng)
    path = tmp_path / "m.ccnn"
    save_model(model, path)
    raw = bytearray(path.read_bytes())
    # bump the version field (offset 4, little-endian u16) and fix the CRC
    import zlib

    raw[4] = 2
    body = bytes(raw[:-4])
    crc = zlib.crc32(body) & 0xFFFFFFFF
    bad = tmp_path / "v2.ccnn"
    bad.write_bytes(body + crc.to_bytes(4, "little"))
    with pytest.raises(FormatError, match="version"):
        load_model(bad)


def test_describe_reports_geometry_and_spectrum(rng):
    ds, model = trained_model(rng)
    info = describe(model)
    assert info["d2"] == 3
    lay = info["layers"][0]
    assert lay["input_shape"] == [1, 8, 8]
    assert lay["pooled_grid"] == [3, 3]
    s = np.linalg.svd(model.head.A, compute_uv=False)
    assert info["head"]["nuclear_norm"] == pytest.approx(float(s.sum()))
    assert info["head"]["effective_rank"] == pytest.approx(
        float(s.sum() / s.max()))


def test_describe_zero_model(rng):
    ds = small_dataset(rng)
    model, _ = train_two_layer(ds, fast_spec(R=0.0), fast_opt())
    info = describe(model)
    assert info["head"]["nuclear_norm"] == 0.0
    assert all(v == 0.0 for v in info["head"]["singular_values"])
    assert math.isnan(info["head"]["effective_rank"])
