import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pvada.exceptions import ValidationError
from pvada.geometry import PointCloud, normalize_unit_sphere
from pvada.gradcheck import tiny_config
from pvada.model import (
    ModelConfig, adaptive_pool, build_pyramid, count_parameters, encode, forward, forward_batch,
    fuse_transformer_features, init_params, interact_features, local_encode, offset_attention_block,
)
from pvada.tensor import Tensor, leaky_relu, no_grad, pointwise_linear

from oracles import offset_attention_reference


def random_params(config, seed=0):
    """Double-precision weights moved off the structured init, with non-trivial running statistics."""
    rng = np.random.default_rng(seed)
    params = init_params(config, rng, np.float64)
    for t in params.tensors.values():
        t.data += rng.uniform(-0.2, 0.2, size=t.shape)
    for s in params.norms.values():
        s.running_mean[:] = rng.uniform(-0.3, 0.3, size=s.running_mean.shape)
        s.running_var[:] = rng.uniform(0.5, 2.0, size=s.running_var.shape)
    return params


def cloud(n, seed=0):
    return normalize_unit_sphere(PointCloud(np.random.default_rng(seed).normal(size=(n, 3))))


def small_config(**overrides):
    base = dict(k=8, dim=8, voxel_size=0.2, num_classes=5, head_dims=(16, 8), head_dropout=0.0)
    base.update(overrides)
    return ModelConfig(**base)


# --- config ---------------------------------------------------------------


@pytest.mark.parametrize("field, value", [("k", 0), ("dim", 0), ("num_classes", 1), ("interaction", "z4"),
                                          ("voxel_size", 0.0), ("num_voxelizations", 4), ("head_dropout", 1.0)])
def test_config_validation(field, value):
    with pytest.raises(ValidationError):
        ModelConfig(**{field: value})


def test_config_dict_round_trip_and_unknown_keys():
    cfg = small_config(interaction="z3")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValidationError, match="unknown"):
        ModelConfig.from_dict({"depth": 3})


def test_score_heads_are_distinct_per_level():
    params = init_params(small_config())
    heads = [params[f"score{i}.weight"] for i in range(3)]
    assert len({id(h) for h in heads}) == 3


def test_score_heads_start_as_plain_max_pool():
    params = init_params(small_config())
    for i in range(3):
        assert not params[f"score{i}.weight"].data.any()
        assert params[f"score{i}.bias"].data.tolist() == [1.0]


def test_interaction_weights_only_for_z2_z3():
    assert not any(n.startswith("inter") for n, _ in init_params(small_config()).named_parameters())
    assert "inter1.h1.weight" in init_params(small_config(interaction="z2"))
    z3 = init_params(small_config(interaction="z3"))
    assert "inter2.h2.weight" in z3 and "inter2.h3.weight" in z3


def test_parameter_counts_of_reference_layouts():
    # frozen from the layer inventory; the reference architecture is reported elsewhere at 3.16M
    assert count_parameters(ModelConfig(num_classes=40)) == 1_459_243
    assert count_parameters(ModelConfig(num_classes=40, shared_weights=False)) == 2_516_011


# --- shapes ---------------------------------------------------------------


def test_default_config_shapes_on_1024_points():
    params = init_params(ModelConfig(num_classes=40))
    with no_grad():
        bundle = forward(cloud(1024), params)
    assert bundle.logits.shape == (40,)
    assert len(bundle.levels) == 3
    for level in bundle.levels:
        n = len(level.points[0])
        assert level.local.shape == (n, 128)
        assert level.transformer.shape == (n, 512)
        assert level.scores.shape == (n, 1)
        assert level.pooled.shape == (1, 512)
        assert np.isfinite(level.scores.data).all()


def test_local_encode_shape_under_default_config():
    params = init_params(ModelConfig())
    assert local_encode(cloud(64).points, params).shape == (64, 128)


def test_local_encode_single_point_is_finite():
    params = random_params(small_config())
    out = local_encode(np.array([[0.1, 0.2, 0.3]]), params)
    assert out.shape == (1, 8) and np.isfinite(out.data).all()


def test_local_encode_is_permutation_equivariant():
    params = random_params(small_config(), seed=3)
    pts = cloud(50, seed=1).points
    perm = np.random.default_rng(0).permutation(50)
    a = local_encode(pts, params).data
    b = local_encode(pts[perm], params).data
    np.testing.assert_allclose(b, a[perm], rtol=0, atol=1e-12)


def test_fuse_shape_trace():
    params = random_params(ModelConfig(dim=2, k=1, num_classes=2, head_dims=(), num_voxelizations=0))
    x = Tensor(np.ones((1, 2)))
    assert fuse_transformer_features(x, [x, x, x, x], params, "enc").shape == (1, 8)


# --- offset attention -----------------------------------------------------


def test_offset_attention_matches_loop_reference():
    config = ModelConfig(dim=16, k=2, num_classes=2, head_dims=(), num_voxelizations=0)
    params = random_params(config, seed=5)
    x = np.random.default_rng(1).uniform(-1, 1, size=(8, 16))
    out = offset_attention_block(Tensor(x), params, "enc.oa1").data
    bn = params.norms["enc.oa1.f.bn"]
    expected = offset_attention_reference(
        x, params["enc.oa1.q.weight"].data, params["enc.oa1.k.weight"].data, params["enc.oa1.v.weight"].data,
        params["enc.oa1.v.bias"].data, params["enc.oa1.f.weight"].data, params["enc.oa1.f.bn.gamma"].data,
        params["enc.oa1.f.bn.beta"].data, bn.running_mean, bn.running_var,
    )
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-6)


def test_offset_attention_single_point_attends_to_its_own_value():
    config = ModelConfig(dim=4, k=1, num_classes=2, head_dims=(), num_voxelizations=0)
    params = random_params(config, seed=2)
    x = np.random.default_rng(0).uniform(-1, 1, size=(1, 4))
    value = x @ params["enc.oa1.v.weight"].data + params["enc.oa1.v.bias"].data
    bn = params.norms["enc.oa1.f.bn"]
    h = (x - value) @ params["enc.oa1.f.weight"].data
    h = (h - bn.running_mean) / np.sqrt(bn.running_var + 1e-5) * params["enc.oa1.f.bn.gamma"].data \
        + params["enc.oa1.f.bn.beta"].data
    out = offset_attention_block(Tensor(x), params, "enc.oa1").data
    np.testing.assert_allclose(out, x + np.maximum(h, 0), rtol=0, atol=1e-12)


def test_offset_attention_masks_other_clouds():
    config = ModelConfig(dim=6, k=1, num_classes=2, head_dims=(), num_voxelizations=0)
    params = random_params(config, seed=4)
    rng = np.random.default_rng(2)
    a, b = rng.uniform(-1, 1, (5, 6)), rng.uniform(-1, 1, (3, 6))
    joint = offset_attention_block(Tensor(np.concatenate([a, b])), params, "enc.oa1", segments=[5, 3]).data
    np.testing.assert_allclose(joint[:5], offset_attention_block(Tensor(a), params, "enc.oa1").data, atol=1e-12)
    np.testing.assert_allclose(joint[5:], offset_attention_block(Tensor(b), params, "enc.oa1").data, atol=1e-12)


@pytest.mark.parametrize("training", [False, True])
def test_zero_residual_weights_make_blocks_identity(training):
    params = init_params(small_config(), seed=1, dtype=np.float64)
    for name, t in params.named_parameters():
        if ".oa" in name and ".f." in name and name.endswith("weight"):
            t.data[:] = 0
    bundle = encode([cloud(80).points, cloud(60, seed=1).points], params, training=training)
    for level in bundle.levels:
        for block in level.blocks:
            assert np.array_equal(block.data, level.embedded.data)


# --- fusion ---------------------------------------------------------------


def test_fuse_matches_concat_oracle():
    config = ModelConfig(dim=3, k=1, num_classes=2, head_dims=(), num_voxelizations=0, num_oa_blocks=4)
    params = random_params(config, seed=8)
    rng = np.random.default_rng(0)
    parts = [rng.uniform(-1, 1, (6, 3)) for _ in range(5)]
    out = fuse_transformer_features(Tensor(parts[0]), [Tensor(p) for p in parts[1:]], params, "enc").data
    bn = params.norms["enc.fuse.bn"]
    h = np.concatenate(parts, axis=1) @ params["enc.fuse.weight"].data
    h = (h - bn.running_mean) / np.sqrt(bn.running_var + 1e-5) * params["enc.fuse.bn.gamma"].data \
        + params["enc.fuse.bn.beta"].data
    np.testing.assert_allclose(out, np.where(h > 0, h, 0.01 * h), rtol=0, atol=1e-6)


def test_fuse_zero_input_gives_zero_pre_activation():
    config = ModelConfig(dim=2, k=1, num_classes=2, head_dims=(), num_voxelizations=0)
    params = init_params(config, dtype=np.float64)
    zero = Tensor(np.zeros((3, 2)))
    out = fuse_transformer_features(zero, [zero] * 4, params, "enc").data
    assert not out.any()


# --- interaction ----------------------------------------------------------


def test_z1_returns_coarse_unchanged():
    coarse = Tensor(np.random.default_rng(0).normal(size=(2, 3)))
    fine = Tensor(np.random.default_rng(1).normal(size=(5, 3)))
    assert interact_features(fine, coarse, [0, 1, 1, 0, 1], "z1") is coarse


def test_z2_worked_example():
    fine = Tensor(np.array([[1.0, 1.0], [3.0, 3.0]]))
    coarse = Tensor(np.array([[10.0, 10.0]]))
    out = interact_features(fine, coarse, [0, 0], "z2", h1=lambda x: x)
    np.testing.assert_array_equal(out.data, [[12.0, 12.0]])


def test_z2_with_zero_map_is_identity():
    fine = Tensor(np.random.default_rng(0).normal(size=(4, 2)))
    coarse = Tensor(np.array([[1.5, -2.0], [0.25, 4.0]]))
    out = interact_features(fine, coarse, [0, 1, 1, 0], "z2", h1=lambda x: x * 0.0)
    np.testing.assert_array_equal(out.data, coarse.data)


def test_z3_concatenates_mapped_fine_then_coarse():
    fine = Tensor(np.array([[2.0], [4.0], [6.0]]))
    coarse = Tensor(np.array([[1.0], [5.0]]))
    w = Tensor(np.array([[1.0], [10.0]]))
    out = interact_features(fine, coarse, [0, 0, 1], "z3", h2=lambda x: x * 2.0,
                            h3=lambda x: pointwise_linear(x, w))
    np.testing.assert_array_equal(out.data, [[6.0 + 10.0], [12.0 + 50.0]])


def test_interaction_assignment_shape_checked():
    with pytest.raises(ValidationError):
        interact_features(Tensor(np.ones((3, 1))), Tensor(np.ones((1, 1))), [0, 0], "z2", h1=lambda x: x)


def test_z1_build_is_bitwise_equal_to_no_interaction():
    params = random_params(small_config(interaction="z1"), seed=6)
    plain = params.copy()
    plain.config = small_config(interaction=None)
    clouds = [cloud(90, seed=i) for i in range(3)]
    for training in (False, True):
        a, _ = forward_batch(clouds, params.copy(), training=training)
        b, _ = forward_batch(clouds, plain.copy(), training=training)
        assert np.array_equal(a.data, b.data)


@pytest.mark.parametrize("mode", ["z2", "z3"])
def test_interaction_changes_coarse_levels_only(mode):
    params = random_params(small_config(interaction=mode), seed=7)
    with no_grad():
        bundle = forward(cloud(120), params)
    plain = params.copy()
    plain.config = small_config(interaction=None)
    with no_grad():
        ref = forward(cloud(120), plain)
    assert np.array_equal(bundle.levels[0].local.data, ref.levels[0].local.data)
    assert not np.allclose(bundle.levels[1].local.data, ref.levels[1].local.data)


# --- adaptive pooling -----------------------------------------------------


def test_adaptive_pool_worked_example():
    feats = Tensor(np.array([[1.0, 0.0], [0.0, 2.0]]))
    # scores = feats @ w + b = [2, 0.5]
    pooled, scores = adaptive_pool(feats, Tensor(np.array([[2.0], [0.25]])), Tensor(np.array([0.0])))
    np.testing.assert_array_equal(scores.data.ravel(), [2.0, 0.5])
    np.testing.assert_array_equal(pooled.data, [2.0, 1.0])


def test_adaptive_pool_unit_score_is_max_pool():
    feats = np.random.default_rng(0).normal(size=(7, 4))
    pooled, _ = adaptive_pool(Tensor(feats), Tensor(np.zeros((4, 1))), Tensor(np.ones(1)))
    np.testing.assert_array_equal(pooled.data, feats.max(axis=0))


def test_adaptive_pool_single_point():
    feats = np.array([[0.5, -1.0, 2.0]])
    w, b = np.array([[1.0], [0.0], [0.5]]), np.array([0.25])
    pooled, scores = adaptive_pool(Tensor(feats), Tensor(w), Tensor(b))
    np.testing.assert_allclose(pooled.data, scores.data[0, 0] * feats[0])


def test_adaptive_pool_negative_scores_allowed():
    feats = Tensor(np.array([[1.0], [-3.0]]))
    pooled, _ = adaptive_pool(feats, Tensor(np.zeros((1, 1))), Tensor(np.array([-1.0])))
    assert pooled.data.tolist() == [3.0]


def test_adaptive_pool_segments_ignore_padding():
    feats = np.array([[-5.0], [-7.0], [-1.0], [-2.0], [-3.0]])
    pooled, _ = adaptive_pool(Tensor(feats), None, None, segments=[2, 3])
    assert pooled.data.ravel().tolist() == [-5.0, -1.0]


def test_afa_with_unit_scores_equals_disabled_build():
    params = random_params(small_config(), seed=9)
    for i in range(3):
        params[f"score{i}.weight"].data[:] = 0
        params[f"score{i}.bias"].data[:] = 1
    plain = params.copy()
    plain.config = small_config(afa_enabled=False)
    clouds = [cloud(70, seed=i) for i in range(2)]
    for training in (False, True):
        a, _ = forward_batch(clouds, params.copy(), training=training)
        b, _ = forward_batch(clouds, plain.copy(), training=training)
        assert np.array_equal(a.data, b.data)


# --- whole network --------------------------------------------------------


@settings(max_examples=15, deadline=None)
@given(st.integers(8, 300), st.integers(0, 2**32 - 1))
def test_logits_are_permutation_invariant(n, seed):
    params = random_params(small_config(), seed=seed % 5)
    pts = cloud(n, seed).points
    perm = np.random.default_rng(seed).permutation(n)
    with no_grad():
        a = forward(pts, params).logits.data
        b = forward(pts[perm], params).logits.data
    assert np.abs(a - b).max() <= 1e-9


def test_permutation_invariance_with_duplicate_points():
    params = random_params(small_config(), seed=1)
    pts = np.round(cloud(200, 4).points, 1)  # many exact duplicates
    perm = np.random.default_rng(1).permutation(200)
    with no_grad():
        np.testing.assert_array_equal(forward(pts, params).logits.data, forward(pts[perm], params).logits.data)


def test_batched_inference_matches_single_cloud_inference():
    params = random_params(small_config(interaction="z3"), seed=2)
    clouds = [cloud(n, seed=n) for n in (40, 150, 90)]
    with no_grad():
        batched, _ = forward_batch(clouds, params)
        single = np.stack([forward(c, params).logits.data for c in clouds])
    np.testing.assert_allclose(batched.data, single, rtol=0, atol=1e-10)


def test_training_mode_updates_running_statistics_only_in_training():
    params = random_params(small_config(), seed=0)
    before = params.norms["enc.le1.bn"].running_mean.copy()
    with no_grad():
        forward_batch([cloud(30), cloud(40, 1)], params, training=False)
    np.testing.assert_array_equal(params.norms["enc.le1.bn"].running_mean, before)
    forward_batch([cloud(30), cloud(40, 1)], params, training=True)
    assert not np.array_equal(params.norms["enc.le1.bn"].running_mean, before)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 400), st.integers(0, 2**32 - 1), st.sampled_from([0.02, 0.05, 0.1]), st.integers(1, 3))
def test_pyramid_levels_shrink(n, seed, v, depth):
    config = ModelConfig(voxel_size=v, num_voxelizations=depth)
    levels = build_pyramid(cloud(n, seed).points, config)
    sizes = [len(p) for p, _ in levels]
    assert sizes == sorted(sizes, reverse=True)
    for (prev, _), (cur, assignment) in zip(levels, levels[1:]):
        assert assignment.shape == (len(prev),) and set(assignment.tolist()) == set(range(len(cur)))


def test_non_progressive_pyramid_voxelizes_the_input():
    pts = cloud(300, 3).points
    from pvada.geometry import voxel_downsample
    levels = build_pyramid(pts, ModelConfig(voxel_size=0.1, progressive=False))
    np.testing.assert_allclose(levels[2][0], voxel_downsample(PointCloud(pts), 0.2)[0].points)


def test_unshared_weights_use_per_level_encoders():
    params = random_params(small_config(shared_weights=False), seed=0)
    with no_grad():
        bundle = forward(cloud(100), params)
    assert "enc2.le1.weight" in params and "enc.le1.weight" not in params
    assert bundle.logits.shape == (5,)


def test_forward_batch_rejects_empty_input():
    with pytest.raises(ValidationError):
        forward_batch([], init_params(small_config()))


def test_tiny_config_gradient_flows_to_every_parameter():
    from pvada.training import label_smoothed_ce
    params = random_params(tiny_config(), seed=0)
    logits, _ = forward_batch([cloud(16, 0), cloud(16, 1)], params, training=True)
    label_smoothed_ce(logits, [0, 3], 0.2).backward()
    missing = [n for n, t in params.named_parameters() if t.grad is None or not np.any(t.grad)]
    assert missing == []
