import numpy as np
import pytest

from mixtune import (
    CorruptionError,
    EncoderConfig,
    StateError,
    TrainStage,
    backward,
    forward,
    init_state,
    load_checkpoint,
    mae_pretrain_step,
    save_checkpoint,
    set_trainable,
)
from mixtune.encoder import (
    _patchify,
    _unpatchify,
    group_of,
    mae_loss_and_grads,
    masked_mse,
    params_snapshot,
    sample_mask,
)
from mixtune.numeric import coordinate_check, gradient_check


class TestForward:
    def test_shapes(self):
        cfg = EncoderConfig(patch_t=8, patch_f=8, depth=2, dim=16, heads=2,
                            head_dims=(16, 8), input_t=64, input_f=8)
        state = init_state(cfg, seed=0)
        x = np.random.default_rng(0).normal(size=(64, 8))
        tokens, pooled, proj = forward(state, x)
        assert tokens.shape == (8, 16)
        assert pooled.shape == (16,)
        assert proj.shape == (8,)

    def test_batched_shapes(self, micro_state, micro_batch):
        tokens, pooled, proj = forward(micro_state, micro_batch)
        assert tokens.shape == (3, 4, 8)
        assert pooled.shape == (3, 8)
        assert proj.shape == (3, 4)

    def test_deterministic(self, micro_state, micro_batch):
        a = forward(micro_state, micro_batch)
        b = forward(micro_state, micro_batch)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_projected_unit_norm(self, micro_state):
        rng = np.random.default_rng(1)
        for _ in range(10):
            _, _, proj = forward(micro_state, rng.normal(size=(4, 8, 8)))
            np.testing.assert_allclose(np.linalg.norm(proj, axis=1), 1.0, atol=1e-6)

    def test_shape_mismatch_raises(self, micro_state):
        with pytest.raises(ValueError):
            forward(micro_state, np.zeros((7, 8)))
        with pytest.raises(ValueError):
            forward(micro_state, np.zeros((16, 8)))  # divisible but wrong grid

    def test_patchify_round_trip(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 12, 8))
        p = _patchify(x, 4, 2)
        assert p.shape == (3, 12, 8)
        np.testing.assert_array_equal(_unpatchify(p, 12, 8, 4, 2), x)

    def test_permutation_equivariance_with_zero_pos(self, micro_cfg):
        state = init_state(micro_cfg, seed=4)
        state.params["embed.pos"][:] = 0.0
        rng = np.random.default_rng(5)
        x = rng.normal(size=(1, 8, 8))
        patches = _patchify(x, 4, 4)
        perm = rng.permutation(4)
        x_perm = _unpatchify(patches[:, perm], 8, 8, 4, 4)
        t1, _, _ = forward(state, x)
        t2, _, _ = forward(state, x_perm)
        np.testing.assert_allclose(t2[0], t1[0][perm], atol=1e-10)


class TestBackward:
    def test_backward_without_forward_is_state_error(self, micro_state, micro_batch):
        with pytest.raises(StateError):
            backward(micro_state, d_projected=np.ones((3, 4)))

    def test_sum_of_projected_full_coordinate_check(self, micro_state, micro_batch):
        forward(micro_state, micro_batch, record=True)
        grads = backward(micro_state, d_projected=np.ones((3, 4)))

        def f():
            return float(forward(micro_state, micro_batch)[2].sum())

        for name, p in micro_state.params.items():
            err = coordinate_check(f, p, grads[name], h=1e-6,
                                   rng=np.random.default_rng(0), max_coords=40)
            assert err < 1e-5, f"{name}: coordinate error {err}"

    def test_pooled_and_token_upstream_paths(self, micro_state, micro_batch):
        rng = np.random.default_rng(6)
        d_pooled = rng.normal(size=(3, 8))
        d_tokens = rng.normal(size=(3, 4, 8))
        forward(micro_state, micro_batch, record=True)
        grads = backward(micro_state, d_pooled=d_pooled, d_tokens=d_tokens)

        def f():
            tokens, pooled, _ = forward(micro_state, micro_batch)
            return float((pooled * d_pooled).sum() + (tokens * d_tokens).sum())

        worst = gradient_check(f, micro_state.params, grads, np.random.default_rng(1))
        assert worst < 1e-5

    def test_all_frozen_gives_zero_gradients(self, micro_state, micro_batch):
        for g in micro_state.trainable:
            micro_state.trainable[g] = False
        forward(micro_state, micro_batch, record=True)
        grads = backward(micro_state, d_projected=np.ones((3, 4)))
        assert all(np.all(g == 0.0) for g in grads.values())

    def test_l2norm_gradient_in_tangent_space(self, micro_state, micro_batch):
        from mixtune.encoder import _l2norm_bwd, _l2norm_fwd

        rng = np.random.default_rng(7)
        x = rng.normal(size=(5, 6))
        y, cache = _l2norm_fwd(x)
        dx = _l2norm_bwd(rng.normal(size=(5, 6)), cache)
        np.testing.assert_allclose((dx * y).sum(axis=1), 0.0, atol=1e-12)


class TestMae:
    def test_masked_mse_zero_for_perfect_reconstruction(self):
        rng = np.random.default_rng(8)
        target = rng.normal(size=(2, 6, 9))
        mask = np.stack([rng.permutation(6)[:4] for _ in range(2)])
        loss, dpred = masked_mse(target.copy(), target, mask)
        assert loss == 0.0
        assert np.all(dpred == 0.0)

    def test_mask_count_rounding(self):
        mask = sample_mask(8, 0.75, batch=5, rng=np.random.default_rng(9))
        assert mask.shape == (5, 6)
        for row in mask:
            assert len(set(row.tolist())) == 6

    def test_zero_masked_patches_is_parameter_error(self):
        with pytest.raises(ValueError, match="mask"):
            sample_mask(8, 0.01, batch=1, rng=np.random.default_rng(0))
        with pytest.raises(ValueError):
            sample_mask(8, 1.0, batch=1, rng=np.random.default_rng(0))

    def test_loss_ignores_unmasked_targets(self):
        rng = np.random.default_rng(10)
        pred = rng.normal(size=(1, 6, 4))
        target = rng.normal(size=(1, 6, 4))
        mask = np.array([[0, 2, 3]])
        loss1, _ = masked_mse(pred, target, mask)
        target2 = target.copy()
        target2[0, 1] += 100.0  # unmasked patch
        loss2, _ = masked_mse(pred, target2, mask)
        assert loss1 == loss2

    def test_step_decreases_loss_on_trend(self, micro_state):
        rng = np.random.default_rng(11)
        data = rng.normal(size=(32, 8, 8))
        losses = []
        step_rng = np.random.default_rng(12)
        for _ in range(60):
            losses.append(mae_pretrain_step(micro_state, data, 0.5, step_rng, lr=1e-2))
        assert np.mean(losses[-10:]) < np.mean(losses[:10])

    def test_gradients_match_finite_differences(self, micro_state, micro_batch):
        mask = sample_mask(4, 0.5, batch=3, rng=np.random.default_rng(13))
        _, grads = mae_loss_and_grads(micro_state, micro_batch, mask)

        def f():
            return mae_loss_and_grads(micro_state, micro_batch, mask)[0]

        worst = gradient_check(f, micro_state.params, grads, np.random.default_rng(2))
        assert worst < 1e-5


class TestSetTrainable:
    def test_top_half_of_twelve(self):
        cfg = EncoderConfig(depth=12, dim=8, heads=2, patch_t=4, patch_f=4,
                            input_t=8, input_f=8, head_dims=(4,))
        state = init_state(cfg)
        set_trainable(state, TrainStage.TOP_HALF)
        trainable_blocks = [i for i in range(12) if state.trainable[f"block{i}"]]
        assert trainable_blocks == [6, 7, 8, 9, 10, 11]  # blocks 7..12, 1-based
        assert state.trainable["head"]
        assert not state.trainable["embed"]

    def test_top_half_of_five_is_ceiling(self):
        cfg = EncoderConfig(depth=5, dim=8, heads=2, patch_t=4, patch_f=4,
                            input_t=8, input_f=8, head_dims=(4,))
        state = init_state(cfg)
        set_trainable(state, TrainStage.TOP_HALF)
        trainable_blocks = [i for i in range(5) if state.trainable[f"block{i}"]]
        assert trainable_blocks == [2, 3, 4]  # top ceil(5/2) = 3 blocks

    def test_head_only_step_keeps_encoder_bits(self, micro_state):
        set_trainable(micro_state, TrainStage.HEAD_ONLY)
        before = params_snapshot(micro_state)
        rng = np.random.default_rng(14)
        x = rng.normal(size=(4, 8, 8))
        forward(micro_state, x, record=True)
        grads = backward(micro_state, d_projected=rng.normal(size=(4, 4)))
        for name, g in grads.items():
            micro_state.params[name] -= 0.1 * g
        for name, old in before.items():
            if group_of(name) == "head":
                continue
            assert np.array_equal(micro_state.params[name], old), name

    def test_string_stage_accepted(self, micro_state):
        set_trainable(micro_state, "head_only")
        assert micro_state.trainable["head"] and not micro_state.trainable["block0"]


class TestCheckpoint:
    def test_file_level_round_trip_bit_exact(self, micro_state, tmp_path):
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        micro_state.stage = "mae"
        micro_state.step = 17
        save_checkpoint(micro_state, p1)
        loaded = load_checkpoint(p1)
        assert loaded.stage == "mae" and loaded.step == 17
        save_checkpoint(loaded, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_f8_round_trip_preserves_float64(self, micro_state, tmp_path):
        path = tmp_path / "full.ckpt"
        save_checkpoint(micro_state, path, dtype="f8")
        loaded = load_checkpoint(path)
        for name, arr in micro_state.params.items():
            np.testing.assert_array_equal(loaded.params[name], arr)

    def test_f4_quantizes_once(self, micro_state, tmp_path):
        path = tmp_path / "q.ckpt"
        save_checkpoint(micro_state, path)
        a = load_checkpoint(path)
        save_checkpoint(a, path)
        b = load_checkpoint(path)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name], b.params[name])

    def test_truncated_checkpoint_is_corruption(self, micro_state, tmp_path):
        path = tmp_path / "t.ckpt"
        save_checkpoint(micro_state, path)
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(CorruptionError):
            load_checkpoint(path)

    def test_loaded_stage_sets_trainability(self, micro_state, tmp_path):
        path = tmp_path / "s.ckpt"
        micro_state.stage = "stage1"
        save_checkpoint(micro_state, path)
        loaded = load_checkpoint(path)
        assert loaded.trainable["head"] and not loaded.trainable["block0"]

    def test_unknown_dtype_rejected(self, micro_state, tmp_path):
        with pytest.raises(ValueError):
            save_checkpoint(micro_state, tmp_path / "x.ckpt", dtype="f2")
