import numpy as np
import pytest

from rivlpr import (
    AdapterParams,
    RivConfig,
    RivImage,
    adapter_forward,
    encode,
    load_adapter,
    save_adapter,
    toy_encode,
    yaw_shift,
)
from rivlpr.encoder import (
    BlockStack,
    adapter_backward,
    depthwise_conv3x3,
    depthwise_conv3x3_backward,
    patch_statistics,
    toy_weights,
)


def random_image(rng, H=42, W=280):
    cfg = RivConfig(width=W, height=H, max_range=80.0)
    data = rng.random((H, W, 3)).astype(np.float32)
    mask = rng.random((H, W)) > 0.25
    data[~mask] = 0.0
    return RivImage(data, mask, cfg)


class TestToyEncode:
    def test_zero_image_constant_field(self):
        cfg = RivConfig(width=280, height=42, max_range=80.0)
        img = RivImage(np.zeros((42, 280, 3), dtype=np.float32), np.zeros((42, 280), dtype=bool), cfg)
        stack = toy_encode(img, channels=16)
        for b in range(stack.num_blocks):
            block = stack.patches[b].reshape(-1, 16)
            assert np.abs(block - block[0]).max() == 0.0

    def test_column_shift_equivariance_bit_exact(self, rng):
        img = random_image(rng)
        stack = toy_encode(img, channels=16)
        s = 7
        shifted = toy_encode(yaw_shift(img, 14 * s), channels=16)
        np.testing.assert_array_equal(shifted.patches, np.roll(stack.patches, s, axis=2))

    def test_paper_grid_shape(self, rng):
        cfg = RivConfig(width=1022, height=126, max_range=120.0)
        data = rng.random((126, 1022, 3)).astype(np.float32)
        img = RivImage(data, np.ones((126, 1022), dtype=bool), cfg)
        stack = toy_encode(img, channels=8)
        assert stack.patches.shape[1:3] == (9, 73)

    def test_too_small_image_rejected(self):
        cfg = RivConfig(width=20, height=10, max_range=10.0)
        img = RivImage(np.zeros((10, 20, 3), dtype=np.float32), np.zeros((10, 20), dtype=bool), cfg)
        with pytest.raises(ValueError):
            toy_encode(img)

    def test_deterministic(self, rng):
        img = random_image(rng)
        a = toy_encode(img, channels=24)
        b = toy_encode(img, channels=24)
        np.testing.assert_array_equal(a.patches, b.patches)
        np.testing.assert_array_equal(a.tokens, b.tokens)

    def test_statistics_shape_and_values(self, rng):
        img = random_image(rng)
        stats = patch_statistics(img)
        assert stats.shape == (3, 20, 12)
        patch = img.data[:14, :14, 0].astype(np.float64)
        assert stats[0, 0, 0] == pytest.approx(patch.mean())
        assert stats[0, 0, 1] == pytest.approx(patch.std())
        assert stats[0, 0, 2] == pytest.approx(patch.min())
        assert stats[0, 0, 3] == pytest.approx(patch.max())


class TestAdapterForward:
    def test_zero_adapter_collapses_to_block1(self, rng):
        img = random_image(rng)
        stack = toy_encode(img, channels=16)
        params = AdapterParams.zeros(16, stack.num_stages)
        grid = adapter_forward(stack, params)
        np.testing.assert_array_equal(grid.patches, stack.patches[0])
        np.testing.assert_array_equal(grid.global_token, stack.tokens[-1])

    def test_single_stage_unrolling(self, rng):
        feats = rng.normal(size=(3, 3, 5, 8))
        tokens = feats.reshape(3, -1, 8).mean(axis=1)
        stack = BlockStack(feats, tokens, k_interval=3)
        params = AdapterParams.random(8, 1, rng)
        grid = adapter_forward(stack, params)
        from rivlpr.encoder import _adapter_stage_forward

        a, _ = _adapter_stage_forward(feats[0] + feats[2], params.stages[0])
        np.testing.assert_allclose(grid.patches, a + feats[0], atol=1e-12)

    def test_matches_unrolled_reference(self, rng):
        # straight-line re-statement of the recurrence for L=12, k=3
        L, k, C = 12, 3, 8
        feats = rng.normal(size=(L, 2, 6, C))
        tokens = feats.reshape(L, -1, C).mean(axis=1)
        stack = BlockStack(feats, tokens, k_interval=k)
        params = AdapterParams.random(C, L // k, rng)
        grid = adapter_forward(stack, params)

        from rivlpr.encoder import _adapter_stage_forward

        def adapter(i, z):
            return _adapter_stage_forward(z, params.stages[i - 1])[0]

        y = adapter(1, feats[0] + feats[k - 1]) + feats[0]
        for i in range(2, L // k + 1):
            y = adapter(i, y + feats[i * k - 1]) + y
        np.testing.assert_allclose(grid.patches, y, atol=1e-12)

    def test_stage_count_mismatch_rejected(self, rng):
        feats = rng.normal(size=(12, 2, 6, 8))
        stack = BlockStack(feats, feats.reshape(12, -1, 8).mean(axis=1), k_interval=3)
        with pytest.raises(ValueError):
            adapter_forward(stack, AdapterParams.zeros(8, 3))


class TestEncode:
    def test_paper_size_grid(self, rng):
        cfg = RivConfig(width=1022, height=126, max_range=120.0)
        data = rng.random((126, 1022, 3)).astype(np.float32)
        img = RivImage(data, np.ones((126, 1022), dtype=bool), cfg)
        params = AdapterParams.random(16, 4, rng)
        grid = encode(img, params)
        assert grid.patches.shape == (9, 73, 16)
        assert grid.global_token.shape == (16,)

    def test_shift_equivariance(self, rng):
        img = random_image(rng)
        params = AdapterParams.random(16, 4, rng, scale=0.7)
        grid = encode(img, params)
        shifted = encode(yaw_shift(img, 14 * 3), params)
        np.testing.assert_array_equal(shifted.patches, np.roll(grid.patches, 3, axis=1))
        # the token is a mean over permuted patches: equal up to summation order
        np.testing.assert_allclose(shifted.global_token, grid.global_token, atol=1e-12)

    def test_zero_adapter_equals_block1(self, rng):
        img = random_image(rng)
        params = AdapterParams.zeros(16, 4)
        grid = encode(img, params)
        stack = toy_encode(img, channels=16)
        np.testing.assert_array_equal(grid.patches, stack.patches[0])

    def test_finite_for_masked_images(self, rng):
        img = random_image(rng)
        params = AdapterParams.random(16, 4, rng, scale=2.0)
        grid = encode(img, params)
        assert np.all(np.isfinite(grid.patches))
        assert np.all(np.isfinite(grid.global_token))

    def test_frozen_weights_stable(self):
        w1 = toy_weights(16)
        w2 = toy_weights(16)
        for a, b in zip(w1, w2):
            np.testing.assert_array_equal(a, b)


class TestDepthwiseConv:
    def test_horizontal_wrap_equivariance(self, rng):
        x = rng.normal(size=(4, 9, 6))
        k = rng.normal(size=(3, 3, 6))
        out = depthwise_conv3x3(x, k)
        np.testing.assert_array_equal(
            depthwise_conv3x3(np.roll(x, 2, axis=1), k), np.roll(out, 2, axis=1)
        )

    def test_vertical_zero_padding(self, rng):
        # a kernel reading only the row above must see zeros at the top row
        k = np.zeros((3, 3, 1))
        k[0, 1, 0] = 1.0
        x = rng.normal(size=(3, 4, 1))
        out = depthwise_conv3x3(x, k)
        np.testing.assert_array_equal(out[0], np.zeros((4, 1)))
        np.testing.assert_allclose(out[1:], x[:-1])

    def test_backward_matches_finite_differences(self, rng):
        x = rng.normal(size=(3, 5, 2))
        k = rng.normal(size=(3, 3, 2))
        dout = rng.normal(size=(3, 5, 2))
        dx, dk = depthwise_conv3x3_backward(dout, x, k)
        eps = 1e-6
        for idx in [(0, 0, 0), (1, 3, 1), (2, 4, 0)]:
            xp = x.copy(); xp[idx] += eps
            xm = x.copy(); xm[idx] -= eps
            num = ((depthwise_conv3x3(xp, k) - depthwise_conv3x3(xm, k)) * dout).sum() / (2 * eps)
            assert dx[idx] == pytest.approx(num, rel=1e-5, abs=1e-8)
        for idx in [(0, 0, 0), (1, 1, 1), (2, 2, 0)]:
            kp = k.copy(); kp[idx] += eps
            km = k.copy(); km[idx] -= eps
            num = ((depthwise_conv3x3(x, kp) - depthwise_conv3x3(x, km)) * dout).sum() / (2 * eps)
            assert dk[idx] == pytest.approx(num, rel=1e-5, abs=1e-8)


class TestAdapterBackward:
    def test_matches_finite_differences(self, rng):
        L, k, C = 6, 3, 4
        feats = rng.normal(size=(L, 2, 5, C)) * 0.5
        stack = BlockStack(feats, feats.reshape(L, -1, C).mean(axis=1), k_interval=k)
        params = AdapterParams.random(C, L // k, rng, scale=0.8)
        grid, caches = adapter_forward(stack, params, want_cache=True)
        dy = rng.normal(size=grid.patches.shape)
        grads = adapter_backward(dy, caches, params)

        eps = 1e-6
        for stage in range(params.num_stages):
            for fname in AdapterParams.FIELDS:
                arr = params.stages[stage][fname]
                it = np.nditer(arr, flags=["multi_index"])
                checked = 0
                while not it.finished and checked < 3:
                    idx = it.multi_index
                    orig = arr[idx]
                    arr[idx] = orig + eps
                    up = (adapter_forward(stack, params).patches * dy).sum()
                    arr[idx] = orig - eps
                    dn = (adapter_forward(stack, params).patches * dy).sum()
                    arr[idx] = orig
                    num = (up - dn) / (2 * eps)
                    assert grads[stage][fname][idx] == pytest.approx(num, rel=1e-4, abs=1e-7)
                    checked += 1
                    for _ in range(max(arr.size // 3, 1)):
                        if it.finished:
                            break
                        it.iternext()


class TestAdapterFormat:
    def test_round_trip(self, tmp_path, rng):
        params = AdapterParams.random(8, 2, rng)
        p1 = tmp_path / "a.adp"
        p2 = tmp_path / "b.adp"
        save_adapter(p1, params)
        back = load_adapter(p1)
        save_adapter(p2, back)
        assert p1.read_bytes() == p2.read_bytes()
        assert back.num_stages == 2 and back.channels == 8
        for (na, a), (nb, b) in zip(params.arrays(), back.arrays()):
            assert na == nb
            np.testing.assert_allclose(a, b, atol=1e-6)

    def test_bad_magic_rejected(self, tmp_path):
        p = tmp_path / "junk.adp"
        p.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError):
            load_adapter(p)
