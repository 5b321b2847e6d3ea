import numpy as np
import pytest

from d2s.encoders import (
    ModelDims,
    attention_pool,
    embed_caption,
    embed_captions,
    encode_image,
    encode_images,
    encode_images_backward,
    extract_patches,
    init_text,
    init_trainable,
    predict_score,
    predict_scores,
    predict_scores_backward,
    project_visual,
    project_visual_backward,
)
from d2s.numerics import grad_check, make_rng

SMALL = ModelDims(image_size=16, patch_size=4, d_tok=6, d_hidden=8, d_v=5, d_t=4, head_hidden=7)


def jitter(params, seed=0, scale=0.1):
    rng = make_rng(seed, "test", "jitter")
    return {k: v + scale * rng.normal(size=v.shape) for k, v in params.items()}


class TestVisionEncoder:
    def test_token_count(self):
        assert ModelDims().n_tokens == 16
        assert extract_patches(np.zeros((32, 32)), 8).shape == (1, 16, 64)

    def test_zero_image_zero_biases(self):
        params = init_trainable(ModelDims(), 0)
        assert np.all(encode_image(np.zeros((32, 32)), params, ModelDims()) == 0.0)

    def test_patch_grid_mismatch(self):
        params = init_trainable(ModelDims(), 0)
        with pytest.raises(ValueError, match="patch grid mismatch"):
            encode_image(np.zeros((30, 30)), params, ModelDims())

    def test_deterministic(self):
        dims = ModelDims()
        params = jitter(init_trainable(dims, 1))
        img = make_rng(0, "img").random((32, 32))
        a, b = encode_image(img, params, dims), encode_image(img, params, dims)
        assert a.tobytes() == b.tobytes()

    def test_batch_matches_single(self):
        dims = SMALL
        params = jitter(init_trainable(dims, 1))
        imgs = make_rng(0, "img").random((3, 16, 16))
        z, _ = encode_images(imgs, params, dims)
        for i in range(3):
            np.testing.assert_allclose(z[i], encode_image(imgs[i], params, dims), rtol=0, atol=1e-14)

    @pytest.mark.parametrize("attn", [True, False])
    def test_gradient(self, attn):
        dims = SMALL
        params = jitter(init_trainable(dims, 2), scale=0.3)
        imgs = make_rng(1, "img").random((2, 16, 16))
        g_out = make_rng(2, "g").normal(size=(2, dims.d_v))
        names = [k for k in params if k.startswith("vision.")]

        def loss(p):
            z, cache = encode_images(imgs, p, dims, attn)
            return float(np.sum(z * g_out)), encode_images_backward(g_out, cache, p)

        res = grad_check(loss, params, step=1e-5, names=names)
        assert res.passed(1e-4), res

    def test_pool_query_receives_gradient(self):
        dims = SMALL
        params = jitter(init_trainable(dims, 3))
        imgs = make_rng(3, "img").random((2, 16, 16))
        z, cache = encode_images(imgs, params, dims, True)
        g = encode_images_backward(np.ones_like(z), cache, params)
        assert np.any(g["vision.pool_query"] != 0)


class TestAttentionPool:
    def test_single_token(self):
        t = np.array([[1.0, -2.0, 3.0]])
        pooled, w = attention_pool(t, np.array([5.0, 1.0, 0.0]))
        np.testing.assert_array_equal(pooled, t[0])
        assert w[0] == 1.0

    def test_identical_tokens(self):
        t = np.tile([0.5, 2.0], (4, 1))
        pooled, _ = attention_pool(t, np.array([3.0, -7.0]))
        np.testing.assert_allclose(pooled, [0.5, 2.0], atol=1e-15)

    def test_zero_query_is_mean(self):
        t = make_rng(0, "tok").normal(size=(5, 3))
        pooled, w = attention_pool(t, np.zeros(3))
        np.testing.assert_allclose(pooled, t.mean(axis=0), atol=1e-15)
        np.testing.assert_allclose(w, 0.2)

    def test_convex_hull(self):
        rng = make_rng(1, "tok")
        for _ in range(50):
            t, q = rng.normal(size=(6, 4)), rng.normal(size=4) * 3
            pooled, w = attention_pool(t, q)
            assert np.all(w >= 0) and abs(w.sum() - 1) < 1e-12
            assert np.all(pooled <= t.max(axis=0) + 1e-12) and np.all(pooled >= t.min(axis=0) - 1e-12)

    def test_no_tokens(self):
        with pytest.raises(ValueError, match="no tokens"):
            attention_pool(np.zeros((0, 3)), np.zeros(3))


class TestTextEmbedder:
    def setup_method(self):
        self.dims = ModelDims()
        self.text = init_text(self.dims, 29, 0)

    def test_single_token(self):
        z = embed_caption([4], self.text)
        np.testing.assert_allclose(z, self.text["text.mix_W"] @ self.text["text.token_table"][4], atol=1e-15)

    def test_permutation_invariant(self):
        a = embed_caption([3, 9, 9, 20, 27], self.text)
        b = embed_caption([27, 9, 20, 3, 9], self.text)
        assert a.tobytes() == b.tobytes()

    def test_empty_is_zero(self):
        assert np.all(embed_caption([], self.text) == 0.0)

    def test_out_of_vocab_names_id(self):
        with pytest.raises(ValueError, match="token id 29"):
            embed_caption([1, 29], self.text)

    def test_batched(self):
        caps = [[1, 2], [], [5]]
        Z = embed_captions(caps, self.text)
        for i, c in enumerate(caps):
            np.testing.assert_array_equal(Z[i], embed_caption(c, self.text))


class TestConnectorAndHead:
    def test_identity_projection(self):
        z = np.array([1.0, -2.0, 3.0])
        np.testing.assert_array_equal(project_visual(z, {"connector.W_v": np.eye(3)}), z)
        assert np.all(project_visual(np.zeros(3), {"connector.W_v": np.ones((2, 3))}) == 0)

    def test_projection_gradient(self):
        rng = make_rng(0, "proj")
        p = {"connector.W_v": rng.normal(size=(4, 5)), "z": rng.normal(size=(3, 5))}
        g = rng.normal(size=(3, 4))

        def loss(q):
            out = project_visual(q["z"], q)
            grads, dz = project_visual_backward(q["z"], q, g)
            return float(np.sum(out * g)), {**grads, "z": dz}

        assert grad_check(loss, p).passed(1e-6)

    def test_logit_zero_gives_half(self):
        params = init_trainable(ModelDims(), 0)
        params["head.W2"][:] = 0.0
        assert predict_score(np.ones(64), params) == 0.5

    def test_bounded_monotone(self):
        params = init_trainable(ModelDims(), 0)
        params["head.W1"][:] = 0.0
        outs = []
        for b in (-1e3, -5.0, 0.0, 5.0, 1e3):
            params["head.b2"][:] = b
            outs.append(predict_score(np.zeros(64), params))
        assert all(0.0 <= y <= 1.0 for y in outs)
        assert outs == sorted(outs)

    def test_head_gradient_with_mse(self):
        dims = SMALL
        params = jitter(init_trainable(dims, 4), scale=0.5)
        rng = make_rng(5, "head")
        z, y = rng.normal(size=(4, dims.d_v)), rng.random(4)
        names = [k for k in params if k.startswith("head.")]

        def loss(p):
            yh, cache = predict_scores(z, p)
            g, _ = predict_scores_backward(2 * (yh - y) / 4, cache, p)
            return float(np.mean((yh - y) ** 2)), g

        assert grad_check(loss, params, names=names).passed(1e-4)
