"""Toy vision/text encoders, the vision-text connector and the score head.

All trainable parameters live in one flat ``dict[str, ndarray]`` whose keys
are prefixed by group (``vision.``, ``connector.``, ``head.``).  The frozen
text embedder is kept in a separate dict (``text.`` keys) and is never
handed to the optimizer.

Every forward function here is batched over a leading axis and returns a
cache consumed by the matching ``*_backward`` function.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .numerics import (
    init_weight,
    linear_apply,
    linear_backward,
    make_rng,
    sigmoid,
    softmax,
)

VISION_KEYS = (
    "vision.patch_W", "vision.patch_b",
    "vision.mlp_W1", "vision.mlp_b1", "vision.mlp_W2", "vision.mlp_b2",
    "vision.pool_query",
    "vision.out_W", "vision.out_b",
)
CONNECTOR_KEYS = ("connector.W_v",)
HEAD_KEYS = ("head.W1", "head.b1", "head.W2", "head.b2")
TEXT_KEYS = ("text.token_table", "text.mix_W")


@dataclass(frozen=True)
class ModelDims:
    image_size: int = 32
    patch_size: int = 8
    d_tok: int = 32
    d_hidden: int = 64
    d_v: int = 64
    d_t: int = 32
    head_hidden: int = 64

    @property
    def n_tokens(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def validate(self) -> None:
        for name, value in asdict(self).items():
            if int(value) < 1:
                raise ValueError(f"model.{name} must be >= 1, got {value}")
        if self.image_size % self.patch_size:
            raise ValueError("patch grid mismatch")


def init_trainable(dims: ModelDims, seed: int) -> dict[str, np.ndarray]:
    """Fresh trainable parameters: N(0, 1/fan_in) weights, zero biases.

    Each group draws from its own sub-stream so adding a group later does
    not reshuffle the others.  The pooling query starts at zero, i.e. the
    pool begins as a plain token mean.
    """
    P2 = dims.patch_size ** 2
    rv = make_rng(seed, "init", "vision")
    rc = make_rng(seed, "init", "connector")
    rh = make_rng(seed, "init", "head")
    return {
        "vision.patch_W": init_weight(rv, dims.d_tok, P2),
        "vision.patch_b": np.zeros(dims.d_tok),
        "vision.mlp_W1": init_weight(rv, dims.d_hidden, dims.d_tok),
        "vision.mlp_b1": np.zeros(dims.d_hidden),
        "vision.mlp_W2": init_weight(rv, dims.d_tok, dims.d_hidden),
        "vision.mlp_b2": np.zeros(dims.d_tok),
        "vision.pool_query": np.zeros(dims.d_tok),
        "vision.out_W": init_weight(rv, dims.d_v, dims.d_tok),
        "vision.out_b": np.zeros(dims.d_v),
        "connector.W_v": init_weight(rc, dims.d_t, dims.d_v),
        "head.W1": init_weight(rh, dims.head_hidden, dims.d_v),
        "head.b1": np.zeros(dims.head_hidden),
        "head.W2": init_weight(rh, 1, dims.head_hidden),
        "head.b2": np.zeros(1),
    }


def init_text(dims: ModelDims, vocab_size: int, seed: int) -> dict[str, np.ndarray]:
    rt = make_rng(seed, "init", "text")
    return {
        "text.token_table": rt.standard_normal((vocab_size, dims.d_t)),
        "text.mix_W": init_weight(rt, dims.d_t, dims.d_t),
    }


# ---------------------------------------------------------------------------
# Vision encoder
# ---------------------------------------------------------------------------


def extract_patches(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, G, G) -> (B, T, P*P), tokens in row-major patch order."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    B, G, G2 = images.shape
    if G != G2 or G % patch_size:
        raise ValueError("patch grid mismatch")
    g = G // patch_size
    x = images.reshape(B, g, patch_size, g, patch_size).transpose(0, 1, 3, 2, 4)
    return x.reshape(B, g * g, patch_size * patch_size)


def attention_pool(tokens, query):
    """Single-query scaled dot-product pooling.

    ``tokens`` is (T, D) or (B, T, D); returns the pooled vector(s) and the
    attention weights.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    if tokens.shape[-2] == 0:
        raise ValueError("no tokens")
    scores = tokens @ query / math.sqrt(tokens.shape[-1])
    weights = softmax(scores, axis=-1)
    pooled = np.einsum("...t,...td->...d", weights, tokens)
    return pooled, weights


def attention_pool_backward(tokens, query, weights, grad_pooled):
    """Gradients of the pooled output w.r.t. tokens and query."""
    scale = 1.0 / math.sqrt(tokens.shape[-1])
    # d pooled / d weights: token vectors; then through the softmax
    g_w = np.einsum("...td,...d->...t", tokens, grad_pooled)
    g_s = weights * (g_w - np.sum(weights * g_w, axis=-1, keepdims=True))
    d_tokens = weights[..., :, None] * grad_pooled[..., None, :]
    d_tokens = d_tokens + scale * g_s[..., :, None] * query
    D = tokens.shape[-1]
    d_query = scale * (g_s.reshape(-1)[:, None] * tokens.reshape(-1, D)).sum(axis=0)
    return d_tokens, d_query


def encode_images(images, params, dims: ModelDims, attn_pool: bool = True):
    """Visual features z_v for a batch of images; returns ``(z_v, cache)``.

    Each image is shifted to zero mean before patching.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        images = images[None]
    images = images - images.mean(axis=(1, 2), keepdims=True)
    patches = extract_patches(images, dims.patch_size)
    tok0 = linear_apply(patches, params["vision.patch_W"], params["vision.patch_b"])
    pre = linear_apply(tok0, params["vision.mlp_W1"], params["vision.mlp_b1"])
    hid = np.tanh(pre)
    tok = tok0 + linear_apply(hid, params["vision.mlp_W2"], params["vision.mlp_b2"])
    if attn_pool:
        pooled, weights = attention_pool(tok, params["vision.pool_query"])
    else:
        pooled, weights = tok.mean(axis=1), None
    z_v = linear_apply(pooled, params["vision.out_W"], params["vision.out_b"])
    cache = dict(patches=patches, tok0=tok0, hid=hid, tok=tok, pooled=pooled,
                 weights=weights, attn_pool=attn_pool)
    return z_v, cache


def encode_images_backward(grad_zv, cache, params) -> dict[str, np.ndarray]:
    g = {}
    g["vision.out_W"], g["vision.out_b"], d_pooled = linear_backward(
        cache["pooled"], params["vision.out_W"], grad_zv)
    tok = cache["tok"]
    if cache["attn_pool"]:
        d_tok, g["vision.pool_query"] = attention_pool_backward(
            tok, params["vision.pool_query"], cache["weights"], d_pooled)
    else:
        d_tok = np.repeat(d_pooled[:, None, :], tok.shape[1], axis=1) / tok.shape[1]
        g["vision.pool_query"] = np.zeros_like(params["vision.pool_query"])
    g["vision.mlp_W2"], g["vision.mlp_b2"], d_hid = linear_backward(
        cache["hid"], params["vision.mlp_W2"], d_tok)
    d_pre = d_hid * (1.0 - cache["hid"] ** 2)
    g["vision.mlp_W1"], g["vision.mlp_b1"], d_tok0 = linear_backward(
        cache["tok0"], params["vision.mlp_W1"], d_pre)
    d_tok0 = d_tok0 + d_tok
    g["vision.patch_W"], g["vision.patch_b"], _ = linear_backward(
        cache["patches"], params["vision.patch_W"], d_tok0)
    return g


def encode_image(image, params, dims: ModelDims, attn_pool: bool = True) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise ValueError(f"expected a square 2-D image, got shape {image.shape}")
    if image.shape[0] % dims.patch_size:
        raise ValueError("patch grid mismatch")
    z_v, _ = encode_images(image[None], params, dims, attn_pool)
    return z_v[0]


# ---------------------------------------------------------------------------
# Frozen text embedder
# ---------------------------------------------------------------------------


def embed_caption(tokens, text_params) -> np.ndarray:
    table = text_params["text.token_table"]
    mix = text_params["text.mix_W"]
    tokens = [int(t) for t in tokens]
    if not tokens:
        return np.zeros(table.shape[1])
    for t in tokens:
        if t < 0 or t >= table.shape[0]:
            raise ValueError(f"token id {t} outside vocabulary of size {table.shape[0]}")
    # sorted so the mean is bitwise independent of token order
    mean = np.mean(table[np.sort(np.asarray(tokens))], axis=0)
    return mix @ mean


def embed_captions(captions, text_params) -> np.ndarray:
    return np.stack([embed_caption(c, text_params) for c in captions]) if len(captions) else \
        np.zeros((0, text_params["text.token_table"].shape[1]))


# ---------------------------------------------------------------------------
# Connector and head
# ---------------------------------------------------------------------------


def project_visual(z_v, params) -> np.ndarray:
    return linear_apply(z_v, params["connector.W_v"])


def project_visual_backward(z_v, params, grad_proj):
    dW, _, dz = linear_backward(z_v, params["connector.W_v"], grad_proj, with_bias=False)
    return {"connector.W_v": dW}, dz


def predict_scores(z_v, params):
    """Scores in (0, 1) from pre-projection visual features; ``(y_hat, cache)``."""
    z_v = np.asarray(z_v, dtype=np.float64)
    h = np.tanh(linear_apply(z_v, params["head.W1"], params["head.b1"]))
    logit = linear_apply(h, params["head.W2"], params["head.b2"])[..., 0]
    y_hat = sigmoid(logit)
    return y_hat, dict(z_v=z_v, h=h, y_hat=y_hat)


def predict_score(z_v, params) -> float:
    y_hat, _ = predict_scores(np.asarray(z_v, dtype=np.float64)[None], params)
    return float(y_hat[0])


def predict_scores_backward(grad_y, cache, params):
    y = cache["y_hat"]
    d_logit = (grad_y * y * (1.0 - y))[..., None]
    g = {}
    g["head.W2"], g["head.b2"], d_h = linear_backward(cache["h"], params["head.W2"], d_logit)
    d_pre = d_h * (1.0 - cache["h"] ** 2)
    g["head.W1"], g["head.b1"], d_zv = linear_backward(cache["z_v"], params["head.W1"], d_pre)
    return g, d_zv
