"""Network layers with explicit forward/backward pairs.

Every layer consumes and produces batched arrays (leading batch axis):
images are (B, H, W, C), token sequences are (B, T, d), features are
(B, n). ``forward(x, train=True)`` caches what the matching ``backward``
needs; with ``train=False`` nothing is stored and forward is side-effect
free. ``backward(dy)`` returns the input gradient and fills the layer's
``d_*`` buffers, one per parameter, with gradients summed over the batch.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .tensor import relu, relu_grad, softmax, softmax_grad

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int,
                   dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    """Base layer: parameterless, stateless unless a subclass caches."""

    name = "layer"

    def params(self) -> list[tuple[str, np.ndarray]]:
        return []

    def grads(self) -> list[tuple[str, np.ndarray]]:
        """Gradient arrays aligned with :meth:`params`; zeros if untouched."""
        out = []
        for pname, p in self.params():
            g = getattr(self, "d_" + pname, None)
            out.append((pname, np.zeros_like(p) if g is None else g))
        return out

    def zero_grads(self) -> None:
        for pname, _ in self.params():
            setattr(self, "d_" + pname, None)

    def param_count(self) -> int:
        return sum(p.size for _, p in self.params())

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Conv2D(Layer):
    """3x3-style convolution: zero "same" padding, stride 1, bias per filter.

    Implemented as cross-correlation (no kernel flip). Kernel layout is
    (kh, kw, in_channels, out_channels); spatial dims must be odd so the
    padded output keeps the input's height and width.
    """

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        kh = kw = int(kernel_size)
        if kh % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {kernel_size}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kh
        rng = rng or np.random.default_rng()
        fan_in = kh * kw * in_channels
        fan_out = kh * kw * out_channels
        self.kernel = glorot_uniform(rng, (kh, kw, in_channels, out_channels),
                                     fan_in, fan_out, dtype)
        self.bias = np.zeros(out_channels, dtype=dtype)
        self._cache = None

    def params(self):
        return [("kernel", self.kernel), ("bias", self.bias)]

    def _im2col(self, xp: np.ndarray, h: int, w: int) -> np.ndarray:
        # xp is the zero-padded input; one slice per kernel offset keeps the
        # patch layout (dh, dw, channel) row-major, matching kernel.reshape.
        b = xp.shape[0]
        k = self.kernel_size
        cols = np.empty((b, h, w, k * k, self.in_channels), dtype=xp.dtype)
        for dh in range(k):
            for dw in range(k):
                cols[:, :, :, dh * k + dw, :] = xp[:, dh:dh + h, dw:dw + w, :]
        return cols.reshape(b * h * w, k * k * self.in_channels)

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[3] != self.in_channels:
            raise ValueError(
                f"expected input (B, H, W, {self.in_channels}), got {x.shape}")
        b, h, w, _ = x.shape
        pad = self.kernel_size // 2
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
        cols = self._im2col(xp, h, w)
        kmat = self.kernel.reshape(-1, self.out_channels)
        y = (cols @ kmat + self.bias).reshape(b, h, w, self.out_channels)
        if train:
            self._cache = (cols, x.shape)
        return y

    def backward(self, dy):
        cols, x_shape = self._cache
        b, h, w, _ = x_shape
        k = self.kernel_size
        pad = k // 2
        dmat = dy.reshape(b * h * w, self.out_channels)
        self.d_kernel = (cols.T @ dmat).reshape(self.kernel.shape)
        self.d_bias = dmat.sum(axis=0)
        dcols = (dmat @ self.kernel.reshape(-1, self.out_channels).T)
        dcols = dcols.reshape(b, h, w, k * k, self.in_channels)
        dxp = np.zeros((b, h + 2 * pad, w + 2 * pad, self.in_channels), dtype=dy.dtype)
        for dh in range(k):
            for dw in range(k):
                dxp[:, dh:dh + h, dw:dw + w, :] += dcols[:, :, :, dh * k + dw, :]
        return dxp[:, pad:pad + h, pad:pad + w, :]


class MaxPool2D(Layer):
    """2x2 max pooling with stride 2.

    Backward routes each window's gradient to the argmax position only;
    ties go to the first maximum in row-major window order.
    """

    def forward(self, x, train=False):
        b, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"spatial dims must be even for 2x2 pooling, got {h}x{w}")
        windows = x.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
        flat = windows.reshape(b, h // 2, w // 2, 4, c)
        idx = np.argmax(flat, axis=3)
        y = np.take_along_axis(flat, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
        if train:
            self._cache = (idx, x.shape)
        return y

    def backward(self, dy):
        idx, x_shape = self._cache
        b, h, w, c = x_shape
        dflat = np.zeros((b, h // 2, w // 2, 4, c), dtype=dy.dtype)
        np.put_along_axis(dflat, idx[:, :, :, None, :], dy[:, :, :, None, :], axis=3)
        dx = dflat.reshape(b, h // 2, w // 2, 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
        return dx.reshape(b, h, w, c)


class Flatten(Layer):
    """(B, H, W, C) -> (B, H*W*C), row-major over H then W then C."""

    def forward(self, x, train=False):
        if train:
            self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dy):
        return dy.reshape(self._cache)


class Dense(Layer):
    """Affine map x @ W + b on (B, in) inputs."""

    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        self.in_features = in_features
        self.out_features = out_features
        rng = rng or np.random.default_rng()
        self.weights = glorot_uniform(rng, (in_features, out_features),
                                      in_features, out_features, dtype)
        self.bias = np.zeros(out_features, dtype=dtype)
        self._cache = None

    def params(self):
        return [("weights", self.weights), ("bias", self.bias)]

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ValueError(f"expected input (B, {self.in_features}), got {x.shape}")
        if train:
            self._cache = x
        return x @ self.weights + self.bias

    def backward(self, dy):
        x = self._cache
        self.d_weights = x.T @ dy
        self.d_bias = dy.sum(axis=0)
        return dy @ self.weights.T


class ReLULayer(Layer):
    def forward(self, x, train=False):
        if train:
            self._cache = x
        return relu(x)

    def backward(self, dy):
        return relu_grad(self._cache, dy)


class SoftmaxLayer(Layer):
    """Softmax over the last axis; caches its output for the backward."""

    def forward(self, x, train=False):
        p = softmax(x, axis=-1)
        if train:
            self._cache = p
        return p

    def backward(self, dy):
        return softmax_grad(self._cache, dy, axis=-1)


class LayerNorm(Layer):
    """Per-row normalization over the last axis with affine gain/shift."""

    EPS = 1e-5

    def __init__(self, dim: int, dtype=np.float32):
        self.dim = dim
        self.gain = np.ones(dim, dtype=dtype)
        self.shift = np.zeros(dim, dtype=dtype)
        self._cache = None

    def params(self):
        return [("gain", self.gain), ("shift", self.shift)]

    def forward(self, x, train=False):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = np.mean(xc * xc, axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.EPS)
        xhat = xc * inv
        if train:
            self._cache = (xhat, inv)
        return self.gain * xhat + self.shift

    def backward(self, dy):
        xhat, inv = self._cache
        axes = tuple(range(dy.ndim - 1))
        self.d_gain = np.sum(dy * xhat, axis=axes)
        self.d_shift = np.sum(dy, axis=axes)
        dxhat = dy * self.gain
        mean_d = dxhat.mean(axis=-1, keepdims=True)
        mean_dx = np.mean(dxhat * xhat, axis=-1, keepdims=True)
        return inv * (dxhat - mean_d - xhat * mean_dx)


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return upstream * (cdf + x * pdf)


class MLPBlock(Layer):
    """Two dense layers with a GELU between, applied tokenwise on (B, T, d)."""

    def __init__(self, dim: int, hidden: int,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng or np.random.default_rng()
        self.dim = dim
        self.hidden = hidden
        self.w1 = glorot_uniform(rng, (dim, hidden), dim, hidden, dtype)
        self.b1 = np.zeros(hidden, dtype=dtype)
        self.w2 = glorot_uniform(rng, (hidden, dim), hidden, dim, dtype)
        self.b2 = np.zeros(dim, dtype=dtype)
        self._cache = None

    def params(self):
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]

    def forward(self, x, train=False):
        h = x @ self.w1 + self.b1
        a = gelu(h)
        y = a @ self.w2 + self.b2
        if train:
            self._cache = (x, h, a)
        return y

    def backward(self, dy):
        x, h, a = self._cache
        flat = lambda t: t.reshape(-1, t.shape[-1])
        self.d_w2 = flat(a).T @ flat(dy)
        self.d_b2 = flat(dy).sum(axis=0)
        da = dy @ self.w2.T
        dh = gelu_grad(h, da)
        self.d_w1 = flat(x).T @ flat(dh)
        self.d_b1 = flat(dh).sum(axis=0)
        return dh @ self.w1.T


class MultiHeadSelfAttention(Layer):
    """Scaled dot-product self-attention over (B, T, d) token sequences.

    Per head: softmax(Q K^T / sqrt(dh)) V with dh = d / heads; head outputs
    are concatenated and passed through an output projection.
    """

    def __init__(self, dim: int, heads: int,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        if dim % heads:
            raise ValueError(f"embed dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        rng = rng or np.random.default_rng()
        for name in ("wq", "wk", "wv", "wo"):
            setattr(self, name, glorot_uniform(rng, (dim, dim), dim, dim, dtype))
            setattr(self, "b" + name[1], np.zeros(dim, dtype=dtype))
        self._cache = None

    def params(self):
        return [("wq", self.wq), ("bq", self.bq), ("wk", self.wk), ("bk", self.bk),
                ("wv", self.wv), ("bv", self.bv), ("wo", self.wo), ("bo", self.bo)]

    def _split(self, x):
        b, t, _ = x.shape
        return x.reshape(b, t, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def _merge(self, x):
        b, h, t, dh = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)

    def forward(self, x, train=False):
        q = self._split(x @ self.wq + self.bq)
        k = self._split(x @ self.wk + self.bk)
        v = self._split(x @ self.wv + self.bv)
        scale = 1.0 / np.sqrt(self.head_dim)
        attn = softmax(np.einsum("bhid,bhjd->bhij", q, k) * scale, axis=-1)
        ctx = self._merge(np.einsum("bhij,bhjd->bhid", attn, v))
        y = ctx @ self.wo + self.bo
        if train:
            self._cache = (x, q, k, v, attn, ctx)
        return y

    def attention(self, x: np.ndarray) -> np.ndarray:
        """Attention weight matrices (B, heads, T, T) for an input, recomputed."""
        q = self._split(x @ self.wq + self.bq)
        k = self._split(x @ self.wk + self.bk)
        scale = 1.0 / np.sqrt(self.head_dim)
        return softmax(np.einsum("bhid,bhjd->bhij", q, k) * scale, axis=-1)

    def backward(self, dy):
        x, q, k, v, attn, ctx = self._cache
        flat = lambda t: t.reshape(-1, t.shape[-1])
        self.d_wo = flat(ctx).T @ flat(dy)
        self.d_bo = flat(dy).sum(axis=0)
        dctx = self._split(dy @ self.wo.T)
        dattn = np.einsum("bhid,bhjd->bhij", dctx, v)
        dv = np.einsum("bhij,bhid->bhjd", attn, dctx)
        dscores = softmax_grad(attn, dattn, axis=-1) / np.sqrt(self.head_dim)
        dq = np.einsum("bhij,bhjd->bhid", dscores, k)
        dk = np.einsum("bhij,bhid->bhjd", dscores, q)
        dqf, dkf, dvf = (self._merge(t) for t in (dq, dk, dv))
        self.d_wq = flat(x).T @ flat(dqf)
        self.d_bq = flat(dqf).sum(axis=0)
        self.d_wk = flat(x).T @ flat(dkf)
        self.d_bk = flat(dkf).sum(axis=0)
        self.d_wv = flat(x).T @ flat(dvf)
        self.d_bv = flat(dvf).sum(axis=0)
        return dqf @ self.wq.T + dkf @ self.wk.T + dvf @ self.wv.T


class PatchEmbedding(Layer):
    """Image to token sequence: patch projection + CLS token + positions.

    Non-overlapping p x p patches are flattened row-major (row, column,
    channel), linearly projected, a learned CLS token is prepended, and
    learned positional embeddings are added to every token.
    """

    def __init__(self, height: int, width: int, channels: int, patch_size: int,
                 embed_dim: int, rng: np.random.Generator | None = None,
                 dtype=np.float32):
        if height % patch_size or width % patch_size:
            raise ValueError(
                f"image {height}x{width} not divisible by patch size {patch_size}")
        self.height = height
        self.width = width
        self.channels = channels
        self.patch_size = patch_size
        self.embed_dim = embed_dim
        self.num_patches = (height // patch_size) * (width // patch_size)
        rng = rng or np.random.default_rng()
        in_dim = patch_size * patch_size * channels
        self.proj = glorot_uniform(rng, (in_dim, embed_dim), in_dim, embed_dim, dtype)
        self.bias = np.zeros(embed_dim, dtype=dtype)
        self.pos = (rng.normal(0.0, 0.02, size=(self.num_patches + 1, embed_dim))
                    .astype(dtype))
        self.cls = rng.normal(0.0, 0.02, size=embed_dim).astype(dtype)
        self._cache = None

    def params(self):
        return [("proj", self.proj), ("bias", self.bias),
                ("pos", self.pos), ("cls", self.cls)]

    def _patches(self, x):
        b = x.shape[0]
        p = self.patch_size
        gh, gw = self.height // p, self.width // p
        grid = x.reshape(b, gh, p, gw, p, self.channels).transpose(0, 1, 3, 2, 4, 5)
        return grid.reshape(b, gh * gw, p * p * self.channels)

    def forward(self, x, train=False):
        if x.shape[1:] != (self.height, self.width, self.channels):
            raise ValueError(
                f"expected (B, {self.height}, {self.width}, {self.channels}), "
                f"got {x.shape}")
        b = x.shape[0]
        patches = self._patches(x)
        tokens = patches @ self.proj + self.bias
        seq = np.concatenate(
            [np.broadcast_to(self.cls, (b, 1, self.embed_dim)), tokens], axis=1)
        if train:
            self._cache = patches
        return seq + self.pos

    def backward(self, dy):
        patches = self._cache
        b = dy.shape[0]
        p = self.patch_size
        gh, gw = self.height // p, self.width // p
        self.d_pos = dy.sum(axis=0)
        self.d_cls = dy[:, 0, :].sum(axis=0)
        dtok = dy[:, 1:, :]
        flatp = patches.reshape(-1, patches.shape[-1])
        flatd = dtok.reshape(-1, self.embed_dim)
        self.d_proj = flatp.T @ flatd
        self.d_bias = flatd.sum(axis=0)
        dpatches = (flatd @ self.proj.T).reshape(b, gh, gw, p, p, self.channels)
        return (dpatches.transpose(0, 1, 3, 2, 4, 5)
                .reshape(b, self.height, self.width, self.channels))


class SelectToken(Layer):
    """Picks one token from (B, T, d), by default the CLS token at index 0."""

    def __init__(self, index: int = 0):
        self.index = index

    def forward(self, x, train=False):
        if train:
            self._cache = x.shape
        return x[:, self.index, :]

    def backward(self, dy):
        dx = np.zeros(self._cache, dtype=dy.dtype)
        dx[:, self.index, :] = dy
        return dx


class TransformerBlock(Layer):
    """Pre-norm residual block: x + MHSA(LN(x)), then + MLP(LN(.))."""

    def __init__(self, dim: int, heads: int, mlp_hidden: int,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        self.ln1 = LayerNorm(dim, dtype=dtype)
        self.attn = MultiHeadSelfAttention(dim, heads, rng=rng, dtype=dtype)
        self.ln2 = LayerNorm(dim, dtype=dtype)
        self.mlp = MLPBlock(dim, mlp_hidden, rng=rng, dtype=dtype)
        self._children = [("ln1", self.ln1), ("attn", self.attn),
                          ("ln2", self.ln2), ("mlp", self.mlp)]

    def params(self):
        return [(f"{cn}/{pn}", p) for cn, c in self._children
                for pn, p in c.params()]

    def grads(self):
        return [(f"{cn}/{pn}", g) for cn, c in self._children
                for pn, g in c.grads()]

    def zero_grads(self):
        for _, c in self._children:
            c.zero_grads()

    def forward(self, x, train=False):
        a = x + self.attn.forward(self.ln1.forward(x, train), train)
        return a + self.mlp.forward(self.ln2.forward(a, train), train)

    def backward(self, dy):
        da = dy + self.ln2.backward(self.mlp.backward(dy))
        return da + self.ln1.backward(self.attn.backward(da))
