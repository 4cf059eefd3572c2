"""Small convolutional feature extractor with hand-written backprop.

Five conv(3x3, zero pad) + batchnorm + ReLU blocks with 2x2 max pooling
after blocks 2 and 4; the block-2 (full resolution), block-4 and block-5
outputs (bilinearly upsampled back to full resolution) are concatenated
and mapped by a 1x1 conv head to the learned feature channels.

Parameters are stored float32; every forward/backward runs in float64 so
analytic gradients can be checked against central finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

N_BLOCKS = 5  # conv blocks; 2x2 max pooling follows blocks 2 and 4


# --- layer primitives -------------------------------------------------------


def conv3x3_forward(x, w):
    """x (Cin,H,W), w (Cout,Cin,3,3) -> y (Cout,H,W), cache.

    No bias term: every conv feeds a batchnorm whose shift parameter
    would absorb it exactly (and leave the bias gradient identically 0).
    """
    cin, h, wd = x.shape
    cout = w.shape[0]
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    y = np.zeros((cout, h * wd))
    for ky in range(3):
        for kx in range(3):
            view = padded[:, ky : ky + h, kx : kx + wd].reshape(cin, -1)
            y += w[:, :, ky, kx] @ view
    return y.reshape(cout, h, wd), padded


def conv3x3_backward(dy, w, padded, x_shape):
    cin, h, wd = x_shape
    dyf = dy.reshape(dy.shape[0], -1)
    dw = np.empty_like(w)
    dpad = np.zeros_like(padded)
    for ky in range(3):
        for kx in range(3):
            view = padded[:, ky : ky + h, kx : kx + wd].reshape(cin, -1)
            dw[:, :, ky, kx] = dyf @ view.T
            dpad[:, ky : ky + h, kx : kx + wd] += (w[:, :, ky, kx].T @ dyf).reshape(cin, h, wd)
    return dpad[:, 1:-1, 1:-1], dw


def bn_forward(x, gamma, beta, eps, training, rmean, rvar, momentum, update_stats):
    """Per-channel normalization over the spatial axes (population variance)."""
    if training:
        mean = x.mean(axis=(1, 2))
        var = x.var(axis=(1, 2))
        if update_stats:
            rmean *= 1.0 - momentum
            rmean += momentum * mean
            rvar *= 1.0 - momentum
            rvar += momentum * var
    else:
        mean, var = rmean, rvar
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[:, None, None]) * inv_std[:, None, None]
    y = gamma[:, None, None] * xhat + beta[:, None, None]
    return y, (xhat, inv_std, gamma, training)


def bn_backward(dy, cache):
    xhat, inv_std, gamma, training = cache
    n = xhat.shape[1] * xhat.shape[2]
    dgamma = (dy * xhat).sum(axis=(1, 2))
    dbeta = dy.sum(axis=(1, 2))
    dxhat = dy * gamma[:, None, None]
    if not training:
        return dxhat * inv_std[:, None, None], dgamma, dbeta
    dx = (inv_std[:, None, None] / n) * (
        n * dxhat
        - dxhat.sum(axis=(1, 2))[:, None, None]
        - xhat * (dxhat * xhat).sum(axis=(1, 2))[:, None, None]
    )
    return dx, dgamma, dbeta


def relu_forward(x):
    mask = x > 0
    return np.where(mask, x, 0.0), mask


def relu_backward(dy, mask):
    return np.where(mask, dy, 0.0)


def maxpool2_forward(x):
    """2x2 stride-2 max pooling; odd edges padded with -inf (ceil mode)."""
    c, h, w = x.shape
    hp, wp = h + h % 2, w + w % 2
    if (hp, wp) != (h, w):
        x = np.pad(x, ((0, 0), (0, hp - h), (0, wp - w)), constant_values=-np.inf)
    blocks = x.reshape(c, hp // 2, 2, wp // 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, hp // 2, wp // 2, 4)
    am = blocks.argmax(axis=3)
    y = np.take_along_axis(blocks, am[..., None], axis=3)[..., 0]
    return y, (am, (c, h, w))


def maxpool2_backward(dy, cache):
    am, (c, h, w) = cache
    hp, wp = h + h % 2, w + w % 2
    blocks = np.zeros((c, hp // 2, wp // 2, 4))
    np.put_along_axis(blocks, am[..., None], dy[..., None], axis=3)
    dx = blocks.reshape(c, hp // 2, wp // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, hp, wp)
    return dx[:, :h, :w]


def bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Row-stochastic 1-D interpolation matrix, half-pixel-center convention."""
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    i0 = np.clip(np.floor(src).astype(int), 0, n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    t = np.clip(src - np.floor(src), 0.0, 1.0)
    t[src < 0] = 0.0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - t)
    np.add.at(m, (rows, i1), t)
    return m


def upsample_forward(x, wy, wx):
    """Bilinear resize via per-axis weight matrices: y = Wy x Wx^T per channel."""
    return np.einsum("ab,cbd,ed->cae", wy, x, wx, optimize=True)


def upsample_backward(dy, wy, wx):
    return np.einsum("ab,cae,ed->cbd", wy, dy, wx, optimize=True)


# --- the feature network ----------------------------------------------------


@dataclass(frozen=True)
class NetConfig:
    in_channels: int
    learned_dim: int
    channels: int = 64
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.in_channels < 1 or self.learned_dim < 1 or self.channels < 1:
            raise ValueError("channel counts must be >= 1")


class ConvFeatureNet:
    """Feature extractor holding parameters, batchnorm stats and topology."""

    def __init__(self, config: NetConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.params: dict[str, np.ndarray] = {}
        self.stats: dict[str, np.ndarray] = {}
        cin = config.in_channels
        for i in range(1, N_BLOCKS + 1):
            cout = config.channels
            bound = np.sqrt(6.0 / ((cin + cout) * 9))
            self.params[f"b{i}.conv.w"] = rng.uniform(-bound, bound, (cout, cin, 3, 3)).astype(np.float32)
            self.params[f"b{i}.bn.gamma"] = np.ones(cout, dtype=np.float32)
            self.params[f"b{i}.bn.beta"] = np.zeros(cout, dtype=np.float32)
            self.stats[f"b{i}.bn.rmean"] = np.zeros(cout, dtype=np.float64)
            self.stats[f"b{i}.bn.rvar"] = np.ones(cout, dtype=np.float64)
            cin = cout
        head_in = 3 * config.channels
        bound = np.sqrt(6.0 / (head_in + config.learned_dim))
        self.params["head.w"] = rng.uniform(-bound, bound, (config.learned_dim, head_in)).astype(np.float32)
        self.params["head.b"] = np.zeros(config.learned_dim, dtype=np.float32)

    def _block_forward(self, x, i, training, update_stats):
        p = self.params
        y, conv_cache = conv3x3_forward(x, p[f"b{i}.conv.w"].astype(np.float64))
        y, bn_cache = bn_forward(
            y,
            p[f"b{i}.bn.gamma"].astype(np.float64),
            p[f"b{i}.bn.beta"].astype(np.float64),
            self.config.bn_eps,
            training,
            self.stats[f"b{i}.bn.rmean"],
            self.stats[f"b{i}.bn.rvar"],
            self.config.bn_momentum,
            update_stats,
        )
        y, relu_mask = relu_forward(y)
        return y, (conv_cache, x.shape, bn_cache, relu_mask)

    def _block_backward(self, dy, i, cache):
        conv_cache, x_shape, bn_cache, relu_mask = cache
        dy = relu_backward(dy, relu_mask)
        dy, dgamma, dbeta = bn_backward(dy, bn_cache)
        dx, dw = conv3x3_backward(dy, self.params[f"b{i}.conv.w"].astype(np.float64), conv_cache, x_shape)
        grads = {
            f"b{i}.conv.w": dw,
            f"b{i}.bn.gamma": dgamma,
            f"b{i}.bn.beta": dbeta,
        }
        return dx, grads

    def forward(self, x: np.ndarray, training: bool, update_stats: bool | None = None):
        """x (Cin, H, W) float64 -> learned (learned_dim, H, W), cache.

        Inference uses running batchnorm stats; training uses batch stats
        and (when update_stats) folds them into the running averages.
        """
        if x.shape[0] != self.config.in_channels:
            raise ValueError(
                f"expected {self.config.in_channels} input channels, got {x.shape[0]}"
            )
        if update_stats is None:
            update_stats = training
        h, w = x.shape[1], x.shape[2]
        a1, c1 = self._block_forward(x, 1, training, update_stats)
        a2, c2 = self._block_forward(a1, 2, training, update_stats)
        p1, cp1 = maxpool2_forward(a2)
        a3, c3 = self._block_forward(p1, 3, training, update_stats)
        a4, c4 = self._block_forward(a3, 4, training, update_stats)
        p2, cp2 = maxpool2_forward(a4)
        a5, c5 = self._block_forward(p2, 5, training, update_stats)
        wy4, wx4 = bilinear_matrix(h, a4.shape[1]), bilinear_matrix(w, a4.shape[2])
        wy5, wx5 = bilinear_matrix(h, a5.shape[1]), bilinear_matrix(w, a5.shape[2])
        cat = np.concatenate([a2, upsample_forward(a4, wy4, wx4), upsample_forward(a5, wy5, wx5)])
        hw = self.params["head.w"].astype(np.float64)
        hb = self.params["head.b"].astype(np.float64)
        out = (hw @ cat.reshape(cat.shape[0], -1) + hb[:, None]).reshape(-1, h, w)
        cache = (c1, c2, cp1, c3, c4, cp2, c5, (wy4, wx4, wy5, wx5), cat)
        return out, cache

    def backward(self, dout: np.ndarray, cache) -> dict[str, np.ndarray]:
        """dout (learned_dim, H, W) -> float64 gradients for every parameter."""
        c1, c2, cp1, c3, c4, cp2, c5, (wy4, wx4, wy5, wx5), cat = cache
        ch = self.config.channels
        doutf = dout.reshape(dout.shape[0], -1)
        catf = cat.reshape(cat.shape[0], -1)
        grads = {
            "head.w": doutf @ catf.T,
            "head.b": doutf.sum(axis=1),
        }
        dcat = (self.params["head.w"].astype(np.float64).T @ doutf).reshape(cat.shape)
        da2_cat, dua4, dua5 = dcat[:ch], dcat[ch : 2 * ch], dcat[2 * ch :]
        da5 = upsample_backward(dua5, wy5, wx5)
        dp2, g5 = self._block_backward(da5, 5, c5)
        grads.update(g5)
        da4 = upsample_backward(dua4, wy4, wx4) + maxpool2_backward(dp2, cp2)
        da3, g4 = self._block_backward(da4, 4, c4)
        grads.update(g4)
        dp1, g3 = self._block_backward(da3, 3, c3)
        grads.update(g3)
        da2 = da2_cat + maxpool2_backward(dp1, cp1)
        da1, g2 = self._block_backward(da2, 2, c2)
        grads.update(g2)
        _, g1 = self._block_backward(da1, 1, c1)
        grads.update(g1)
        return grads

    def clone(self) -> "ConvFeatureNet":
        other = ConvFeatureNet(self.config)
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.stats = {k: v.copy() for k, v in self.stats.items()}
        return other
