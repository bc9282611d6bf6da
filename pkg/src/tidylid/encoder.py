"""Small ECAPA-style TDNN encoder with hand-written reverse-mode gradients.

Activations are laid out as ``(N, C, T)``; the single-utterance helpers also
accept ``(C, T)``. Every primitive comes as a ``*_forward`` returning
``(output, cache)`` and a matching ``*_backward`` consuming that cache.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import NonFiniteActivation, ShapeMismatch, StateError


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int = 64
    layer_channels: tuple[int, ...] = (128, 128, 128)
    kernel_sizes: tuple[int, ...] = (5, 3, 3)
    dilations: tuple[int, ...] = (1, 2, 3)
    res2_scale: int = 4
    se_bottleneck: int = 32
    attention_hidden: int = 64
    embedding_dim: int = 192
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    var_floor: float = 1e-8

    def __post_init__(self):
        for name in ("layer_channels", "kernel_sizes", "dilations"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        n = len(self.layer_channels)
        if n == 0 or len(self.kernel_sizes) != n or len(self.dilations) != n:
            raise ShapeMismatch("layer_channels, kernel_sizes and dilations need equal, nonzero length")
        if any(c % self.res2_scale for c in self.layer_channels[1:]):
            raise ShapeMismatch(f"channels {self.layer_channels} not divisible by res2_scale {self.res2_scale}")
        if any(k % 2 == 0 for k in self.kernel_sizes):
            raise ShapeMismatch("kernel sizes must be odd for same-length padding")
        if min(self.dilations) < 1 or self.embedding_dim < 1:
            raise ShapeMismatch("dilations and embedding_dim must be >= 1")

    @property
    def mfa_channels(self) -> int:
        return sum(self.layer_channels)

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in ("layer_channels", "kernel_sizes", "dilations"):
            d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


def _batched(x):
    x = np.asarray(x)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise ShapeMismatch(f"expected (C, T) or (N, C, T), got shape {x.shape}")
    return x, False


# ---------------------------------------------------------------- conv / bn


def conv1d_forward(x, weight, bias, dilation=1):
    """Dilated 'same' convolution over time; weight is (C_out, C_in, K)."""
    n, c_in, t = x.shape
    c_out, w_in, k = weight.shape
    if w_in != c_in:
        raise ShapeMismatch(f"conv expects {w_in} input channels, got {c_in}")
    if dilation < 1:
        raise ShapeMismatch("dilation must be >= 1")
    pad = dilation * (k - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad))) if pad else x
    y = np.zeros((n, c_out, t), dtype=np.result_type(x, weight))
    for j in range(k):
        y += weight[:, :, j] @ xp[:, :, j * dilation : j * dilation + t]
    y += bias[None, :, None]
    return y, (xp, weight, dilation, pad, t)


def conv1d_backward(dy, cache):
    xp, weight, dilation, pad, t = cache
    k = weight.shape[2]
    dxp = np.zeros_like(xp)
    dw = np.empty_like(weight)
    for j in range(k):
        sl = slice(j * dilation, j * dilation + t)
        dw[:, :, j] = np.tensordot(dy, xp[:, :, sl], axes=([0, 2], [0, 2]))
        dxp[:, :, sl] += weight[:, :, j].T @ dy
    db = dy.sum(axis=(0, 2))
    dx = dxp[:, :, pad : pad + t] if pad else dxp
    return dx, dw, db


def batchnorm_forward(x, gamma, beta, running_mean, running_var, train, momentum=0.1, eps=1e-5):
    """Per-channel normalisation over (N, T).

    Returns ``(y, cache, new_running_mean, new_running_var)``; running
    statistics only move in train mode.
    """
    if train:
        mean = x.mean(axis=(0, 2))
        var = x.var(axis=(0, 2))
        new_mean = (1 - momentum) * running_mean + momentum * mean
        new_var = (1 - momentum) * running_var + momentum * var
    else:
        mean, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None]) * inv_std[None, :, None]
    y = gamma[None, :, None] * xhat + beta[None, :, None]
    return y, (xhat, gamma, inv_std, train), new_mean, new_var


def batchnorm_backward(dy, cache):
    xhat, gamma, inv_std, train = cache
    dgamma = (dy * xhat).sum(axis=(0, 2))
    dbeta = dy.sum(axis=(0, 2))
    dxhat = dy * gamma[None, :, None]
    if train:
        m = dy.shape[0] * dy.shape[2]
        dx = (inv_std[None, :, None] / m) * (
            m * dxhat
            - dxhat.sum(axis=(0, 2), keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=(0, 2), keepdims=True)
        )
    else:
        dx = dxhat * inv_std[None, :, None]
    return dx, dgamma, dbeta


# ---------------------------------------------------------------- tdnn layer


def tdnn_forward(x, p, dilation=1, train=False, momentum=0.1, eps=1e-5):
    """conv -> ReLU -> batch norm. ``p`` holds weight/bias and, unless the
    norm is disabled, gamma/beta/running_mean/running_var."""
    z, conv_cache = conv1d_forward(x, p["weight"], p["bias"], dilation)
    a = np.maximum(z, 0)
    if "gamma" not in p:
        return a, (conv_cache, z > 0, None, None)
    y, bn_cache, rm, rv = batchnorm_forward(
        a, p["gamma"], p["beta"], p["running_mean"], p["running_var"], train, momentum, eps
    )
    return y, (conv_cache, z > 0, bn_cache, (rm, rv))


def tdnn_backward(dy, cache):
    conv_cache, mask, bn_cache, _ = cache
    grads = {}
    if bn_cache is not None:
        dy, grads["gamma"], grads["beta"] = batchnorm_backward(dy, bn_cache)
    dx, grads["weight"], grads["bias"] = conv1d_backward(dy * mask, conv_cache)
    return dx, grads


def tdnn_layer(x, weights, dilation=1, train=False):
    """Single-call TDNN layer on ``(C_in, T)`` or ``(N, C_in, T)`` input."""
    xb, squeeze = _batched(x)
    y, _ = tdnn_forward(xb, weights, dilation, train)
    return y[0] if squeeze else y


# ---------------------------------------------------------------- res2


def res2_forward(x, groups, scale, dilation=1, train=False, momentum=0.1, eps=1e-5):
    """Multi-scale split. ``groups`` is a list of per-group TDNN params; with
    scale s > 1 it has s - 1 entries (group 1 passes through, group k adds
    the output of group k - 1 before its convolution), with s == 1 a single
    entry convolving the whole input."""
    if scale == 1:
        y, c = tdnn_forward(x, groups[0], dilation, train, momentum, eps)
        return y, (1, [c])
    width = x.shape[1] // scale
    if width * scale != x.shape[1]:
        raise ShapeMismatch(f"{x.shape[1]} channels not divisible by scale {scale}")
    chunks = [x[:, i * width : (i + 1) * width] for i in range(scale)]
    outs = [chunks[0]]
    caches = []
    for k in range(1, scale):
        y, c = tdnn_forward(chunks[k] + outs[-1], groups[k - 1], dilation, train, momentum, eps)
        outs.append(y)
        caches.append(c)
    return np.concatenate(outs, axis=1), (scale, caches)


def res2_backward(dy, cache):
    scale, caches = cache
    if scale == 1:
        dx, g = tdnn_backward(dy, caches[0])
        return dx, [g]
    width = dy.shape[1] // scale
    dys = [dy[:, i * width : (i + 1) * width].copy() for i in range(scale)]
    dxs = [None] * scale
    grads = [None] * (scale - 1)
    for k in range(scale - 1, 0, -1):
        dinp, grads[k - 1] = tdnn_backward(dys[k], caches[k - 1])
        dxs[k] = dinp
        dys[k - 1] += dinp
    dxs[0] = dys[0]
    return np.concatenate(dxs, axis=1), grads


def res2_split_forward(x, weights, scale, dilation=1, train=False):
    xb, squeeze = _batched(x)
    if xb.shape[1] % scale:
        raise ShapeMismatch(f"{xb.shape[1]} channels not divisible by scale {scale}")
    expected = 1 if scale == 1 else scale - 1
    if len(weights) != expected:
        raise ShapeMismatch(f"scale {scale} needs {expected} group weight sets, got {len(weights)}")
    y, _ = res2_forward(xb, weights, scale, dilation, train)
    return y[0] if squeeze else y


# ---------------------------------------------------------------- SE gate


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def se_forward(x, p):
    """Squeeze (mean over time), excite (affine-ReLU-affine-sigmoid), rescale."""
    if p["w1"].shape[1] != x.shape[1] or p["w2"].shape[0] != x.shape[1]:
        raise ShapeMismatch("SE weights do not match channel count")
    s = x.mean(axis=2)
    pre1 = s @ p["w1"].T + p["b1"]
    z = np.maximum(pre1, 0)
    g = _sigmoid(z @ p["w2"].T + p["b2"])
    return g[:, :, None] * x, (x, s, pre1, z, g)


def se_backward(dy, cache, p):
    x, s, pre1, z, g = cache
    t = x.shape[2]
    dg = (dy * x).sum(axis=2)
    dpre2 = dg * g * (1 - g)
    grads = {"w2": dpre2.T @ z, "b2": dpre2.sum(axis=0)}
    dpre1 = (dpre2 @ p["w2"]) * (pre1 > 0)
    grads["w1"] = dpre1.T @ s
    grads["b1"] = dpre1.sum(axis=0)
    ds = dpre1 @ p["w1"]
    dx = g[:, :, None] * dy + ds[:, :, None] / t
    return dx, grads


def se_gate(x, weights):
    xb, squeeze = _batched(x)
    y, _ = se_forward(xb, weights)
    return y[0] if squeeze else y


# ---------------------------------------------------------------- pooling


def weighted_stats(h, alpha, var_floor=1e-8):
    """Per-channel mean and floored standard deviation under frame weights ``alpha``."""
    mu = np.einsum("nt,nct->nc", alpha, h)
    var = np.einsum("nt,nct->nc", alpha, h * h) - mu * mu
    active = var > var_floor
    return mu, np.sqrt(np.where(active, var, var_floor)), active


def asp_forward(h, p, var_floor=1e-8):
    """Attentive statistics pooling.

    A scalar score per frame comes from ``w2 . tanh(w1 h_t + b1) + b2``; the
    softmax of those scores over time weights the mean and standard
    deviation of every channel. Output is ``concat(mu, sigma)``, ``(N, 2C)``.
    """
    if p["w1"].shape[1] != h.shape[1]:
        raise ShapeMismatch("attention weights do not match channel count")
    if h.shape[2] < 1:
        raise ShapeMismatch("need at least one frame")
    a = np.tanh(np.einsum("hc,nct->nht", p["w1"], h) + p["b1"][None, :, None])
    e = np.einsum("h,nht->nt", p["w2"], a) + p["b2"]
    e = e - e.max(axis=1, keepdims=True)
    alpha = np.exp(e)
    alpha /= alpha.sum(axis=1, keepdims=True)
    mu, sigma, active = weighted_stats(h, alpha, var_floor)
    return np.concatenate([mu, sigma], axis=1), (h, a, alpha, mu, sigma, active)


def asp_backward(dout, cache, p):
    h, a, alpha, mu, sigma, active = cache
    c = h.shape[1]
    dmu, dsigma = dout[:, :c], dout[:, c:]
    dvar = np.where(active, dsigma / (2 * sigma), 0.0)
    dmu_tot = dmu - 2 * mu * dvar
    dh = alpha[:, None, :] * (dmu_tot[:, :, None] + 2 * dvar[:, :, None] * h)
    dalpha = np.einsum("nc,nct->nt", dmu_tot, h) + np.einsum("nc,nct->nt", dvar, h * h)
    de = alpha * (dalpha - (alpha * dalpha).sum(axis=1, keepdims=True))
    grads = {"w2": np.einsum("nt,nht->h", de, a), "b2": de.sum(keepdims=True).reshape(1)}
    dpre = (p["w2"][None, :, None] * de[:, None, :]) * (1 - a * a)
    grads["w1"] = np.einsum("nht,nct->hc", dpre, h)
    grads["b1"] = dpre.sum(axis=(0, 2))
    dh += np.einsum("hc,nht->nct", p["w1"], dpre)
    return dh, grads


def asp_pool(h, weights, var_floor=1e-8):
    hb, squeeze = _batched(h)
    y, _ = asp_forward(hb, weights, var_floor)
    return y[0] if squeeze else y


# ---------------------------------------------------------------- encoder

BUFFER_SUFFIXES = (".running_mean", ".running_var")


def is_buffer(name: str) -> bool:
    return name.endswith(BUFFER_SUFFIXES)


def _tdnn_init(rng, prefix, c_in, c_out, k, dtype, norm=True):
    std = np.sqrt(2.0 / (c_in * k))
    out = {
        f"{prefix}.weight": rng.normal(0.0, std, (c_out, c_in, k)),
        f"{prefix}.bias": np.zeros(c_out),
    }
    if norm:
        out[f"{prefix}.gamma"] = np.ones(c_out)
        out[f"{prefix}.beta"] = np.zeros(c_out)
        out[f"{prefix}.running_mean"] = np.zeros(c_out)
        out[f"{prefix}.running_var"] = np.ones(c_out)
    return {key: v.astype(dtype) for key, v in out.items()}


def init_params(cfg: EncoderConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    """Fresh parameters and batch-norm buffers, keyed by dotted tensor name."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    c_prev = cfg.input_dim
    for i, (c, k) in enumerate(zip(cfg.layer_channels, cfg.kernel_sizes)):
        if i == 0:
            params.update(_tdnn_init(rng, "block0.tdnn", c_prev, c, k, dtype))
        else:
            params.update(_tdnn_init(rng, f"block{i}.pre", c_prev, c, 1, dtype))
            scale = cfg.res2_scale
            width = c // scale
            for g in range(max(scale - 1, 1)):
                cw = c if scale == 1 else width
                params.update(_tdnn_init(rng, f"block{i}.res2.{g}", cw, cw, k, dtype))
            params.update(_tdnn_init(rng, f"block{i}.post", c, c, 1, dtype))
            b = cfg.se_bottleneck
            params[f"block{i}.se.w1"] = rng.normal(0.0, np.sqrt(2.0 / c), (b, c)).astype(dtype)
            params[f"block{i}.se.b1"] = np.zeros(b, dtype=dtype)
            params[f"block{i}.se.w2"] = rng.normal(0.0, np.sqrt(1.0 / b), (c, b)).astype(dtype)
            params[f"block{i}.se.b2"] = np.zeros(c, dtype=dtype)
        c_prev = c
    params.update(_tdnn_init(rng, "mfa", cfg.mfa_channels, cfg.mfa_channels, 1, dtype))
    c, hdim = cfg.mfa_channels, cfg.attention_hidden
    params["asp.w1"] = rng.normal(0.0, np.sqrt(1.0 / c), (hdim, c)).astype(dtype)
    params["asp.b1"] = np.zeros(hdim, dtype=dtype)
    params["asp.w2"] = rng.normal(0.0, np.sqrt(1.0 / hdim), hdim).astype(dtype)
    params["asp.b2"] = np.zeros(1, dtype=dtype)
    params["proj.weight"] = rng.normal(0.0, np.sqrt(1.0 / (2 * c)), (cfg.embedding_dim, 2 * c)).astype(dtype)
    params["proj.bias"] = np.zeros(cfg.embedding_dim, dtype=dtype)
    return params


def _sub(params, prefix):
    n = len(prefix) + 1
    return {key[n:]: v for key, v in params.items() if key.startswith(prefix + ".")}


def _res2_groups(params, i):
    groups = []
    g = 0
    while f"block{i}.res2.{g}.weight" in params:
        groups.append(_sub(params, f"block{i}.res2.{g}"))
        g += 1
    return groups


class Encoder:
    """Stateful wrapper: owns parameters, running statistics and the forward cache.

    ``forward`` in train mode caches what ``backward`` needs and moves the
    batch-norm running statistics; eval mode is a pure function of the input.
    """

    def __init__(self, cfg: EncoderConfig, params: dict[str, np.ndarray] | None = None, seed=0, dtype=np.float32):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed, dtype)
        self.frozen: set[str] = set()
        self._cache = None

    @property
    def dtype(self):
        return self.params["proj.weight"].dtype

    def trainable_names(self) -> list[str]:
        return [k for k in self.params if not is_buffer(k) and k not in self.frozen]

    def _tdnn(self, x, prefix, dilation, train, caches, updates):
        y, c = tdnn_forward(x, _sub(self.params, prefix), dilation, train, self.cfg.bn_momentum, self.cfg.bn_eps)
        caches[prefix] = c
        if train and c[3] is not None:
            updates[prefix] = c[3]
        return y

    def forward(self, feats, train=False):
        """Embed a batch of feature matrices, ``(N, T, D)`` -> ``(N, embedding_dim)``."""
        cfg = self.cfg
        feats = np.asarray(feats)
        if feats.ndim == 2:
            feats = feats[None]
        if feats.ndim != 3 or feats.shape[2] != cfg.input_dim:
            raise ShapeMismatch(f"expected (N, T, {cfg.input_dim}) features, got {feats.shape}")
        if feats.shape[1] < 1:
            raise ShapeMismatch("need at least one frame")
        x = np.ascontiguousarray(feats.transpose(0, 2, 1), dtype=self.dtype)
        caches, updates, outs, residual = {}, {}, [], []
        for i, k in enumerate(cfg.kernel_sizes):
            d = cfg.dilations[i]
            if i == 0:
                x = self._tdnn(x, "block0.tdnn", d, train, caches, updates)
            else:
                inp = x
                h = self._tdnn(x, f"block{i}.pre", 1, train, caches, updates)
                groups = _res2_groups(self.params, i)
                h, caches[f"block{i}.res2"] = res2_forward(
                    h, groups, cfg.res2_scale, d, train, cfg.bn_momentum, cfg.bn_eps
                )
                if train:
                    for g, gc in enumerate(caches[f"block{i}.res2"][1]):
                        updates[f"block{i}.res2.{g}"] = gc[3]
                h = self._tdnn(h, f"block{i}.post", 1, train, caches, updates)
                h, caches[f"block{i}.se"] = se_forward(h, _sub(self.params, f"block{i}.se"))
                residual.append(h.shape == inp.shape)
                x = h + inp if residual[-1] else h
            if i == 0:
                residual.append(False)
            outs.append(x)
        cat = np.concatenate(outs, axis=1)
        h = self._tdnn(cat, "mfa", 1, train, caches, updates)
        pooled, caches["asp"] = asp_forward(h, _sub(self.params, "asp"), cfg.var_floor)
        emb = pooled @ self.params["proj.weight"].T + self.params["proj.bias"]
        if not np.all(np.isfinite(emb)):
            raise NonFiniteActivation("encoder produced non-finite embeddings")
        if train:
            for prefix, (rm, rv) in updates.items():
                self.params[f"{prefix}.running_mean"] = rm.astype(self.dtype)
                self.params[f"{prefix}.running_var"] = rv.astype(self.dtype)
            caches["pooled"] = pooled
            caches["channels"] = [o.shape[1] for o in outs]
            caches["residual"] = residual
            self._cache = caches
        else:
            self._cache = None
        return emb

    def backward(self, grad_emb) -> dict[str, np.ndarray]:
        """Gradients of ``sum(grad_emb * forward(...))`` for every non-buffer tensor."""
        if self._cache is None:
            raise StateError("backward called without a preceding train-mode forward")
        caches = self._cache
        cfg = self.cfg
        grad_emb = np.asarray(grad_emb, dtype=self.dtype)
        grads: dict[str, np.ndarray] = {}
        pooled = caches["pooled"]
        if grad_emb.shape != (pooled.shape[0], cfg.embedding_dim):
            raise ShapeMismatch(f"upstream gradient shape {grad_emb.shape} does not match embeddings")
        grads["proj.weight"] = grad_emb.T @ pooled
        grads["proj.bias"] = grad_emb.sum(axis=0)
        dpooled = grad_emb @ self.params["proj.weight"]
        dh, g = asp_backward(dpooled, caches["asp"], _sub(self.params, "asp"))
        grads.update({f"asp.{k}": v for k, v in g.items()})
        dcat = self._tdnn_back(dh, "mfa", caches, grads)
        bounds = np.cumsum([0] + caches["channels"])
        douts = [dcat[:, bounds[i] : bounds[i + 1]].copy() for i in range(len(bounds) - 1)]
        for i in range(len(cfg.kernel_sizes) - 1, -1, -1):
            dx = douts[i]
            if i == 0:
                dx = self._tdnn_back(dx, "block0.tdnn", caches, grads)
                break
            dse, g = se_backward(dx, caches[f"block{i}.se"], _sub(self.params, f"block{i}.se"))
            grads.update({f"block{i}.se.{k}": v for k, v in g.items()})
            dh = self._tdnn_back(dse, f"block{i}.post", caches, grads)
            dh, gg = res2_backward(dh, caches[f"block{i}.res2"])
            for gi, g in enumerate(gg):
                grads.update({f"block{i}.res2.{gi}.{k}": v for k, v in g.items()})
            dinp = self._tdnn_back(dh, f"block{i}.pre", caches, grads)
            if caches["residual"][i]:
                dinp = dinp + dx
            douts[i - 1] += dinp
        for name in self.frozen:
            grads.pop(name, None)
        return {k: np.asarray(v, dtype=self.dtype) for k, v in grads.items()}

    @staticmethod
    def _tdnn_back(dy, prefix, caches, grads):
        dx, g = tdnn_backward(dy, caches[prefix])
        grads.update({f"{prefix}.{k}": v for k, v in g.items()})
        return dx


def embed(feats, params, cfg: EncoderConfig, mode: str = "eval") -> np.ndarray:
    """Embedding of one ``(T, D)`` feature matrix."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    feats = np.asarray(feats)
    if feats.ndim != 2:
        raise ShapeMismatch(f"expected a (T, D) matrix, got {feats.shape}")
    return Encoder(cfg, params).forward(feats, train=mode == "train")[0]


def encoder_backward(encoder: Encoder, upstream) -> dict[str, np.ndarray]:
    return encoder.backward(upstream)


def l2_normalize(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    return x / np.linalg.norm(x, axis=axis, keepdims=True)

