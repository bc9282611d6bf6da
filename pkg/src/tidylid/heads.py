"""Cosine-prototype classification heads: softmax CE, AAM-Softmax, RAM-Softmax.

Every loss takes the ``(N, C)`` matrix of cosine logits and returns the batch
mean loss together with its gradient with respect to those cosines. The
gradient is then chained through the normalised dot product by
:func:`head_backward_to_embeddings`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeMismatch, StateError, ZeroNorm

HEADS = ("ce", "aam", "ram")

# Floor on sin(theta) inside the AAM target derivative; at cos = +-1 the
# exact derivative of cos(theta + m) is unbounded.
_SIN_FLOOR = 1e-12


@dataclass(frozen=True)
class MarginConfig:
    scale_s: float = 30.0
    margin_m: float = 0.2

    def __post_init__(self):
        if self.scale_s <= 0:
            raise ValueError("scale_s must be positive")
        if not 0 <= self.margin_m < math.pi / 2:
            raise ValueError("margin_m must lie in [0, pi/2)")


def init_prototypes(n_classes: int, dim: int, seed: int = 0, dtype=np.float32) -> np.ndarray:
    """Uniform in [-1/sqrt(d), 1/sqrt(d)] so initial cosines sit near zero."""
    if n_classes < 2:
        raise ShapeMismatch("need at least two classes")
    bound = 1.0 / math.sqrt(dim)
    return np.random.default_rng(seed).uniform(-bound, bound, (n_classes, dim)).astype(dtype)


def _row_norms(x, what):
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroNorm(f"zero-norm {what} row")
    return norms


def cosine_logits(embeddings, protos) -> np.ndarray:
    """cos(theta_ij) between every embedding row and every prototype row."""
    e = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    w = np.asarray(protos, dtype=np.float64)
    if e.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"embedding dim {e.shape[1]} != prototype dim {w.shape[1]}")
    cos = (e / _row_norms(e, "embedding")) @ (w / _row_norms(w, "prototype")).T
    return np.clip(cos, -1.0, 1.0)


def head_backward_to_embeddings(grad_cos, embeddings, protos):
    """Chain ``dL/dcos`` through ``cos = <e, w> / (|e| |w|)``.

    Returns ``(grad_embeddings, grad_prototypes)``.
    """
    g = np.asarray(grad_cos, dtype=np.float64)
    e = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    w = np.asarray(protos, dtype=np.float64)
    if g.shape != (e.shape[0], w.shape[0]):
        raise ShapeMismatch(f"grad_cos shape {g.shape} != ({e.shape[0]}, {w.shape[0]})")
    en, wn = _row_norms(e, "embedding"), _row_norms(w, "prototype")
    e_hat, w_hat = e / en, w / wn
    d_ehat = g @ w_hat
    d_what = g.T @ e_hat
    grad_e = (d_ehat - np.sum(d_ehat * e_hat, axis=1, keepdims=True) * e_hat) / en
    grad_w = (d_what - np.sum(d_what * w_hat, axis=1, keepdims=True) * w_hat) / wn
    return grad_e, grad_w


def _check(cos, y):
    cos = np.atleast_2d(np.asarray(cos, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y)).astype(np.int64)
    n, c = cos.shape
    if y.shape != (n,):
        raise ShapeMismatch(f"{y.shape[0]} labels for {n} rows")
    if c < 2:
        raise ShapeMismatch("need at least two classes")
    if np.any((y < 0) | (y >= c)):
        raise ShapeMismatch("label out of range")
    return cos, y


def _softmax_ce(logits, y):
    """Mean CE over rows and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    rows = np.arange(n)
    top = logits.argmax(axis=1)
    shifted = logits - logits[rows, top][:, None]
    ex = np.exp(shifted)
    ex[rows, top] = 0.0
    # log1p keeps saturated rows accurate far below machine epsilon
    lse = np.log1p(ex.sum(axis=1))
    loss = float(np.mean(lse - shifted[rows, y]))
    p = np.exp(shifted - lse[:, None])
    p[rows, y] -= 1.0
    return loss, p / n


def ce_loss(cos, y, s: float = 30.0):
    cos, y = _check(cos, y)
    loss, dlogits = _softmax_ce(s * cos, y)
    return loss, s * dlogits


def aam_target(cos_t, m: float):
    """Margined target logit cos(theta + m) and its derivative w.r.t. cos(theta).

    Past theta = pi - m the curve stops decreasing, so it is replaced by the
    linear penalty ``cos(theta) - m sin(m)``.
    """
    cos_t = np.asarray(cos_t, dtype=np.float64)
    cm, sm = math.cos(m), math.sin(m)
    sin_t = np.sqrt(np.clip(1.0 - cos_t * cos_t, 0.0, None))
    phi = cos_t * cm - sin_t * sm
    dphi = cm + cos_t * sm / np.maximum(sin_t, _SIN_FLOOR)
    linear = cos_t < math.cos(math.pi - m)
    phi = np.where(linear, cos_t - m * sm, phi)
    dphi = np.where(linear, 1.0, dphi)
    return phi, dphi


def aam_loss(cos, y, cfg: MarginConfig = MarginConfig()):
    cos, y = _check(cos, y)
    rows = np.arange(cos.shape[0])
    phi, dphi = aam_target(cos[rows, y], cfg.margin_m)
    logits = cfg.scale_s * cos
    logits[rows, y] = cfg.scale_s * phi
    loss, dlogits = _softmax_ce(logits, y)
    grad = cfg.scale_s * dlogits
    grad[rows, y] *= dphi
    return loss, grad


def _ram(cos, y, cfg):
    n = cos.shape[0]
    rows = np.arange(n)
    s, m = cfg.scale_s, cfg.margin_m
    raw = s * (cos - cos[rows, y][:, None] + m)
    active = raw > 0
    active[rows, y] = False
    hinge = np.where(active, raw, 0.0)
    # the target column doubles as the leading "1 +" term: exp(0) = 1
    top = hinge.max(axis=1, keepdims=True)
    ex = np.exp(hinge - top)
    ex[rows, y] = 0.0
    denom = np.exp(-top[:, 0]) + ex.sum(axis=1)
    per_sample = top[:, 0] + np.log(denom)
    grad = s * np.where(active, ex / denom[:, None], 0.0)
    grad[rows, y] = -grad.sum(axis=1)
    return per_sample, grad


def ram_loss(cos, y, cfg: MarginConfig = MarginConfig()):
    """Hinged real-margin loss. Non-targets already beyond the margin sit at
    exp(0) and receive zero gradient; only hard non-targets are pushed."""
    cos, y = _check(cos, y)
    per_sample, grad = _ram(cos, y, cfg)
    return float(per_sample.mean()), grad / cos.shape[0]


def ram_per_sample(cos, y, cfg: MarginConfig = MarginConfig()) -> np.ndarray:
    cos, y = _check(cos, y)
    return _ram(cos, y, cfg)[0]


LOSSES = {
    "ce": lambda cos, y, cfg: ce_loss(cos, y, cfg.scale_s),
    "aam": aam_loss,
    "ram": ram_loss,
}


class MarginHead:
    """Prototype matrix plus a loss; caches the forward inputs for backward."""

    def __init__(self, prototypes: np.ndarray, kind: str = "aam", cfg: MarginConfig = MarginConfig()):
        if kind not in HEADS:
            raise ValueError(f"unknown head {kind!r}; choose from {HEADS}")
        self.prototypes = prototypes
        self.kind = kind
        self.cfg = cfg
        self._cache = None

    def forward(self, embeddings, labels):
        cos = cosine_logits(embeddings, self.prototypes)
        loss, grad_cos = LOSSES[self.kind](cos, labels, self.cfg)
        self._cache = (np.asarray(embeddings), grad_cos)
        return loss, cos

    def backward(self):
        if self._cache is None:
            raise StateError("head backward called without a forward pass")
        embeddings, grad_cos = self._cache
        self._cache = None
        return head_backward_to_embeddings(grad_cos, embeddings, self.prototypes)
