"""Non-local attention block with analytic forward and backward passes.

For an input ``x`` of shape C x H x W, flattened to C x n with n = H*W::

    f = Wf x, g = Wg x          (C' x n)
    h = Wh x                     (C x n)
    alpha = softmax_i(f^T g)     (n x n, each column sums to 1)
    o = h alpha                  (C x n)
    z = gamma * standardize(Wk o) + beta
    y = z + x

``standardize`` normalizes each example over all of its C x n values;
gamma and beta stay per channel. Normalizing each channel over space alone
would pin every channel's spatial mean to beta, which makes a block placed
right before global average pooling invisible to the classifier.
The batched helpers ``forward_batch`` / ``backward_batch`` take a leading
batch axis and are what the model uses; ``nl_forward`` / ``nl_backward``
are the single-example entry points.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .tensor_core import DimensionError, Tensor, as_tensor

EPS = 1e-5
PARAM_NAMES = ("Wf", "Wg", "Wh", "Wk", "gamma", "beta")


@dataclass
class NonLocalParams:
    Wf: Tensor
    Wg: Tensor
    Wh: Tensor
    Wk: Tensor
    gamma: Tensor
    beta: Tensor

    def __post_init__(self):
        c_red, c = self.Wf.shape
        expected = {
            "Wf": (c_red, c),
            "Wg": (c_red, c),
            "Wh": (c, c),
            "Wk": (c, c),
            "gamma": (c,),
            "beta": (c,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionError(
                    f"{name} has shape {getattr(self, name).shape}, expected {shape}"
                )

    @property
    def channels(self) -> int:
        return self.Wf.shape[1]

    @property
    def reduced(self) -> int:
        return self.Wf.shape[0]

    @classmethod
    def init(cls, channels: int, reduction: int = 8, rng=None) -> "NonLocalParams":
        """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) projections, zero gamma and beta."""
        rng = np.random.default_rng(rng)
        c_red = reduced_channels(channels, reduction)
        s = 1.0 / np.sqrt(channels)
        return cls(
            Wf=rng.uniform(-s, s, (c_red, channels)),
            Wg=rng.uniform(-s, s, (c_red, channels)),
            Wh=rng.uniform(-s, s, (channels, channels)),
            Wk=rng.uniform(-s, s, (channels, channels)),
            gamma=np.zeros(channels),
            beta=np.zeros(channels),
        )

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]


def reduced_channels(channels: int, reduction: int) -> int:
    if reduction < 1:
        raise ValueError(f"reduction must be a positive integer, got {reduction}")
    return max(1, channels // reduction)


@dataclass
class NonLocalCache:
    x: Tensor  # B x C x n
    f: Tensor  # B x C' x n
    g: Tensor
    h: Tensor  # B x C x n
    alpha: Tensor  # B x n x n
    o: Tensor  # B x C x n
    xhat: Tensor  # B x C x n
    inv_std: Tensor  # B x 1 x 1
    params: NonLocalParams
    spatial: tuple[int, int]
    batched: bool


def _column_softmax(s: np.ndarray) -> np.ndarray:
    e = np.exp(s - s.max(axis=-2, keepdims=True))
    return e / e.sum(axis=-2, keepdims=True)


def _check_input(x: np.ndarray, p: NonLocalParams) -> None:
    if x.ndim != 4:
        raise DimensionError(f"expected B x C x H x W input, got shape {x.shape}")
    if x.shape[1] != p.channels:
        raise DimensionError(
            f"input has {x.shape[1]} channels, block expects {p.channels}"
        )


def forward_batch(x: np.ndarray, p: NonLocalParams) -> tuple[np.ndarray, NonLocalCache]:
    _check_input(x, p)
    b, c, hh, ww = x.shape
    xf = x.reshape(b, c, hh * ww)
    f = p.Wf @ xf
    g = p.Wg @ xf
    h = p.Wh @ xf
    alpha = _column_softmax(np.swapaxes(f, 1, 2) @ g)
    o = h @ alpha
    u = p.Wk @ o
    mu = u.mean(axis=(1, 2), keepdims=True)
    centered = u - mu
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=(1, 2), keepdims=True) + EPS)
    xhat = centered * inv_std
    z = p.gamma[:, None] * xhat + p.beta[:, None]
    y = (z + xf).reshape(b, c, hh, ww)
    cache = NonLocalCache(xf, f, g, h, alpha, o, xhat, inv_std, p, (hh, ww), True)
    return y, cache


def backward_batch(
    cache: NonLocalCache, dy: np.ndarray
) -> tuple[np.ndarray, NonLocalParams]:
    p = cache.params
    b, c, n = cache.x.shape
    if dy.shape != (b, c) + cache.spatial:
        raise DimensionError(
            f"gradient shape {dy.shape} does not match cached output {(b, c) + cache.spatial}"
        )
    dyf = dy.reshape(b, c, n)

    dgamma = (dyf * cache.xhat).sum(axis=(0, 2))
    dbeta = dyf.sum(axis=(0, 2))
    dxhat = dyf * p.gamma[:, None]
    du = cache.inv_std * (
        dxhat
        - dxhat.mean(axis=(1, 2), keepdims=True)
        - cache.xhat * (dxhat * cache.xhat).mean(axis=(1, 2), keepdims=True)
    )

    dWk = (du @ np.swapaxes(cache.o, 1, 2)).sum(axis=0)
    do = p.Wk.T @ du
    dh = do @ np.swapaxes(cache.alpha, 1, 2)
    dalpha = np.swapaxes(cache.h, 1, 2) @ do
    ds = cache.alpha * (dalpha - (cache.alpha * dalpha).sum(axis=1, keepdims=True))
    df = cache.g @ np.swapaxes(ds, 1, 2)
    dg = cache.f @ ds

    xt = np.swapaxes(cache.x, 1, 2)
    grads = NonLocalParams(
        Wf=(df @ xt).sum(axis=0),
        Wg=(dg @ xt).sum(axis=0),
        Wh=(dh @ xt).sum(axis=0),
        Wk=dWk,
        gamma=dgamma,
        beta=dbeta,
    )
    dx = dyf + p.Wf.T @ df + p.Wg.T @ dg + p.Wh.T @ dh
    return dx.reshape(dy.shape), grads


def attention_matrix(x, p: NonLocalParams) -> Tensor:
    """HW x HW attention weights; column j holds the weights feeding location j."""
    x = as_tensor(x, 3, "x")
    _check_input(x[None], p)
    c = x.shape[0]
    xf = x.reshape(c, -1)
    return _column_softmax((p.Wf @ xf).T @ (p.Wg @ xf))


def nl_forward(x, p: NonLocalParams) -> tuple[Tensor, NonLocalCache]:
    x = as_tensor(x, 3, "x")
    y, cache = forward_batch(x[None], p)
    cache.batched = False
    return y[0], cache


def nl_backward(cache: NonLocalCache, dy) -> tuple[Tensor, NonLocalParams]:
    dy = np.asarray(dy, dtype=np.float64)
    if not cache.batched:
        if dy.ndim != 3:
            raise DimensionError(f"expected C x H x W gradient, got shape {dy.shape}")
        dx, grads = backward_batch(cache, dy[None])
        return dx[0], grads
    return backward_batch(cache, dy)
