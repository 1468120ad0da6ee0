"""Small neural building blocks with hand-written backward passes.

Each forward function returns ``(output, cache)``; the matching backward
takes the cache and the output gradient, accumulates parameter gradients
into the :class:`ParamStore` and returns the input gradient.
"""
from __future__ import annotations

import numpy as np

LEAK = 0.01


class ShapeError(ValueError):
    pass


class ParamStore:
    """Named trainable arrays with same-shaped gradient accumulators."""

    def __init__(self):
        self.values: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def add(self, name, value):
        if name in self.values:
            raise KeyError(f"duplicate parameter {name!r}")
        self.values[name] = np.array(value, dtype=float)
        self.grads[name] = np.zeros_like(self.values[name])
        return self.values[name]

    def __getitem__(self, name):
        return self.values[name]

    def __setitem__(self, name, value):
        value = np.asarray(value, float)
        if value.shape != self.values[name].shape:
            raise ShapeError(f"{name}: shape {value.shape} != {self.values[name].shape}")
        self.values[name] = value

    def __contains__(self, name):
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def accumulate(self, name, g):
        self.grads[name] += g

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def names(self, prefix=""):
        return [n for n in self.values if n.startswith(prefix)]


def leaky_relu(x):
    return np.where(x > 0, x, LEAK * x)


def leaky_relu_grad(x, g):
    return np.where(x > 0, g, LEAK * g)


def kaiming_uniform(rng, fan_in, shape):
    bound = np.sqrt(6.0 / ((1.0 + LEAK ** 2) * fan_in))
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# linear / MLP


def add_mlp(store, prefix, sizes, rng, zero_last=True):
    """Register an MLP ``sizes[0] -> ... -> sizes[-1]`` (leaky-ReLU hidden)."""
    for i, (din, dout) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        w = np.zeros((din, dout)) if (last and zero_last) else kaiming_uniform(rng, din, (din, dout))
        store.add(f"{prefix}.l{i}.w", w)
        store.add(f"{prefix}.l{i}.b", np.zeros(dout))


def _mlp_layers(store, prefix):
    n = 0
    while f"{prefix}.l{n}.w" in store:
        n += 1
    if n == 0:
        raise KeyError(f"no MLP registered under {prefix!r}")
    return n


def mlp(store, prefix, x):
    """Apply the MLP under ``prefix`` to ``x`` of shape (d_in,) or (B, d_in)."""
    x = np.asarray(x, float)
    n = _mlp_layers(store, prefix)
    if x.shape[-1] != store[f"{prefix}.l0.w"].shape[0]:
        raise ShapeError(f"{prefix}: input width {x.shape[-1]} != {store[f'{prefix}.l0.w'].shape[0]}")
    inputs, pre = [], []
    h = x
    for i in range(n):
        inputs.append(h)
        z = h @ store[f"{prefix}.l{i}.w"] + store[f"{prefix}.l{i}.b"]
        pre.append(z)
        h = leaky_relu(z) if i < n - 1 else z
    return h, {"prefix": prefix, "inputs": inputs, "pre": pre}


def mlp_backward(store, cache, g):
    prefix = cache["prefix"]
    n = len(cache["inputs"])
    for i in range(n - 1, -1, -1):
        if i < n - 1:
            g = leaky_relu_grad(cache["pre"][i], g)
        h = cache["inputs"][i]
        W = store[f"{prefix}.l{i}.w"]
        if h.ndim == 1:
            store.accumulate(f"{prefix}.l{i}.w", np.outer(h, g))
            store.accumulate(f"{prefix}.l{i}.b", g)
        else:
            store.accumulate(f"{prefix}.l{i}.w", h.T @ g)
            store.accumulate(f"{prefix}.l{i}.b", g.sum(axis=0))
        g = g @ W.T
    return g


# ---------------------------------------------------------------------------
# attention


def softmax_attention(query, keys, values):
    """Single-head scaled dot-product attention of one query over N keys."""
    query = np.asarray(query, float)
    keys = np.atleast_2d(np.asarray(keys, float))
    values = np.atleast_2d(np.asarray(values, float))
    if keys.shape[0] == 0:
        raise ShapeError("attention needs at least one key")
    if keys.shape[0] != values.shape[0] or keys.shape[1] != query.shape[0]:
        raise ShapeError(f"attention shapes q{query.shape} k{keys.shape} v{values.shape} disagree")
    scale = 1.0 / np.sqrt(query.shape[0])
    s = keys @ query * scale
    e = np.exp(s - s.max())
    w = e / e.sum()
    return w @ values, {"q": query, "k": keys, "v": values, "w": w, "scale": scale}


def softmax_attention_backward(cache, g):
    """Return ``(d_query, d_keys, d_values)``."""
    w = cache["w"]
    dv = np.outer(w, g)
    dw = cache["v"] @ g
    ds = w * (dw - w @ dw) * cache["scale"]
    return cache["k"].T @ ds, np.outer(ds, cache["q"]), dv


# ---------------------------------------------------------------------------
# convolutional encoder


def _im2col(x, stride=2):
    H, W, C = x.shape
    Ho, Wo = (H + 1) // stride, (W + 1) // stride
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    cols = np.empty((Ho, Wo, 9, C))
    for ky in range(3):
        for kx in range(3):
            cols[:, :, ky * 3 + kx] = xp[ky:ky + stride * Ho:stride, kx:kx + stride * Wo:stride]
    return cols.reshape(Ho * Wo, 9 * C), (Ho, Wo)


def _col2im(dcols, shape, stride=2):
    H, W, C = shape
    Ho, Wo = (H + 1) // stride, (W + 1) // stride
    dxp = np.zeros((H + 2, W + 2, C))
    d = dcols.reshape(Ho, Wo, 9, C)
    for ky in range(3):
        for kx in range(3):
            dxp[ky:ky + stride * Ho:stride, kx:kx + stride * Wo:stride] += d[:, :, ky * 3 + kx]
    return dxp[1:-1, 1:-1]


def add_encoder(store, prefix, rng, channels=(3, 8, 16, 32, 64), d_feat=64):
    for i, (cin, cout) in enumerate(zip(channels[:-1], channels[1:])):
        store.add(f"{prefix}.conv{i}.w", kaiming_uniform(rng, 9 * cin, (9 * cin, cout)))
        store.add(f"{prefix}.conv{i}.b", np.zeros(cout))
    store.add(f"{prefix}.fc.w", kaiming_uniform(rng, channels[-1], (channels[-1], d_feat)))
    store.add(f"{prefix}.fc.b", np.zeros(d_feat))


def conv_encode(store, prefix, image):
    """Stride-2 3x3 conv stack, leaky-ReLU, global average pool, linear."""
    x = np.asarray(image, float)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ShapeError(f"encoder expects an H x W x 3 image, got {x.shape}")
    n = 0
    while f"{prefix}.conv{n}.w" in store:
        n += 1
    layers = []
    h = x
    for i in range(n):
        cols, (Ho, Wo) = _im2col(h)
        z = cols @ store[f"{prefix}.conv{i}.w"] + store[f"{prefix}.conv{i}.b"]
        layers.append((h.shape, cols, z))
        h = leaky_relu(z).reshape(Ho, Wo, -1)
    pooled = h.reshape(-1, h.shape[2]).mean(axis=0)
    feat = pooled @ store[f"{prefix}.fc.w"] + store[f"{prefix}.fc.b"]
    return feat, {"prefix": prefix, "layers": layers, "pooled": pooled, "last_shape": h.shape}


def conv_encode_backward(store, cache, g):
    """Accumulate parameter gradients; return the image gradient."""
    prefix = cache["prefix"]
    store.accumulate(f"{prefix}.fc.w", np.outer(cache["pooled"], g))
    store.accumulate(f"{prefix}.fc.b", g)
    gp = store[f"{prefix}.fc.w"] @ g
    Ho, Wo, C = cache["last_shape"]
    gh = np.broadcast_to(gp / (Ho * Wo), (Ho * Wo, C))
    for i in range(len(cache["layers"]) - 1, -1, -1):
        in_shape, cols, z = cache["layers"][i]
        gz = leaky_relu_grad(z, gh)
        store.accumulate(f"{prefix}.conv{i}.w", cols.T @ gz)
        store.accumulate(f"{prefix}.conv{i}.b", gz.sum(axis=0))
        gh = _col2im(gz @ store[f"{prefix}.conv{i}.w"].T, in_shape)
        gh = gh.reshape(-1, in_shape[2])
    return gh.reshape(cache["layers"][0][0])
