"""Neural primitives with fused backward rules, plus a small parameter container."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Parameter, Tensor, _sigmoid_np, _unbroadcast, as_tensor, make_op

LN_EPS = 1e-5


def linear(x, W, b=None) -> Tensor:
    """``y = x @ W + b`` broadcast over the leading extents of ``x``.

    Args:
        x: input of shape ``(..., I)``.
        W: weight of shape ``(I, O)``.
        b: optional bias of shape ``(O,)``.
    """
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise ValueError(f"linear shape mismatch: x {x.shape} vs W {W.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (W.shape[1],):
            raise ValueError(f"linear bias shape {b.shape} does not match W {W.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, W.shape[0])
    out = x2 @ W.data
    if b is not None:
        out = out + b.data
    out = out.reshape(lead + (W.shape[1],))

    def backward(g):
        g2 = g.reshape(-1, W.shape[1])
        gx = (g2 @ W.data.T).reshape(x.shape)
        gW = x2.T @ g2
        if b is None:
            return gx, gW
        return gx, gW, g2.sum(axis=0)

    parents = (x, W) if b is None else (x, W, b)
    return make_op(out, parents, backward, "linear")


def layer_norm(x, gain=None, bias=None, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last extent, then apply the optional affine map."""
    x = as_tensor(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g_data = None if gain is None else as_tensor(gain).data
    out = xhat if g_data is None else xhat * g_data
    if bias is not None:
        out = out + as_tensor(bias).data
    parents = [x]
    if gain is not None:
        parents.append(as_tensor(gain))
    if bias is not None:
        parents.append(as_tensor(bias))

    def backward(g):
        gh = g if g_data is None else g * g_data
        n = x.shape[-1]
        gx = inv / n * (n * gh - gh.sum(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).sum(axis=-1, keepdims=True))
        grads = [gx]
        if gain is not None:
            grads.append(_unbroadcast(g * xhat, g_data.shape))
        if bias is not None:
            grads.append(_unbroadcast(g, as_tensor(bias).shape))
        return tuple(grads)

    return make_op(out, parents, backward, "layer_norm")


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_op(out, (x,), backward, "softmax")


def interp_sample(seq, t) -> Tensor:
    """Linear interpolation of a ``(T, D)`` sequence at continuous times ``t``.

    Times outside ``[0, T-1]`` clamp to the boundary rows (zero gradient wrt
    ``t`` there).  Output shape is ``t.shape + (D,)``.
    """
    seq, t = as_tensor(seq), as_tensor(t)
    if seq.ndim != 2 or seq.shape[0] < 1:
        raise ValueError(f"interp_sample needs a non-empty (T, D) sequence, got {seq.shape}")
    T = seq.shape[0]
    tc = np.clip(t.data, 0.0, T - 1)
    k = np.minimum(np.floor(tc).astype(np.int64), max(T - 2, 0))
    k1 = np.minimum(k + 1, T - 1)
    lam = (tc - k).ravel()
    # dense (n_points, T) interpolation matrix; two nonzeros per row
    rows = np.arange(lam.size)
    M = np.zeros((lam.size, T))
    M[rows, k.ravel()] += 1.0 - lam
    M[rows, k1.ravel()] += lam
    out = (M @ seq.data).reshape(t.shape + (seq.shape[1],))
    slope = (seq.data[k1] - seq.data[k])
    inside = (t.data >= 0.0) & (t.data <= T - 1)

    def backward(g):
        g2 = g.reshape(-1, seq.shape[1])
        gs = M.T @ g2
        gt = (g * slope).sum(axis=-1) * inside
        return gs, gt

    return make_op(out, (seq, t), backward, "interp_sample")


def bce_with_logits(logits, targets) -> Tensor:
    """Elementwise binary cross-entropy on logits (numerically stable form)."""
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    z = logits.data
    out = np.logaddexp(0.0, z) - y * z
    return make_op(out, (logits,), lambda g: (g * (_sigmoid_np(z) - y),), "bce_with_logits")


class Module:
    """Attribute-walking parameter container.

    Parameters are discovered from attributes that are ``Parameter``s,
    ``Module``s, or lists of modules; names are dotted attribute paths.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, val in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(val, Parameter):
                yield path, val
            elif isinstance(val, Module):
                yield from val.named_parameters(path + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def rename_parameters(self) -> None:
        """Stamp every Parameter with its dotted path so names are unique."""
        for name, p in self.named_parameters():
            p.name = name


class Linear(Module):
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int, scale: float | None = None,
                 bias: bool = True, zero: bool = False):
        std = (1.0 / np.sqrt(n_in)) if scale is None else scale
        w = np.zeros((n_in, n_out)) if zero else rng.normal(0.0, std, size=(n_in, n_out))
        self.W = Parameter("W", w)
        self.b = Parameter("b", np.zeros(n_out)) if bias else None

    def __call__(self, x) -> Tensor:
        return linear(x, self.W, self.b)


class LayerNorm(Module):
    def __init__(self, n: int):
        self.gain = Parameter("gain", np.ones(n))
        self.bias = Parameter("bias", np.zeros(n))

    def __call__(self, x) -> Tensor:
        return layer_norm(x, self.gain, self.bias)
