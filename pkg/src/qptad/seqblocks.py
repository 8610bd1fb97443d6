"""State-space sequence blocks and multi-head self-attention over the query axis.

Two layers live here:

* plain numpy reference routines (``discretize``, ``scan``, ``kernel``,
  ``conv_apply``) on a single-input single-output SSM, used by the
  benchmark and as the ground truth for the differentiable path;
* differentiable modules (``MambaBlock``, ``MultiHeadSelfAttention``,
  ``MambaMHSA``) that run one SSM per channel with the queries as the
  sequence axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .numerics import (LayerNorm, Linear, Module, Parameter, Tensor, exp, make_op, matmul, softmax,
                       softplus, stack, sum_, swap_last)
from .numerics.nn import linear

SERIES_MAX_TERMS = 30
SERIES_TOL = 1e-15


@dataclass
class MambaMhsaConfig:
    M: int = 2
    heads: int = 8
    D: int = 256
    N_state: int = 8
    selective: bool = False

    def validate(self) -> "MambaMhsaConfig":
        if self.M < 1:
            raise ConfigError(f"mamba.M must be >= 1, got {self.M}")
        if self.heads < 1 or self.D % self.heads:
            raise ConfigError(f"mamba.heads={self.heads} must divide D={self.D}")
        if self.N_state < 1:
            raise ConfigError(f"mamba.N_state must be >= 1, got {self.N_state}")
        return self


@dataclass
class SsmParams:
    """Continuous-time SISO system ``h' = A h + B u``, ``y = C h`` with step ``delta``.

    ``B`` and ``C`` are stored as length-``N`` vectors.
    """

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    delta: float

    @classmethod
    def random(cls, rng: np.random.Generator, n_state: int, delta: float = 0.1,
               radius: float = 0.9) -> "SsmParams":
        A = rng.normal(size=(n_state, n_state))
        A *= radius / max(np.max(np.abs(np.linalg.eigvals(A))), 1e-12)
        return cls(A, rng.normal(size=n_state), rng.normal(size=n_state), delta)

    @classmethod
    def default_init(cls, rng: np.random.Generator, n_state: int, delta: float = 0.1) -> "SsmParams":
        A = -np.diag(1.0 + np.arange(n_state, dtype=np.float64))
        return cls(A, rng.normal(0.0, 0.5, n_state), rng.normal(0.0, 0.5, n_state), delta)


@dataclass
class DiscreteSsm:
    A_x: np.ndarray
    B_x: np.ndarray


def _phi_series(dA: np.ndarray) -> np.ndarray:
    """``sum_{k>=1} dA^(k-1) / k!`` truncated at 30 terms or when a term drops below 1e-15."""
    n = dA.shape[-1]
    term = np.broadcast_to(np.eye(n), dA.shape).copy()
    phi = term.copy()
    for k in range(2, SERIES_MAX_TERMS + 1):
        term = term @ dA / k
        phi += term
        if np.max(np.abs(term)) < SERIES_TOL:
            break
    return phi


def discretize(p: SsmParams) -> DiscreteSsm:
    """Zero-order-hold discretisation without a matrix inverse.

    ``A_x = exp(dt A)`` and ``B_x = (dt A)^-1 (exp(dt A) - I) dt B``, both from
    the same power series so a singular ``A`` is fine.
    """
    if not p.delta > 0:
        raise ValueError(f"delta must be positive, got {p.delta}")
    A = np.asarray(p.A, dtype=np.float64)
    dA = p.delta * A
    phi = _phi_series(dA)
    A_x = np.eye(A.shape[0]) + dA @ phi
    B_x = phi @ (p.delta * np.asarray(p.B, dtype=np.float64))
    if not (np.all(np.isfinite(A_x)) and np.all(np.isfinite(B_x))):
        raise FloatingPointError("discretisation produced non-finite values")
    return DiscreteSsm(A_x, B_x)


def scan(d: DiscreteSsm, C: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Recurrent form: ``h_t = A_x h_{t-1} + B_x u_t``, ``y_t = C h_t`` from ``h_0 = 0``."""
    u = np.asarray(u, dtype=np.float64)
    h = np.zeros(d.A_x.shape[0])
    y = np.empty_like(u)
    for t, ut in enumerate(u):
        h = d.A_x @ h + d.B_x * ut
        y[t] = C @ h
    return y


def kernel(d: DiscreteSsm, C: np.ndarray, T: int) -> np.ndarray:
    """Impulse response ``K[k] = C A_x^k B_x`` for ``k < T``, by iterated multiply."""
    K = np.empty(T)
    v = np.array(d.B_x, dtype=np.float64)
    for k in range(T):
        K[k] = C @ v
        v = d.A_x @ v
    return K


def conv_apply(u: np.ndarray, K: np.ndarray) -> np.ndarray:
    """Causal convolution ``y[t] = sum_{k<=t} K[k] u[t-k]``."""
    u = np.asarray(u, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    if u.shape != K.shape:
        raise ValueError(f"conv_apply length mismatch: u {u.shape} vs K {K.shape}")
    return np.convolve(u, K)[: len(u)]


# -- differentiable path --------------------------------------------------

def discretize_t(A: Tensor, B: Tensor, delta: Tensor) -> tuple[Tensor, Tensor]:
    """Batched ZOH on tensors.

    ``A``: ``(..., N, N)``, ``B``: ``(..., N)``, ``delta``: ``(...)`` broadcastable
    against the leading extents.  Returns ``(A_x, B_x)``.
    """
    n = A.shape[-1]
    dA = A * delta.reshape(delta.shape + (1, 1))
    eye = np.eye(n)
    term: Tensor | np.ndarray = np.broadcast_to(eye, dA.shape)
    phi = Tensor(np.broadcast_to(eye, dA.shape)) + 0.0
    for k in range(2, SERIES_MAX_TERMS + 1):
        term = matmul(term, dA) * (1.0 / k)
        phi = phi + term
        if np.max(np.abs(term.data)) < SERIES_TOL:
            break
    A_x = matmul(dA, phi) + eye
    dB = B * delta.reshape(delta.shape + (1,))
    B_x = matmul(phi, dB.reshape(dB.shape + (1,))).reshape(dB.shape)
    return A_x, B_x


def kernel_t(A_x: Tensor, B_x: Tensor, C: Tensor, T: int) -> Tensor:
    """Per-channel impulse responses ``K[k, d] = C_d A_x,d^k B_x,d`` as a ``(T, D)`` tensor.

    ``A_x`` is ``(D, N, N)``; ``B_x`` and ``C`` are ``(D, N)``.  The backward
    pass runs the adjoint recursion ``w_k = g_k C + A_x^T w_{k+1}``.
    """
    A, Bx, Cd = A_x.data, B_x.data, C.data
    D, N = Bx.shape
    V = np.empty((T, D, N))
    v = Bx
    for k in range(T):
        V[k] = v
        v = np.einsum("dij,dj->di", A, v)
    out = np.einsum("tdn,dn->td", V, Cd)

    def backward(g):
        gC = np.einsum("td,tdn->dn", g, V)
        gA = np.zeros_like(A)
        w = g[T - 1][:, None] * Cd
        for k in range(T - 2, -1, -1):
            gA += w[:, :, None] * V[k][:, None, :]
            w = g[k][:, None] * Cd + np.einsum("dji,dj->di", A, w)
        return gA, w, gC

    return make_op(out, (A_x, B_x, C), backward, "ssm_kernel")


def _toeplitz(x: np.ndarray) -> np.ndarray:
    T = x.shape[0]
    lag = np.arange(T)[:, None] - np.arange(T)[None, :]
    mat = x[np.clip(lag, 0, T - 1)]
    mat[lag < 0] = 0.0
    return mat


def causal_conv_t(u: Tensor, K: Tensor) -> Tensor:
    """Per-channel causal convolution of ``u (T, D)`` with ``K (T, D)``."""
    if u.shape != K.shape:
        raise ValueError(f"causal_conv length mismatch: {u.shape} vs {K.shape}")
    Kmat = _toeplitz(K.data)
    out = np.einsum("tsd,sd->td", Kmat, u.data)

    def backward(g):
        gu = np.einsum("tsd,td->sd", Kmat, g)
        gK = np.einsum("tkd,td->kd", _toeplitz(u.data), g)
        return gu, gK

    return make_op(out, (u, K), backward, "causal_conv")


def scan_t(A_x: Tensor, B_x: Tensor, C: Tensor, u: Tensor) -> Tensor:
    """Recurrent scan with per-step parameters ``A_x (T,D,N,N)``, ``B_x (T,D,N)``; ``u (T,D)``."""
    T, D = u.shape
    h: Tensor | np.ndarray = np.zeros(B_x.shape[1:])
    ys = []
    for t in range(T):
        h = matmul(A_x[t], h.reshape(h.shape + (1,))).reshape(B_x.shape[1:]) + B_x[t] * u[t].reshape((D, 1))
        ys.append(sum_(C * h, axis=-1))
    return stack(ys, axis=0)


class MambaBlock(Module):
    """One SISO state-space model per channel, run along the query axis, plus a residual.

    LTI mode uses the convolution kernel; selective mode derives a per-step
    ``delta`` from the input (linear + softplus) and runs the recurrence.
    """

    def __init__(self, rng: np.random.Generator, D: int, n_state: int = 8, selective: bool = False,
                 delta0: float = 0.1):
        A = np.broadcast_to(-np.diag(1.0 + np.arange(n_state, dtype=np.float64)), (D, n_state, n_state))
        self.A = Parameter("A", A.copy())
        self.B = Parameter("B", rng.normal(0.0, 0.5, (D, n_state)))
        self.C = Parameter("C", rng.normal(0.0, 0.5 / np.sqrt(n_state), (D, n_state)))
        self.selective = selective
        if selective:
            self.delta_proj = Linear(rng, D, D, scale=0.01)
            self.delta_proj.b.data[:] = np.log(np.expm1(delta0))
        else:
            self.log_delta = Parameter("log_delta", np.full(D, np.log(delta0)))

    def ssm(self, Q: Tensor) -> Tensor:
        T = Q.shape[0]
        if not self.selective:
            A_x, B_x = discretize_t(self.A, self.B, exp(self.log_delta))
            return causal_conv_t(Q, kernel_t(A_x, B_x, self.C, T))
        delta = softplus(self.delta_proj(Q))
        A_x, B_x = discretize_t(self.A, self.B, delta)
        return scan_t(A_x, B_x, self.C, Q)

    def __call__(self, Q: Tensor) -> Tensor:
        return Q + self.ssm(Q)


class MultiHeadSelfAttention(Module):
    """Scaled dot-product self-attention over rows, then residual and layer norm."""

    def __init__(self, rng: np.random.Generator, D: int, heads: int = 8):
        if heads < 1 or D % heads:
            raise ValueError(f"heads={heads} must divide D={D}")
        self.heads = heads
        self.q = Linear(rng, D, D)
        self.k = Linear(rng, D, D)
        self.v = Linear(rng, D, D)
        self.o = Linear(rng, D, D)
        self.norm = LayerNorm(D)

    def attend(self, X: Tensor) -> Tensor:
        N, D = X.shape
        h, dh = self.heads, D // self.heads

        def split(t: Tensor) -> Tensor:
            return t.reshape(N, h, dh).transpose(1, 0, 2)

        q, k, v = split(self.q(X)), split(self.k(X)), split(self.v(X))
        w = softmax(matmul(q, swap_last(k)) * (1.0 / np.sqrt(dh)), axis=-1)
        ctx = matmul(w, v).transpose(1, 0, 2).reshape(N, D)
        return self.o(ctx)

    def __call__(self, X: Tensor) -> Tensor:
        if X.shape[-1] % self.heads:
            raise ValueError(f"width {X.shape[-1]} not divisible by heads={self.heads}")
        return self.norm(X + self.attend(X))


class MambaMHSA(Module):
    def __init__(self, rng: np.random.Generator, cfg: MambaMhsaConfig):
        cfg.validate()
        self.blocks = [MambaBlock(rng, cfg.D, cfg.N_state, cfg.selective) for _ in range(cfg.M)]
        self.mhsa = MultiHeadSelfAttention(rng, cfg.D, cfg.heads)

    def __call__(self, Q: Tensor) -> Tensor:
        for blk in self.blocks:
            Q = blk(Q)
        return self.mhsa(Q)


def mamba_block(block: MambaBlock, Q) -> Tensor:
    return block(Q if isinstance(Q, Tensor) else Tensor(Q))


def mhsa(attn: MultiHeadSelfAttention, Q) -> Tensor:
    return attn(Q if isinstance(Q, Tensor) else Tensor(Q))


def mamba_mhsa(block: MambaMHSA, Q) -> Tensor:
    return block(Q if isinstance(Q, Tensor) else Tensor(Q))


__all__ = [
    "ConfigError", "MambaMhsaConfig", "SsmParams", "DiscreteSsm", "discretize", "scan", "kernel",
    "conv_apply", "discretize_t", "kernel_t", "causal_conv_t", "scan_t", "MambaBlock",
    "MultiHeadSelfAttention", "MambaMHSA", "mamba_block", "mhsa", "mamba_mhsa", "linear",
]
