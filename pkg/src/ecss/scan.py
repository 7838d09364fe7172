"""Selective state-space scan.

Shapes follow the token-major layout used by the model, with optional
leading batch axes:

    u, delta : (..., L, d_in)
    A        : (d_in, n)          strictly negative
    B, C     : (..., L, n)
    D        : (d_in,)

Recurrence, with h_0 = 0:

    h_t = exp(delta_t * A) * h_{t-1} + (delta_t * u_t)[:, None] * B_t[None, :]
    y_t = h_t @ C_t + D * u_t
"""

from __future__ import annotations

import numpy as np

from .numcore import Tensor, record

__all__ = ["scan_sequential", "scan_chunked", "selective_scan"]


def _check(u, delta, A, B, C, D):
    L, d_in = u.shape[-2:]
    n = A.shape[-1]
    if (delta.shape != u.shape or A.shape != (d_in, n) or B.shape[-2:] != (L, n)
            or C.shape != B.shape or D.shape != (d_in,) or B.shape[:-2] != u.shape[:-2]):
        raise ValueError(
            f"selective_scan: incompatible shapes u={u.shape} delta={delta.shape} A={A.shape} "
            f"B={B.shape} C={C.shape} D={D.shape}")


def _finite(name: str, x: np.ndarray) -> None:
    if not np.isfinite(x).all():
        raise FloatingPointError(f"selective_scan: non-finite values in {name}")


def scan_sequential(u, delta, A, B, C, D, return_states: bool = False):
    """Step-by-step recurrence, vectorized over batch and channels."""
    u, delta, A, B, C, D = (np.asarray(a, dtype=np.float64) for a in (u, delta, A, B, C, D))
    _check(u, delta, A, B, C, D)
    batch = u.shape[:-2]
    L, d_in = u.shape[-2:]
    n = A.shape[-1]
    h = np.zeros(batch + (d_in, n))
    y = np.empty_like(u)
    states = np.empty(batch + (L, d_in, n)) if return_states else None
    du = delta * u
    for t in range(L):
        dA = np.exp(delta[..., t, :, None] * A)
        h = dA * h + du[..., t, :, None] * B[..., t, None, :]
        y[..., t, :] = np.einsum("...cn,...n->...c", h, C[..., t, :])
        if return_states:
            states[..., t, :, :] = h
    y += D * u
    _finite("output", y)
    if return_states:
        return y, states
    return y


def scan_chunked(u, delta, A, B, C, D, chunk: int = 16):
    """Chunk-parallel form of the same recurrence.

    Inside a chunk the state contribution of step s to step t is
    ``exp(sum_{r=s+1..t} delta_r * A)``, built from a cumulative sum of
    ``delta * A`` and masked to ``s <= t`` before exponentiating, so every
    exponent is non-positive. The carried state crosses chunk boundaries
    through the full-chunk decay.
    """
    u, delta, A, B, C, D = (np.asarray(a, dtype=np.float64) for a in (u, delta, A, B, C, D))
    _check(u, delta, A, B, C, D)
    batch = u.shape[:-2]
    L, d_in = u.shape[-2:]
    n = A.shape[-1]
    h = np.zeros(batch + (d_in, n))
    y = np.empty_like(u)
    du = delta * u
    for start in range(0, L, chunk):
        stop = min(start + chunk, L)
        T = stop - start
        dt = delta[..., start:stop, :]                               # (..., T, c)
        logdec = np.cumsum(dt[..., :, :, None] * A, axis=-3)          # (..., T, c, n)
        # seg[t, s] = logdec[t] - logdec[s], valid for s <= t
        seg = logdec[..., :, None, :, :] - logdec[..., None, :, :, :]  # (..., T, S, c, n)
        causal = np.tril(np.ones((T, T), dtype=bool))[:, :, None, None]
        decay = np.where(causal, np.exp(np.where(causal, seg, 0.0)), 0.0)
        inject = du[..., start:stop, :, None] * B[..., start:stop, None, :]  # (..., S, c, n)
        states = np.einsum("...tscn,...scn->...tcn", decay, inject)
        states += np.exp(logdec) * h[..., None, :, :]
        y[..., start:stop, :] = np.einsum("...tcn,...tn->...tc", states, C[..., start:stop, :])
        h = states[..., -1, :, :]
    y += D * u
    _finite("output", y)
    return y


def selective_scan(u: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor) -> Tensor:
    """Differentiable scan; keeps every hidden state for the reverse sweep."""
    if (delta.data <= 0).any():
        raise ValueError("selective_scan: delta must be strictly positive")
    if (A.data >= 0).any():
        raise ValueError("selective_scan: A must be strictly negative")
    y, hs = scan_sequential(u.data, delta.data, A.data, B.data, C.data, D.data, return_states=True)

    def grad_fn(gy):
        ud, dd, Ad, Bd, Cd, Dd = u.data, delta.data, A.data, B.data, C.data, D.data
        L = ud.shape[-2]
        gu = gy * Dd
        gdelta = np.zeros_like(dd)
        gA = np.zeros_like(Ad)
        gB = np.zeros_like(Bd)
        gC = np.zeros_like(Cd)
        gD = (gy * ud).reshape(-1, ud.shape[-1]).sum(axis=0)
        gh = np.zeros(hs.shape[:-3] + hs.shape[-2:])
        for t in range(L - 1, -1, -1):
            h_t = hs[..., t, :, :]
            gC[..., t, :] = np.einsum("...c,...cn->...n", gy[..., t, :], h_t)
            gh = gh + gy[..., t, :, None] * Cd[..., t, None, :]
            # h_t = dA * h_{t-1} + (delta*u)_t B_t
            Bt = Bd[..., t, :]
            proj = np.einsum("...cn,...n->...c", gh, Bt)
            gdelta[..., t, :] += proj * ud[..., t, :]
            gu[..., t, :] += proj * dd[..., t, :]
            gB[..., t, :] = np.einsum("...cn,...c->...n", gh, dd[..., t, :] * ud[..., t, :])
            if t > 0:
                dA = np.exp(dd[..., t, :, None] * Ad)
                g_dA = gh * hs[..., t - 1, :, :] * dA
                gdelta[..., t, :] += (g_dA * Ad).sum(axis=-1)
                gA += (g_dA * dd[..., t, :, None]).reshape(-1, *Ad.shape).sum(axis=0)
                gh = gh * dA
        return gu, gdelta, gA, gB, gC, gD

    return record(y, (u, delta, A, B, C, D), grad_fn, "selective_scan")
