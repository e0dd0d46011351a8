"""Pure numpy selective-scan recurrence (fallback backend).

    h_t = exp(delta_t * A) * h_{t-1} + (delta_t B_t) x_t
    y_t[d] = sum_s h_t[d, s] C_t[s]

Shapes: x, delta (N, T, D); A (D, S); B, C (N, T, S). The forward pass
returns the stacked post-update states so the backward pass never has to
re-run the recurrence.
"""

import numpy as np


def scan_forward(x, delta, A, B, C):
    N, T, D = x.shape
    S = A.shape[1]
    h = np.zeros((N, D, S), dtype=x.dtype)
    hs = np.empty((N, T, D, S), dtype=x.dtype)
    y = np.empty((N, T, D), dtype=x.dtype)
    for t in range(T):
        decay = np.exp(delta[:, t, :, None] * A)
        h = decay * h + (delta[:, t, :, None] * B[:, t, None, :]) * x[:, t, :, None]
        hs[:, t] = h
        y[:, t] = (h * C[:, t, None, :]).sum(axis=2)
    return y, hs


def scan_backward(x, delta, A, B, C, hs, gy):
    """Gradients of sum(gy * y) wrt x, delta, A, B, C."""
    N, T, D = x.shape
    S = A.shape[1]
    gx = np.zeros_like(x)
    gdelta = np.zeros_like(delta)
    gA = np.zeros_like(A)
    gB = np.zeros_like(B)
    gC = np.zeros_like(C)
    gh = np.zeros((N, D, S), dtype=x.dtype)
    zero_h = np.zeros((N, D, S), dtype=x.dtype)
    for t in range(T - 1, -1, -1):
        h_t = hs[:, t]
        gC[:, t] = (gy[:, t, :, None] * h_t).sum(axis=1)
        gh = gh + gy[:, t, :, None] * C[:, t, None, :]
        h_prev = hs[:, t - 1] if t > 0 else zero_h
        decay = np.exp(delta[:, t, :, None] * A)
        g_decay = gh * h_prev
        gdelta[:, t] = (g_decay * decay * A[None]).sum(axis=2) \
            + (gh * B[:, t, None, :]).sum(axis=2) * x[:, t]
        gA += (g_decay * decay * delta[:, t, :, None]).sum(axis=0)
        gB[:, t] = (gh * delta[:, t, :, None] * x[:, t, :, None]).sum(axis=1)
        gx[:, t] = (gh * B[:, t, None, :]).sum(axis=2) * delta[:, t]
        gh = gh * decay
    return gx, gdelta, gA, gB, gC
