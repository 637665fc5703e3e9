"""Pure-numpy recurrent scan, the fallback when the extension is absent."""

import numpy as np


def scan_forward(xg, h0, u):
    """Run the gated scan over the time axis.

    xg: [T, B, 3H] input-side pre-activations (z | r | n thirds)
    h0: [B, H] initial state, u: [H, 3H] recurrent weights.
    Returns (hs [T, B, H], cache) with everything backward needs.
    """
    T, B, H3 = xg.shape
    H = H3 // 3
    hs = np.empty((T, B, H), dtype=xg.dtype)
    zs = np.empty((T, B, H), dtype=xg.dtype)
    rs = np.empty((T, B, H), dtype=xg.dtype)
    ns = np.empty((T, B, H), dtype=xg.dtype)
    gns = np.empty((T, B, H), dtype=xg.dtype)  # h_prev @ u_n, pre reset gate
    h = h0
    for t in range(T):
        gates = h @ u
        z = 1.0 / (1.0 + np.exp(-(xg[t, :, :H] + gates[:, :H])))
        r = 1.0 / (1.0 + np.exp(-(xg[t, :, H:2 * H] + gates[:, H:2 * H])))
        gn = gates[:, 2 * H:]
        n = np.tanh(xg[t, :, 2 * H:] + r * gn)
        h = (1.0 - z) * h + z * n
        hs[t], zs[t], rs[t], ns[t], gns[t] = h, z, r, n, gn
    return hs, (hs, zs, rs, ns, gns, h0)


def scan_backward(dhs, cache, u):
    """Reverse the scan: gradients for xg, h0 and u given dL/dhs."""
    hs, zs, rs, ns, gns, h0 = cache
    T, B, H = hs.shape
    dxg = np.empty((T, B, 3 * H), dtype=hs.dtype)
    du = np.zeros_like(u)
    carry = np.zeros((B, H), dtype=hs.dtype)
    dg = np.empty((B, 3 * H), dtype=hs.dtype)
    for t in range(T - 1, -1, -1):
        h_prev = hs[t - 1] if t > 0 else h0
        z, r, n, gn = zs[t], rs[t], ns[t], gns[t]
        delta = dhs[t] + carry
        dz = delta * (n - h_prev)
        dan = delta * z * (1.0 - n * n)
        daz = dz * z * (1.0 - z)
        dr = dan * gn
        dar = dr * r * (1.0 - r)
        dg[:, :H] = daz
        dg[:, H:2 * H] = dar
        dg[:, 2 * H:] = dan * r
        dxg[t, :, :H] = daz
        dxg[t, :, H:2 * H] = dar
        dxg[t, :, 2 * H:] = dan
        du += h_prev.T @ dg
        carry = delta * (1.0 - z) + dg @ u.T
    return dxg, carry, du
