"""Shared oracles for the test suite."""
from __future__ import annotations

import numpy as np

from vitgan.tensor import Tape, Tensor, backward

H = 1e-5
ATOL = 1e-4
RTOL = 1e-3


def leaf(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


def gradcheck(fn, tensors, max_coords: int | None = None, seed: int = 0,
              h: float = H, atol: float = ATOL, rtol: float = RTOL) -> float:
    """Compare autodiff against central differences of the scalar ``fn()``.

    ``tensors`` are float64 leaves that ``fn`` reads.  With ``max_coords``
    only that many randomly chosen coordinates per tensor are probed.
    Returns the worst |autodiff - numeric| seen; raises AssertionError on
    a coordinate outside max(atol, rtol * |value|).
    """
    with Tape() as tape:
        loss = fn()
    grads = backward(loss, tape)
    pick = np.random.default_rng(seed)
    worst = 0.0
    for t in tensors:
        assert t.dtype == np.float64, "gradcheck needs float64 tensors"
        g = grads.get(t, np.zeros_like(t.data))
        flat = t.data.reshape(-1)
        n = flat.size
        coords = range(n) if max_coords is None or n <= max_coords else \
            pick.choice(n, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            ana = g.reshape(-1)[i]
            err = abs(ana - num)
            worst = max(worst, err)
            assert err <= max(atol, rtol * max(abs(num), abs(ana))), (
                f"coord {i} of tensor {t.shape}: autodiff {ana} vs numeric {num}")
    return worst


def weighted_sum(out: Tensor, seed: int = 99) -> Tensor:
    """sum(out * w) for a fixed random w, so every output element matters."""
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return (out * Tensor(w)).sum()


def conv2d_oracle(x, w, b=None, stride=1, padding=0):
    """Direct loop cross-correlation."""
    bsz, cin, hh, ww = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (hh + 2 * padding - kh) // stride + 1
    ow = (ww + 2 * padding - kw) // stride + 1
    out = np.zeros((bsz, cout, oh, ow))
    for n in range(bsz):
        for o in range(cout):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[n, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[n, o, i, j] = acc + (0.0 if b is None else b[o])
    return out


def softmax_rows(s):
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def attention_oracle(q, k, v):
    """Per-query direct summation: out_i = sum_j softmax_j(q_i.k_j / sqrt(d)) v_j."""
    b, t, d = q.shape
    out = np.zeros_like(v, dtype=np.float64)
    for n in range(b):
        for i in range(t):
            s = np.array([sum(q[n, i, c] * k[n, j, c] for c in range(d)) for j in range(t)])
            s = s / np.sqrt(d)
            p = np.exp(s - s.max())
            p /= p.sum()
            for j in range(t):
                out[n, i] += p[j] * v[n, j]
    return out


def mha_oracle(x, mha):
    """Slice every projection per head, attend per head, concatenate, project."""
    h, dk = mha.cfg.num_heads, mha.cfg.head_dim

    def proj(layer):
        return x @ layer.weight.data + layer.bias.data

    q, k, v = proj(mha.q_proj), proj(mha.k_proj), proj(mha.v_proj)
    heads = [attention_oracle(q[..., i * dk:(i + 1) * dk], k[..., i * dk:(i + 1) * dk],
                              v[..., i * dk:(i + 1) * dk]) for i in range(h)]
    cat = np.concatenate(heads, axis=-1)
    return cat @ mha.out_proj.weight.data + mha.out_proj.bias.data


def ssim_oracle(x, y, data_range=2.0, size=11, sigma=1.5):
    """Per-window double loop over positions; single channel."""
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-ax ** 2 / (2 * sigma ** 2))
    w = np.outer(g, g)
    w /= w.sum()
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    hh, ww = x.shape
    vals = []
    for i in range(hh - size + 1):
        for j in range(ww - size + 1):
            px, py = x[i:i + size, j:j + size], y[i:i + size, j:j + size]
            mx, my = (w * px).sum(), (w * py).sum()
            vx = (w * (px - mx) ** 2).sum()
            vy = (w * (py - my) ** 2).sum()
            cxy = (w * (px - mx) * (py - my)).sum()
            vals.append((2 * mx * my + c1) * (2 * cxy + c2)
                        / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))

