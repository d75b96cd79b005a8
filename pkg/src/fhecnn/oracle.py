"""Plain reference CNN used as ground truth."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ShapeMismatch


def conv2d_ref(x: np.ndarray, k: np.ndarray, s: int = 1, pad: int | None = None,
               bias: np.ndarray | None = None) -> np.ndarray:
    """Cross-correlation with zero padding; x is (C,H,W), k is (O,C,f,f)."""
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if x.ndim != 3 or k.ndim != 4 or k.shape[1] != x.shape[0] or k.shape[2] != k.shape[3]:
        raise ShapeMismatch(f"bad conv shapes x{x.shape} k{k.shape}")
    f = k.shape[2]
    pad = (f - 1) // 2 if pad is None else pad
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - f) // s + 1
    wo = (w + 2 * pad - f) // s + 1
    out = np.zeros((k.shape[0], ho, wo))
    for a in range(f):
        for b in range(f):
            win = xp[:, a:a + s * (ho - 1) + 1:s, b:b + s * (wo - 1) + 1:s]
            out += np.tensordot(k[:, :, a, b], win, axes=(1, 0))
    if bias is not None:
        out += np.asarray(bias)[:, None, None]
    return out


def conv2d_loop(x, k, s=1, pad=None):
    """Brute-force loop version; slow, only for cross-checking."""
    f = k.shape[2]
    pad = (f - 1) // 2 if pad is None else pad
    c, h, w = x.shape
    ho = (h + 2 * pad - f) // s + 1
    wo = (w + 2 * pad - f) // s + 1
    out = np.zeros((k.shape[0], ho, wo))
    for o in range(k.shape[0]):
        for y in range(ho):
            for xx in range(wo):
                acc = 0.0
                for i in range(c):
                    for a in range(f):
                        for b in range(f):
                            yy, xi = y * s + a - pad, xx * s + b - pad
                            if 0 <= yy < h and 0 <= xi < w:
                                acc += x[i, yy, xi] * k[o, i, a, b]
                out[o, y, xx] = acc
    return out


def square(x):
    return np.asarray(x) ** 2


def avg_pool(x, size: int):
    c, h, w = x.shape
    return x[:, :h - h % size, :w - w % size].reshape(c, h // size, size, w // size, size).mean(axis=(2, 4))


def global_avg_pool(x):
    return x.mean(axis=(1, 2))


def fc(v, wmat, bias=None):
    out = np.asarray(wmat) @ np.asarray(v)
    return out if bias is None else out + bias


def forward_ref(net, weights: dict, x: np.ndarray, trace: list | None = None) -> np.ndarray:
    """Forward pass of a :class:`fhecnn.network.NetworkSpec`.

    ``weights`` maps layer names to (kernel, bias) pairs.  When ``trace`` is a
    list, per-layer activations are appended as (name, tensor).
    """
    def rec(name, t):
        if trace is not None:
            trace.append((name, t))
        return t

    st = net.stem
    k, b = weights[st.name]
    if st.kind == "im2col":
        y = conv2d_ref(x, k, st.stride, st.pad, b)
        y = avg_pool(y, st.pool)
    else:
        y = conv2d_ref(x, k, st.stride, st.pad, b)
    y = rec(st.name, square(y))
    for blk in net.blocks:
        k1, b1 = weights[blk.conv1.name]
        k2, b2 = weights[blk.conv2.name]
        h = square(conv2d_ref(y, k1, blk.conv1.s, None, b1))
        h = conv2d_ref(h, k2, 1, None, b2)
        if blk.shortcut is not None:
            ks, bs = weights[blk.shortcut.name]
            h = h + conv2d_ref(y, ks, blk.shortcut.s, 0, bs)
        else:
            h = h + y
        y = rec(blk.name, h)
    if net.head is None:
        return y
    wf, bf = weights[net.head.name]
    return rec(net.head.name, fc(global_avg_pool(y), wf, bf))


def save_tensors(path, tensors: dict):
    """Write float64 little-endian blobs plus a JSON shape manifest."""
    path = Path(path)
    manifest, offset = {}, 0
    with open(path.with_suffix(".bin"), "wb") as fh:
        for name, arr in tensors.items():
            a = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(a.tobytes())
            manifest[name] = {"shape": list(a.shape), "offset": offset}
            offset += a.size
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1))


def load_tensors(path) -> dict:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    flat = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
    out = {}
    for name, meta in manifest.items():
        n = int(np.prod(meta["shape"])) if meta["shape"] else 1
        o = meta["offset"]
        if o + n > flat.size:
            raise ShapeMismatch(f"tensor {name} runs past end of blob")
        out[name] = flat[o:o + n].reshape(meta["shape"])
    return out
