"""Packed homomorphic convolutions on the mock backend.

All routines take ciphertexts laid out by :class:`fhecnn.layout.SlotLayout`
and charge every rotation with a phase tag (Slide, RaS, RaS_g, IR, IR_g).
Weight plaintexts are built lazily so trace mode never touches slot data.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import ceil

import numpy as np

from .errors import (CapacityExceeded, FormatMismatch, NonPowerOfTwoGroups, ShapeMismatch,
                     UnsupportedTransition)
from .heslot import Backend, CipherSim, PlainSim
from .layout import GapConfig, SlotLayout, log2, next_layout, pow2ceil


@dataclass
class Packed:
    cts: list
    layout: SlotLayout

    @property
    def level(self) -> int:
        return min(c.level for c in self.cts)


@dataclass(frozen=True)
class ConvLayerSpec:
    name: str
    c_i: int
    c_o: int
    w_i: int
    f: int = 3
    s: int = 1
    pad: int | None = None
    algo: str = "CAConv"
    h_i: int | None = None

    @property
    def w_o(self) -> int:
        return self.w_i // self.s

    @property
    def padding(self) -> int:
        return (self.f - 1) // 2 if self.pad is None else self.pad

    @property
    def weight_slots(self) -> int:
        h = self.w_i if self.h_i is None else self.h_i
        return self.w_i * h * self.f * self.f * self.c_i * self.c_o


def encrypt_tensor(be: Backend, lay: SlotLayout, x, level: int | None = None) -> Packed:
    if be.full:
        vecs = lay.pack(x)
    else:
        vecs = [None] * lay.n_ct
    lv = be.params.usable_level if level is None else level
    cts = [be._new_ct(v, lv) for v in vecs]
    return Packed(cts, lay)


def decrypt_tensor(be: Backend, p: Packed) -> np.ndarray:
    return p.layout.unpack([be.decrypt(c) for c in p.cts])


# ---------------------------------------------------------------------------
# geometry helpers

def taps(lay: SlotLayout, f: int) -> list:
    """(j1, j2, r) with r the left-rotation that brings pixel (y+j1-p, x+j2-p) to (y, x)."""
    ystep, xstep = lay.geom.pixel_steps(lay.stage)
    p = (f - 1) // 2
    return [(j1, j2, (j1 - p) * ystep + (j2 - p) * xstep) for j1 in range(f) for j2 in range(f)]


@lru_cache(maxsize=256)
def _tap_ok(geom, stage, f, s):
    """Per tap: output position valid and its tap neighbour inside the image."""
    from .layout import _slot_index
    ix = _slot_index(geom, stage, (), tuple(range(len(geom.bit_strides(stage)))))
    h, w = geom.hw(stage)
    p = (f - 1) // 2
    out = ix.valid.copy()
    if s == 2:
        out &= (ix.y % 2 == 0) & (ix.x % 2 == 0)
    res = []
    for j1 in range(f):
        for j2 in range(f):
            yy, xx = ix.y + j1 - p, ix.x + j2 - p
            res.append(out & (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w))
    return res


def out_positions(lay: SlotLayout, s: int) -> np.ndarray:
    ix = lay.idx
    ok = ix.valid.copy()
    if s == 2:
        ok &= (ix.y % 2 == 0) & (ix.x % 2 == 0)
    return ok


def _weights(K, o_map, i_map, tap_ok, j1, j2):
    ok = tap_ok & (o_map >= 0) & (o_map < K.shape[0]) & (i_map >= 0) & (i_map < K.shape[1])
    v = np.zeros(o_map.shape[0])
    v[ok] = K[o_map[ok], i_map[ok], j1, j2]
    return v


# ---------------------------------------------------------------------------
# primitive phases

def slide(be: Backend, ct: CipherSim, tp: list) -> list:
    return [ct if r == 0 else be.crot(ct, r, "Slide") for _, _, r in tp]


def ras(be: Backend, ct: CipherSim, groups: int, stride_slots: int, tag: str = "RaS") -> CipherSim:
    """Rotate-and-sum over ``groups`` groups spaced ``stride_slots`` apart."""
    if groups < 1 or groups & (groups - 1):
        raise NonPowerOfTwoGroups(f"groups={groups}")
    for j in range(log2(groups)):
        ct = be.add_ct(ct, be.crot(ct, stride_slots << j, tag))
    return ct


def ras_bits(be, ct, lay: SlotLayout, bits: tuple, tag: str) -> CipherSim:
    st = lay.geom.bit_strides(lay.stage)
    for b in bits:
        ct = be.add_ct(ct, be.crot(ct, st[b], tag))
    return ct


def replicate(be, ct, strides: list, tag: str = "IR_g") -> CipherSim:
    """Copy the zero-offset entry to every combination of ``strides``."""
    for s in strides:
        ct = be.add_ct(ct, be.crot(ct, -s, tag))
    return ct


def ir(be: Backend, ct: CipherSim, lay_from: SlotLayout, lay_to: SlotLayout) -> CipherSim:
    """Fill the duplicate bits of ``lay_to`` from an entry that only holds
    the zero-offset copy; identical layouts cost nothing."""
    if lay_from == lay_to:
        return ct
    if (lay_from.geom, lay_from.stage) != (lay_to.geom, lay_to.stage):
        raise UnsupportedTransition("ir only rearranges within one stage")
    st = lay_to.geom.bit_strides(lay_to.stage)
    bits = lay_to.mbits if lay_to.kind == "RA" else lay_to.dbits
    return replicate(be, ct, [st[b] for b in bits])


def mask_pt(be, values_fn, level) -> PlainSim:
    return be.encode(values_fn, level)


def masked(be, ct, fn):
    return be.mul_pt(ct, be.encode(fn, ct.level))


def square_activation(be: Backend, ct: CipherSim) -> CipherSim:
    return be.square(ct)


def add_bias(be, outs: list, lay: SlotLayout, bias, unreplicated=False, first: int = 0) -> list:
    if bias is None:
        return outs
    res = []
    for t, ct in enumerate(outs, first):
        def fn(t=t):
            ch = lay.channel_map(t)
            ok = ch >= 0
            if unreplicated:
                ok &= lay.canonical()
            v = np.zeros(ch.shape[0])
            v[ok] = np.asarray(bias)[ch[ok]]
            return v
        res.append(be.add_pt(ct, be.encode(fn, ct.level)))
    return res


# ---------------------------------------------------------------------------
# single-channel convolutions

def siso(be: Backend, ct: CipherSim, lay: SlotLayout, kernel, s: int = 1) -> CipherSim:
    """One channel through an f x f filter: f^2-1 Slide rotations."""
    kernel = np.asarray(kernel, dtype=np.float64)
    f = kernel.shape[0]
    tp = taps(lay, f)
    ok = _tap_ok(lay.geom, lay.stage, f, s)
    have = lay.channel_map(0) >= 0 if be.full else None
    acc = None
    for t, (src, (j1, j2, r)) in enumerate(zip(slide(be, ct, tp), tp)):
        pt = be.encode(lambda t=t, j1=j1, j2=j2: np.where(ok[t] & have, kernel[j1, j2], 0.0), ct.level)
        prod = be.mul_pt(src, pt)
        acc = prod if acc is None else be.add_ct(acc, prod)
    return be.rescale(acc)


def siso_reordered(be: Backend, cts: list, lay: SlotLayout, kernels, s: int = 1) -> CipherSim:
    """Sum of per-input SISO outputs with one shared set of f^2-1 rotations.

    The filters are pre-rotated so that multiplication happens before the
    slide: W' = roll(W, r) gives rot(W' * x, r) == W * rot(x, r).
    """
    kernels = [np.asarray(k, dtype=np.float64) for k in kernels]
    f = kernels[0].shape[0]
    tp = taps(lay, f)
    ok = _tap_ok(lay.geom, lay.stage, f, s)
    have = lay.channel_map(0) >= 0 if be.full else None
    out = None
    for t, (j1, j2, r) in enumerate(tp):
        acc = None
        for k, ct in enumerate(cts):
            def fn(k=k, t=t, j1=j1, j2=j2, r=r):
                return np.roll(np.where(ok[t] & have, kernels[k][j1, j2], 0.0), r)
            prod = be.mul_pt(ct, be.encode(fn, ct.level))
            acc = prod if acc is None else be.add_ct(acc, prod)
        if r:
            acc = be.crot(acc, r, "Slide")
        out = acc if out is None else be.add_ct(out, acc)
    return be.rescale(out)


# ---------------------------------------------------------------------------
# channel-aligned convolution: CA -> RA

def _ca_products(be, x: Packed, K, s, i_kind_map, o_of_slot, n_prod, tag_ras=True):
    """Shared first half of CA-type convolutions.

    Returns rescaled per-product ciphertexts after the block and M-bit
    rotate-and-sum.  ``o_of_slot(p)`` gives the output channel map.
    """
    lay = x.layout
    f = K.shape[2]
    tp = taps(lay, f)
    ok = _tap_ok(lay.geom, lay.stage, f, s)
    slides = [slide(be, ct, tp) for ct in x.cts]
    prods = []
    for p in range(n_prod):
        acc = None
        for k, sl in enumerate(slides):
            for t, (j1, j2, _) in enumerate(tp):
                def fn(p=p, k=k, t=t, j1=j1, j2=j2):
                    return _weights(K, o_of_slot(p), i_kind_map(k), ok[t], j1, j2)
                prod = be.mul_pt(sl[t], be.encode(fn, sl[t].level))
                acc = prod if acc is None else be.add_ct(acc, prod)
        prods.append(be.rescale(acc))
    return prods


def caconv(be: Backend, x: Packed, K, bias=None, s: int = 1,
           gap_out: GapConfig | None = None) -> Packed:
    """CA input -> RA output.  With s=2 the output moves to the next stage."""
    lay = x.layout
    if lay.kind != "CA":
        raise FormatMismatch("caconv needs a CA input")
    K = np.asarray(K) if be.full else K
    c_o = K.shape[0]
    d1 = lay.d
    n_prod = ceil(c_o / d1)
    ix = lay.idx

    def o_map(p):
        return p * d1 + ix.delta

    prods = _ca_products(be, x, K, s, lay.channel_map, o_map, n_prod)
    pos = out_positions(lay, s) if be.full else None
    outs = []
    for p, ct in enumerate(prods):
        ct = ras(be, ct, lay.geom.nblk, lay.geom.block, "RaS")
        ct = ras_bits(be, ct, lay, lay.mbits, "RaS_g")
        fn = lambda p=p: (pos & (ix.mu == 0) & (o_map(p) < c_o)).astype(np.float64)
        outs.append(be.rescale(masked(be, ct, fn)))
    if s == 1:
        out_lay = lay.with_kind("RA", c_o)
    else:
        out_lay = next_layout(lay, gap_out, c_o, "RA")
        a = out_lay.d // d1
        abits = out_lay.dbits[len(lay.dbits):]
        merged = []
        for q in range(ceil(c_o / out_lay.d)):
            acc = None
            for al in range(a):
                p = q * a + al
                if p >= len(outs):
                    break
                v = outs[p]
                off = out_lay.bit_offset(abits, al)
                if off:
                    v = be.crot(v, -off, "IR_g")
                acc = v if acc is None else be.add_ct(acc, v)
            merged.append(acc)
        outs = merged
    st = out_lay.geom.bit_strides(out_lay.stage)
    outs = [replicate(be, ct, [st[b] for b in out_lay.mbits]) for ct in outs]
    outs = add_bias(be, outs, out_lay, bias)
    return Packed(outs, out_lay)


# ---------------------------------------------------------------------------
# replication-aligned convolution: RA -> CA

def raconv(be: Backend, x: Packed, K, bias=None, variant: str = "reorder",
           pre_add: list | None = None, finish: bool = True) -> Packed:
    """RA input -> CA output at the same stage.

    ``pre_add`` ciphertexts (CA layout holding only the zero duplicate) are
    added before the duplicate bits are filled.  With ``finish=False`` the
    unreplicated outputs are returned.
    """
    lay = x.layout
    if lay.kind != "RA":
        raise FormatMismatch("raconv needs an RA input")
    if variant not in ("reorder", "naive"):
        raise ValueError(variant)
    c_o = K.shape[0]
    f = K.shape[2]
    out_lay = lay.with_kind("CA", c_o)
    tp = taps(lay, f)
    ok = _tap_ok(lay.geom, lay.stage, f, 1)
    ix = lay.idx

    def i_map(k):
        return k * lay.d + ix.delta

    slides = [slide(be, ct, tp) for ct in x.cts] if variant == "naive" else None
    outs = []
    for q in range(out_lay.n_ct):
        total = None
        for t, (j1, j2, r) in enumerate(tp):
            acc = None
            for k, ct in enumerate(x.cts):
                if variant == "reorder":
                    def fn(q=q, k=k, t=t, j1=j1, j2=j2, r=r):
                        return np.roll(_weights(K, out_lay.channel_map(q), i_map(k), ok[t], j1, j2), r)
                    prod = be.mul_pt(ct, be.encode(fn, ct.level))
                else:
                    def fn(q=q, k=k, t=t, j1=j1, j2=j2):
                        return _weights(K, out_lay.channel_map(q), i_map(k), ok[t], j1, j2)
                    prod = be.mul_pt(slides[k][t], be.encode(fn, ct.level))
                acc = prod if acc is None else be.add_ct(acc, prod)
            if variant == "reorder" and r:
                acc = be.crot(acc, r, "Slide")
            total = acc if total is None else be.add_ct(total, acc)
        outs.append(be.rescale(total))
    outs = finish_raconv(be, outs, out_lay, bias, pre_add, finish)
    return Packed(outs, out_lay)


def finish_raconv(be, outs, out_lay, bias, pre_add=None, finish=True):
    ix = out_lay.idx
    res = []
    for q, ct in enumerate(outs):
        ct = ras_bits(be, ct, out_lay, out_lay.dbits, "RaS_g")
        fn = lambda q=q: ((ix.delta == 0) & (out_lay.channel_map(q) >= 0)).astype(np.float64)
        res.append(be.rescale(masked(be, ct, fn)))
    if pre_add is not None:
        res = [be.add_ct(c, be.level_down(p, c.level)) for c, p in zip(res, pre_add)]
    if not finish:
        return res
    st = out_lay.geom.bit_strides(out_lay.stage)
    res = [replicate(be, ct, [st[b] for b in out_lay.dbits]) for ct in res]
    return add_bias(be, res, out_lay, bias)


# ---------------------------------------------------------------------------
# pointwise stride-2 shortcut into the next-stage CA layout

def pconv_moves(lay: SlotLayout, out_lay: SlotLayout, c_o: int) -> list:
    """Per output ciphertext: (product, block, delta, shift) for each channel."""
    res = []
    for q in range(out_lay.n_ct):
        moves = []
        for l in range(out_lay.per_ct):
            o = q * out_lay.per_ct + l
            if o >= c_o:
                break
            b, mu2 = divmod(l, out_lay.m)
            p, dl = divmod(o, lay.d)
            moves.append((p, b, dl, out_lay.m_offset(mu2) - lay.d_offset(dl)))
        res.append(moves)
    return res


def pconv_ca(be: Backend, x: Packed, K, bias, gap_out: GapConfig) -> Packed:
    """1x1 stride-2 convolution, CA stage k -> CA stage k+1.

    The result holds only the zero duplicate (D bits unfilled); callers add it
    before the main path fills duplicates.  Each output channel is masked out
    of its product and moved to its slot.
    """
    lay = x.layout
    c_o = K.shape[0]
    d1 = lay.d
    ix = lay.idx
    n_prod = ceil(c_o / d1)
    prods = _ca_products(be, x, K, 2, lay.channel_map, lambda p: p * d1 + ix.delta, n_prod)
    prods = [ras_bits(be, ras(be, ct, lay.geom.nblk, lay.geom.block, "RaS"), lay, lay.mbits, "RaS_g")
             for ct in prods]
    out_lay = next_layout(lay, gap_out, c_o, "CA")
    pos = out_positions(lay, 2) if be.full else None
    outs = []
    for moves in pconv_moves(lay, out_lay, c_o):
        acc = None
        for p, b, dl, shift in moves:
            fn = lambda b=b, dl=dl: (pos & (ix.blk == b) & (ix.mu == 0) & (ix.delta == dl)).astype(np.float64)
            v = masked(be, prods[p], fn)
            if shift:
                v = be.crot(v, -shift, "IR")
            acc = v if acc is None else be.add_ct(acc, v)
        outs.append(be.rescale(acc))
    outs = add_bias(be, outs, out_lay, bias, unreplicated=True)
    return Packed(outs, out_lay)


# ---------------------------------------------------------------------------
# multiplexed baseline convolution: MP -> MP

def mp_layout_for(lay: SlotLayout, c_o: int, s: int) -> SlotLayout:
    if s == 1:
        cn = min(lay.geom.nblk, pow2ceil(ceil(c_o / lay.m)))
        return SlotLayout("MP", lay.geom, lay.stage, lay.mbits, (), c_o, cn, lay.geom.nblk // cn)
    return next_layout(lay, GapConfig(4 * lay.m, 1), c_o, "MP")


def mp_moves(lay: SlotLayout, out_lay: SlotLayout, c_o: int) -> list:
    """Per output ciphertext: (product, replica, shift) for each channel."""
    B = lay.geom.block
    res = []
    for q in range(out_lay.n_ct):
        moves = []
        for l in range(out_lay.per_ct):
            o = q * out_lay.per_ct + l
            if o >= c_o:
                break
            b, mu2 = divmod(l, out_lay.m)
            p, rho = divmod(o, lay.reps)
            moves.append((p, rho, b * B + out_lay.m_offset(mu2) - rho * lay.cn * B))
        res.append(moves)
    return res


def mp_conv(be: Backend, x: Packed, K, bias=None, s: int = 1, pre_add=None,
            finish: bool = True, pad: int | None = None) -> Packed:
    """Multiplexed convolution with whole-block input repetition.

    Each product ciphertext yields one valid channel per replica; image
    realignment masks every channel out and moves it into place, then the
    replicas are refilled.
    """
    lay = x.layout
    if lay.kind != "MP":
        raise FormatMismatch("mp_conv needs an MP input")
    c_o = K.shape[0]
    reps, cn1 = lay.reps, lay.cn
    ix = lay.idx
    n_prod = ceil(c_o / reps)

    def o_map(p):
        return p * reps + ix.blk // cn1

    prods = _ca_products(be, x, K, s, lay.channel_map, o_map, n_prod)
    prods = [ras_bits(be, ras(be, ct, cn1, lay.geom.block, "RaS"), lay, lay.mbits, "RaS_g")
             for ct in prods]
    out_lay = mp_layout_for(lay, c_o, s)
    pos = out_positions(lay, s) if be.full else None
    B = lay.geom.block
    outs = []
    for moves in mp_moves(lay, out_lay, c_o):
        acc = None
        for p, rho, shift in moves:
            fn = lambda rho=rho: (pos & (ix.blk == rho * cn1) & (ix.mu == 0)).astype(np.float64)
            v = masked(be, prods[p], fn)
            if shift:
                v = be.crot(v, -shift, "IR")
            acc = v if acc is None else be.add_ct(acc, v)
        outs.append(be.rescale(acc))
    if pre_add is not None:
        outs = [be.add_ct(c, be.level_down(p, c.level)) for c, p in zip(outs, pre_add)]
    if finish:
        step = out_lay.cn * B
        outs = [replicate(be, ct, [step << j for j in range(log2(out_lay.reps))]) for ct in outs]
        outs = add_bias(be, outs, out_lay, bias)
    else:
        outs = add_bias(be, outs, out_lay, bias, unreplicated=True)
    return Packed(outs, out_lay)


def mp_conv_lc(be, x: Packed, K, bias=None, s: int = 1) -> Packed:
    return mp_conv(be, x, K, bias, s)


# ---------------------------------------------------------------------------
# fused CA -> square -> RA block

def fused_block(be: Backend, x: Packed, K1, b1, K2, b2) -> tuple:
    """CAConv, square and reordered RAConv interleaved so that only the CA
    slides and the per-tap RA accumulators stay alive.

    Returns (output before duplicate filling, output layout, stats).
    """
    lay = x.layout
    c_mid, c_o = K1.shape[0], K2.shape[0]
    f = K1.shape[2]
    d = lay.d
    ix = lay.idx
    tp = taps(lay, f)
    ok = _tap_ok(lay.geom, lay.stage, f, 1)
    ra_lay = lay.with_kind("RA", c_mid)
    out_lay = lay.with_kind("CA", c_o)
    st = lay.geom.bit_strides(lay.stage)
    n_ra = ceil(c_mid / d)
    n_out = out_lay.n_ct

    live0 = be.live_count()
    be.reset_peak()
    ct1 = [slide(be, ct, tp) for ct in x.cts]
    ct4 = [[None] * len(tp) for _ in range(n_out)]

    def o_map(p):
        return p * d + ix.delta

    def i_map(k):
        return k * d + ix.delta

    for j in range(n_ra):
        acc = None
        for k, sl in enumerate(ct1):
            for t, (j1, j2, _) in enumerate(tp):
                fn = lambda j=j, k=k, t=t, j1=j1, j2=j2: _weights(K1, o_map(j), lay.channel_map(k), ok[t], j1, j2)
                prod = be.mul_pt(sl[t], be.encode(fn, sl[t].level))
                acc = prod if acc is None else be.add_ct(acc, prod)
        ct3 = be.rescale(acc)
        del acc, prod
        ct3 = ras(be, ct3, lay.geom.nblk, lay.geom.block, "RaS")
        ct3 = ras_bits(be, ct3, lay, lay.mbits, "RaS_g")
        pos = ix.valid if be.full else None
        fn = lambda j=j: (pos & (ix.mu == 0) & (o_map(j) < c_mid)).astype(np.float64)
        ct3 = be.rescale(masked(be, ct3, fn))
        ct3 = replicate(be, ct3, [st[b] for b in lay.mbits])
        ct3 = add_bias(be, [ct3], ra_lay, b1, first=j)[0]
        ct3 = be.square(ct3)
        for l in range(n_out):
            for t, (j1, j2, r) in enumerate(tp):
                fn = lambda l=l, j=j, t=t, j1=j1, j2=j2, r=r: np.roll(
                    _weights(K2, out_lay.channel_map(l), i_map(j), ok[t], j1, j2), r)
                prod = be.mul_pt(ct3, be.encode(fn, ct3.level))
                ct4[l][t] = prod if ct4[l][t] is None else be.add_ct(ct4[l][t], prod)
        del ct3, prod
    del ct1
    outs = []
    for l in range(n_out):
        total = None
        for t, (_, _, r) in enumerate(tp):
            v = ct4[l][t]
            ct4[l][t] = None
            if r:
                v = be.crot(v, r, "Slide")
            total = v if total is None else be.add_ct(total, v)
        outs.append(be.rescale(total))
    stats = {"peak_live": be.ledger.peak_live_ct - live0, "n_ca": len(x.cts), "f2": len(tp)}
    return outs, out_lay, stats


# ---------------------------------------------------------------------------
# segmented weight reuse

def prcr_stride(slot_count: int, segments: int) -> int:
    return slot_count // segments


def apply_prcr_weights(be: Backend, ct: CipherSim, U: PlainSim, segments: int) -> list:
    """Multiply one segment-major ciphertext by all ``segments`` circular
    shifts of a single stored weight plaintext."""
    if segments < 1 or be.slots % segments:
        raise FormatMismatch(f"{segments} segments do not tile {be.slots} slots")
    step = prcr_stride(be.slots, segments)
    out = []
    for tau in range(segments):
        w = U if tau == 0 else be.prot(U, tau * step)
        out.append(be.mul_pt(ct, w))
    return out


def _prcr_sources(be, ct, lay, f):
    """Rotated copies of one input for every tap, split into in-segment and
    cross-segment branches: (j1, j2, branch, ciphertext)."""
    p = (f - 1) // 2
    S, hs, w, frag = lay.segments, lay.hs, lay.w, lay.frag
    border = S > 1 and p > 0
    ix = lay.index() if be.full else None
    base, pulls = ct, {}
    if border:
        lv = ct.level - 1
        base = be.level_down(ct, lv)
        # rows moving down come from segments 0..S-2, rows moving up from 1..S-1
        pulls[-1] = be.rescale(masked(be, ct, lambda: (ix["seg"] <= S - 2).astype(np.float64)))
        pulls[1] = be.rescale(masked(be, ct, lambda: (ix["seg"] >= 1).astype(np.float64)))
    out = []
    for j1 in range(f):
        for j2 in range(f):
            dy, dx = j1 - p, j2 - p
            r = dy * w + dx
            out.append((j1, j2, "in", base if r == 0 else be.crot(base, r, "Slide")))
            if border and dy:
                sgn = -1 if dy < 0 else 1
                rb = r + sgn * (frag - hs * w)
                out.append((j1, j2, "cross", be.crot(pulls[sgn], rb, "Slide")))
    return out


def _prcr_weight(lay, K, g, t, j1, j2, branch):
    """Stored plaintext for output group g: segment s uses channel g*S + s."""
    ix = lay.index()
    S, hs, w = lay.segments, lay.hs, lay.w
    p = (K.shape[2] - 1) // 2
    dy, dx = j1 - p, j2 - p
    o = g * S + ix["seg"]
    i = t * lay.cn + ix["blk"]
    rr, cc = ix["row"] + dy, ix["col"] + dx
    inside = (rr >= 0) & (rr < hs)
    ok = ix["valid"] & (o < K.shape[0]) & (i >= 0) & (i < K.shape[1]) & (cc >= 0) & (cc < w)
    ok &= inside if branch == "in" else ~inside
    v = np.zeros(lay.slot_count)
    v[ok] = K[o[ok], i[ok], j1, j2]
    return v


def prcr_conv(be: Backend, x: Packed, K, bias=None, reuse: bool = True) -> tuple:
    """Stride-1 convolution on a row-segmented layout.

    One weight plaintext per (output group of |S| channels, input ciphertext,
    tap, branch) is stored; with ``reuse`` its |S| circular segment shifts are
    produced by PRot, otherwise each shift is encoded separately.  Returns
    (output, stats) where stats counts the stored weight plaintexts.
    """
    lay = x.layout
    c_o, c_i, f, _ = K.shape
    S, hs, w = lay.segments, lay.hs, lay.w
    if (f - 1) // 2 > hs:
        raise CapacityExceeded("filter halo exceeds a segment")
    if c_i != lay.channels:
        raise ShapeMismatch(f"kernel expects {c_i} channels, layout has {lay.channels}")
    out_lay = lay.with_channels(c_o)
    ix = lay.index() if be.full else None
    sources = [_prcr_sources(be, ct, lay, f) for ct in x.cts]
    stored = 0
    groups = ceil(c_o / S)
    chan = {}
    for g in range(groups):
        acc = [None] * S
        for t, srcs in enumerate(sources):
            for j1, j2, br, src in srcs:
                U = lambda g=g, t=t, j1=j1, j2=j2, br=br: _prcr_weight(lay, K, g, t, j1, j2, br)
                if reuse:
                    prods = apply_prcr_weights(be, src, be.encode(U, src.level), S)
                    stored += 1
                else:
                    prods = [be.mul_pt(src, be.encode(lambda U=U, tau=tau: np.roll(U(), -tau * lay.frag), src.level))
                             for tau in range(S)]
                    stored += S
                acc = [p if a is None else be.add_ct(a, p) for a, p in zip(acc, prods)]
        acc = [ras(be, be.rescale(a), lay.cn, hs * w, "RaS") for a in acc]
        for k in range(S):
            o = g * S + k
            if o >= c_o:
                break
            piece = None
            for sg in range(S):
                fn = lambda sg=sg: ((ix["seg"] == sg) & (ix["blk"] == 0)).astype(np.float64)
                v = masked(be, acc[(k - sg) % S], fn)
                piece = v if piece is None else be.add_ct(piece, v)
            b = o % lay.cn
            chan[o] = be.crot(piece, -b * hs * w, "IR") if b else piece
    outs = []
    for q in range(out_lay.n_ct):
        os_ = [o for o in range(q * lay.cn, min((q + 1) * lay.cn, c_o))]
        outs.append(be.rescale(be.add_many([chan[o] for o in os_])))
    if bias is not None:
        def bfn(q):
            v = np.zeros(lay.slot_count)
            o = q * lay.cn + ix["blk"]
            ok = ix["valid"] & (o < c_o)
            v[ok] = np.asarray(bias)[o[ok]]
            return v
        outs = [be.add_pt(c, be.encode(lambda q=q: bfn(q), c.level)) for q, c in enumerate(outs)]
    return Packed(outs, out_lay), {"stored_pt": stored, "pt_slots": stored * lay.slot_count}
