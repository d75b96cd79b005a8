"""Slot layouts: abstract dimension formats and the physical gap-cell layout.

Two levels live here.  :class:`DataFormat` is an ordered, row-major list of
named dimensions, used for the format grammar, multiplexed packing and
segmented (PRCR) packing.  :class:`SlotLayout` is the physical layout the
convolution engine runs on: images sit on a fixed power-of-two grid, and each
stride-2 step turns one x bit and one y bit of the grid into cell bits that
either hold distinct channels (M bits) or duplicates (D bits).
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import cached_property
from math import ceil, isqrt

import numpy as np

from .errors import (CapacityExceeded, FormatMismatch, GapMismatch,
                     IndivisibleHeight, PlanViolation, ShapeMismatch)


def log2(n: int) -> int:
    if n < 1 or n & (n - 1):
        raise ValueError(f"{n} is not a power of two")
    return n.bit_length() - 1


def pow2ceil(n: int) -> int:
    return 1 << max(0, (n - 1).bit_length())


# ---------------------------------------------------------------------------
# abstract formats

CHANNEL_DIMS = ("C_a", "C_g", "C")
REPLICA_DIMS = ("R_a", "R_g", "R")
DIM_NAMES = CHANNEL_DIMS + REPLICA_DIMS + ("S", "H", "H'", "W")
_TOKENS = {"CA": "C_a", "RA": "R_a", "Ca": "C_a", "Ra": "R_a", "Cg": "C_g", "Rg": "R_g",
           "C": "C", "R": "R", "S": "S", "H": "H", "H'": "H'", "Hs": "H'", "W": "W"}
_SHORT = {"C_a": "Ca", "R_a": "Ra", "C_g": "Cg", "R_g": "Rg", "H'": "Hs"}


@dataclass(frozen=True)
class DataFormat:
    dims: tuple  # ((name, size), ...), outermost first

    def __post_init__(self):
        for name, size in self.dims:
            if name not in DIM_NAMES:
                raise FormatMismatch(f"unknown dimension {name!r}")
            if size < 1:
                raise FormatMismatch(f"dimension {name} has size {size}")
            if name in ("R_g", "C_g") and size & (size - 1):
                raise GapMismatch(f"gap dimension {name} must be a power of two")

    @property
    def size(self) -> int:
        return int(np.prod([s for _, s in self.dims]))

    def get(self, name: str, default: int = 1) -> int:
        for n, s in self.dims:
            if n == name:
                return s
        return default

    @property
    def channels(self) -> int:
        return int(np.prod([s for n, s in self.dims if n in CHANNEL_DIMS]))

    @property
    def height(self) -> int:
        return self.get("S") * self.get("H'") if self.get("H'", 0) else self.get("H")

    def to_string(self) -> str:
        return "".join(f"{_SHORT.get(n, n)}[{s}]" for n, s in self.dims)

    @classmethod
    def parse(cls, text: str) -> "DataFormat":
        """Grammar: ``token[size]`` repeated; ``Ca[c=16]`` is accepted too."""
        dims = []
        pos = 0
        for m in re.finditer(r"\s*([A-Za-z']+)\[(?:c=)?(\d+)\]", text):
            if m.start() != pos:
                break
            tok = m.group(1)
            if tok not in _TOKENS:
                raise FormatMismatch(f"unknown token {tok!r}")
            dims.append((_TOKENS[tok], int(m.group(2))))
            pos = m.end()
        if pos != len(text.rstrip()) or not dims:
            raise FormatMismatch(f"cannot parse format {text!r}")
        return cls(tuple(dims))

    # row-major index arithmetic
    def _coords(self):
        shape = [s for _, s in self.dims]
        return np.indices(shape).reshape(len(shape), -1)

    def _logical(self):
        """Map each flattened position to (channel, row, col)."""
        co = self._coords()
        ch = np.zeros(co.shape[1], dtype=np.int64)
        row = np.zeros_like(ch)
        col = np.zeros_like(ch)
        hs = self.get("H'", 0)
        for (name, size), c in zip(self.dims, co):
            if name in CHANNEL_DIMS:
                ch = ch * size + c
            elif name == "S":
                row += c * hs
            elif name in ("H", "H'"):
                row += c
            elif name == "W":
                col = c
        return ch, row, col

    def is_canonical(self):
        """True for the first copy along every replica dim."""
        co = self._coords()
        keep = np.ones(co.shape[1], dtype=bool)
        for (name, _), c in zip(self.dims, co):
            if name in REPLICA_DIMS:
                keep &= c == 0
        return keep


def pack(tensor, fmt: DataFormat, slot_count: int) -> np.ndarray:
    t = np.asarray(tensor, dtype=np.float64)
    if t.ndim == 2:
        t = t[None]
    if fmt.size > slot_count:
        raise CapacityExceeded(f"format needs {fmt.size} slots > {slot_count}")
    ch, row, col = fmt._logical()
    if t.shape != (fmt.channels, fmt.height, fmt.get("W")):
        raise ShapeMismatch(f"tensor {t.shape} does not fit {fmt.to_string()}")
    out = np.zeros(slot_count)
    out[:fmt.size] = t[ch, row, col]
    return out


def unpack(vec: np.ndarray, fmt: DataFormat) -> np.ndarray:
    vec = np.asarray(vec)
    if vec.size < fmt.size:
        raise ShapeMismatch("vector shorter than format")
    ch, row, col = fmt._logical()
    keep = fmt.is_canonical()
    out = np.zeros((fmt.channels, fmt.height, fmt.get("W")))
    out[ch[keep], row[keep], col[keep]] = vec[:fmt.size][keep]
    return out


def multiplexed_pack(tensor, m: int) -> np.ndarray:
    """Interleave m = g*g channels of (h, w) into one (g*h, g*w) image."""
    t = np.asarray(tensor, dtype=np.float64)
    g = isqrt(m)
    if g * g != m or t.shape[0] != m:
        raise GapMismatch(f"need a square channel count, got m={m}, C={t.shape[0]}")
    c, h, w = t.shape
    return t.reshape(g, g, h, w).transpose(2, 0, 3, 1).reshape(g * h, g * w)


def multiplexed_unpack(img, m: int) -> np.ndarray:
    g = isqrt(m)
    hh, ww = img.shape
    return np.asarray(img).reshape(hh // g, g, ww // g, g).transpose(1, 3, 0, 2).reshape(m, hh // g, ww // g)


def prcr_format(fmt: DataFormat, segments: int) -> DataFormat:
    """Split the H dimension into ``segments`` row segments."""
    if segments == 1:
        return fmt
    h = fmt.get("H", 0)
    if h == 0 or h % segments:
        raise IndivisibleHeight(f"H={h} not divisible by {segments}")
    dims = []
    for name, size in fmt.dims:
        if name == "H":
            dims += [("S", segments), ("H'", h // segments)]
        else:
            dims.append((name, size))
    return DataFormat(tuple(dims))


# ---------------------------------------------------------------------------
# physical layout

@dataclass(frozen=True)
class GapConfig:
    m: int
    d: int

    def __post_init__(self):
        for v in (self.m, self.d):
            if v < 1 or v & (v - 1):
                raise PlanViolation(f"(m,d)=({self.m},{self.d}) must be powers of two")

    @property
    def cell(self) -> int:
        return self.m * self.d

    def __str__(self):
        return f"({self.m},{self.d})"


@dataclass(frozen=True)
class Geometry:
    """Fixed physical grid shared by every stage of a network."""
    slot_count: int
    hp: int          # padded grid height (power of two)
    wp: int
    h0: int          # true image size at stage 0
    w0: int
    inner: int = 1   # slots per pixel at stage 0

    @property
    def block(self) -> int:
        return self.hp * self.wp * self.inner

    @property
    def nblk(self) -> int:
        return self.slot_count // self.block

    def __post_init__(self):
        for v in (self.hp, self.wp, self.inner):
            log2(v)
        if self.block > self.slot_count:
            raise CapacityExceeded("one image block exceeds the slot count")

    def bit_strides(self, stage: int) -> list:
        """Slot strides of cell bits: inner bits, then (x_j, y_j) per stage."""
        st = [1 << j for j in range(log2(self.inner))]
        for j in range(stage):
            st += [self.inner << j, (self.inner * self.wp) << j]
        return st

    def new_bits(self, stage: int) -> tuple:
        """Cell-bit indices created by the stride-2 step out of ``stage``."""
        base = log2(self.inner) + 2 * stage
        return (base, base + 1)

    def hw(self, stage: int) -> tuple:
        g = 1 << stage
        return ceil(self.h0 / g), ceil(self.w0 / g)

    def pixel_steps(self, stage: int) -> tuple:
        g = 1 << stage
        return g * self.wp * self.inner, g * self.inner


@dataclass(frozen=True)
class SlotLayout:
    """How one tensor is spread over ciphertexts.

    kind CA: channel block b of ct t, M position mu -> channel t*cn*m + b*m + mu,
             duplicated over D bits.
    kind RA: ct t, D position delta -> channel t*d + delta, duplicated over
             every block and M bits.
    kind MP: multiplexed layout with whole-block repetition: blocks are
             grouped as (replica, channel block), no D bits.
    """
    kind: str
    geom: Geometry
    stage: int
    mbits: tuple
    dbits: tuple
    channels: int
    cn: int
    reps: int = 1

    def __post_init__(self):
        ncell = log2(self.geom.inner) + 2 * self.stage
        used = sorted(self.mbits + self.dbits)
        if used != list(range(ncell)):
            raise GapMismatch(f"cell bits {used} do not cover {ncell} bits")
        if self.kind not in ("CA", "RA", "MP"):
            raise FormatMismatch(self.kind)
        if self.kind == "MP" and self.dbits:
            raise FormatMismatch("MP layout has no duplicate bits")
        if self.kind != "RA" and self.cn * self.reps > self.geom.nblk:
            raise CapacityExceeded("too many blocks")

    @property
    def m(self) -> int:
        return 1 << len(self.mbits)

    @property
    def d(self) -> int:
        return 1 << len(self.dbits)

    @property
    def per_ct(self) -> int:
        if self.kind == "RA":
            return self.d
        return self.cn * self.m

    @property
    def n_ct(self) -> int:
        return ceil(self.channels / self.per_ct)

    @property
    def hw(self):
        return self.geom.hw(self.stage)

    def with_kind(self, kind: str, channels: int | None = None) -> "SlotLayout":
        return SlotLayout(kind, self.geom, self.stage, self.mbits, self.dbits,
                          self.channels if channels is None else channels,
                          self.cn, self.reps)

    def to_string(self) -> str:
        h, w = self.hw
        s = f"{self.kind}[c={self.channels}]H[{h}]W[{w}]Rg[{self.d}]Cg[{self.m}]"
        if self.kind == "MP" and self.reps > 1:
            s = f"R[{self.reps}]" + s
        return s

    def data_format(self) -> DataFormat:
        h, w = self.hw
        if self.kind == "RA":
            dims = [("R_a", self.geom.nblk), ("H", h), ("W", w), ("C_g", self.d), ("R_g", self.m)]
        else:
            dims = [("C_a", self.cn), ("H", h), ("W", w), ("R_g", self.d), ("C_g", self.m)]
            if self.reps > 1:
                dims.insert(0, ("R", self.reps))
        return DataFormat(tuple(dims))

    # -- per-slot index arrays ------------------------------------------------
    def bit_offset(self, bits: tuple, value: int) -> int:
        st = self.geom.bit_strides(self.stage)
        return sum(st[b] for i, b in enumerate(bits) if value >> i & 1)

    def m_offset(self, mu: int) -> int:
        return self.bit_offset(self.mbits, mu)

    def d_offset(self, delta: int) -> int:
        return self.bit_offset(self.dbits, delta)

    @cached_property
    def idx(self) -> "SlotIndex":
        return _slot_index(self.geom, self.stage, self.mbits, self.dbits)

    def channel_map(self, t: int) -> np.ndarray:
        """Channel held by each slot of ct ``t`` (-1 where none)."""
        ix = self.idx
        if self.kind == "RA":
            ch = t * self.d + ix.delta
        elif self.kind == "CA":
            ch = np.where(ix.blk < self.cn, t * self.per_ct + ix.blk * self.m + ix.mu, -1)
        else:
            ch = t * self.per_ct + (ix.blk % self.cn) * self.m + ix.mu
        ok = ix.valid & (ch >= 0) & (ch < self.channels)
        return np.where(ok, ch, -1)

    def canonical(self) -> np.ndarray:
        """Slots that hold the reference copy of a value."""
        ix = self.idx
        if self.kind == "RA":
            return (ix.blk == 0) & (ix.mu == 0)
        if self.kind == "CA":
            return ix.delta == 0
        return ix.blk < self.cn

    def pack(self, x: np.ndarray) -> list:
        x = np.asarray(x, dtype=np.float64)
        h, w = self.hw
        if x.shape != (self.channels, h, w):
            raise ShapeMismatch(f"tensor {x.shape} vs layout {(self.channels, h, w)}")
        ix = self.idx
        out = []
        for t in range(self.n_ct):
            ch = self.channel_map(t)
            ok = ch >= 0
            v = np.zeros(self.geom.slot_count)
            v[ok] = x[ch[ok], ix.y[ok], ix.x[ok]]
            out.append(v)
        return out

    def unpack(self, vecs: list) -> np.ndarray:
        h, w = self.hw
        out = np.zeros((self.channels, h, w))
        ix = self.idx
        can = self.canonical()
        for t, v in enumerate(vecs):
            ch = self.channel_map(t)
            ok = (ch >= 0) & can
            out[ch[ok], ix.y[ok], ix.x[ok]] = np.asarray(v)[ok]
        return out

    def valid_mask(self, t: int) -> np.ndarray:
        return (self.channel_map(t) >= 0).astype(np.float64)


@dataclass(frozen=True)
class SlotIndex:
    blk: np.ndarray
    y: np.ndarray
    x: np.ndarray
    mu: np.ndarray
    delta: np.ndarray
    valid: np.ndarray
    bits: np.ndarray   # (ncellbits, slots) 0/1


_INDEX_CACHE: dict = {}


def _slot_index(geom: Geometry, stage: int, mbits: tuple, dbits: tuple) -> SlotIndex:
    key = (geom, stage, mbits, dbits)
    if key in _INDEX_CACHE:
        return _INDEX_CACHE[key]
    s = np.arange(geom.slot_count)
    blk = s // geom.block
    within = s % geom.block
    inner = within % geom.inner
    pix = within // geom.inner
    Y, X = pix // geom.wp, pix % geom.wp
    bits = [(inner >> j) & 1 for j in range(log2(geom.inner))]
    for j in range(stage):
        bits += [(X >> j) & 1, (Y >> j) & 1]
    bits = np.array(bits, dtype=np.int64).reshape(len(bits), geom.slot_count)
    mu = np.zeros(geom.slot_count, dtype=np.int64)
    for i, b in enumerate(mbits):
        mu |= bits[b] << i
    delta = np.zeros(geom.slot_count, dtype=np.int64)
    for i, b in enumerate(dbits):
        delta |= bits[b] << i
    y, x = Y >> stage, X >> stage
    h, w = geom.hw(stage)
    valid = (y < h) & (x < w)
    ix = SlotIndex(blk, y, x, mu, delta, valid, bits)
    _INDEX_CACHE[key] = ix
    return ix


def stage0_layout(kind: str, geom: Geometry, gap: GapConfig, channels: int) -> SlotLayout:
    """Stage-0 layout; the low inner bits are M, the rest D."""
    nin = log2(geom.inner)
    if gap.cell != geom.inner:
        raise GapMismatch(f"m*d={gap.cell} but the grid has {geom.inner} inner slots")
    lm = log2(gap.m)
    mbits = tuple(range(lm))
    dbits = tuple(range(lm, nin))
    if kind == "MP":
        cn = min(geom.nblk, pow2ceil(ceil(channels / gap.m)))
        return SlotLayout("MP", geom, 0, mbits, dbits, channels, cn, geom.nblk // cn)
    return SlotLayout(kind, geom, 0, mbits, dbits, channels, geom.nblk)


def next_layout(lay: SlotLayout, gap2: GapConfig, channels: int, kind: str | None = None) -> SlotLayout:
    """Layout after a stride-2 step; the new x bit joins D first."""
    kind = kind or lay.kind
    if gap2.cell != 4 * lay.m * lay.d:
        raise PlanViolation(f"{gap2} does not quadruple ({lay.m},{lay.d})")
    a = log2(gap2.d) - log2(lay.d)
    if not 0 <= a <= 2:
        raise PlanViolation(f"transition ({lay.m},{lay.d})->{gap2} is not reachable")
    nx, ny = lay.geom.new_bits(lay.stage)
    newd = (nx, ny)[:a]
    newm = (nx, ny)[a:]
    mbits, dbits = lay.mbits + newm, lay.dbits + newd
    if kind == "MP":
        cn = min(lay.geom.nblk, pow2ceil(ceil(channels / (1 << len(mbits)))))
        return SlotLayout("MP", lay.geom, lay.stage + 1, mbits, dbits, channels, cn, lay.geom.nblk // cn)
    return SlotLayout(kind, lay.geom, lay.stage + 1, mbits, dbits, channels, lay.geom.nblk)


# ---------------------------------------------------------------------------
# masks

@dataclass
class MaskSet:
    masks: dict = field(default_factory=dict)

    def __getitem__(self, k):
        return self.masks[k]

    def __len__(self):
        return len(self.masks)


def build_masks(lay: SlotLayout, purpose: str) -> MaskSet:
    """0/1 masks on the layout geometry.

    gap_select: one mask per D position (selects that duplicate);
    ir_move:    one mask per M position (selects that channel slot);
    segment:    one mask per channel block.
    """
    ix = lay.idx
    base = ix.valid
    out = {}
    if purpose == "gap_select":
        for v in range(lay.d):
            out[v] = (base & (ix.delta == v)).astype(np.float64)
    elif purpose == "ir_move":
        for v in range(lay.m):
            out[v] = (base & (ix.mu == v)).astype(np.float64)
    elif purpose == "segment":
        for b in range(lay.geom.nblk):
            out[b] = (base & (ix.blk == b)).astype(np.float64)
    else:
        raise ValueError(f"unknown mask purpose {purpose!r}")
    return MaskSet(out)


# ---------------------------------------------------------------------------
# row-segmented layout for plaintext reuse

@dataclass(frozen=True)
class PrcrLayout:
    """Segment-major packing: slot = seg*frag + blk*hs*w + row*w + col.

    Each ciphertext carries ``cn`` channels; segment ``seg`` holds rows
    [seg*hs, (seg+1)*hs) of every one of them.
    """
    slot_count: int
    segments: int
    channels: int
    h: int
    w: int
    cn: int

    def __post_init__(self):
        log2(self.segments)
        if self.h % self.segments:
            raise IndivisibleHeight(f"H={self.h} not divisible by {self.segments}")
        if self.slot_count % self.segments:
            raise CapacityExceeded("segments do not tile the slots")
        if self.cn * self.hs * self.w > self.frag:
            raise CapacityExceeded(f"{self.cn} channels of {self.hs}x{self.w} overflow a {self.frag}-slot segment")

    @property
    def hs(self) -> int:
        return self.h // self.segments

    @property
    def frag(self) -> int:
        return self.slot_count // self.segments

    @property
    def n_ct(self) -> int:
        return ceil(self.channels / self.cn)

    def with_channels(self, c: int) -> "PrcrLayout":
        return PrcrLayout(self.slot_count, self.segments, c, self.h, self.w, self.cn)

    def index(self) -> dict:
        """Per-slot seg, blk, row (within segment), col and validity."""
        s = np.arange(self.slot_count)
        seg, rem = np.divmod(s, self.frag)
        blk, rem = np.divmod(rem, self.hs * self.w)
        row, col = np.divmod(rem, self.w)
        valid = blk < self.cn
        return {"seg": seg, "blk": np.where(valid, blk, -1), "row": row, "col": col, "valid": valid}

    def pack(self, x) -> list:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.channels, self.h, self.w):
            raise ShapeMismatch(f"expected {(self.channels, self.h, self.w)}, got {x.shape}")
        out = []
        for t in range(self.n_ct):
            v = np.zeros(self.slot_count)
            for b in range(min(self.cn, self.channels - t * self.cn)):
                segs = x[t * self.cn + b].reshape(self.segments, self.hs * self.w)
                for sg in range(self.segments):
                    st = sg * self.frag + b * self.hs * self.w
                    v[st:st + self.hs * self.w] = segs[sg]
            out.append(v)
        return out

    def unpack(self, vecs: list) -> np.ndarray:
        x = np.zeros((self.channels, self.h, self.w))
        for t, v in enumerate(vecs):
            for b in range(min(self.cn, self.channels - t * self.cn)):
                rows = [v[sg * self.frag + b * self.hs * self.w:][:self.hs * self.w] for sg in range(self.segments)]
                x[t * self.cn + b] = np.concatenate(rows).reshape(self.h, self.w)
        return x
