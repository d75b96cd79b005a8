"""Mock leveled CKKS backend.

Ciphertexts are plain float64 slot vectors (full mode) or bare level
records (trace mode).  Every server-side operation is charged to a
:class:`CostLedger`; the arithmetic itself is exact.
"""
from __future__ import annotations

import weakref
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .errors import (InvalidTarget, LevelExhausted, LevelMismatch,
                     ScaleMismatch, ShapeMismatch)

MiB = 1 << 20

OP_CLASSES = ("AddPt", "AddCt", "MulPt", "MulCt", "Rescale", "PRot", "CRot", "Boot")
ROT_TAGS = ("Slide", "RaS", "RaS_g", "IR", "IR_g", "Other")
CONV_TAGS = ("Slide", "RaS", "RaS_g", "IR", "IR_g")


@dataclass(frozen=True)
class HeParams:
    slot_count: int = 32768
    max_level: int = 23
    usable_level: int = 6
    dnum: int = 6
    ct_bytes: float = 10 * MiB
    pt_bytes: float = 5 * MiB
    evk_bytes: float = 168 * MiB

    def __post_init__(self):
        n = self.slot_count
        if n <= 0 or n & (n - 1):
            raise ValueError(f"slot_count must be a power of two, got {n}")
        if not 0 < self.usable_level <= self.max_level:
            raise ValueError("need 0 < usable_level <= max_level")
        if min(self.ct_bytes, self.pt_bytes, self.evk_bytes) <= 0:
            raise ValueError("object sizes must be positive")

    def ct_size(self, level: int) -> float:
        # sizes are quoted at the post-bootstrap level
        return self.ct_bytes * (level + 1) / (self.usable_level + 1)

    def pt_size(self, level: int) -> float:
        return self.pt_bytes * (level + 1) / (self.usable_level + 1)


SET_HYP = HeParams(32768, 23, 6, 6, 10 * MiB, 5 * MiB, 168 * MiB)
SET_LC = HeParams(32768, 31, 16, 32, 17 * MiB, 8.5 * MiB, 1056 * MiB)
PRESETS = {"set_hyp": SET_HYP, "set_lc": SET_LC}

# per-op latency in ms, used only as search/report weights
OP_TIMES_MS = {"AddPt": 0.169, "AddCt": 0.202, "MulPt": 0.506, "MulCt": 17.3,
               "Rescale": 3.90, "PRot": 0.102, "CRot": 15.5, "Boot": 2160.0}


@dataclass
class CostLedger:
    counts: Counter = field(default_factory=Counter)
    rotation_log: list = field(default_factory=list)
    peak_live_ct: int = 0

    def charge(self, op: str, n: int = 1):
        self.counts[op] += n

    def log_rotation(self, amount: int, tag: str):
        if tag not in ROT_TAGS:
            raise ValueError(f"unknown rotation tag {tag!r}")
        self.counts["CRot"] += 1
        self.rotation_log.append((amount, tag))

    def rotations(self, tags=CONV_TAGS) -> int:
        return sum(1 for _, t in self.rotation_log if t in tags)

    def by_tag(self) -> dict:
        c = Counter(t for _, t in self.rotation_log)
        return {t: c.get(t, 0) for t in ROT_TAGS}

    def table_columns(self) -> dict:
        """SISO / RaS / IR grouping used by the runtime tables."""
        t = self.by_tag()
        return {"SISO": t["Slide"], "RaS": t["RaS"] + t["RaS_g"],
                "IR": t["IR"] + t["IR_g"],
                "total": t["Slide"] + t["RaS"] + t["RaS_g"] + t["IR"] + t["IR_g"]}

    def zero_rotations(self) -> list:
        return [i for i, (a, _) in enumerate(self.rotation_log) if a == 0]

    def snapshot(self) -> dict:
        return {"counts": {k: self.counts.get(k, 0) for k in OP_CLASSES},
                "rotations": self.by_tag()}


class CipherSim:
    __slots__ = ("payload", "level", "pending", "__weakref__")

    def __init__(self, payload, level, pending=False):
        self.payload = payload
        self.level = level
        self.pending = pending  # holds an unrescaled product


class PlainSim:
    __slots__ = ("payload", "level")

    def __init__(self, payload, level):
        self.payload = payload
        self.level = level


Values = Union[np.ndarray, Callable[[], np.ndarray]]


class Backend:
    """Slot-level mock backend in ``full`` or ``trace`` mode."""

    def __init__(self, params: HeParams = SET_HYP, mode: str = "full"):
        if mode not in ("full", "trace"):
            raise ValueError(f"mode must be full or trace, got {mode!r}")
        self.params = params
        self.mode = mode
        self.ledger = CostLedger()
        self._live = weakref.WeakSet()

    @property
    def full(self) -> bool:
        return self.mode == "full"

    @property
    def slots(self) -> int:
        return self.params.slot_count

    # -- object creation (client side, free) --
    def _new_ct(self, payload, level, pending=False) -> CipherSim:
        if not 0 <= level <= self.params.max_level:
            raise LevelExhausted(f"level {level} out of range")
        ct = CipherSim(payload, level, pending)
        self._live.add(ct)
        n = len(self._live)
        if n > self.ledger.peak_live_ct:
            self.ledger.peak_live_ct = n
        return ct

    def _vec(self, values: Values) -> np.ndarray:
        v = values() if callable(values) else values
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.slots,):
            raise ShapeMismatch(f"expected {self.slots} slots, got {v.shape}")
        return v

    def encrypt(self, values: Values, level: int | None = None) -> CipherSim:
        level = self.params.usable_level if level is None else level
        return self._new_ct(self._vec(values) if self.full else None, level)

    def encode(self, values: Values, level: int) -> PlainSim:
        """Lazy in trace mode: ``values`` may be a thunk that is never run."""
        return PlainSim(self._vec(values) if self.full else None, level)

    def decrypt(self, ct: CipherSim) -> np.ndarray:
        if not self.full:
            raise RuntimeError("decrypt needs full mode")
        return ct.payload.copy()

    def live_count(self) -> int:
        return len(self._live)

    def reset_peak(self):
        self.ledger.peak_live_ct = len(self._live)

    def live_bytes(self) -> float:
        return sum(self.params.ct_size(c.level) for c in list(self._live))

    # -- checks --
    @staticmethod
    def _same_level(a, b):
        if a.level != b.level:
            raise LevelMismatch(f"levels {a.level} != {b.level}")

    def _same_shape(self, a, b):
        if self.full and a.payload.shape != b.payload.shape:
            raise ShapeMismatch("slot counts differ")

    def _op(self, fn, *xs):
        return fn(*(x.payload for x in xs)) if self.full else None

    # -- homomorphic ops --
    def add_ct(self, a: CipherSim, b: CipherSim) -> CipherSim:
        self._same_level(a, b)
        self._same_shape(a, b)
        if a.pending != b.pending:
            raise ScaleMismatch("cannot add rescaled and unrescaled operands")
        self.ledger.charge("AddCt")
        return self._new_ct(self._op(np.add, a, b), a.level, a.pending)

    def sub_ct(self, a: CipherSim, b: CipherSim) -> CipherSim:
        self._same_level(a, b)
        self.ledger.charge("AddCt")
        return self._new_ct(self._op(np.subtract, a, b), a.level, a.pending)

    def add_pt(self, a: CipherSim, p: PlainSim) -> CipherSim:
        self._same_level(a, p)
        self.ledger.charge("AddPt")
        return self._new_ct(self._op(np.add, a, p), a.level, a.pending)

    def _mul_pre(self, a, b):
        self._same_level(a, b)
        if a.level < 1:
            raise LevelExhausted("multiplication at level 0")
        if a.pending or getattr(b, "pending", False):
            raise ScaleMismatch("rescale before multiplying again")

    def mul_pt(self, a: CipherSim, p: PlainSim) -> CipherSim:
        self._mul_pre(a, p)
        self.ledger.charge("MulPt")
        return self._new_ct(self._op(np.multiply, a, p), a.level, True)

    def mul_ct(self, a: CipherSim, b: CipherSim) -> CipherSim:
        self._mul_pre(a, b)
        self.ledger.charge("MulCt")
        return self._new_ct(self._op(np.multiply, a, b), a.level, True)

    def square(self, a: CipherSim) -> CipherSim:
        return self.rescale(self.mul_ct(a, a))

    def rescale(self, a: CipherSim) -> CipherSim:
        if not a.pending:
            raise ScaleMismatch("nothing to rescale")
        if a.level < 1:
            raise LevelExhausted("rescale at level 0")
        self.ledger.charge("Rescale")
        return self._new_ct(a.payload, a.level - 1)

    def crot(self, a: CipherSim, r: int, tag: str = "Other") -> CipherSim:
        """Left rotation: out[i] = in[i + r]."""
        r %= self.slots
        self.ledger.log_rotation(r, tag)
        out = np.roll(a.payload, -r) if self.full else None
        return self._new_ct(out, a.level, a.pending)

    def prot(self, p: PlainSim, r: int) -> PlainSim:
        self.ledger.charge("PRot")
        return PlainSim(np.roll(p.payload, -r) if self.full else None, p.level)

    def bootstrap(self, a: CipherSim) -> CipherSim:
        if a.pending:
            raise ScaleMismatch("bootstrap needs a rescaled input")
        self.ledger.charge("Boot")
        return self._new_ct(a.payload, self.params.usable_level)

    def level_down(self, a: CipherSim, target: int) -> CipherSim:
        if target > a.level:
            raise InvalidTarget(f"cannot raise level {a.level} to {target}")
        if target < 0:
            raise InvalidTarget("negative level")
        if target == a.level:
            return a
        return self._new_ct(a.payload, target, a.pending)

    def add_many(self, cts: list) -> CipherSim:
        acc = cts[0]
        for c in cts[1:]:
            acc = self.add_ct(acc, c)
        return acc
