"""Closed-form rotation, bootstrap and memory accounting.

Counts here are derived from layouts alone; the test suite checks them
against the trace-mode ledger.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from math import ceil

import numpy as np

from . import hconv
from .errors import PlanViolation, Unreachable, UnsupportedAlgo
from .heslot import CONV_TAGS, OP_TIMES_MS, SET_HYP, Backend, CostLedger, HeParams
from .layout import GapConfig, Geometry, log2, stage0_layout
from .network import (GapPlan, NetworkSpec, build_network, schedule_bootstraps,
                      stage_layouts)

ALGOS = ("MPConvLC", "CAConv", "RAConvNaive", "RAConvReorder")
TAGS = CONV_TAGS


def _zero() -> dict:
    return {t: 0 for t in TAGS}


def _pow2(name, v):
    if v < 1 or v & (v - 1):
        raise ValueError(f"{name}={v} is not a power of two")


def conv_cost(algo: str, f: int, c_n: int, m: int, d: int) -> dict:
    """Rotations per tag for one convolution whose ciphertext holds c_n*m channels.

    For the RA side ``d`` is the number of distinct channels per input
    ciphertext, so its gap sums and replication run over log2(d) bits.
    """
    if algo not in ALGOS:
        raise UnsupportedAlgo(f"unknown convolution algorithm {algo!r}")
    for name, v in (("c_n", c_n), ("m", m), ("d", d)):
        _pow2(name, v)
    if d > m * c_n:
        raise ValueError("d cannot exceed the channels per ciphertext")
    n = m * c_n // d
    sl = f * f - 1
    c = _zero()
    if algo == "MPConvLC":
        c.update(Slide=sl, RaS=n * log2(c_n), RaS_g=n * log2(m), IR=m * c_n - 1, IR_g=log2(d))
        c.update(n_i=1, n_o=1)
    elif algo == "CAConv":
        c.update(Slide=sl, RaS=n * log2(c_n), RaS_g=n * log2(m), IR_g=n * log2(m))
        c.update(n_i=1, n_o=n)
    else:
        c.update(Slide=n * sl if algo == "RAConvNaive" else sl, RaS_g=log2(d), IR_g=log2(d))
        c.update(n_i=n, n_o=1)
    return c


def measure_conv_cost(algo: str, f: int, c_n: int, m: int, d: int, side: int = 4,
                      mode: str = "trace", seed: int = 0):
    """Run one convolution on a small grid and return (ledger, max error).

    The grid is side x side with m*d inner slots; the slot count is chosen
    so the ciphertext holds exactly c_n*m channels.  The error is None in
    trace mode.
    """
    from . import oracle
    if algo not in ALGOS:
        raise UnsupportedAlgo(f"unknown convolution algorithm {algo!r}")
    c = c_n * m
    if algo == "MPConvLC":
        geom = Geometry(c_n * d * side * side * m, side, side, side, side, m)
        lay = stage0_layout("MP", geom, GapConfig(m, 1), c)
    else:
        geom = Geometry(c_n * side * side * m * d, side, side, side, side, m * d)
        lay = stage0_layout("CA", geom, GapConfig(m, d), c)
        if algo != "CAConv":
            lay = lay.with_kind("RA", c)
    be = Backend(HeParams(slot_count=geom.slot_count), mode)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((c, side, side))
    K = rng.standard_normal((c, c, f, f))
    p = hconv.encrypt_tensor(be, lay, x)
    if algo == "MPConvLC":
        out = hconv.mp_conv_lc(be, p, K)
    elif algo == "CAConv":
        out = hconv.caconv(be, p, K)
    else:
        out = hconv.raconv(be, p, K, variant="naive" if algo == "RAConvNaive" else "reorder")
    err = None
    if be.full:
        err = float(np.abs(hconv.decrypt_tensor(be, out) - oracle.conv2d_ref(x, K)).max())
    return be.ledger, err


# ---------------------------------------------------------------------------
# whole-network closed form

def _ca_part(c, n_in, f, n_prod, nblk, m_in):
    c["Slide"] += n_in * (f * f - 1)
    c["RaS"] += n_prod * log2(nblk)
    c["RaS_g"] += n_prod * len(m_in)


def _ra_part(c, n_out, f, dbits, slides_per_out):
    c["Slide"] += n_out * slides_per_out * (f * f - 1)
    c["RaS_g"] += n_out * len(dbits)
    c["IR_g"] += n_out * len(dbits)


def _caconv(lay, lay_out, c_o, f, s):
    c = _zero()
    P = ceil(c_o / lay.d)
    _ca_part(c, lay.n_ct, f, P, lay.geom.nblk, lay.mbits)
    Q = P
    if s == 2:
        ratio = lay_out.d // lay.d
        Q = ceil(c_o / lay_out.d)
        c["IR_g"] += sum(min(ratio, P - q * ratio) - 1 for q in range(Q))
    c["IR_g"] += Q * len(lay_out.mbits)
    return c


def _raconv(lay_ra, n_out, f, variant="reorder"):
    c = _zero()
    _ra_part(c, n_out, f, lay_ra.dbits, lay_ra.n_ct if variant == "naive" else 1)
    return c


def _pconv(lay, lay_out, c_o):
    c = _zero()
    P = ceil(c_o / lay.d)
    _ca_part(c, 0, 1, P, lay.geom.nblk, lay.mbits)
    c["IR"] += sum(1 for mv in hconv.pconv_moves(lay, lay_out, c_o) for *_, sh in mv if sh)
    return c


def _mpconv(lay, c_o, f, s, finish=True):
    c = _zero()
    out = hconv.mp_layout_for(lay, c_o, s)
    P = ceil(c_o / lay.reps)
    c["Slide"] += lay.n_ct * (f * f - 1)
    c["RaS"] += P * log2(lay.cn)
    c["RaS_g"] += P * len(lay.mbits)
    c["IR"] += sum(1 for mv in hconv.mp_moves(lay, out, c_o) for *_, sh in mv if sh)
    if finish:
        c["IR_g"] += out.n_ct * log2(out.reps)
    return c, out


def layer_costs(spec: NetworkSpec, slot_count: int = 32768) -> list:
    """(layer name, per-tag rotations) for every convolution, stem first."""
    lays = stage_layouts(spec, slot_count)
    rows = []
    st = spec.stem
    if st.kind == "im2col":
        rows.append((st.name, _zero()))
    elif spec.plan.algo == "baseline":
        lay_in = stage0_layout("MP", lays[0].geom, GapConfig(1, 1), st.c_i)
        rows.append((st.name, _mpconv(lay_in, st.c_o, st.f, 1)[0]))
    else:
        rows.append((st.name, _raconv(lays[0].with_kind("RA", st.c_i), lays[0].n_ct, st.f)))
    for blk in spec.blocks:
        lay = lays[blk.stage]
        c1, c2 = blk.conv1, blk.conv2
        if spec.plan.algo == "baseline":
            lin = lays[blk.stage - 1] if blk.downsample else lay
            if blk.downsample:
                rows.append((blk.shortcut.name, _mpconv(lin, blk.shortcut.c_o, 1, 2, finish=False)[0]))
            cost, mid = _mpconv(lin, c1.c_o, c1.f, c1.s)
            rows.append((c1.name, cost))
            rows.append((c2.name, _mpconv(mid, c2.c_o, c2.f, 1)[0]))
            continue
        if blk.downsample:
            prev = lays[blk.stage - 1]
            rows.append((blk.shortcut.name, _pconv(prev, lay, blk.shortcut.c_o)))
            rows.append((c1.name, _caconv(prev, lay, c1.c_o, c1.f, 2)))
        else:
            rows.append((c1.name, _caconv(lay, lay, c1.c_o, c1.f, 1)))
        rows.append((c2.name, _raconv(lay.with_kind("RA", c1.c_o), lay.n_ct, c2.f)))
    return rows


def network_cost(spec: NetworkSpec, params: HeParams = SET_HYP) -> dict:
    """Closed-form conv rotations (table grouping) and bootstrap count."""
    tot = _zero()
    for _, c in layer_costs(spec, params.slot_count):
        for t in TAGS:
            tot[t] += c[t]
    boots = sum(s.count for s in schedule_bootstraps(spec, params))
    return {"per_tag": tot, "SISO": tot["Slide"], "RaS": tot["RaS"] + tot["RaS_g"],
            "IR": tot["IR"] + tot["IR_g"], "total": sum(tot.values()), "Boot": boots}


# ---------------------------------------------------------------------------
# evaluation keys and effective rotations

@dataclass(frozen=True)
class KeySet:
    slot_count: int
    amounts: frozenset
    evk_bytes: float = SET_HYP.evk_bytes
    boot_keys: int = 48     # rotation keys held for bootstrapping
    extra_keys: int = 2     # relinearization and conjugation

    def __post_init__(self):
        if not self.amounts:
            raise ValueError("empty key set")
        object.__setattr__(self, "amounts", frozenset(a % self.slot_count for a in self.amounts) - {0})

    def pow2_amounts(self) -> frozenset:
        n = self.slot_count
        return frozenset({(1 << j) % n for j in range(log2(n))} | {(-(1 << j)) % n for j in range(log2(n))})

    @property
    def n_evk(self) -> int:
        return self.boot_keys + self.extra_keys + len(self.amounts - self.pow2_amounts())

    @property
    def total_bytes(self) -> float:
        return self.n_evk * self.evk_bytes


def slide_amounts(spec: NetworkSpec, slot_count: int = 32768, f: int = 3) -> set:
    out = set()
    for lay in stage_layouts(spec, slot_count):
        out |= {r % slot_count for _, _, r in hconv.taps(lay, f) if r}
    return out


def default_keyset(spec: NetworkSpec, params: HeParams = SET_HYP) -> KeySet:
    """Plus/minus powers of two (bootstrapping keys) and the f=3 Slide amounts."""
    n = params.slot_count
    amts = {(1 << j) % n for j in range(log2(n))} | {(-(1 << j)) % n for j in range(log2(n))}
    amts |= slide_amounts(spec, n)
    return KeySet(n, frozenset(amts), params.evk_bytes)


@lru_cache(maxsize=8)
def _bfs(keys: KeySet):
    n = keys.slot_count
    gens = np.array(sorted(keys.amounts), dtype=np.int64)
    dist = np.full(n, -1, dtype=np.int64)
    parent = np.full(n, -1, dtype=np.int64)
    via = np.full(n, -1, dtype=np.int64)
    dist[0] = 0
    frontier = np.array([0], dtype=np.int64)
    d = 0
    while frontier.size:
        d += 1
        nxt = (frontier[:, None] + gens[None, :]) % n
        src = np.repeat(frontier, gens.size)
        g = np.tile(gens, frontier.size)
        nxt = nxt.ravel()
        fresh = dist[nxt] < 0
        nxt, src, g = nxt[fresh], src[fresh], g[fresh]
        nxt, first = np.unique(nxt, return_index=True)
        dist[nxt] = d
        parent[nxt] = src[first]
        via[nxt] = g[first]
        frontier = nxt
    return dist, parent, via


def decompose_rotation(amount: int, keys: KeySet) -> list:
    """Shortest list of loaded amounts whose sum is ``amount`` mod slots."""
    n = keys.slot_count
    a = amount % n
    if a == 0:
        return []
    if a in keys.amounts:
        return [a]
    dist, parent, via = _bfs(keys)
    if dist[a] < 0:
        raise Unreachable(f"rotation {amount} cannot be built from the loaded keys")
    out = []
    while a:
        out.append(int(via[a]))
        a = int(parent[a])
    return out[::-1]


def rotation_distance(amount: int, keys: KeySet) -> int:
    a = amount % keys.slot_count
    if a == 0:
        return 0
    d = int(_bfs(keys)[0][a])
    if d < 0:
        raise Unreachable(f"rotation {amount} cannot be built from the loaded keys")
    return d


def effective_rotations(ledger: CostLedger, keys: KeySet, tags=CONV_TAGS) -> dict:
    """Rotation count after expanding every amount into loaded keys."""
    out = {t: 0 for t in tags}
    for a, t in ledger.rotation_log:
        if t in out:
            out[t] += rotation_distance(a, keys)
    out["total"] = sum(out[t] for t in tags)
    return out


# ---------------------------------------------------------------------------
# memory

@dataclass
class MemoryReport:
    weight_slots: int
    weight_pt_bytes: float
    bias_pt_bytes: float
    ct_bytes: float
    evk_bytes: float
    n_evk: int
    prcr_segments: int = 1
    per_block: dict = field(default_factory=dict)

    def gb(self) -> dict:
        return {"weights": self.weight_pt_bytes / 1e9, "bias": self.bias_pt_bytes / 1e9,
                "ciphertexts": self.ct_bytes / 1e9, "evk": self.evk_bytes / 1e9}


def memory_footprint(spec: NetworkSpec, params: HeParams = SET_HYP, prcr_segments: int = 1,
                     keys: KeySet | None = None) -> MemoryReport:
    """Weight plaintexts at refresh size, one slot per weight-pixel pair.

    Residual-block convolutions only; the stem and classifier are tiny or
    client-side.  PRCR stores one plaintext per |S| products.
    """
    if prcr_segments < 1:
        raise ValueError("prcr_segments must be >= 1")
    n = params.slot_count
    per_slot = params.pt_bytes / n
    per_block, slots = {}, 0
    bias = 0.0
    for blk in spec.blocks:
        convs = [blk.conv1, blk.conv2] + ([blk.shortcut] if blk.shortcut else [])
        s = sum(c.weight_slots for c in convs)
        per_block[blk.name] = s * per_slot / prcr_segments
        slots += s
        bias += len(convs) * params.pt_bytes
    keys = keys or default_keyset(spec, params)
    lays = stage_layouts(spec, n)
    ct = max(l.n_ct for l in lays) * params.ct_bytes
    return MemoryReport(slots, slots * per_slot / prcr_segments, bias, ct,
                        keys.n_evk * params.evk_bytes, keys.n_evk, prcr_segments, per_block)


# ---------------------------------------------------------------------------
# plan search

@dataclass(frozen=True)
class PlanScore:
    plan: GapPlan
    rotations: int
    boots: int
    score: float


def enumerate_plans(preset: str, slot_count: int = 32768) -> list:
    """All 2D-gap plans that fit the grid and fill every ciphertext."""
    base = build_network(preset, "baseline")
    grid = base.grid
    cells = [1 << k for k in range(log2(slot_count // (grid * grid)) + 1)]
    plans = []

    def grow(stages):
        if len(stages) == base.n_stages:
            plans.append(GapPlan(tuple(stages)))
            return
        a = stages[-1]
        for r in (1, 2, 4):
            d = a.d * r
            m = 4 * a.cell // d
            if m >= a.m:
                grow(stages + [GapConfig(m, d)])

    for cell in cells:
        for lm in range(log2(cell) + 1):
            grow([GapConfig(1 << lm, cell >> lm)])
    out = []
    for p in plans:
        try:
            build_network(preset, p)
        except PlanViolation:
            continue
        out.append(p)
    return out


def search_plans(preset: str, w_crot: float = OP_TIMES_MS["CRot"], w_boot: float = OP_TIMES_MS["Boot"],
                 params: HeParams = SET_HYP) -> list:
    """Rank plans by w_crot * conv rotations + w_boot * bootstraps."""
    res = []
    for p in enumerate_plans(preset, params.slot_count):
        c = network_cost(build_network(preset, p), params)
        res.append(PlanScore(p, c["total"], c["Boot"], w_crot * c["total"] + w_boot * c["Boot"]))
    res.sort(key=lambda s: (s.score, s.rotations, str(s.plan)))
    return res


# ---------------------------------------------------------------------------
# reference figures for the diff report

REF_RUNTIME = {
    ("resnet20", "baseline"): dict(SISO=152, RaS=924, IR=800, total=1876, eff=3638, Boot=10),
    ("resnet20", "optimal"): dict(SISO=152, RaS=580, IR=187, total=919, eff=1002, Boot=10),
    ("resnet20", "minrot"): dict(SISO=240, RaS=407, IR=142, total=789, eff=881, Boot=15),
    ("resnet18", "baseline"): dict(SISO=536, RaS=32384, IR=4669, total=37589, eff=43672, Boot=38),
    ("resnet18", "minboot"): dict(SISO=536, RaS=17920, IR=9544, total=28000, eff=30072, Boot=38),
    ("resnet18", "optimal"): dict(SISO=1024, RaS=4512, IR=1823, total=7359, eff=9095, Boot=65),
}
REF_MEMORY_GB = {"baseline": {"weights": 364.8, "evk": 11.1}, "prcr8": {"weights": 45.6, "evk": 11.1}}
EFF_SLACK = 0.05
MEM_SLACK = 0.02


def conv_table_rows(f: int = 3, c_n: int = 4, m: int = 2, d: int = 2) -> list:
    """Formula vs simulator per algorithm for one (f, c_n, m, d) point."""
    rows = []
    for algo in ALGOS:
        exp = conv_cost(algo, f, c_n, m, d)
        led, _ = measure_conv_cost(algo, f, c_n, m, d)
        got = led.by_tag()
        for t in TAGS:
            rows.append(dict(table="conv", row=f"{algo} f={f} c_n={c_n} m={m} d={d}", column=t,
                             expected=exp[t], measured=got[t], ok=exp[t] == got[t]))
    return rows


def runtime_table_rows(params: HeParams = SET_HYP) -> list:
    from .network import run_inference
    rows = []
    for (preset, plan), exp in REF_RUNTIME.items():
        spec = build_network(preset, plan)
        r = run_inference(spec, be=Backend(params, "trace"))
        got = dict(r.ledger.table_columns())
        got["Boot"] = r.ledger.counts["Boot"]
        got["eff"] = effective_rotations(r.ledger, default_keyset(spec, params))["total"]
        for col, e in exp.items():
            if col == "eff":
                ok = abs(got[col] - e) <= EFF_SLACK * e
            else:
                ok = got[col] == e
            rows.append(dict(table="runtime", row=f"{preset} {plan}", column=col,
                             expected=e, measured=got[col], ok=ok))
    return rows


def memory_table_rows(params: HeParams = SET_HYP) -> list:
    spec = build_network("resnet18", "optimal")
    rows = []
    for name, seg in (("baseline", 1), ("prcr8", 8)):
        g = memory_footprint(spec, params, seg).gb()
        for col, e in REF_MEMORY_GB[name].items():
            rows.append(dict(table="memory", row=name, column=col, expected=e,
                             measured=round(g[col], 2), ok=abs(g[col] - e) <= MEM_SLACK * e))
    return rows
