"""ResNet assembly, bootstrap placement and end-to-end simulated inference."""
from __future__ import annotations

from dataclasses import dataclass, field
from math import ceil

import numpy as np

from . import hconv, oracle
from .errors import InfeasibleBudget, PlanViolation
from .hconv import ConvLayerSpec, Packed
from .heslot import SET_HYP, Backend, HeParams
from .layout import (GapConfig, Geometry, SlotLayout, log2, next_layout, pow2ceil,
                     stage0_layout)

BLOCK_LEVELS = 6


@dataclass(frozen=True)
class StemSpec:
    name: str
    kind: str          # "conv" or "im2col"
    c_i: int
    c_o: int
    w_i: int
    f: int
    stride: int = 1
    pad: int = 1
    pool: int = 1


@dataclass(frozen=True)
class BlockSpec:
    name: str
    stage: int         # stage index of the block output
    conv1: ConvLayerSpec
    conv2: ConvLayerSpec
    shortcut: ConvLayerSpec | None = None

    @property
    def downsample(self) -> bool:
        return self.shortcut is not None


@dataclass(frozen=True)
class HeadSpec:
    name: str
    c_i: int
    classes: int


@dataclass(frozen=True)
class GapPlan:
    stages: tuple       # GapConfig per stage; empty for the baseline
    algo: str = "gap2d"   # "gap2d" or "baseline"

    def __str__(self):
        if self.algo == "baseline":
            return "baseline"
        return "/".join(str(g) for g in self.stages)

    @classmethod
    def parse(cls, text: str) -> "GapPlan":
        text = text.strip()
        if text == "baseline":
            return cls((), "baseline")
        gaps = []
        for part in text.split("/"):
            try:
                m, d = part.strip().strip("()").split(",")
                gaps.append(GapConfig(int(m), int(d)))
            except ValueError:
                raise PlanViolation(f"cannot parse plan {text!r}; expected (m,d)/(m,d)/... or a plan name") from None
        return cls(tuple(gaps))


@dataclass(frozen=True)
class NetworkSpec:
    preset: str
    stem: StemSpec
    blocks: tuple
    head: HeadSpec | None
    widths: tuple       # image width per stage
    channels: tuple     # channels per stage
    in_shape: tuple
    plan: GapPlan
    grid: int           # padded grid side at stage 0

    @property
    def n_stages(self) -> int:
        return len(self.widths)

    def convs(self) -> list:
        out = []
        for b in self.blocks:
            out += [b.conv1, b.conv2] + ([b.shortcut] if b.shortcut else [])
        return out

    def geometry(self, slot_count: int) -> Geometry:
        inner = 1 if self.plan.algo == "baseline" else self.plan.stages[0].cell
        w0 = self.widths[0]
        return Geometry(slot_count, self.grid, self.grid, w0, w0, inner)


PLANS = {
    ("resnet20", "optimal"): "(1,2)/(2,4)/(4,8)",
    ("resnet20", "minrot"): "(1,2)/(1,8)/(2,16)",
    ("resnet18", "optimal"): "(1,1)/(2,2)/(4,4)/(8,8)",
    ("resnet18", "minboot"): "(1,1)/(4,1)/(16,1)/(64,1)",
}
for _n in ("resnet32", "resnet44"):
    PLANS[(_n, "optimal")] = PLANS[("resnet20", "optimal")]
    PLANS[(_n, "minrot")] = PLANS[("resnet20", "minrot")]


def resolve_plan(preset: str, plan) -> GapPlan:
    if isinstance(plan, GapPlan):
        return plan
    key = (preset, str(plan).lower())
    if key in PLANS:
        return GapPlan.parse(PLANS[key])
    return GapPlan.parse(str(plan))


def build_network(preset: str, plan="optimal", stages: int | None = None,
                  head: bool = True) -> NetworkSpec:
    """Shapes follow the usual CIFAR ResNet-20/32/44 and ImageNet ResNet-18."""
    cifar = {"resnet20": 3, "resnet32": 5, "resnet44": 7}
    if preset in cifar:
        nblk, chans, widths = cifar[preset], (16, 32, 64), (32, 16, 8)
        stem = StemSpec("stem", "conv", 3, 16, 32, 3, 1, 1)
        in_shape, classes, grid = (3, 32, 32), 10, 32
    elif preset == "resnet18":
        nblk, chans, widths = 2, (64, 128, 256, 512), (56, 28, 14, 7)
        stem = StemSpec("stem", "im2col", 3, 64, 224, 7, 2, 3, pool=2)
        in_shape, classes, grid = (3, 224, 224), 1000, 64
    else:
        raise PlanViolation(f"unknown preset {preset!r}")
    if stages is not None:
        chans, widths = chans[:stages], widths[:stages]
    plan = resolve_plan(preset, plan)
    blocks = []
    for si, (c, w) in enumerate(zip(chans, widths)):
        for bi in range(nblk):
            name = f"layer{si + 1}.{bi}"
            if si > 0 and bi == 0:
                cp, wp = chans[si - 1], widths[si - 1]
                blocks.append(BlockSpec(name, si,
                                        ConvLayerSpec(name + ".conv1", cp, c, wp, 3, 2),
                                        ConvLayerSpec(name + ".conv2", c, c, w, 3, 1),
                                        ConvLayerSpec(name + ".shortcut", cp, c, wp, 1, 2, 0)))
            else:
                blocks.append(BlockSpec(name, si,
                                        ConvLayerSpec(name + ".conv1", c, c, w, 3, 1),
                                        ConvLayerSpec(name + ".conv2", c, c, w, 3, 1)))
    hd = HeadSpec("fc", chans[-1], classes) if head else None
    spec = NetworkSpec(preset, stem, tuple(blocks), hd, widths, chans, in_shape, plan, grid)
    validate_plan(spec)
    return spec


def validate_plan(spec: NetworkSpec, slot_count: int = 32768):
    plan = spec.plan
    if plan.algo == "baseline":
        return
    if len(plan.stages) < spec.n_stages:
        raise PlanViolation(f"plan has {len(plan.stages)} stages, network needs {spec.n_stages}")
    gaps = plan.stages[:spec.n_stages]
    for k, (a, b) in enumerate(zip(gaps, gaps[1:])):
        if b.cell != 4 * a.cell:
            raise PlanViolation(f"stage {k + 1}: m*d must quadruple, got {a} -> {b}")
        if not (b.d >= a.d and b.m >= a.m):
            raise PlanViolation(f"stage {k + 1}: {a} -> {b} shrinks m or d")
    geom = spec.geometry(slot_count)
    for k, (g, c) in enumerate(zip(gaps, spec.channels)):
        if geom.nblk * g.m > c or g.d > c:
            raise PlanViolation(f"stage {k}: {g} leaves ciphertext slots unused for {c} channels")


def stage_layouts(spec: NetworkSpec, slot_count: int) -> list:
    geom = spec.geometry(slot_count)
    if spec.plan.algo == "baseline":
        lays = [stage0_layout("MP", geom, GapConfig(1, 1), spec.channels[0])]
        for c in spec.channels[1:]:
            prev = lays[-1]
            lays.append(next_layout(prev, GapConfig(4 * prev.m, 1), c, "MP"))
        return lays
    lays = [stage0_layout("CA", geom, spec.plan.stages[0], spec.channels[0])]
    for g, c in zip(spec.plan.stages[1:spec.n_stages], spec.channels[1:]):
        lays.append(next_layout(lays[-1], g, c, "CA"))
    return lays


# ---------------------------------------------------------------------------
# weights

def init_weights(spec: NetworkSpec, seed: int = 0, gain: float = 0.6) -> dict:
    rng = np.random.default_rng(seed)

    def conv(co, ci, f):
        k = rng.standard_normal((co, ci, f, f)) * gain / np.sqrt(ci * f * f)
        return k, rng.standard_normal(co) * 0.05

    w = {spec.stem.name: conv(spec.stem.c_o, spec.stem.c_i, spec.stem.f)}
    for c in spec.convs():
        w[c.name] = conv(c.c_o, c.c_i, c.f)
    if spec.head:
        h = spec.head
        w[h.name] = (rng.standard_normal((h.classes, h.c_i)) / np.sqrt(h.c_i), rng.standard_normal(h.classes) * 0.05)
    return w


def weights_from_tensors(spec: NetworkSpec, tensors: dict) -> dict:
    """Map ``<layer>.weight`` / ``<layer>.bias`` arrays onto the spec's layers."""
    names = [spec.stem.name] + [c.name for c in spec.convs()] + ([spec.head.name] if spec.head else [])
    out = {}
    for n in names:
        if n + ".weight" not in tensors:
            raise PlanViolation(f"missing tensor {n}.weight")
        k = np.asarray(tensors[n + ".weight"])
        # a missing bias becomes zeros so the op counts match trace mode
        out[n] = (k, np.asarray(tensors.get(n + ".bias", np.zeros(k.shape[0]))))
    return out


# ---------------------------------------------------------------------------
# bootstrap schedule

@dataclass
class BootSite:
    where: str
    count: int
    level_before: int


def schedule_bootstraps(spec: NetworkSpec, params: HeParams = SET_HYP) -> list:
    """Static walk of the level budget: refresh a block input when fewer than
    six levels remain, and refresh the pooled vector before the classifier."""
    if params.usable_level < BLOCK_LEVELS:
        raise InfeasibleBudget(f"a block needs {BLOCK_LEVELS} levels, L'={params.usable_level}")
    lays = stage_layouts(spec, params.slot_count)
    lv = params.usable_level - stem_levels(spec)
    sites = []
    for blk in spec.blocks:
        n_in = lays[blk.stage - 1 if blk.downsample else blk.stage].n_ct
        if lv < BLOCK_LEVELS:
            sites.append(BootSite(blk.name, n_in, lv))
            lv = params.usable_level
        lv -= BLOCK_LEVELS
    if spec.head is not None and lv < 1:
        sites.append(BootSite(spec.head.name, 1, lv))
    return sites


def stem_levels(spec: NetworkSpec) -> int:
    if spec.stem.kind == "im2col":
        return 2
    return 3


# ---------------------------------------------------------------------------
# inference

@dataclass
class RunResult:
    logits: np.ndarray | None
    ledger: object
    layer_outputs: list = field(default_factory=list)
    boot_sites: list = field(default_factory=list)
    levels: list = field(default_factory=list)


def _ensure(be: Backend, x: Packed, need: int, where: str, sites: list) -> Packed:
    if x.level >= need:
        return x
    if be.params.usable_level < need:
        raise InfeasibleBudget(f"{where} needs {need} levels")
    sites.append(BootSite(where, len(x.cts), x.level))
    return Packed([be.bootstrap(c) for c in x.cts], x.layout)


def _im2col_patches(spec: NetworkSpec, x: np.ndarray) -> np.ndarray:
    st = spec.stem
    f = st.f
    eye = np.eye(st.c_i * f * f).reshape(st.c_i * f * f, st.c_i, f, f)
    cols = oracle.conv2d_ref(x, eye, st.stride, st.pad)
    return oracle.avg_pool(cols, st.pool)


def im2col_head(be: Backend, spec: NetworkSpec, lay: SlotLayout, x, K, bias) -> Packed:
    """Stem as an encrypted matrix product over client-prepared patches.

    The client sends one ciphertext per patch column (pooling folded in);
    the server multiplies by weight plaintexts and sums.  No rotations.
    """
    st = spec.stem
    ncol = st.c_i * st.f * st.f
    ix = lay.idx
    if be.full:
        cols = _im2col_patches(spec, x)
        pix = ix.valid
        vecs = []
        for j in range(ncol):
            v = np.zeros(be.slots)
            v[pix] = cols[j, ix.y[pix], ix.x[pix]]
            vecs.append(v)
    else:
        vecs = [None] * ncol
    pts = [be._new_ct(v, be.params.usable_level) for v in vecs]
    Kf = K.reshape(K.shape[0], -1) if be.full else None
    outs = []
    for q in range(lay.n_ct):
        acc = None
        for j, ct in enumerate(pts):
            def fn(q=q, j=j):
                ch = lay.channel_map(q)
                v = np.zeros(be.slots)
                v[ch >= 0] = Kf[ch[ch >= 0], j]
                return v
            prod = be.mul_pt(ct, be.encode(fn, ct.level))
            acc = prod if acc is None else be.add_ct(acc, prod)
        outs.append(be.rescale(acc))
    outs = hconv.add_bias(be, outs, lay, bias)
    return Packed(outs, lay)


def run_stem(be: Backend, spec: NetworkSpec, lays: list, x, weights) -> Packed:
    K, b = weights[spec.stem.name] if weights else (None, True)
    lay0 = lays[0]
    if spec.stem.kind == "im2col":
        y = im2col_head(be, spec, lay0, x, K, b)
    elif spec.plan.algo == "baseline":
        geom = lay0.geom
        lay_in = stage0_layout("MP", geom, GapConfig(1, 1), spec.stem.c_i)
        xin = hconv.encrypt_tensor(be, lay_in, x)
        y = hconv.mp_conv(be, xin, _shape_only(be, K, spec.stem), b)
    else:
        lay_in = lay0.with_kind("RA", spec.stem.c_i)
        xin = hconv.encrypt_tensor(be, lay_in, x)
        y = hconv.raconv(be, xin, _shape_only(be, K, spec.stem), b)
    return Packed([be.square(c) for c in y.cts], y.layout)


class _Shape:
    """Stand-in for a weight array in trace mode (only .shape is read)."""

    def __init__(self, shape):
        self.shape = shape


def _shape_only(be, K, conv):
    if be.full:
        return K
    f = conv.f
    return _Shape((conv.c_o, conv.c_i, f, f))


def _clean(be, x: Packed) -> Packed:
    outs = [be.rescale(hconv.masked(be, c, lambda t=t: x.layout.valid_mask(t)))
            for t, c in enumerate(x.cts)]
    return Packed(outs, x.layout)


def run_block(be: Backend, blk: BlockSpec, x: Packed, lay_out: SlotLayout, weights,
              algo: str, fused: bool = True, finish: bool = True) -> Packed:
    def W(conv):
        if weights is None:
            return _shape_only(be, None, conv), True
        k, b = weights[conv.name]
        return k, b

    K1, b1 = W(blk.conv1)
    K2, b2 = W(blk.conv2)
    gap2 = GapConfig(lay_out.m, lay_out.d)
    if algo == "baseline":
        if blk.downsample:
            Ks, bs = W(blk.shortcut)
            sc = hconv.mp_conv(be, x, Ks, bs, s=2, finish=False)
            y = hconv.mp_conv(be, x, K1, b1, s=2)
            y = Packed([be.square(c) for c in y.cts], y.layout)
            z = hconv.mp_conv(be, y, K2, b2, pre_add=sc.cts)
        else:
            y = hconv.mp_conv(be, x, K1, b1)
            y = Packed([be.square(c) for c in y.cts], y.layout)
            z = hconv.mp_conv(be, y, K2, b2)
            z = Packed([be.add_ct(a, be.level_down(c, a.level)) for a, c in zip(z.cts, x.cts)], z.layout)
    else:
        if blk.downsample:
            Ks, bs = W(blk.shortcut)
            sc = hconv.pconv_ca(be, x, Ks, bs, gap2)
            y = hconv.caconv(be, x, K1, b1, s=2, gap_out=gap2)
            y = Packed([be.square(c) for c in y.cts], y.layout)
            z = hconv.raconv(be, y, K2, b2, pre_add=sc.cts)
        else:
            if fused:
                outs, out_lay, _ = hconv.fused_block(be, x, K1, b1, K2, b2)
                outs = hconv.finish_raconv(be, outs, out_lay, b2)
                z = Packed(outs, out_lay)
            else:
                y = hconv.caconv(be, x, K1, b1)
                y = Packed([be.square(c) for c in y.cts], y.layout)
                z = hconv.raconv(be, y, K2, b2)
            z = Packed([be.add_ct(a, be.level_down(c, a.level)) for a, c in zip(z.cts, x.cts)], z.layout)
    return _clean(be, z) if finish else z


def avg_pool_and_fc(be: Backend, x: Packed, wfc, bfc, classes: int, sites: list) -> list:
    """Global average pool, gather all ciphertexts into one, classify.

    Rotations here are tagged Other.  Returns one ciphertext per logit; the
    logit sits in every slot.
    """
    lay = x.layout
    geom = lay.geom
    h, w = lay.hw
    ystep, xstep = geom.pixel_steps(lay.stage)
    hp, wp = pow2ceil(h), pow2ceil(w)
    pooled = []
    for c in x.cts:
        c = hconv.ras(be, c, wp, xstep, "Other")
        c = hconv.ras(be, c, hp, ystep, "Other")
        pooled.append(c)
    ix = lay.idx
    sel = (ix.y == 0) & (ix.x == 0) & lay.canonical() if be.full else None
    picked = []
    for t, c in enumerate(pooled):
        fn = lambda t=t: np.where(sel & (lay.channel_map(t) >= 0), 1.0 / (h * w), 0.0)
        picked.append(be.rescale(hconv.masked(be, c, fn)))
    # pixel positions first, then the (empty) duplicate cells
    npix = hp * wp
    if len(picked) > npix * lay.d:
        raise InfeasibleBudget("too many ciphertexts to gather")
    offs = [(t % npix // wp) * ystep + (t % wp) * xstep + lay.d_offset(t // npix)
            for t in range(len(picked))]
    acc = picked[0]
    for t in range(1, len(picked)):
        acc = be.add_ct(acc, be.crot(picked[t], -offs[t], "Other"))
    g = _ensure(be, Packed([acc], lay), 1, "fc", sites).cts[0]
    chan = None
    if be.full:
        chan = np.full(be.slots, -1)
        for t, off in enumerate(offs):
            ch = lay.channel_map(t)
            idx = np.nonzero(sel & (ch >= 0))[0]
            chan[(idx + off) % be.slots] = ch[idx]
    logits = []
    for j in range(classes):
        def fn(j=j):
            v = np.zeros(be.slots)
            v[chan >= 0] = wfc[j, chan[chan >= 0]]
            return v
        c = be.rescale(be.mul_pt(g, be.encode(fn, g.level)))
        c = hconv.ras(be, c, be.slots, 1, "Other")
        c = be.add_pt(c, be.encode(lambda j=j: np.full(be.slots, bfc[j]), c.level))
        logits.append(c)
    return logits


def run_inference(spec: NetworkSpec, x=None, weights=None, be: Backend | None = None,
                  fused: bool = True) -> RunResult:
    """Simulate the whole network.  ``be`` defaults to a trace backend."""
    be = be or Backend(SET_HYP, "trace")
    if be.full and (x is None or weights is None):
        raise ValueError("full mode needs an input and weights")
    if be.params.usable_level < BLOCK_LEVELS:
        raise InfeasibleBudget(f"a block needs {BLOCK_LEVELS} levels")
    lays = stage_layouts(spec, be.slots)
    res = RunResult(None, be.ledger)
    h = run_stem(be, spec, lays, x, weights)
    res.levels.append((spec.stem.name, h.level))
    if be.full:
        res.layer_outputs.append((spec.stem.name, hconv.decrypt_tensor(be, h)))
    for i, blk in enumerate(spec.blocks):
        h = _ensure(be, h, BLOCK_LEVELS, blk.name, res.boot_sites)
        lv = h.level
        last = spec.head is not None and i == len(spec.blocks) - 1
        h = run_block(be, blk, h, lays[blk.stage], weights, spec.plan.algo, fused, finish=not last)
        res.levels.append((blk.name, lv - h.level if not last else lv - h.level + 1))
        if be.full:
            res.layer_outputs.append((blk.name, hconv.decrypt_tensor(be, h)))
    if spec.head is not None:
        wf, bf = weights[spec.head.name] if weights else (None, None)
        cts = avg_pool_and_fc(be, h, wf, bf, spec.head.classes, res.boot_sites)
        if be.full:
            res.logits = np.array([be.decrypt(c)[0] for c in cts])
            res.layer_outputs.append((spec.head.name, res.logits))
    elif be.full:
        res.logits = res.layer_outputs[-1][1]
    return res
