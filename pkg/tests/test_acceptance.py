"""Acceptance criteria 1-9.

Each test prints one ``criterion N: PASS|FAIL`` line (also when run as a
script: ``python tests/test_acceptance.py``).  Tolerances are the stated
ones; known mismatches are left failing.
"""
import time

import numpy as np
import pytest

from fhecnn import costmodel, hconv, oracle
from fhecnn.costmodel import (conv_cost, default_keyset, effective_rotations, measure_conv_cost,
                              memory_footprint, search_plans)
from fhecnn.errors import LevelExhausted
from fhecnn.hconv import ConvLayerSpec
from fhecnn.heslot import SET_HYP, Backend, HeParams
from fhecnn.network import BLOCK_LEVELS, build_network, init_weights, run_inference, stage_layouts

ROT_EXPECTED = {
    ("resnet20", "baseline"): dict(total=1876, Boot=10),
    ("resnet20", "optimal"): dict(SISO=152, RaS=580, IR=187, total=919, Boot=10),
    ("resnet20", "minrot"): dict(total=789, Boot=15),
    ("resnet18", "baseline"): dict(total=37589, Boot=38),
    ("resnet18", "minboot"): dict(total=28000, Boot=38),
    ("resnet18", "optimal"): dict(total=7359, Boot=65),
}
EFF_EXPECTED = {
    ("resnet20", "optimal"): 1002, ("resnet20", "minrot"): 881, ("resnet18", "baseline"): 43672,
    ("resnet18", "minboot"): 30072, ("resnet18", "optimal"): 9095,
}
# allowance on top of n_CA * f^2 for the CA-side accumulator and the current product
PEAK_SLACK = 4

_traces = {}


def report(n, ok, detail, capsys=None):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    if capsys is not None:
        with capsys.disabled():
            print("\n" + line)
    else:
        print(line)
    return ok


def trace(preset, plan):
    key = (preset, plan)
    if key not in _traces:
        t0 = time.perf_counter()
        res = run_inference(build_network(preset, plan), be=Backend(SET_HYP, "trace"))
        _traces[key] = (res, time.perf_counter() - t0)
    return _traces[key]


def check_1():
    bad = []
    for key, exp in ROT_EXPECTED.items():
        res, secs = trace(*key)
        got = dict(res.ledger.table_columns(), Boot=res.ledger.counts["Boot"])
        bad += [f"{key[0]} {key[1]} {k}={got[k]} (want {v})" for k, v in exp.items() if got[k] != v]
        if secs > 60:
            bad.append(f"{key[0]} {key[1]} took {secs:.0f}s")
    return not bad, "; ".join(bad) or "all rows exact"


def check_2():
    bad, seen = [], []
    for key, exp in EFF_EXPECTED.items():
        res, _ = trace(*key)
        eff = effective_rotations(res.ledger, default_keyset(build_network(*key)))["total"]
        dev = (eff - exp) / exp
        seen.append(f"{key[0]} {key[1]} {eff} ({dev:+.1%})")
        if abs(dev) > 0.05:
            bad.append(seen[-1])
    return not bad, ("outside 5%: " + "; ".join(bad)) if bad else "; ".join(seen)


def _full_vs_oracle(spec, seed=0):
    w = init_weights(spec, seed)
    x = np.random.default_rng(seed + 1).standard_normal(spec.in_shape)
    res = run_inference(spec, x, w, Backend(SET_HYP, "full"))
    ref_trace = []
    ref = oracle.forward_ref(spec, w, x, ref_trace)
    logit_err = float(np.abs(res.logits - ref).max())
    rel = max(float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-30))
              for (_, a), (_, b) in zip(res.layer_outputs, ref_trace))
    return logit_err, rel


def check_3():
    out, ok = [], True
    for name, spec in (("resnet20", build_network("resnet20", "optimal")),
                       ("resnet18 layer1+2", build_network("resnet18", "optimal", stages=2, head=False))):
        t0 = time.perf_counter()
        err, rel = _full_vs_oracle(spec)
        secs = time.perf_counter() - t0
        ok &= err < 1e-4 and rel < 1e-6 and secs < 600
        out.append(f"{name}: max err {err:.1e}, layer rel {rel:.1e}, {secs:.0f}s")
    return ok, "; ".join(out)


GRIDS = [(2, 2, 2), (4, 2, 4)]


def check_4():
    bad, n = [], 0
    for algo in costmodel.ALGOS:
        for f in (1, 3):
            for cmd in GRIDS:
                n += 1
                exp = conv_cost(algo, f, *cmd)
                got = measure_conv_cost(algo, f, *cmd)[0].by_tag()
                if any(exp[t] != got[t] for t in costmodel.TAGS):
                    bad.append(f"{algo} f={f} {cmd}")
    return not bad and n == 16, f"{n - len(bad)}/{n} combinations exact" + (": " + ", ".join(bad) if bad else "")


def check_5():
    from conftest import small_layout
    bad = []
    for c_n in (1, 2, 4, 8):
        for f in (1, 3):
            lay = small_layout("RA", 2, 2, c_n)
            rng = np.random.default_rng(c_n * 10 + f)
            x = rng.standard_normal((lay.channels, *lay.hw))
            K = rng.standard_normal((lay.channels, lay.channels, f, f))
            outs, slides = {}, {}
            for variant in ("naive", "reorder"):
                be = Backend(HeParams(slot_count=lay.geom.slot_count), "full")
                y = hconv.raconv(be, hconv.encrypt_tensor(be, lay, x), K, variant=variant)
                outs[variant] = [be.decrypt(c) for c in y.cts]
                slides[variant] = be.ledger.by_tag()["Slide"]
            n_i = lay.n_ct
            if slides["reorder"] != f * f - 1 or slides["naive"] != n_i * (f * f - 1):
                bad.append(f"c_n={c_n} f={f} slides {slides}")
            if not all(np.array_equal(a, b) for a, b in zip(outs["naive"], outs["reorder"])):
                bad.append(f"c_n={c_n} f={f} outputs differ")
    return not bad, "; ".join(bad) or "reorder f^2-1, naive n_i(f^2-1), outputs bitwise equal"


def check_6():
    out, ok = [], True
    for preset in ("resnet20", "resnet18"):
        spec = build_network(preset, "optimal")
        lay = stage_layouts(spec, SET_HYP.slot_count)[0]
        c = spec.channels[0]
        be = Backend(SET_HYP, "trace")
        x = hconv.encrypt_tensor(be, lay, None)
        K = _Shape((c, c, 3, 3))
        _, _, st = hconv.fused_block(be, x, K, None, K, None)
        bound = st["n_ca"] * st["f2"] + PEAK_SLACK
        ok &= st["peak_live"] <= bound
        out.append(f"{preset}: peak {st['peak_live']} vs n_CA*f^2+{PEAK_SLACK} = {bound}")
    return ok, "; ".join(out)


class _Shape:
    def __init__(self, shape):
        self.shape = shape


def check_7():
    out, ok = [], True
    for key, exp in ROT_EXPECTED.items():
        try:
            res = run_inference(build_network(*key), be=Backend(SET_HYP, "trace"))
        except LevelExhausted as e:
            ok = False
            out.append(f"{key}: {e}")
            continue
        levels = [lv for n, lv in res.levels if n.startswith("layer")]
        if any(lv != BLOCK_LEVELS for lv in levels):
            ok = False
            out.append(f"{key}: block levels {sorted(set(levels))}")
        if res.ledger.counts["Boot"] != exp["Boot"]:
            ok = False
            out.append(f"{key}: Boot {res.ledger.counts['Boot']} (want {exp['Boot']})")
    return ok, "; ".join(out) or "6 levels per block, boot counts match"


def check_8():
    spec = build_network("resnet18", "optimal")
    base = memory_footprint(spec, SET_HYP)
    pr8 = memory_footprint(spec, SET_HYP, 8)
    gb = base.weight_pt_bytes / 1e9
    ok = abs(gb - 364.8) <= 0.02 * 364.8 and pr8.weight_pt_bytes * 8 == base.weight_pt_bytes
    c = ConvLayerSpec("one", 64, 64, 56, 3, 1)
    ok &= c.weight_slots == 56 * 56 * 9 * 64 * 64
    return ok, f"weights {gb:.2f} GB ({(gb - 364.8) / 364.8:+.2%}), PRCR8 {pr8.weight_pt_bytes / 1e9:.2f} GB"


def check_9():
    r20 = search_plans("resnet20")
    r18 = [str(s.plan) for s in search_plans("resnet18")]
    opt, mb = "(1,1)/(2,2)/(4,4)/(8,8)", "(1,1)/(4,1)/(16,1)/(64,1)"
    ok = str(r20[0].plan) == "(1,2)/(2,4)/(4,8)" and r18.index(opt) < r18.index(mb)
    return ok, f"resnet20 top {r20[0].plan}; resnet18 ranks {r18.index(opt) + 1} vs {r18.index(mb) + 1}"


CHECKS = [check_1, check_2, check_3, check_4, check_5, check_6, check_7, check_8, check_9]


@pytest.mark.parametrize("n", range(1, 10), ids=lambda n: f"criterion{n}")
def test_criterion(n, capsys):
    ok, detail = CHECKS[n - 1]()
    assert report(n, ok, detail, capsys), detail


if __name__ == "__main__":
    import sys
    sys.path.insert(0, str(__import__("pathlib").Path(__file__).parent))
    results = [report(i, *chk()) for i, chk in enumerate(CHECKS, 1)]
    sys.exit(0 if all(results) else 1)
