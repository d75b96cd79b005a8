import numpy as np
import pytest

from fhecnn import oracle
from fhecnn.errors import InfeasibleBudget, LevelExhausted, PlanViolation
from fhecnn.heslot import SET_HYP, Backend, HeParams
from fhecnn.network import (BLOCK_LEVELS, GapPlan, build_network, init_weights, run_inference,
                            schedule_bootstraps, stage_layouts, weights_from_tensors)


def _full(spec, seed=0, fused=True):
    w = init_weights(spec, seed)
    x = np.random.default_rng(seed + 1).standard_normal(spec.in_shape)
    res = run_inference(spec, x, w, Backend(SET_HYP, "full"), fused=fused)
    return res, w, x


def test_plan_parse():
    assert str(GapPlan.parse("(1,2)/(2,4)/(4,8)")) == "(1,2)/(2,4)/(4,8)"
    assert GapPlan.parse("baseline").algo == "baseline"
    with pytest.raises(PlanViolation):
        GapPlan.parse("(1,2)/oops")


@pytest.mark.parametrize("plan,msg", [
    ("(1,2)/(2,2)/(4,8)", "quadruple"),
    ("(2,1)/(1,8)/(4,8)", "shrinks"),
    ("(1,2)/(2,4)", "stages"),
    ("(4,1)/(16,1)/(64,1)", "unused"),
])
def test_plan_violations(plan, msg):
    with pytest.raises(PlanViolation, match=msg):
        build_network("resnet20", plan)


def test_unknown_preset():
    with pytest.raises(PlanViolation):
        build_network("vgg", "optimal")


def test_shapes():
    r20 = build_network("resnet20")
    assert len(r20.blocks) == 9 and r20.channels == (16, 32, 64)
    r18 = build_network("resnet18")
    assert len(r18.blocks) == 8 and r18.widths == (56, 28, 14, 7)
    assert sum(b.downsample for b in r18.blocks) == 3
    assert [l.n_ct for l in stage_layouts(r18, 32768)] == [8, 8, 8, 8]


@pytest.mark.parametrize("preset,plan,boots", [
    ("resnet20", "optimal", 10), ("resnet20", "baseline", 10), ("resnet20", "minrot", 15),
    ("resnet18", "optimal", 65), ("resnet18", "minboot", 38), ("resnet18", "baseline", 38),
])
def test_boot_schedule(preset, plan, boots):
    spec = build_network(preset, plan)
    assert sum(s.count for s in schedule_bootstraps(spec)) == boots
    res = run_inference(spec)
    assert res.ledger.counts["Boot"] == boots
    assert [(s.where, s.count) for s in res.boot_sites] == [(s.where, s.count) for s in schedule_bootstraps(spec)]


@pytest.mark.parametrize("preset,plan", [("resnet20", "optimal"), ("resnet20", "baseline"),
                                         ("resnet18", "optimal"), ("resnet18", "minboot")])
def test_six_levels_per_block(preset, plan):
    res = run_inference(build_network(preset, plan))
    per_block = [lv for name, lv in res.levels if name.startswith("layer")]
    assert per_block and all(lv == BLOCK_LEVELS for lv in per_block)


def test_budget_too_small():
    spec = build_network("resnet20")
    small = HeParams(usable_level=5)
    with pytest.raises(InfeasibleBudget):
        schedule_bootstraps(spec, small)
    with pytest.raises(InfeasibleBudget):
        run_inference(spec, be=Backend(small, "trace"))


def test_larger_budget_fewer_boots():
    spec = build_network("resnet20")
    lc = HeParams(max_level=31, usable_level=16)
    assert run_inference(spec, be=Backend(lc, "trace")).ledger.counts["Boot"] < 10


@pytest.mark.parametrize("plan", ["optimal", "minrot", "baseline"])
def test_resnet20_full_matches_oracle(plan):
    spec = build_network("resnet20", plan)
    res, w, x = _full(spec)
    trace = []
    ref = oracle.forward_ref(spec, w, x, trace)
    assert np.abs(res.logits - ref).max() < 1e-4
    for (n1, a), (n2, b) in zip(res.layer_outputs, trace):
        assert n1 == n2
        assert np.abs(a - b).max() <= 1e-6 * max(1.0, np.abs(b).max())


def test_full_and_trace_ledgers_agree():
    spec = build_network("resnet20", "optimal")
    res, _, _ = _full(spec)
    tr = run_inference(spec)
    assert res.ledger.snapshot() == tr.ledger.snapshot()
    assert res.ledger.rotation_log == tr.ledger.rotation_log


def test_plan_does_not_change_logits():
    outs = [_full(build_network("resnet20", p))[0].logits for p in ("optimal", "minrot", "baseline")]
    np.testing.assert_allclose(outs[0], outs[1], atol=1e-9)
    np.testing.assert_allclose(outs[0], outs[2], atol=1e-9)


def test_unfused_matches_fused():
    spec = build_network("resnet20", "optimal", stages=1)
    a, _, _ = _full(spec, fused=True)
    b, _, _ = _full(spec, fused=False)
    np.testing.assert_allclose(a.logits, b.logits, atol=1e-9)
    assert a.ledger.by_tag() == b.ledger.by_tag()


def test_full_mode_needs_inputs():
    with pytest.raises(ValueError):
        run_inference(build_network("resnet20"), be=Backend(SET_HYP, "full"))


def test_no_level_exhaustion_in_trace():
    for plan in ("optimal", "minrot", "baseline"):
        try:
            run_inference(build_network("resnet20", plan))
        except LevelExhausted as e:  # pragma: no cover
            pytest.fail(f"{plan}: {e}")


def test_weights_from_tensors(tmp_path):
    spec = build_network("resnet20", "optimal", stages=1)
    w = init_weights(spec, 5)
    flat = {}
    for name, (k, b) in w.items():
        flat[name + ".weight"] = k
        if name != "stem":
            flat[name + ".bias"] = b
    oracle.save_tensors(tmp_path / "w", flat)
    got = weights_from_tensors(spec, oracle.load_tensors(tmp_path / "w"))
    np.testing.assert_array_equal(got["fc"][0], w["fc"][0])
    np.testing.assert_array_equal(got["stem"][1], np.zeros(16))
    del flat["fc.weight"]
    with pytest.raises(PlanViolation):
        weights_from_tensors(spec, flat)


@pytest.mark.slow
def test_resnet18_slice_full_matches_oracle():
    spec = build_network("resnet18", "optimal", stages=2, head=False)
    res, w, x = _full(spec)
    ref = oracle.forward_ref(spec, w, x)
    assert np.abs(res.logits - ref).max() < 1e-4


def test_head_gathers_more_cts_than_pixels(rng):
    from fhecnn import hconv
    from fhecnn.layout import GapConfig, Geometry, stage0_layout
    from fhecnn.network import avg_pool_and_fc
    geom = Geometry(16, 2, 2, 2, 2, 4)
    lay = stage0_layout("CA", geom, GapConfig(1, 4), 8)
    assert lay.n_ct > 4
    be = Backend(HeParams(slot_count=16), "full")
    x = rng.standard_normal((8, 2, 2))
    wfc, bfc = rng.standard_normal((3, 8)), rng.standard_normal(3)
    cts = avg_pool_and_fc(be, hconv.encrypt_tensor(be, lay, x), wfc, bfc, 3, [])
    got = np.array([be.decrypt(c)[0] for c in cts])
    np.testing.assert_allclose(got, oracle.fc(oracle.global_avg_pool(x), wfc, bfc), atol=1e-12)
