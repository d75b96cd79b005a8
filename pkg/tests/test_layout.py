import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fhecnn.errors import (CapacityExceeded, FormatMismatch, GapMismatch, IndivisibleHeight,
                           PlanViolation, ShapeMismatch)
from fhecnn.layout import (DataFormat, GapConfig, Geometry, PrcrLayout, build_masks,
                           multiplexed_pack, multiplexed_unpack, next_layout, pack, prcr_format,
                           stage0_layout, unpack)

from conftest import small_layout


@pytest.mark.parametrize("text", ["Ca[16]H[32]W[32]Rg[2]Cg[1]", "Ra[8]H[8]W[8]Cg[4]Rg[2]", "S[8]Hs[28]W[56]"])
def test_format_string_roundtrip(text):
    fmt = DataFormat.parse(text)
    assert DataFormat.parse(fmt.to_string()) == fmt


def test_format_errors():
    with pytest.raises(FormatMismatch):
        DataFormat.parse("Q[3]")
    with pytest.raises(FormatMismatch):
        DataFormat.parse("H[4]W")
    with pytest.raises(GapMismatch):
        DataFormat((("H", 4), ("W", 4), ("R_g", 3)))


def test_format_pack_roundtrip(rng):
    fmt = DataFormat.parse("Ca[4]H[5]W[6]Rg[2]")
    x = rng.standard_normal((4, 5, 6))
    v = pack(x, fmt, 512)
    np.testing.assert_array_equal(unpack(v, fmt), x)
    with pytest.raises(CapacityExceeded):
        pack(x, fmt, 128)
    with pytest.raises(ShapeMismatch):
        pack(x[:3], fmt, 512)


def test_prcr_format():
    fmt = DataFormat.parse("Ca[4]H[224]W[224]")
    seg = prcr_format(fmt, 8)
    assert seg.get("S") == 8 and seg.get("H'") == 28
    assert seg.size == fmt.size and seg.height == 224
    assert prcr_format(fmt, 1) is fmt
    with pytest.raises(IndivisibleHeight):
        prcr_format(DataFormat.parse("H[7]W[7]"), 2)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([1, 4, 16]), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_multiplexed_roundtrip(m, h, w, seed):
    x = np.random.default_rng(seed).standard_normal((m, h, w))
    img = multiplexed_pack(x, m)
    g = int(np.sqrt(m))
    assert img.shape == (g * h, g * w)
    np.testing.assert_array_equal(multiplexed_unpack(img, m), x)


def test_multiplexed_needs_square():
    with pytest.raises(GapMismatch):
        multiplexed_pack(np.zeros((2, 3, 3)), 2)


def test_gap_config():
    assert GapConfig(2, 4).cell == 8
    with pytest.raises(PlanViolation):
        GapConfig(3, 1)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(["CA", "RA", "MP"]), st.sampled_from([(1, 1), (1, 2), (2, 1), (2, 2), (1, 4), (4, 1)]),
       st.sampled_from([1, 2, 4]), st.integers(0, 2**32 - 1))
def test_slot_layout_roundtrip(kind, md, c_n, seed):
    m, d = md
    lay = small_layout(kind, m, d, c_n)
    x = np.random.default_rng(seed).standard_normal((lay.channels, *lay.hw))
    vecs = lay.pack(x)
    assert len(vecs) == lay.n_ct
    np.testing.assert_array_equal(lay.unpack(vecs), x)


def test_stride_two_layout(rng):
    geom = Geometry(4096, 8, 8, 8, 8, 2)
    lay = stage0_layout("CA", geom, GapConfig(1, 2), 16)
    nxt = next_layout(lay, GapConfig(2, 4), 32)
    assert (nxt.m, nxt.d, nxt.stage, nxt.hw) == (2, 4, 1, (4, 4))
    x = rng.standard_normal((32, 4, 4))
    np.testing.assert_array_equal(nxt.unpack(nxt.pack(x)), x)
    with pytest.raises(PlanViolation):
        next_layout(lay, GapConfig(2, 2), 32)
    with pytest.raises(PlanViolation):
        next_layout(stage0_layout("CA", geom, GapConfig(2, 1), 16), GapConfig(1, 8), 32)


def test_layout_errors():
    geom = Geometry(1024, 8, 8, 8, 8, 2)
    with pytest.raises(GapMismatch):
        stage0_layout("CA", geom, GapConfig(1, 1), 8)
    with pytest.raises(CapacityExceeded):
        Geometry(64, 8, 8, 8, 8, 2)
    lay = stage0_layout("CA", geom, GapConfig(2, 1), 8)
    with pytest.raises(ShapeMismatch):
        lay.pack(np.zeros((8, 4, 4)))


def test_data_format_view():
    lay = small_layout("CA", 2, 2, 2)
    fmt = lay.data_format()
    assert fmt.get("C_a") == 2 and fmt.get("R_g") == 2 and fmt.get("C_g") == 2
    assert "Rg[2]" in lay.to_string()


@pytest.mark.parametrize("purpose,count", [("gap_select", "d"), ("ir_move", "m"), ("segment", "nblk")])
def test_masks_partition_valid_slots(purpose, count):
    lay = small_layout("CA", 2, 2, 4)
    ms = build_masks(lay, purpose)
    n = {"d": lay.d, "m": lay.m, "nblk": lay.geom.nblk}[count]
    assert len(ms) == n
    total = sum(ms[k] for k in range(n))
    np.testing.assert_array_equal(total, lay.idx.valid.astype(float))
    with pytest.raises(ValueError):
        build_masks(lay, "nope")


@settings(max_examples=25, deadline=None)
@given(st.sampled_from([1, 2, 4, 8]), st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_prcr_layout_roundtrip(S, c, seed):
    lay = PrcrLayout(1024, S, c, 8, 4, 4 if S <= 4 else 2)
    x = np.random.default_rng(seed).standard_normal((c, 8, 4))
    vecs = lay.pack(x)
    assert len(vecs) == lay.n_ct
    np.testing.assert_array_equal(lay.unpack(vecs), x)


def test_prcr_layout_errors():
    with pytest.raises(IndivisibleHeight):
        PrcrLayout(1024, 4, 2, 6, 4, 1)
    with pytest.raises(CapacityExceeded):
        PrcrLayout(256, 4, 8, 8, 8, 8)
    lay = PrcrLayout(256, 2, 2, 4, 4, 2)
    ix = lay.index()
    assert ix["valid"].sum() == 2 * 4 * 4
    assert set(np.unique(ix["seg"])) == {0, 1}
