import numpy as np
import pytest

from fhecnn.heslot import Backend, HeParams
from fhecnn.layout import GapConfig, Geometry, stage0_layout

SMALL = HeParams(slot_count=256)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def be():
    return Backend(SMALL, "full")


def small_layout(kind="CA", m=2, d=2, c_n=2, side=4):
    """One stage-0 layout whose ciphertext holds c_n*m channels."""
    geom = Geometry(c_n * side * side * m * d, side, side, side, side, m * d)
    if kind == "MP":
        geom = Geometry(c_n * d * side * side * m, side, side, side, side, m)
        return stage0_layout("MP", geom, GapConfig(m, 1), c_n * m)
    lay = stage0_layout("CA", geom, GapConfig(m, d), c_n * m)
    return lay if kind == "CA" else lay.with_kind("RA", c_n * m)
