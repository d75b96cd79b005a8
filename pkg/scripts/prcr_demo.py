"""Run one segmented convolution in full mode and compare against the plain
convolution, reporting stored plaintexts and rotation counts per segment count."""
import argparse

import numpy as np

from fhecnn import hconv, oracle
from fhecnn.hconv import Packed
from fhecnn.heslot import Backend, HeParams
from fhecnn.layout import PrcrLayout

ap = argparse.ArgumentParser(description=__doc__)
ap.add_argument("--channels", type=int, default=8)
ap.add_argument("--size", type=int, default=16)
ap.add_argument("--slots", type=int, default=4096)
ap.add_argument("--seed", type=int, default=0)
args = ap.parse_args()

rng = np.random.default_rng(args.seed)
c, h = args.channels, args.size
x = rng.standard_normal((c, h, h))
K = rng.standard_normal((c, c, 3, 3))
ref = oracle.conv2d_ref(x, K)
print(f"{'|S|':>4} {'stored pt':>10} {'PRot':>6} {'CRot':>6} {'max err':>10}")
for S in (1, 2, 4, 8):
    lay = PrcrLayout(args.slots, S, c, h, h, min(c, args.slots // S // (h // S * h)))
    be = Backend(HeParams(slot_count=args.slots), "full")
    out, st = hconv.prcr_conv(be, Packed([be.encrypt(v) for v in lay.pack(x)], lay), K)
    err = np.abs(out.layout.unpack([be.decrypt(v) for v in out.cts]) - ref).max()
    print(f"{S:>4} {st['stored_pt']:>10} {be.ledger.counts['PRot']:>6} {be.ledger.counts['CRot']:>6} {err:>10.1e}")
