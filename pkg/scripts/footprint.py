"""Weight-plaintext memory per block with and without segmented reuse."""
import argparse

from fhecnn.costmodel import memory_footprint
from fhecnn.heslot import PRESETS
from fhecnn.network import build_network

ap = argparse.ArgumentParser(description=__doc__)
ap.add_argument("--preset", default="resnet18")
ap.add_argument("--plan", default="optimal")
ap.add_argument("--params", default="set_hyp", choices=sorted(PRESETS))
args = ap.parse_args()

spec = build_network(args.preset, args.plan)
params = PRESETS[args.params]
segs = (1, 2, 4, 8)
reps = {s: memory_footprint(spec, params, s) for s in segs}
print(f"{'block':12s}" + "".join(f"{'|S|=' + str(s):>11}" for s in segs))
for name in reps[1].per_block:
    print(f"{name:12s}" + "".join(f"{reps[s].per_block[name] / 1e9:>10.2f}G" for s in segs))
print(f"{'total':12s}" + "".join(f"{reps[s].weight_pt_bytes / 1e9:>10.2f}G" for s in segs))
print(f"evaluation keys: {reps[1].n_evk} x {params.evk_bytes / 2**20:.0f} MiB = {reps[1].evk_bytes / 1e9:.2f} GB")
