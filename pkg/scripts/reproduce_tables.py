"""Print the rotation/bootstrap, effective-rotation and memory tables next to
the reference figures, plus closed-form vs simulated counts per network."""
import argparse

from fhecnn import costmodel
from fhecnn.heslot import PRESETS, Backend
from fhecnn.network import build_network, run_inference

WIDTH = dict(SISO=6, RaS=6, IR=6, total=7, eff=7, Boot=5)


def runtime_table(params):
    hdr = f"{'network':10s} {'plan':9s} {'SISO':>6} {'RaS':>6} {'IR':>6} {'total':>7} {'eff':>7} {'Boot':>5}"
    print(hdr)
    print("-" * len(hdr))
    for (preset, plan), ref in costmodel.REF_RUNTIME.items():
        spec = build_network(preset, plan)
        led = run_inference(spec, be=Backend(params, "trace")).ledger
        got = dict(led.table_columns(), Boot=led.counts["Boot"])
        got["eff"] = costmodel.effective_rotations(led, costmodel.default_keyset(spec, params))["total"]
        cf = costmodel.network_cost(spec, params)
        assert cf["total"] == got["total"], "closed form drifted from the simulator"
        cols = ("SISO", "RaS", "IR", "total", "eff", "Boot")
        print(f"{preset:10s} {plan:9s} " + " ".join(f"{got[c]:>{WIDTH[c]}}" for c in cols))
        print(f"{'':10s} {'(ref)':9s} " + " ".join(f"{ref[c]:>{WIDTH[c]}}" for c in cols))


def memory_table(params):
    spec = build_network("resnet18", "optimal")
    for seg in (1, 8):
        g = costmodel.memory_footprint(spec, params, seg).gb()
        print(f"PRCR |S|={seg}: weights {g['weights']:7.2f} GB  bias {g['bias']:5.2f} GB  evk {g['evk']:5.2f} GB")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--params", default="set_hyp", choices=sorted(PRESETS))
    args = ap.parse_args()
    params = PRESETS[args.params]
    runtime_table(params)
    print()
    memory_table(params)
