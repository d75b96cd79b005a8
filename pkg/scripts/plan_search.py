"""Rank gap plans by weighted rotation and bootstrap cost and show how the
winner moves as the bootstrap weight changes."""
import argparse

from fhecnn.costmodel import search_plans
from fhecnn.heslot import OP_TIMES_MS

ap = argparse.ArgumentParser(description=__doc__)
ap.add_argument("--preset", default="resnet20")
ap.add_argument("--top", type=int, default=10)
ap.add_argument("--sweep", action="store_true", help="vary the bootstrap weight")
args = ap.parse_args()

ranked = search_plans(args.preset)
print(f"{'rank':>4}  {'plan':28s} {'rot':>6} {'boot':>5} {'score':>10}")
for i, s in enumerate(ranked[:args.top], 1):
    print(f"{i:>4}  {str(s.plan):28s} {s.rotations:>6} {s.boots:>5} {s.score:>10.1f}")

if args.sweep:
    print("\nbootstrap/rotation weight ratio -> best plan")
    for ratio in (1, 10, 50, 139, 500, 2000):
        best = search_plans(args.preset, OP_TIMES_MS["CRot"], OP_TIMES_MS["CRot"] * ratio)[0]
        print(f"{ratio:>6}  {best.plan}  ({best.rotations} rot, {best.boots} boot)")
