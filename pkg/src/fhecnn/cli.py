"""Command line entry point: run, tables, search, footprint.

Settings come from an INI-style config file and can be overridden with
flags or ``--set section.key=value``.  Exit codes: 0 pass, 1 mismatch or
invariant breach, 2 configuration error.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import costmodel, oracle
from .errors import ConfigError, PlanViolation, SimError
from .heslot import PRESETS, Backend
from .network import build_network, init_weights, run_inference, weights_from_tensors

log = logging.getLogger("fhecnn")

SCHEMA = "fhecnn.report/1"
DEFAULTS = {
    "network": {"preset": "resnet20", "plan": "optimal", "stages": "", "head": "true"},
    "backend": {"params": "set_hyp", "mode": "trace", "fused": "true", "max_memory_gb": "8"},
    "run": {"seed": "0", "tolerance": "1e-4", "prcr_segments": "1", "check_reference": "false"},
    "search": {"w_crot": "15.5", "w_boot": "2160", "top": "0"},
}
# flag name -> (section, key)
FLAG_KEYS = {
    "preset": ("network", "preset"), "plan": ("network", "plan"), "stages": ("network", "stages"),
    "params": ("backend", "params"), "mode": ("backend", "mode"), "seed": ("run", "seed"),
    "prcr": ("run", "prcr_segments"), "w_crot": ("search", "w_crot"), "w_boot": ("search", "w_boot"),
    "top": ("search", "top"), "tolerance": ("run", "tolerance"),
}


def load_config(path, args) -> configparser.ConfigParser:
    cfg = configparser.ConfigParser()
    cfg.read_dict(DEFAULTS)
    if path:
        if not Path(path).exists():
            raise ConfigError(f"config file {path} not found")
        cfg.read(path)
    for flag, (sec, key) in FLAG_KEYS.items():
        v = getattr(args, flag, None)
        if v is not None:
            cfg[sec][key] = str(v)
    for item in getattr(args, "set", None) or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        lhs, val = item.split("=", 1)
        sec, key = lhs.split(".", 1)
        if not cfg.has_section(sec):
            cfg.add_section(sec)
        cfg[sec][key] = val
    return cfg


def _get(cfg, sec, key, conv=str):
    raw = cfg[sec][key]
    try:
        if conv is bool:
            return cfg.getboolean(sec, key)
        return conv(raw)
    except ValueError as e:
        raise ConfigError(f"[{sec}] {key} = {raw!r}: {e}") from None


def _spec(cfg):
    stages = cfg["network"]["stages"].strip()
    try:
        return build_network(_get(cfg, "network", "preset"), _get(cfg, "network", "plan"),
                             int(stages) if stages else None, _get(cfg, "network", "head", bool))
    except (PlanViolation, ValueError) as e:
        raise ConfigError(str(e)) from None


def _params(cfg):
    name = _get(cfg, "backend", "params")
    if name not in PRESETS:
        raise ConfigError(f"unknown parameter set {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]


def _write(text: str, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _full_mode_bytes(spec, params) -> float:
    from .network import stage_layouts
    n_ct = max(l.n_ct for l in stage_layouts(spec, params.slot_count))
    return params.slot_count * 8.0 * (2 * n_ct * 9 + 64)


def cmd_run(cfg, out=None) -> int:
    spec = _spec(cfg)
    params = _params(cfg)
    mode = _get(cfg, "backend", "mode")
    if mode not in ("full", "trace"):
        raise ConfigError(f"mode must be full or trace, got {mode!r}")
    seed = _get(cfg, "run", "seed", int)
    x = w = None
    if mode == "full":
        need = _full_mode_bytes(spec, params) / 1e9
        if need > _get(cfg, "backend", "max_memory_gb", float):
            raise ConfigError(f"full mode needs about {need:.1f} GB; raise backend.max_memory_gb or use trace")
        wpath = cfg["run"].get("weights", "").strip()
        w = weights_from_tensors(spec, oracle.load_tensors(wpath)) if wpath else init_weights(spec, seed)
        x = np.random.default_rng(seed + 1).standard_normal(spec.in_shape)
    be = Backend(params, mode)
    res = run_inference(spec, x, w, be, fused=_get(cfg, "backend", "fused", bool))
    led = res.ledger
    rep = {
        "schema": SCHEMA, "command": "run", "preset": spec.preset, "plan": str(spec.plan),
        "mode": mode, "seed": seed, "counts": led.snapshot()["counts"],
        "rotations": led.by_tag(), "table": led.table_columns(),
        "effective": costmodel.effective_rotations(led, costmodel.default_keyset(spec, params)),
        "boots": led.counts["Boot"],
        "boot_sites": [vars(s) for s in res.boot_sites],
        "levels": res.levels, "peak_live_ct": led.peak_live_ct,
    }
    status = 0
    if mode == "full":
        ref = oracle.forward_ref(spec, w, x)
        err = float(np.abs(res.logits - ref).max())
        rep["logits_checksum"] = hashlib.sha256(np.ascontiguousarray(res.logits).tobytes()).hexdigest()[:16]
        rep["oracle_max_error"] = err
        if err > _get(cfg, "run", "tolerance", float):
            log.error("oracle mismatch: max error %.3g", err)
            status = 1
    if _get(cfg, "run", "check_reference", bool):
        exp = costmodel.REF_RUNTIME.get((spec.preset, _get(cfg, "network", "plan").lower()))
        if exp:
            got = dict(rep["table"], Boot=rep["boots"])
            diff = {k: (v, got[k]) for k, v in exp.items() if k in got and got[k] != v}
            rep["reference_diff"] = diff
            if diff:
                status = 1
    rep["status"] = "PASS" if status == 0 else "FAIL"
    _write(json.dumps(rep, indent=2) + "\n", out)
    return status


def cmd_tables(cfg, which, out=None, fmt="csv") -> int:
    params = _params(cfg)
    rows = []
    if "conv" in which:
        for f in (1, 3):
            rows += costmodel.conv_table_rows(f, 4, 2, 2)
    if "runtime" in which:
        rows += costmodel.runtime_table_rows(params)
    if "memory" in which:
        rows += costmodel.memory_table_rows(params)
    for r in rows:
        r["status"] = "PASS" if r.pop("ok") else "FAIL"
    fields = ["table", "row", "column", "expected", "measured", "status"]
    if fmt == "csv":
        buf = _Buf()
        wr = csv.DictWriter(buf, fieldnames=fields)
        wr.writeheader()
        wr.writerows(rows)
        _write(buf.text, out)
    else:
        lines = [f"{r['table']:8s} {r['row']:34s} {r['column']:7s} expected={r['expected']!s:>8} "
                 f"measured={r['measured']!s:>8}  {r['status']}" for r in rows]
        _write("\n".join(lines) + "\n", out)
    return 1 if any(r["status"] == "FAIL" for r in rows) else 0


class _Buf:
    def __init__(self):
        self.text = ""

    def write(self, s):
        self.text += s


def cmd_search(cfg, out=None) -> int:
    preset = _get(cfg, "network", "preset")
    ranked = costmodel.search_plans(preset, _get(cfg, "search", "w_crot", float),
                                    _get(cfg, "search", "w_boot", float), _params(cfg))
    top = _get(cfg, "search", "top", int)
    if top > 0:
        ranked = ranked[:top]
    buf = _Buf()
    wr = csv.writer(buf)
    wr.writerow(["rank", "plan", "rotations", "boots", "score"])
    for i, s in enumerate(ranked, 1):
        wr.writerow([i, str(s.plan), s.rotations, s.boots, f"{s.score:.1f}"])
    _write(buf.text, out)
    return 0


def cmd_footprint(cfg, out=None) -> int:
    spec = _spec(cfg)
    params = _params(cfg)
    seg = _get(cfg, "run", "prcr_segments", int)
    if seg < 1 or seg & (seg - 1):
        raise ConfigError("prcr_segments must be a power of two")
    rep = costmodel.memory_footprint(spec, params, seg)
    body = {"schema": SCHEMA, "command": "footprint", "preset": spec.preset, "plan": str(spec.plan),
            "params": _get(cfg, "backend", "params"), "prcr_segments": seg,
            "weight_slots": rep.weight_slots, "n_evk": rep.n_evk, "gb": rep.gb(),
            "per_block_gb": {k: v / 1e9 for k, v in rep.per_block.items()}}
    _write(json.dumps(body, indent=2) + "\n", out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fhecnn", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--set", action="append", metavar="SEC.KEY=VAL", help="override a config entry")
        p.add_argument("--params", help="set_hyp or set_lc")
        p.add_argument("--out", help="write the report here instead of stdout")
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("run", help="simulate one network")
    common(p)
    p.add_argument("--preset")
    p.add_argument("--plan", help="optimal, minrot, minboot, baseline or (m,d)/(m,d)/...")
    p.add_argument("--stages", type=int)
    p.add_argument("--mode", choices=("full", "trace"))
    p.add_argument("--seed", type=int)
    p.add_argument("--tolerance", type=float)

    p = sub.add_parser("tables", help="expected-vs-measured rows for the reference tables")
    common(p)
    p.add_argument("--tables", default="conv,runtime,memory",
                   help="comma list from conv,runtime,memory (empty for none)")
    p.add_argument("--format", choices=("csv", "text"), default="csv")

    p = sub.add_parser("search", help="rank gap plans")
    common(p)
    p.add_argument("--preset")
    p.add_argument("--w-crot", dest="w_crot", type=float)
    p.add_argument("--w-boot", dest="w_boot", type=float)
    p.add_argument("--top", type=int)

    p = sub.add_parser("footprint", help="memory footprint report")
    common(p)
    p.add_argument("--preset")
    p.add_argument("--plan")
    p.add_argument("--prcr", type=int, help="PRCR segment count")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args)
        if args.verb == "run":
            return cmd_run(cfg, args.out)
        if args.verb == "tables":
            which = {t.strip() for t in args.tables.split(",") if t.strip()}
            bad = which - {"conv", "runtime", "memory"}
            if bad:
                raise ConfigError(f"unknown tables {sorted(bad)}")
            return cmd_tables(cfg, which, args.out, args.format)
        if args.verb == "search":
            return cmd_search(cfg, args.out)
        return cmd_footprint(cfg, args.out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except SimError as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
