"""``iotchain`` command line: generate, run, provenance, pow-table, verify-ledger."""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import pow as pow_mod
from .codec import BlockId, CodecError
from .ledger import LedgerError, load_ledger, verify_ledger
from .provenance import ProvenanceError, build_dag, export
from .simnet import (GeneratorConfig, Scenario, SimError, generate_scenario, load_config, run,
                     write_outputs)


class CliError(Exception):
    pass


def _int(text: str) -> int:
    return int(text, 0)


def _handlers(text: str) -> list[int]:
    return [int(t, 0) for t in text.split(",") if t.strip()]


def _scenario(args) -> Scenario:
    if args.config:
        sc = load_config(args.config)
        if args.seed is not None:
            sc = sc.with_(seed=args.seed)
    else:
        gen = GeneratorConfig()
        if args.chains is not None:
            gen = GeneratorConfig(**{**gen.__dict__, "chains": args.chains})
        if args.miners is not None:
            # miners per chain is the chain length
            gen = GeneratorConfig(**{**gen.__dict__, "min_length": args.miners,
                                     "max_length": args.miners})
        sc = generate_scenario(gen, args.seed or 0)
    if args.cut is not None:
        sc = sc.with_(cut=args.cut)
    return sc


def _emit(data: bytes, out: str | None, default_name: str) -> str:
    if out is None:
        sys.stdout.write(data.decode())
        return "-"
    path = os.path.join(out, default_name) if os.path.isdir(out) or out.endswith(os.sep) else out
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(data)
    return path


def cmd_generate(args) -> int:
    sc = _scenario(args)
    path = _emit(sc.to_json().encode(), args.out, "scenario.json")
    if path != "-":
        print(f"wrote {path}: {len(sc.devices)} devices, {len(sc.chains)} chains", file=sys.stderr)
    return 0


def cmd_run(args) -> int:
    sc = _scenario(args)
    result = run(sc, args.duration)
    out = args.out or "out"
    paths = write_outputs(result, out)
    m = result.metrics
    summary = {
        "blocks_committed": result.ledger.committed_count(),
        "events_committed": m.committed_events,
        "mean_latency_ms": round(m.mean_latency(), 3),
        "mean_mer": round(m.mean_mer(), 4),
        "digests": result.digests(),
        "outputs": paths,
    }
    if args.format == "text":
        for k, v in summary.items():
            print(f"{k}: {v}")
    elif args.format == "csv":
        sys.stdout.write(m.to_csv())
    else:
        print(json.dumps(summary, indent=1, sort_keys=True))
    return 0


def cmd_provenance(args) -> int:
    ledger_path = args.ledger
    config = args.config or os.path.join(os.path.dirname(ledger_path) or ".", "scenario.json")
    if not os.path.exists(config):
        raise CliError(f"no scenario config: pass --config (looked for {config})")
    sc = load_config(config)
    with open(ledger_path, "rb") as fh:
        ledger = load_ledger(fh.read())
    before = BlockId.parse(args.before) if args.before else None
    dag = build_dag(ledger, _handlers(args.end), sc.deps, sc.owners, before)
    fmt = "structured" if args.format in ("text", "csv", "structured", "json") else "dot"
    ext = "dot" if fmt == "dot" else "json"
    path = _emit(export(dag, fmt), args.out, f"provenance.{ext}")
    if path != "-":
        print(f"wrote {path}: {len(dag.nodes)} nodes, {len(dag.edges)} edges, "
              f"roots {', '.join(dag.roots())}", file=sys.stderr)
    return 0


def cmd_pow_table(args) -> int:
    rows = pow_mod.recompute_table()
    ok = True
    if args.format == "csv":
        print("ordinal,printed_prime,prime,roots,printed_roots,k,printed_k,match")
    else:
        print(f"{'n':>5} {'printed p':>9} {'p':>6} {'roots':>6} {'printed':>7} "
              f"{'K':>6} {'printed':>7}  status")
    for r in rows:
        ok &= r.ok
        status = "ok" if r.ok else "MISMATCH"
        if r.typo:
            status += f" (printed prime {r.printed_prime} is not the {r.ordinal}th prime {r.prime})"
        if args.format == "csv":
            print(f"{r.ordinal},{r.printed_prime},{r.prime},{r.roots},{r.printed_roots},"
                  f"{r.k},{r.printed_k},{int(r.ok)}")
        else:
            print(f"{r.ordinal:>5} {r.printed_prime:>9} {r.prime:>6} {r.roots:>6} "
                  f"{r.printed_roots:>7} {r.k:>6} {r.printed_k:>7}  {status}")
    return 0 if ok else 1


def cmd_verify_ledger(args) -> int:
    report = verify_ledger(args.ledger)
    if report.ok:
        print(f"ok: {report.records} records verified")
        return 0
    print(f"FAILED at record {report.failed_record} (block {report.failed_block}): {report.error}")
    return 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="scenario or generator config (JSON)")
    common.add_argument("--seed", type=_int)
    common.add_argument("--chains", type=int)
    common.add_argument("--miners", type=int, help="miners per chain (chain length)")
    common.add_argument("--cut", type=int, help="partial-cut limit C (1 = LRU)")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--format", choices=("dot", "csv", "text", "structured", "json"))

    p = argparse.ArgumentParser(prog="iotchain", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write a generated scenario").set_defaults(
        func=cmd_generate)
    r = sub.add_parser("run", parents=[common], help="simulate and write metrics, ledger, trace")
    r.add_argument("--duration", type=float, default=60.0, help="simulated seconds")
    r.set_defaults(func=cmd_run)
    pv = sub.add_parser("provenance", parents=[common], help="provenance DAG from a ledger file")
    pv.add_argument("--ledger", default=os.path.join("out", "ledger.bin"))
    pv.add_argument("--end", required=True, help="end event handlers, e.g. 0x51,0x52")
    pv.add_argument("--before", help="only blocks committed up to chain:pos")
    pv.set_defaults(func=cmd_provenance)
    sub.add_parser("pow-table", parents=[common], help="recompute the puzzle table").set_defaults(
        func=cmd_pow_table)
    vl = sub.add_parser("verify-ledger", parents=[common], help="audit a ledger file")
    vl.add_argument("ledger")
    vl.set_defaults(func=cmd_verify_ledger)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, CliError, SimError, CodecError, LedgerError,
            ProvenanceError) as exc:
        print(f"iotchain {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
