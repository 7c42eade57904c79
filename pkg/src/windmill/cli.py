"""Command-line front end: generate, map, sim, report.

Exit codes are a stable contract: 0 success, 2 parse/validation failure,
3 unmappable graph, 4 run-time limit or machine fault. All outputs are
byte-reproducible for identical inputs; ``--timestamps`` opts into a
wall-clock line in the text report.
"""

from __future__ import annotations

import argparse
import itertools
import logging
import os
import struct
import sys
import time

from . import arch as arch_mod
from .arch import ExecMode, TopologyKind, parse_arch_file, perimeter_lsu_map
from .errors import (CycleLimitExceeded, MissingService, ParseError,
                     SimulationError, Unmappable, ValidationError, WindmillError)
from .mapper import emit_bitstream, map_dfg, parse_dfg
from .pe import unpack_bitstream
from .plugins import build_system, elaborate_arch, report_from_build
from .system import HostCommand, parse_script

log = logging.getLogger("windmill")

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_UNMAPPABLE = 3
EXIT_RUNTIME = 4

_SWEEP_FIELDS = {
    "rows": int, "cols": int, "sm_banks": int, "bank_depth": int,
    "context_depth_mcmd": int, "topology": TopologyKind, "exec_mode": ExecMode,
}


def _read_text(path: str) -> str:
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read()


def _read_image(path: str) -> list[int]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) % 4:
        raise ParseError(f"{path}: image length {len(blob)} is not word aligned")
    return list(struct.unpack(f"<{len(blob) // 4}I", blob))


def _write_image(path: str, words: list[int]):
    with open(path, "wb") as fh:
        fh.write(struct.pack(f"<{len(words)}I", *[w & 0xFFFFFFFF for w in words]))


def _load_arch(path: str):
    return parse_arch_file(_read_text(path))


# --- generate ----------------------------------------------------------------


def _sweep_values(spec: str):
    key, _, values = spec.partition("=")
    key = key.strip()
    if key not in _SWEEP_FIELDS:
        raise ParseError(f"--sweep key {key!r} not sweepable")
    cast = _SWEEP_FIELDS[key]
    out = []
    for v in values.split(","):
        v = v.strip()
        out.append(cast(int(v, 0)) if cast is int else cast(v.lower()))
    return key, out


def _apply_sweep(params, assignment: dict):
    from dataclasses import replace
    params = replace(params, **assignment)
    if "rows" in assignment or "cols" in assignment:
        cpe_at = (1, 1) if params.cpe_enabled else None
        params = replace(params, pe_type_map=perimeter_lsu_map(params.rows, params.cols,
                                                               cpe_at))
    return arch_mod.validate(params)


def cmd_generate(args) -> int:
    base = _load_arch(args.arch)
    sweeps = [_sweep_values(s) for s in (args.sweep or [])]
    configs = []
    if sweeps:
        keys = [k for k, _ in sweeps]
        for combo in itertools.product(*[vals for _, vals in sweeps]):
            configs.append(_apply_sweep(base, dict(zip(keys, combo))))
    else:
        configs.append(base)

    rows = []
    for params in configs:
        ctx = elaborate_arch(params)
        report = report_from_build(ctx)
        rows.append(report)
        for plugin, phase, seq in ctx.phase_log:
            log.info("elaborated %-12s %s (#%d)", plugin, phase, seq)

    lines = []
    if args.timestamps:
        lines.append(f"# generated at {time.strftime('%Y-%m-%dT%H:%M:%S')}")
    for report in rows:
        lines += [
            f"array: {report.rows}x{report.cols} ({report.topology}, {report.exec_mode})",
            f"  pes: {report.gpe_count} GPE, {report.lsu_count} LSU, {report.cpe_count} CPE",
            f"  links: {report.links_directed} directed",
            f"  context: {report.context_words_per_pe} words/PE, "
            f"{report.context_bits_total} bits total",
            f"  shared memory: {report.sm_banks} banks x {report.bank_depth} x "
            f"{report.bank_width} bits = {report.sm_bytes} bytes",
            f"  shared regs: {report.shared_reg_count} ({report.shared_reg_mode})",
            f"  rpus: {report.rpu_count}",
        ]
    print("\n".join(lines))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(",".join(rows[0].CSV_COLUMNS) + "\n")
            for report in rows:
                fh.write(report.csv_row() + "\n")
    return EXIT_OK


# --- map -----------------------------------------------------------------------


def cmd_map(args) -> int:
    params = _load_arch(args.arch)
    dfg = parse_dfg(_read_text(args.dfg))
    mapping = map_dfg(dfg, params)
    blob = emit_bitstream(mapping)
    with open(args.out, "wb") as fh:
        fh.write(blob)
    print(f"mapped {len(mapping.placement)} ops: schedule length "
          f"{mapping.schedule_length}, {mapping.route_op_count()} route ops, "
          f"{len(mapping.pes_used())} PEs, {len(blob)} bitstream bytes")
    lsus = sorted(set(mapping.lsu_bindings.values()))
    print(f"lsus used: {len(lsus)}")
    return EXIT_OK


# --- sim ------------------------------------------------------------------------


def cmd_sim(args) -> int:
    params = _load_arch(args.arch)
    ctx = elaborate_arch(params)
    image = _read_image(args.data) if args.data else []
    system = build_system(ctx, image, cycle_limit=args.cycle_limit)
    records = unpack_bitstream(open(args.bitstream, "rb").read())
    system.register_config(0, records)
    if args.script:
        system.submit_script(parse_script(_read_text(args.script)))
        result_len = args.result_len
    else:
        n = len(image)
        result_len = args.result_len
        system.submit_script([
            HostCommand(0x01, (0x1, 0)),
            HostCommand(0x02, (0x1, 0, 0, n, 1)),
            HostCommand(0x03, (0x1,)),
            HostCommand(0x04, (0x1, args.result_addr, 0, result_len)),
        ])
    partial = None
    try:
        stats = system.run()
    except (CycleLimitExceeded, SimulationError) as exc:
        system._finalize_stats()
        partial = exc
        stats = system.stats
    if args.out:
        _write_image(args.out, system.results_words(result_len))
    if args.stats:
        with open(args.stats, "w", encoding="utf-8") as fh:
            fh.write(stats.csv_header() + "\n")
            fh.write(stats.csv_row() + "\n")
    if partial is not None:
        print(f"error: {partial}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"done in {stats.total_cycles} cycles, "
          f"{stats.host_commands} host commands, "
          f"{stats.bank_conflicts} bank conflicts")
    return EXIT_OK


# --- report ----------------------------------------------------------------------


def cmd_report(args) -> int:
    text = _read_text(args.stats)
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if len(lines) < 2:
        raise ParseError(f"{args.stats}: expected a header row and a data row")
    header = lines[0].split(",")
    for data in lines[1:]:
        values = data.split(",")
        width = max(len(h) for h in header)
        for h, v in zip(header, values):
            print(f"{h:<{width}}  {v}")
    return EXIT_OK


# --- entry ------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="windmill",
                                     description="CGRA generator, mapper, simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="elaborate an architecture, report resources")
    g.add_argument("--arch", required=True)
    g.add_argument("--out", help="CSV report path")
    g.add_argument("--sweep", action="append", metavar="KEY=V1,V2",
                   help="sweep a parameter over values (repeatable)")
    g.add_argument("--jobs", type=int, default=1, help="reserved; runs sequentially")
    g.add_argument("--timestamps", action="store_true")
    g.set_defaults(fn=cmd_generate)

    m = sub.add_parser("map", help="compile a dataflow graph to a bitstream")
    m.add_argument("--arch", required=True)
    m.add_argument("--dfg", required=True)
    m.add_argument("--out", required=True, help="bitstream output path")
    m.set_defaults(fn=cmd_map)

    s = sub.add_parser("sim", help="run the host protocol over a bitstream")
    s.add_argument("--arch", required=True)
    s.add_argument("--bitstream", required=True)
    s.add_argument("--data", help="input image (little-endian 32-bit words)")
    s.add_argument("--script", help="host command script; default is the 4-step flow")
    s.add_argument("--out", help="results binary path")
    s.add_argument("--stats", help="stats CSV path")
    s.add_argument("--result-addr", type=lambda v: int(v, 0), default=0)
    s.add_argument("--result-len", type=lambda v: int(v, 0), default=0)
    s.add_argument("--cycle-limit", type=lambda v: int(v, 0), default=1_000_000)
    s.set_defaults(fn=cmd_sim)

    r = sub.add_parser("report", help="pretty-print a stats CSV")
    r.add_argument("--stats", required=True)
    r.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("WINDMILL_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ParseError, ValidationError, MissingService) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Unmappable as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNMAPPABLE
    except (CycleLimitExceeded, SimulationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except WindmillError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
