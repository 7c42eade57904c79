"""Dataflow-graph compiler: parse, place, route, schedule, emit.

DFG text format (normative grammar in docs/formats.md)::

    # comment
    in  a 0          # node a loads shared-memory word 0
    in  b 1
    t1  add a b      # node line: <id> <op> <operand ids...>
    c4  const 7
    t2  mul t1 c4
    out t2 16        # store node t2's value to word 16

Ops: add sub mul and or xor shl shr lt sel phi load store const, plus the
in/out directives. ``load``/``store`` take their address from an operand
(the non-affine path); in/out bind fixed addresses. ``sel p a b`` is a
ternary select, lowered to a mask-and-merge of two predicated passes.

Mapping strategy: greedy placement in a demand-driven topological order
(consumers fire as soon as their operands exist), minimizing summed
Manhattan distance to placed predecessors with a light spreading penalty.
Values travel as chains of single-target sends and ROUTE hops; a node with
one remote consumer drives the first link straight from its datapath,
anything else parks in the accumulator and sends from there. Chains are
routed lazily -- when their consumer, or a reuse of the producer's
accumulator, demands them -- and each is scheduled atomically, with every
input latch alternating strictly between one scheduled arrival and its
consumption. That alternation is what makes the one-deep elastic links of
the array deliver tokens in exactly the order the schedule consumes them,
whatever dynamic stalls occur; a congestion-blocked node simply retries
after other nodes drain their arrivals. Constants fold into a consumer's
immediate field when they fit; wider constants materialize as a shift-add
chain.

``reference_execute`` is the independent correctness oracle: plain
topological evaluation with the same 32-bit wrapping semantics as the PE
ALU. For every mappable DFG, simulating the emitted bitstream must
reproduce its output image bit for bit.
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass, field

from .arch import ArchParams, PeType, TopologyKind
from .errors import CyclicGraph, ParseError, UnboundOperand, Unmappable
from .interconnect import Direction, neighbor_map
from .pe import (ConfigWord, DstSel, MASK32, Opcode, SrcSel, alu_eval,
                 pack_bitstream)

_OPS = {
    "add": Opcode.ADD, "sub": Opcode.SUB, "mul": Opcode.MUL,
    "and": Opcode.AND, "or": Opcode.OR, "xor": Opcode.XOR,
    "shl": Opcode.SHL, "shr": Opcode.SHR, "lt": Opcode.CMP_LT,
    "sel": Opcode.SEL, "phi": Opcode.PHI,
    "load": Opcode.LOAD, "store": Opcode.STORE,
}

_ARITY = {"add": 2, "sub": 2, "mul": 2, "and": 2, "or": 2, "xor": 2,
          "shl": 2, "shr": 2, "lt": 2, "sel": 3, "phi": 2,
          "load": 1, "store": 2}


@dataclass(frozen=True)
class DfgNode:
    id: str
    op: str                      # in | const | store-directive | op token
    operands: tuple = ()
    value: int | None = None     # const payload
    addr: int | None = None      # in/out binding


@dataclass
class Dfg:
    nodes: dict[str, DfgNode] = field(default_factory=dict)
    order: list[str] = field(default_factory=list)
    outputs: list[tuple[str, int]] = field(default_factory=list)
    # declarations in file order: ("node", id) | ("out", output index)
    decls: list[tuple[str, object]] = field(default_factory=list)

    def producers(self, node_id: str) -> tuple:
        return self.nodes[node_id].operands


def parse_dfg(text: str) -> Dfg:
    dfg = Dfg()
    out_addrs = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        head = tokens[0].lower()
        if head == "in":
            if len(tokens) != 3:
                raise ParseError("in directive needs: in <id> <addr>", lineno)
            _add_node(dfg, DfgNode(tokens[1], "in", addr=_num(tokens[2], lineno)), lineno)
        elif head == "out":
            if len(tokens) != 3:
                raise ParseError("out directive needs: out <id> <addr>", lineno)
            addr = _num(tokens[2], lineno)
            if addr in out_addrs:
                raise ParseError(f"duplicate out address {addr}", lineno)
            out_addrs.add(addr)
            dfg.decls.append(("out", len(dfg.outputs)))
            dfg.outputs.append((tokens[1], addr))
        else:
            if len(tokens) < 2:
                raise ParseError(f"node line needs: <id> <op> ...", lineno)
            node_id, op = tokens[0], tokens[1].lower()
            if op == "const":
                if len(tokens) != 3:
                    raise ParseError("const needs one literal operand", lineno)
                _add_node(dfg, DfgNode(node_id, "const", value=_num(tokens[2], lineno)),
                          lineno)
                continue
            if op not in _OPS:
                raise ParseError(f"unknown op {op!r}", lineno)
            operands = tuple(tokens[2:])
            if len(operands) != _ARITY[op]:
                raise ParseError(
                    f"{op} takes {_ARITY[op]} operands, got {len(operands)}", lineno)
            _add_node(dfg, DfgNode(node_id, op, operands), lineno)
    _validate(dfg)
    return dfg


def _num(token: str, lineno: int) -> int:
    try:
        return int(token, 0)
    except ValueError:
        raise ParseError(f"expected a number, got {token!r}", lineno)


def _add_node(dfg: Dfg, node: DfgNode, lineno: int):
    if node.id in dfg.nodes:
        raise ParseError(f"duplicate node id {node.id!r}", lineno)
    dfg.nodes[node.id] = node
    dfg.order.append(node.id)
    dfg.decls.append(("node", node.id))


def _validate(dfg: Dfg):
    if not dfg.nodes and not dfg.outputs:
        raise ParseError("empty dataflow graph", 1)
    for node in dfg.nodes.values():
        for ref in node.operands:
            if ref not in dfg.nodes:
                raise UnboundOperand(f"node {node.id!r} references unknown {ref!r}")
            if dfg.nodes[ref].op == "store":
                raise UnboundOperand(f"node {node.id!r} reads store node {ref!r}")
    for node_id, _ in dfg.outputs:
        if node_id not in dfg.nodes:
            raise UnboundOperand(f"out directive references unknown {node_id!r}")
        if dfg.nodes[node_id].op == "store":
            raise UnboundOperand(f"out directive reads store node {node_id!r}")
    _check_cycles(dfg)


def _kahn(dfg: Dfg) -> list[str]:
    """Topological node order; ties resolve to the lowest declaration index
    so dependent nodes schedule as soon as their operands are done."""
    seq = {nid: i for i, nid in enumerate(dfg.order)}
    indeg = {nid: 0 for nid in dfg.order}
    consumers: dict[str, list[str]] = {nid: [] for nid in dfg.order}
    for node in dfg.nodes.values():
        for ref in node.operands:
            indeg[node.id] += 1
            consumers[ref].append(node.id)
    ready = [seq[nid] for nid in dfg.order if indeg[nid] == 0]
    heapq.heapify(ready)
    out = []
    while ready:
        nid = dfg.order[heapq.heappop(ready)]
        out.append(nid)
        for c in consumers[nid]:
            indeg[c] -= 1
            if indeg[c] == 0:
                heapq.heappush(ready, seq[c])
    return out


def _topo_units(dfg: Dfg) -> list[tuple[str, object]]:
    """Nodes and out directives in a demand-driven dependency order.

    A ready unit with operands always precedes a ready source (input or
    constant): every produced value is consumed as soon as possible, which
    keeps the number of in-flight route arrivals bounded by the fanout
    frontier instead of the whole input set. Ties break on file position.
    """
    pos = {decl: i for i, decl in enumerate(dfg.decls)}
    indeg = {}
    consumers: dict[str, list] = {nid: [] for nid in dfg.order}
    for decl in dfg.decls:
        kind, key = decl
        if kind == "node":
            deps = dfg.nodes[key].operands
        else:
            deps = (dfg.outputs[key][0],)
        # constants are folded or materialized on demand; they never gate
        deps = [r for r in deps if dfg.nodes[r].op != "const"]
        indeg[decl] = len(deps)
        for ref in deps:
            consumers[ref].append(decl)

    def key_of(decl):
        return (0 if indeg_init[decl] else 1, pos[decl])

    indeg_init = dict(indeg)
    ready = [key_of(d) for d in dfg.decls if indeg[d] == 0]
    heapq.heapify(ready)
    by_key = {key_of(d): d for d in dfg.decls}
    out = []
    while ready:
        decl = by_key[heapq.heappop(ready)]
        out.append(decl)
        if decl[0] == "node":
            for c in consumers[decl[1]]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    heapq.heappush(ready, key_of(c))
    if len(out) != len(dfg.decls):
        raise CyclicGraph("graph contains loops; no full evaluation order exists")
    return out


def _check_cycles(dfg: Dfg):
    """Cycles are structurally legal only when every one passes through a
    merge (phi) node; anything else is an error."""
    done = set(_kahn(dfg))
    leftover = [nid for nid in dfg.order if nid not in done]
    if not leftover:
        return
    if all(dfg.nodes[n].op != "phi" for n in leftover):
        raise CyclicGraph(f"cycle through {leftover[:8]}")
    reduced = Dfg()
    keep = {nid for nid in leftover if dfg.nodes[nid].op != "phi"}
    for nid in dfg.order:
        if nid not in keep:
            continue
        node = dfg.nodes[nid]
        ops = tuple(r for r in node.operands if r in keep)
        reduced.nodes[nid] = DfgNode(nid, node.op, ops)
        reduced.order.append(nid)
    if len(_kahn(reduced)) != len(reduced.order):
        raise CyclicGraph(f"cycle not closed by a merge node: {leftover[:8]}")


def topo_order(dfg: Dfg) -> list[str]:
    """Complete topological order; merge-closed loops are structurally valid
    but have no such order, so they are rejected here."""
    out = _kahn(dfg)
    if len(out) != len(dfg.order):
        raise CyclicGraph("graph contains loops; no full evaluation order exists")
    return out


# --- reference executor --------------------------------------------------------


def reference_execute(dfg: Dfg, image) -> list[int]:
    """Topological scalar evaluation with the PE's wrapping semantics.

    Returns a copy of the image with all out/store effects applied.
    """
    order = topo_order(dfg)
    mem = list(image)
    values: dict[str, int] = {}

    def load(addr):
        if not 0 <= addr < len(mem):
            raise UnboundOperand(f"input address {addr} outside the image")
        return mem[addr]

    for nid in order:
        node = dfg.nodes[nid]
        if node.op == "in":
            values[nid] = load(node.addr) & MASK32
        elif node.op == "const":
            values[nid] = node.value & MASK32
        elif node.op == "load":
            values[nid] = load(values[node.operands[0]])
        elif node.op == "store":
            addr, val = node.operands
            a = values[addr]
            if not 0 <= a < len(mem):
                raise UnboundOperand(f"store address {a} outside the image")
            mem[a] = values[val]
        elif node.op == "sel":
            p, a, b = (values[r] for r in node.operands)
            values[nid] = a if p != 0 else b
        elif node.op == "phi":
            values[nid] = values[node.operands[0]]
        else:
            a, b = (values[r] for r in node.operands)
            values[nid] = alu_eval(_OPS[node.op], a, b)
    for nid, addr in dfg.outputs:
        if not 0 <= addr < len(mem):
            mem.extend([0] * (addr + 1 - len(mem)))
        mem[addr] = values[nid]
    return mem


# --- lowering -------------------------------------------------------------------


@dataclass
class _LNode:
    """Lowered node: one machine op plus its operand sources."""

    id: str
    opcode: Opcode
    srcs: list            # ("node", id) | ("imm", value) | ("none",)
    imm: int = 0          # affine address for in/out memory ops
    affine: bool = False
    seq: int = 0


def _signed_value(value: int) -> int:
    value &= MASK32
    return value - 0x100000000 if value & 0x80000000 else value


def _lower(dfg: Dfg) -> list[_LNode]:
    """Rewrite the DFG into machine-level nodes: directives become affine
    memory ops, ternary selects expand, constants fold or materialize."""
    try:
        units = _topo_units(dfg)
    except CyclicGraph as exc:
        raise Unmappable(f"not mappable: {exc}") from exc
    consts = {nid: _signed_value(dfg.nodes[nid].value)
              for nid in dfg.order if dfg.nodes[nid].op == "const"}
    lnodes: list[_LNode] = []
    synth = 0
    materialized: dict[str, str] = {}

    def fresh(tag: str) -> str:
        nonlocal synth
        synth += 1
        return f"${tag}.{synth}"

    def materialize_value(value: int, base: str) -> str:
        """Emit ops computing a constant; returns the producing node id."""
        if -0x8000 <= value <= 0x7FFF:
            nid = fresh(base)
            lnodes.append(_LNode(nid, Opcode.ADD, [("imm", value & 0xFFFF), ("none",)]))
            return nid
        hi = materialize_value(value >> 8, base)
        sh = fresh(base)
        lnodes.append(_LNode(sh, Opcode.SHL, [("node", hi), ("imm", 8)]))
        lo = fresh(base)
        lnodes.append(_LNode(lo, Opcode.ADD, [("node", sh), ("imm", value & 0xFF)]))
        return lo

    def operand(ref: str, can_fold: bool) -> tuple:
        if ref in consts:
            v = consts[ref]
            if can_fold and -0x8000 <= v <= 0x7FFF:
                return ("imm", v & 0xFFFF)
            if ref not in materialized:
                materialized[ref] = materialize_value(v, ref)
            return ("node", materialized[ref])
        return ("node", ref)

    def binary_srcs(refs):
        """Fold constants into the single immediate field; a second operand
        may share the immediate only when it has the same value."""
        srcs = []
        folded = None
        for ref in refs:
            can = folded is None or (ref in consts and consts[ref] == folded)
            src = operand(ref, can)
            if src[0] == "imm" and folded is None:
                folded = consts[ref]
            srcs.append(src)
        return srcs

    for kind, key in units:
        if kind == "out":
            nid, addr = dfg.outputs[key]
            lnodes.append(_LNode(f"$out{key}", Opcode.STORE,
                                 [operand(nid, False), ("none",)],
                                 imm=addr, affine=True))
            continue
        node = dfg.nodes[key]
        nid = node.id
        if node.op == "const":
            continue  # folded or materialized on demand
        if node.op == "in":
            lnodes.append(_LNode(nid, Opcode.LOAD, [("none",), ("none",)],
                                 imm=node.addr, affine=True))
        elif node.op == "load":
            (ref,) = node.operands
            if ref in consts and 0 <= consts[ref] <= 0xFFFF:
                lnodes.append(_LNode(nid, Opcode.LOAD, [("none",), ("none",)],
                                     imm=consts[ref], affine=True))
            else:
                lnodes.append(_LNode(nid, Opcode.LOAD,
                                     [("none",), operand(ref, False)]))
        elif node.op == "store":
            addr_ref, val_ref = node.operands
            val_src = operand(val_ref, False)
            if addr_ref in consts and 0 <= consts[addr_ref] <= 0xFFFF:
                lnodes.append(_LNode(nid, Opcode.STORE, [val_src, ("none",)],
                                     imm=consts[addr_ref], affine=True))
            else:
                lnodes.append(_LNode(nid, Opcode.STORE,
                                     [val_src, operand(addr_ref, False)]))
        elif node.op == "sel":
            # sel p a b -> (a if p != 0) | (b if p == 0); the predicate is
            # normalized to 0/1 first since p may be any 32-bit value
            p_ref, a_ref, b_ref = node.operands
            p = operand(p_ref, False)
            neg = _LNode(fresh(nid), Opcode.CMP_LT, [p, ("imm", 0)])
            pos = _LNode(fresh(nid), Opcode.CMP_LT, [("imm", 0), p])
            nz = _LNode(fresh(nid), Opcode.OR, [("node", neg.id), ("node", pos.id)])
            inv = _LNode(fresh(nid), Opcode.XOR, [("node", nz.id), ("imm", 1)])
            t = _LNode(fresh(nid), Opcode.SEL, [("node", nz.id), operand(a_ref, False)])
            f = _LNode(fresh(nid), Opcode.SEL, [("node", inv.id), operand(b_ref, False)])
            merged = _LNode(nid, Opcode.OR, [("node", t.id), ("node", f.id)])
            lnodes += [neg, pos, nz, inv, t, f, merged]
        elif node.op == "phi":
            raise Unmappable("merge nodes are not supported by the mapper yet", nid)
        else:
            lnodes.append(_LNode(nid, _OPS[node.op], binary_srcs(node.operands)))

    for i, ln in enumerate(lnodes):
        ln.seq = i
    return lnodes


# --- mapping ---------------------------------------------------------------------


@dataclass
class MicroOp:
    """One scheduled machine op on one PE."""

    pe: tuple
    step: int
    opcode: Opcode
    src0: tuple = ("none",)
    src1: tuple = ("none",)
    dst: tuple = ("none",)
    imm: int = 0
    stride_sel: int = 0
    node: str = ""


@dataclass
class Mapping:
    params: ArchParams
    placement: dict[str, tuple] = field(default_factory=dict)
    schedule: dict[str, int] = field(default_factory=dict)
    routes: dict[tuple, list] = field(default_factory=dict)
    lsu_bindings: dict[str, tuple] = field(default_factory=dict)
    micro_ops: list[MicroOp] = field(default_factory=list)

    @property
    def schedule_length(self) -> int:
        return max((op.step for op in self.micro_ops), default=0)

    def route_op_count(self) -> int:
        return sum(1 for op in self.micro_ops if op.opcode is Opcode.ROUTE)

    def pes_used(self) -> set:
        return {op.pe for op in self.micro_ops}


def _manhattan(a, b, params: ArchParams) -> int:
    dr, dc = abs(a[0] - b[0]), abs(a[1] - b[1])
    if params.topology is TopologyKind.TORUS:
        dr = min(dr, params.rows - dr)
        dc = min(dc, params.cols - dc)
    return dr + dc


class _Scheduler:
    """Placement-complete routing and step assignment.

    Invariants maintained:
      * per PE, steps strictly increase in scheduling order (``next_free``);
      * each input latch alternates one scheduled arrival / one scheduled
        consumption (``pending`` + ``last_consume``), which aligns runtime
        token order with schedule order on the one-deep elastic links;
      * a node co-placed with a predecessor reads it from the accumulator,
        legal only when nothing overwrote the accumulator in between
        (enforced during placement).
    """

    def __init__(self, params: ArchParams, capacity: int):
        self.params = params
        self.capacity = capacity
        self.ports = neighbor_map(params.topology, (params.rows, params.cols))
        self.next_free: dict[tuple, int] = {}
        self.last_consume: dict[tuple, int] = {}
        self.pending: set = set()          # (coord, entry dir) with an unconsumed arrival
        self.ops: list[MicroOp] = []
        self.op_count: dict[tuple, int] = {}

    def emit(self, op: MicroOp):
        self.ops.append(op)
        self.next_free[op.pe] = op.step + 1
        self.op_count[op.pe] = self.op_count.get(op.pe, 0) + 1

    def free_at(self, pe) -> int:
        return self.next_free.get(pe, 1)

    def consume(self, pe, entry: Direction, step: int):
        self.last_consume[(pe, entry)] = step
        self.pending.discard((pe, entry))

    def arrive(self, pe, entry: Direction):
        self.pending.add((pe, entry))

    def read_floor(self, pe, entry: Direction) -> int:
        return self.last_consume.get((pe, entry), 0)

    def route(self, src, dst, forbidden_final: set) -> list | None:
        """Deterministic cheapest path src -> dst.

        Every hop must enter a latch with no pending arrival; the final
        entry must avoid the consumer's already-claimed operand ports;
        transit cells at context capacity are impassable. Among shortest
        paths, the one through the least-occupied cells wins.
        """
        if src == dst:
            return None
        counter = 0
        pq = [(0, 0, counter, src, ())]
        seen = set()
        while pq:
            hops, occ, _, coord, path = heapq.heappop(pq)
            if coord == dst:
                return list(path)
            if coord in seen:
                continue
            seen.add(coord)
            for d in sorted(self.ports[coord], key=lambda x: x.name):
                to = self.ports[coord][d]
                entry = d.opposite
                if to in seen or (to, entry) in self.pending:
                    continue
                if to == dst:
                    if entry in forbidden_final:
                        continue
                    extra = 0
                else:
                    if self.op_count.get(to, 0) >= self.capacity:
                        continue  # no room for another transit hop
                    extra = self.op_count.get(to, 0)
                counter += 1
                heapq.heappush(pq, (hops + 1, occ + extra, counter, to,
                                    path + ((coord, d, to, entry),)))
        return None


def map_dfg(dfg: Dfg, params: ArchParams) -> Mapping:
    """Compile a validated DFG onto the array described by ``params``."""
    from .arch import ExecMode
    if params.exec_mode is ExecMode.SCMD:
        raise Unmappable("the mapper emits per-PE contexts; row-shared "
                         "configuration streams are not supported yet")
    lnodes = _lower(dfg)
    by_id = {ln.id: ln for ln in lnodes}
    capacity = params.context_capacity() - 1  # one word reserved for HALT
    half_words = params.sm_words // 2
    for ln in lnodes:
        if ln.affine and not 0 <= ln.imm < half_words:
            raise Unmappable(
                f"bound address {ln.imm} outside the {half_words}-word space", ln.id)

    gpes = [c for c in sorted(params.coords()) if params.pe_type(*c) is PeType.GPE]
    lsus = [c for c in sorted(params.coords()) if params.pe_type(*c) is PeType.LSU]
    if not gpes and any(ln.opcode not in (Opcode.LOAD, Opcode.STORE) for ln in lnodes):
        raise Unmappable("no general-purpose PEs in this array")

    consumers: dict[str, list[tuple[str, int]]] = {ln.id: [] for ln in lnodes}
    for ln in lnodes:
        for slot, src in enumerate(ln.srcs):
            if src[0] == "node":
                consumers[src[1]].append((ln.id, slot))
    out_degree = {nid: len({c for c, _ in cs}) for nid, cs in consumers.items()}

    # --- placement ---------------------------------------------------------
    placement: dict[str, tuple] = {}
    acc_owner_placed: dict[tuple, str] = {}
    op_estimate: dict[tuple, int] = {}
    remote_consumers: dict[tuple, int] = {}
    ports = neighbor_map(params.topology, (params.rows, params.cols))

    for ln in lnodes:
        pool = lsus if ln.opcode in (Opcode.LOAD, Opcode.STORE) else gpes
        if not pool:
            raise Unmappable("no PE of the required type available", ln.id)
        pred_pes = [placement[s[1]] for s in ln.srcs if s[0] == "node"]
        best = None
        for pe in pool:
            if op_estimate.get(pe, 0) >= capacity:
                continue
            remote_preds = [p for p in pred_pes if p != pe]
            # prefer cells whose entry latches are not already spoken for
            crowded = (remote_consumers.get(pe, 0) >= len(ports[pe]) - 1
                       if remote_preds else False)
            if len(pred_pes) > len(remote_preds):
                # co-placement only directly behind the accumulator owner
                owners = {s[1] for s in ln.srcs
                          if s[0] == "node" and placement[s[1]] == pe}
                if owners != {acc_owner_placed.get(pe)}:
                    continue
            cost = (crowded,
                    sum(_manhattan(p, pe, params) for p in pred_pes)
                    + op_estimate.get(pe, 0), pe)
            if best is None or cost < best[0]:
                best = (cost, pe)
        if best is None:
            raise Unmappable("PE capacity exhausted during placement", ln.id)
        pe = best[1]
        placement[ln.id] = pe
        op_estimate[pe] = op_estimate.get(pe, 0) + 1 + out_degree[ln.id]
        if any(p != pe for p in pred_pes):
            remote_consumers[pe] = remote_consumers.get(pe, 0) + 1
        if ln.opcode is not Opcode.STORE:
            acc_owner_placed[pe] = ln.id

    # --- routing and step assignment ---------------------------------------
    sched = _Scheduler(params, capacity)
    arrivals: dict[tuple[str, str], tuple] = {}   # (producer, consumer) -> source
    claimed_entries: dict[str, set] = {ln.id: set() for ln in lnodes}
    routes: dict[tuple, list] = {}
    node_step: dict[str, int] = {}
    chain_done: set[tuple[str, str]] = set()
    remote_outs = {ln.id: [cid for cid in sorted({c for c, _ in consumers[ln.id]},
                                                 key=lambda c: by_id[c].seq)
                           if placement[cid] != placement[ln.id]]
                   for ln in lnodes}
    acc_owner: dict[tuple, str] = {}

    def sel_of(source: tuple) -> tuple:
        kind = source[0]
        if kind == "imm":
            return ("imm", source[1])
        if kind == "acc":
            return ("acc",)
        if kind == "none":
            return ("none",)
        return ("dir", source[1])

    def schedule_chain(v: str, cid: str, fused_op: MicroOp | None = None) -> bool:
        """Route and schedule one value chain v -> cid. All or nothing."""
        src_pe, dst_pe = placement[v], placement[cid]
        path = sched.route(src_pe, dst_pe, claimed_entries[cid])
        if path is None:
            return False
        first = path[0]
        if fused_op is not None:
            fused_op.dst = ("dir", first[1])
            prev_step, prev_entry = node_step[v], first[3]
        else:
            send = MicroOp(src_pe, max(sched.free_at(src_pe), node_step[v] + 1),
                           Opcode.ROUTE, ("acc",), ("none",), ("dir", first[1]),
                           node=f"{v}>")
            sched.emit(send)
            prev_step, prev_entry = send.step, first[3]
        for frm, drive, to, entry in path[1:]:
            s = max(sched.free_at(frm), prev_step + 1,
                    sched.read_floor(frm, prev_entry) + 1)
            hop = MicroOp(frm, s, Opcode.ROUTE, ("dir", prev_entry), ("none",),
                          ("dir", drive), node=f"{v}>{cid}")
            sched.emit(hop)
            sched.consume(frm, prev_entry, s)
            prev_step, prev_entry = s, entry
        final_entry = path[-1][3]
        sched.arrive(dst_pe, final_entry)
        claimed_entries[cid].add(final_entry)
        arrivals[(v, cid)] = ("dir", final_entry, prev_step)
        routes[(v, cid)] = [src_pe] + [h[2] for h in path]
        chain_done.add((v, cid))
        return True

    def flush_chains(v: str) -> bool:
        """Schedule every not-yet-routed chain out of v's accumulator."""
        for cid in remote_outs[v]:
            if (v, cid) not in chain_done:
                if not schedule_chain(v, cid):
                    return False
        return True

    processed: set[str] = set()

    def try_unit(ln: _LNode) -> bool:
        """Attempt to schedule one lowered node. Chain scheduling is
        idempotent, so a congestion failure here can simply retry after
        other units consume their in-flight arrivals."""
        pe = placement[ln.id]
        # every operand chain must exist before this op can be ordered
        for src in ln.srcs:
            if src[0] == "node" and placement[src[1]] != pe \
                    and (src[1], ln.id) not in chain_done:
                if not schedule_chain(src[1], ln.id):
                    return False
        # the accumulator is about to be reused: drain its deferred chains
        owner = acc_owner.get(pe)
        if owner is not None and not flush_chains(owner):
            return False

        slot_src: list[tuple] = []
        floor = 0
        reads: list[tuple] = []
        for src in ln.srcs:
            if src[0] == "none":
                slot_src.append(("none",))
            elif src[0] == "imm":
                slot_src.append(("imm", src[1]))
            else:
                source = arrivals[(src[1], ln.id)]
                slot_src.append(source)
                floor = max(floor, source[2] + 1)
                if source[0] == "dir":
                    reads.append(source[1])
        step = max(sched.free_at(pe), floor)
        for entry in reads:
            step = max(step, sched.read_floor(pe, entry) + 1)
        op = MicroOp(pe, step, ln.opcode,
                     sel_of(slot_src[0]) if slot_src else ("none",),
                     sel_of(slot_src[1]) if len(slot_src) > 1 else ("none",),
                     ("none",), imm=ln.imm if ln.affine else _imm_of(slot_src),
                     node=ln.id)
        sched.emit(op)
        node_step[ln.id] = step
        for entry in set(reads):
            sched.consume(pe, entry, step)

        outs = sorted({cid for cid, _ in consumers[ln.id]},
                      key=lambda cid: by_id[cid].seq)
        if outs:
            local = [cid for cid in outs if placement[cid] == pe]
            for cid in local:
                arrivals[(ln.id, cid)] = ("acc", None, step)
            if local or len(outs) > 1 \
                    or not schedule_chain(ln.id, outs[0], fused_op=op):
                # accumulator form: the value parks in acc and each chain
                # is routed lazily, when its consumer (or an accumulator
                # flush) demands it; this keeps in-flight arrivals scarce
                op.dst = ("acc",)
                acc_owner[pe] = ln.id
        processed.add(ln.id)
        return True

    work = deque(lnodes)
    fails_in_row = 0
    while work:
        ln = work.popleft()
        ready = all(src[1] in processed for src in ln.srcs if src[0] == "node")
        if ready and try_unit(ln):
            fails_in_row = 0
            continue
        work.append(ln)
        fails_in_row += 1
        if fails_in_row > len(work):
            raise Unmappable("routing congestion never cleared", ln.id)

    # --- capacity check ------------------------------------------------------
    for pe, n in sorted(sched.op_count.items()):
        if n > capacity:
            worst = max((o for o in sched.ops if o.pe == pe), key=lambda o: o.step)
            raise Unmappable(
                f"PE {pe} needs {n} context words, capacity {capacity}", worst.node)

    mapping = Mapping(params)
    mapping.micro_ops = sched.ops
    mapping.routes = routes
    for ln in lnodes:
        mapping.placement[ln.id] = placement[ln.id]
        mapping.schedule[ln.id] = node_step[ln.id]
        if ln.opcode in (Opcode.LOAD, Opcode.STORE):
            mapping.lsu_bindings[ln.id] = placement[ln.id]
    _check_legal(mapping)
    return mapping


def _imm_of(slot_src: list) -> int:
    for s in slot_src:
        if s[0] == "imm":
            return s[1] & 0xFFFF
    return 0


def _check_legal(mapping: Mapping):
    """Exhaustive legality: one op per (PE, step), routes follow topology
    links, memory ops sit on LSUs."""
    params = mapping.params
    seen = set()
    for op in mapping.micro_ops:
        key = (op.pe, op.step)
        if key in seen:
            raise Unmappable(f"two ops share {key}", op.node)
        seen.add(key)
        if op.opcode in (Opcode.LOAD, Opcode.STORE):
            if params.pe_type(*op.pe) is not PeType.LSU:
                raise Unmappable(f"memory op on non-LSU {op.pe}", op.node)
    ports = neighbor_map(params.topology, (params.rows, params.cols))
    for (src, dst), path in mapping.routes.items():
        for a, b in zip(path, path[1:]):
            if b not in ports[a].values():
                raise Unmappable(f"route {src}->{dst} uses non-link {a}->{b}", src)


# --- emission ---------------------------------------------------------------------


_SRC_DIR = {Direction[name]: SrcSel[name] for name in
            ("N", "S", "E", "W", "N2", "S2", "E2", "W2")}
_DST_DIR = {Direction[name]: DstSel[name] for name in
            ("N", "S", "E", "W", "N2", "S2", "E2", "W2")}


def _src_sel(spec: tuple) -> SrcSel:
    kind = spec[0]
    if kind == "none":
        return SrcSel.NONE
    if kind == "imm":
        return SrcSel.IMM
    if kind == "acc":
        return SrcSel.ACC
    return _SRC_DIR[spec[1]]


def _dst_sel(spec: tuple) -> DstSel:
    kind = spec[0]
    if kind == "none":
        return DstSel.NONE
    if kind == "acc":
        return DstSel.ACC
    return _DST_DIR[spec[1]]


def emit_bitstream(mapping: Mapping) -> bytes:
    """Per-PE configuration words implementing the mapping, plus a HALT."""
    per_pe: dict[tuple, list[MicroOp]] = {}
    for op in mapping.micro_ops:
        per_pe.setdefault(op.pe, []).append(op)
    records = []
    for pe in sorted(per_pe):
        words = []
        for op in sorted(per_pe[pe], key=lambda o: o.step):
            imm = op.imm & 0xFFFF
            words.append(ConfigWord(
                opcode=op.opcode,
                src0=_src_sel(op.src0),
                src1=_src_sel(op.src1),
                dst=_dst_sel(op.dst),
                imm16=imm,
                iter_count=1,
                shared_reg_idx=op.stride_sel,
            ))
        words.append(ConfigWord(opcode=Opcode.HALT))
        records.append((pe[0], pe[1], words))
    return pack_bitstream(records)
