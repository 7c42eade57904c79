"""Processing element core: configuration words, ALU, and the 4-stage pipeline.

Configuration word layout (64 bits, reserved bits must be zero)::

    63:59  opcode          5 bits
    58:55  src0_sel        4 bits
    54:51  src1_sel        4 bits
    50:47  dst_sel         4 bits
    46:31  imm16           16 bits (ALU immediate, sign-extended; LSU base
                           address, zero-extended)
    30:23  iter_count      8 bits (0 and 1 both mean a single execution)
    22:19  shared_reg_idx  4 bits (stride selector for affine LSU steps)
    18:16  next_step       3 bits (0 = fall through to pc+1, else absolute)
    15:0   reserved        must be zero

Pipeline: fetch, decode, execute, write-back. A word fetched at cycle t
executes at t+2 (accumulator updated there) and drives its outbound value
during t+3, so neighbors can consume it at t+4. Execution fires only when
every required operand is valid; an op with an invalid operand holds its
stage and does not modify the accumulator. Directional tokens are one-deep:
a producer stalls in write-back until the consumer latch is free, which is
what lets statically scheduled programs tolerate dynamic memory stalls.

The Iteration Control Block repeats the word at pc ``iter_count`` times
(each instance carries its iteration index, used by affine LSU addressing),
then jumps to ``next_step``. HALT drains the pipeline, freezes the PE and
raises its done flag; walking past the last context word does the same.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

from .arch import ArchParams, ExecMode, PeType, SCMD_CONTEXT_FACTOR
from .errors import (AddressOutOfRange, BitstreamTargetInvalid, CapacityExceeded,
                     DecodeError, EncodeError)
from .interconnect import Direction

MASK32 = 0xFFFFFFFF


class Opcode(IntEnum):
    NOP = 0
    ADD = 1
    SUB = 2
    MUL = 3
    AND = 4
    OR = 5
    XOR = 6
    SHL = 7
    SHR = 8
    CMP_LT = 9
    SEL = 10
    PHI = 11
    ROUTE = 12
    LOAD = 13
    STORE = 14
    HALT = 15


# Binary ALU opcodes with plain (a, b) -> result semantics.
BINARY_OPS = (Opcode.ADD, Opcode.SUB, Opcode.MUL, Opcode.AND, Opcode.OR,
              Opcode.XOR, Opcode.SHL, Opcode.SHR, Opcode.CMP_LT)

MEMORY_OPS = (Opcode.LOAD, Opcode.STORE)


class SrcSel(IntEnum):
    """Operand source select. N..W2 read the direction input latches."""

    N = 0
    S = 1
    E = 2
    W = 3
    N2 = 4
    S2 = 5
    E2 = 6
    W2 = 7
    ACC = 8
    IMM = 9
    SREG = 10
    NONE = 11  # constant zero, always valid


class DstSel(IntEnum):
    """Result destination. N..W2 send to the neighbor in that direction."""

    N = 0
    S = 1
    E = 2
    W = 3
    N2 = 4
    S2 = 5
    E2 = 6
    W2 = 7
    ACC = 8
    RTT = 9   # controller PEs only: emit a decoded host-table action
    SREG = 10
    NONE = 11


_DIR_BY_SEL = {s: Direction[s.name] for s in SrcSel if s.value <= 7}
_DST_DIR = {d: Direction[d.name] for d in DstSel if d.value <= 7}

# Affine LSU stride table, indexed by the shared_reg_idx field.
STRIDES = (0, 1, 2, 3, 4, 5, 6, 7, 8, 16, 32, 64, 128, 256, -1, -4)


def sign_extend16(value: int) -> int:
    value &= 0xFFFF
    return value - 0x10000 if value & 0x8000 else value


def to_signed32(value: int) -> int:
    value &= MASK32
    return value - 0x100000000 if value & 0x80000000 else value


@dataclass(frozen=True)
class ConfigWord:
    opcode: Opcode = Opcode.NOP
    src0: SrcSel = SrcSel.N
    src1: SrcSel = SrcSel.N
    dst: DstSel = DstSel.N
    imm16: int = 0
    iter_count: int = 0
    shared_reg_idx: int = 0
    next_step: int = 0

    @property
    def iterations(self) -> int:
        return max(1, self.iter_count)


def encode(word: ConfigWord) -> int:
    """Pack a ConfigWord into its 64-bit value."""
    for name, value, width in (("imm16", word.imm16, 16),
                               ("iter_count", word.iter_count, 8),
                               ("shared_reg_idx", word.shared_reg_idx, 4),
                               ("next_step", word.next_step, 3)):
        if not 0 <= value < (1 << width):
            raise EncodeError(f"{name}={value} does not fit in {width} bits")
    return ((word.opcode & 0x1F) << 59
            | (word.src0 & 0xF) << 55
            | (word.src1 & 0xF) << 51
            | (word.dst & 0xF) << 47
            | (word.imm16 & 0xFFFF) << 31
            | (word.iter_count & 0xFF) << 23
            | (word.shared_reg_idx & 0xF) << 19
            | (word.next_step & 0x7) << 16)


def decode(value: int) -> ConfigWord:
    """Unpack a 64-bit value; rejects reserved bits and illegal encodings."""
    if not 0 <= value < (1 << 64):
        raise DecodeError(f"value {value:#x} is not a 64-bit word")
    if value & 0xFFFF:
        raise DecodeError(f"reserved bits 15:0 are nonzero in {value:#018x}")
    opcode = (value >> 59) & 0x1F
    if opcode > 15:
        raise DecodeError(f"opcode {opcode} undefined")
    src0 = (value >> 55) & 0xF
    src1 = (value >> 51) & 0xF
    dst = (value >> 47) & 0xF
    for name, sel in (("src0", src0), ("src1", src1)):
        if sel > SrcSel.NONE:
            raise DecodeError(f"{name} select {sel} undefined")
    if dst > DstSel.NONE:
        raise DecodeError(f"dst select {dst} undefined")
    return ConfigWord(
        opcode=Opcode(opcode),
        src0=SrcSel(src0),
        src1=SrcSel(src1),
        dst=DstSel(dst),
        imm16=(value >> 31) & 0xFFFF,
        iter_count=(value >> 23) & 0xFF,
        shared_reg_idx=(value >> 19) & 0xF,
        next_step=(value >> 16) & 0x7,
    )


def context_capacity(exec_mode: ExecMode, context_depth_mcmd: int) -> int:
    """Words of context memory per PE; SCMD row sharing frees 8x the depth."""
    if exec_mode is ExecMode.SCMD:
        return SCMD_CONTEXT_FACTOR * context_depth_mcmd
    return context_depth_mcmd


def alu_eval(opcode: Opcode, a: int, b: int) -> int:
    """Reference two's-complement semantics for the binary ALU opcodes.

    32-bit wrapping arithmetic; MUL keeps the low 32 bits; shift amounts are
    masked to 5 bits; SHR is a logical right shift; CMP_LT compares signed.
    """
    a &= MASK32
    b &= MASK32
    if opcode is Opcode.ADD:
        return (a + b) & MASK32
    if opcode is Opcode.SUB:
        return (a - b) & MASK32
    if opcode is Opcode.MUL:
        return (a * b) & MASK32
    if opcode is Opcode.AND:
        return a & b
    if opcode is Opcode.OR:
        return a | b
    if opcode is Opcode.XOR:
        return a ^ b
    if opcode is Opcode.SHL:
        return (a << (b & 31)) & MASK32
    if opcode is Opcode.SHR:
        return a >> (b & 31)
    if opcode is Opcode.CMP_LT:
        return 1 if to_signed32(a) < to_signed32(b) else 0
    raise ValueError(f"{opcode} is not a binary ALU opcode")


def lsu_addr(word: ConfigWord, iter_idx: int, src1_value: int | None) -> int:
    """Word address for a memory op.

    Affine (src1 = NONE): base from imm16 plus the selected stride times the
    iteration index. Non-affine: the src1 operand value is the address.
    """
    if word.src1 is SrcSel.NONE:
        addr = (word.imm16 & 0xFFFF) + STRIDES[word.shared_reg_idx] * iter_idx
    else:
        addr = src1_value & MASK32
    if addr < 0:
        raise AddressOutOfRange(f"negative generated address {addr}")
    return addr


# --- bitstream wire format ---------------------------------------------------
#
# Per-PE record: 32-bit little-endian header (row in bits 31:24, col in
# 23:16, word count in 15:0) followed by count 64-bit little-endian words.

_HEADER = struct.Struct("<I")
_WORD = struct.Struct("<Q")


def pack_bitstream(records: list[tuple[int, int, list[ConfigWord]]]) -> bytes:
    out = bytearray()
    for row, col, words in records:
        if not (0 <= row < 256 and 0 <= col < 256 and len(words) < 65536):
            raise EncodeError(f"bitstream record ({row},{col}) header field overflow")
        out += _HEADER.pack((row << 24) | (col << 16) | len(words))
        for w in words:
            out += _WORD.pack(encode(w))
    return bytes(out)


def unpack_bitstream(blob: bytes) -> list[tuple[int, int, list[ConfigWord]]]:
    records = []
    off = 0
    while off < len(blob):
        if off + 4 > len(blob):
            raise DecodeError("truncated bitstream header")
        (header,) = _HEADER.unpack_from(blob, off)
        off += 4
        row, col, count = header >> 24, (header >> 16) & 0xFF, header & 0xFFFF
        words = []
        for _ in range(count):
            if off + 8 > len(blob):
                raise DecodeError(f"truncated record for PE ({row},{col})")
            (value,) = _WORD.unpack_from(blob, off)
            off += 8
            words.append(decode(value))
        records.append((row, col, words))
    return records


def validate_bitstream(params: ArchParams,
                       records: list[tuple[int, int, list[ConfigWord]]]):
    """Static legality of a bitstream against an architecture.

    Memory ops only on LSUs, the RTT destination only on the CPE, 2-hop
    selects only under the 1-hop topology, capacity respected, all targets
    inside the grid.
    """
    from .arch import TopologyKind
    cap = params.context_capacity()
    seen = set()
    for row, col, words in records:
        if not (0 <= row < params.rows and 0 <= col < params.cols):
            raise BitstreamTargetInvalid(f"record targets ({row},{col}) outside grid")
        if (row, col) in seen:
            raise BitstreamTargetInvalid(f"duplicate record for PE ({row},{col})")
        seen.add((row, col))
        if len(words) > cap:
            raise CapacityExceeded(
                f"PE ({row},{col}): {len(words)} words > capacity {cap}")
        pe_type = params.pe_type(row, col)
        for i, w in enumerate(words):
            where = f"PE ({row},{col}) word {i}"
            if w.opcode in MEMORY_OPS and pe_type is not PeType.LSU:
                raise BitstreamTargetInvalid(f"{where}: {w.opcode.name} on a {pe_type.name}")
            if w.dst is DstSel.RTT and pe_type is not PeType.CPE:
                raise BitstreamTargetInvalid(f"{where}: RTT destination on a {pe_type.name}")
            if params.topology is not TopologyKind.ONE_HOP:
                for sel in (w.src0, w.src1):
                    if sel.value <= 7 and _DIR_BY_SEL[sel].is_two_hop:
                        raise BitstreamTargetInvalid(
                            f"{where}: 2-hop source under {params.topology.value}")
                if w.dst.value <= 7 and _DST_DIR[w.dst].is_two_hop:
                    raise BitstreamTargetInvalid(
                        f"{where}: 2-hop destination under {params.topology.value}")


# --- runtime -----------------------------------------------------------------


class PE:
    """One processing element's architectural and pipeline state.

    ``tick`` advances all four stages one cycle against start-of-cycle
    snapshots provided by the surrounding array (input latches, shared
    registers, memory responses), making intra-cycle evaluation order
    irrelevant.
    """

    def __init__(self, coord, pe_type: PeType, ports: dict[Direction, tuple]):
        self.coord = coord
        self.pe_type = pe_type
        self.ports = ports  # outgoing direction -> destination coord
        self.context: list[ConfigWord] = []
        self.pc = 0
        self.iter_index: list[int] = []
        self.remaining: list[int] = []
        # input latches: entry direction -> value (present = occupied)
        self.latch: dict[Direction, int] = {}
        self.acc = 0
        self.acc_valid = True
        # pipeline slots
        self.f_slot: tuple[ConfigWord, int] | None = None
        self.d_slot: tuple[ConfigWord, int] | None = None
        self.x_slot: tuple | None = None   # ("mem", word, iter) | ("out", word, value)
        self.w_slot: tuple[ConfigWord, int] | None = None  # (word, value)
        self.done = True
        self.active_cycles = 0

    # -- configuration flow (never touches data-flow latches) ------------

    def load_context(self, words: list[ConfigWord], capacity: int):
        if len(words) > capacity:
            raise CapacityExceeded(
                f"PE {self.coord}: {len(words)} words > capacity {capacity}")
        self.context = list(words)
        self.pc = 0
        self.iter_index = [0] * len(words)
        self.remaining = [w.iterations for w in words]

    def launch_reset(self):
        """Start of a compute phase: arm the ICB and clear data-flow state."""
        self.pc = 0
        self.iter_index = [0] * len(self.context)
        self.remaining = [w.iterations for w in self.context]
        self.latch.clear()
        self.acc = 0
        self.acc_valid = True
        self.f_slot = self.d_slot = self.x_slot = self.w_slot = None
        self.done = not self.context

    # -- data flow --------------------------------------------------------

    def _operand(self, sel: SrcSel, word: ConfigWord, bus):
        """(value, valid, consumed_direction | None) for one source select."""
        if sel is SrcSel.NONE:
            return 0, True, None
        if sel is SrcSel.IMM:
            return sign_extend16(word.imm16) & MASK32, True, None
        if sel is SrcSel.ACC:
            return self.acc, self.acc_valid, None
        if sel is SrcSel.SREG:
            value, valid = bus.sreg_read(self.coord, word.shared_reg_idx)
            return value, valid, None
        d = _DIR_BY_SEL[sel]
        if d in self.latch:
            return self.latch[d], True, d
        return 0, False, None

    def _required(self, word: ConfigWord):
        op = word.opcode
        if op in (Opcode.NOP, Opcode.HALT):
            return ()
        if op is Opcode.ROUTE:
            return (word.src0,)
        if op is Opcode.LOAD:
            return () if word.src1 is SrcSel.NONE else (word.src1,)
        if op is Opcode.STORE:
            return (word.src0,) if word.src1 is SrcSel.NONE else (word.src0, word.src1)
        return (word.src0, word.src1)

    def tick(self, bus):
        if self.done:
            return
        self._stage_writeback(bus)
        self._stage_execute(bus)
        if self.d_slot is None and self.f_slot is not None:
            self.d_slot, self.f_slot = self.f_slot, None
        self._stage_fetch()
        if self._drained():
            self.done = True

    def _drained(self) -> bool:
        return (self.pc >= len(self.context) and self.f_slot is None
                and self.d_slot is None and self.x_slot is None
                and self.w_slot is None)

    def _stage_fetch(self):
        if self.f_slot is not None or self.pc >= len(self.context):
            return
        word = self.context[self.pc]
        if word.opcode is Opcode.HALT and (self.d_slot or self.x_slot or self.w_slot):
            return  # let the pipeline drain before the freeze enters it
        self.f_slot = (word, self.iter_index[self.pc])
        self.iter_index[self.pc] += 1
        self.remaining[self.pc] -= 1
        if self.remaining[self.pc] == 0:
            target = self.pc + 1 if word.next_step == 0 else word.next_step
            self.pc = target
            if self.pc < len(self.context) and self.remaining[self.pc] == 0:
                # re-entering a step on a loop back-edge re-arms its counter
                self.remaining[self.pc] = self.context[self.pc].iterations
                self.iter_index[self.pc] = 0

    def _stage_execute(self, bus):
        if self.x_slot is not None:
            kind = self.x_slot[0]
            if kind == "mem":
                resp = bus.mem_response(self.coord)  # None or 1-tuple
                if resp is None:
                    self.active_cycles += 1
                    return
                _, word, _ = self.x_slot
                self._complete(word, resp[0] if word.opcode is Opcode.LOAD else None, bus)
                self.active_cycles += 1
                return
            # "out": waiting for the write-back slot to drain
            if self.w_slot is None:
                _, word, value = self.x_slot
                self.w_slot = (word, value)
                self.x_slot = None
            return
        if self.d_slot is None:
            return
        word, iter_idx = self.d_slot
        if word.opcode is Opcode.HALT:
            if self.w_slot is None:
                # freeze: context stays loaded for a later relaunch
                self.d_slot = None
                self.f_slot = None
                self.pc = len(self.context)
                self.done = True
            return
        ops = {}
        for sel in self._required(word):
            value, valid, consumed = self._operand(sel, word, bus)
            if not valid and word.opcode is not Opcode.PHI:
                return  # hold until every operand is valid
            ops[sel] = (value, valid, consumed)
        result = self._fire(word, iter_idx, ops, bus)
        if result is _STALLED:
            return
        self.d_slot = None
        self.active_cycles += 1
        if result is not _PENDING:
            self._complete(word, result, bus)

    def _fire(self, word: ConfigWord, iter_idx: int, ops, bus):
        op = word.opcode
        if op is Opcode.NOP:
            return None
        if op is Opcode.PHI:
            v0, ok0, c0 = ops[word.src0]
            v1, ok1, c1 = ops[word.src1]
            if not (ok0 or ok1):
                return _STALLED
            if ok0:
                self._consume(c0, bus)
                return v0
            self._consume(c1, bus)
            return v1
        if op in MEMORY_OPS:
            src1_val = ops[word.src1][0] if word.src1 is not SrcSel.NONE else None
            addr = lsu_addr(word, iter_idx, src1_val)
            data = ops[word.src0][0] if op is Opcode.STORE else None
            for sel in self._required(word):
                self._consume(ops[sel][2], bus)
            bus.mem_request(self.coord, "write" if op is Opcode.STORE else "read",
                            addr, data)
            self.x_slot = ("mem", word, iter_idx)
            return _PENDING
        if op is Opcode.ROUTE:
            v0, _, c0 = ops[word.src0]
            self._consume(c0, bus)
            return v0
        if op is Opcode.SEL:
            v0, _, c0 = ops[word.src0]
            v1, _, c1 = ops[word.src1]
            self._consume(c0, bus)
            self._consume(c1, bus)
            return v1 if v0 != 0 else 0
        v0, _, c0 = ops[word.src0]
        v1, _, c1 = ops[word.src1]
        self._consume(c0, bus)
        self._consume(c1, bus)
        return alu_eval(op, v0, v1)

    def _consume(self, direction, bus):
        if direction is not None:
            bus.consume_latch(self.coord, direction)

    def _complete(self, word: ConfigWord, result, bus):
        """Execute-stage completion: accumulator updates land here; outbound
        destinations continue to the write-back stage."""
        self.x_slot = None
        if result is None or word.dst is DstSel.NONE:
            return
        if word.dst is DstSel.ACC:
            self.acc = result & MASK32
            self.acc_valid = True
            return
        slot = (word, result & MASK32)
        if self.w_slot is None:
            self.w_slot = slot
        else:
            self.x_slot = ("out", word, result & MASK32)

    def _stage_writeback(self, bus):
        if self.w_slot is None:
            return
        word, value = self.w_slot
        if word.dst is DstSel.SREG:
            bus.sreg_write(self.coord, word.shared_reg_idx, value)
            self.w_slot = None
            return
        if word.dst is DstSel.RTT:
            bus.rtt_action(self.coord, word.imm16)
            self.w_slot = None
            return
        direction = _DST_DIR[word.dst]
        dest = self.ports.get(direction)
        if dest is None:
            self.w_slot = None  # driving off the grid edge drops the value
            return
        if bus.latch_free(dest, direction.opposite):
            bus.deliver(dest, direction.opposite, value)
            self.w_slot = None
        # else: stall; retry next cycle


_PENDING = object()
_STALLED = object()
