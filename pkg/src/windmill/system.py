"""System-level simulator: RPUs, host bridge, command protocol, and the ring.

An RPU is one PE array plus its private banked scratchpad (behind the
round-robin access interface) and a DMA controller. RPUs sit on a ring;
each may read its clockwise neighbor's scratchpad through one extra
arbitrated requester port, two cycles slower than a local access.

The host is a transaction-level command stream. Each command decodes
through the register transformation table (RTT) into a control vector and
queues on the target RPUs in issue order:

    0x01 load_config    <mask> <config_id>
    0x02 load_data      <mask> <ext> <sm> <len> [staging]
    0x03 launch         <mask>
    0x04 store_results  <mask> <sm> <ext> <len>
    0x05 load_manifest  <mask> <n> <a b c d> * n

The canonical run is the four-step protocol: load configurations, load
data, launch, store results. Launch ticks the machine until every PE with
a loaded context raises its done flag (guarded by a cycle limit); the
finish signal flips the ping-pong half ownership so a queued DMA batch can
stream the next phase's data behind the next compute phase.

A controller PE drives the same action queue without the host: its RTT
destination writes ``(opcode << 12) | operand`` words where the operand
names a config or a manifest descriptor, so a multi-phase workload needs
host commands only for the initial setup.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .arch import ArchParams, ExecMode, PeType, validate
from .errors import (AddressOutOfRange, CycleLimitExceeded, ParseError,
                     ProtocolOrderViolation, SimulationError, UnknownOpcode)
from .interconnect import SharedRegFile, neighbor_map
from .memory import BankedSram, DmaController, PaiArbiter, Request, TransferBatch
from .pe import PE, ConfigWord, validate_bitstream

DEFAULT_CYCLE_LIMIT = 1_000_000


# --- host command decode -----------------------------------------------------


@dataclass(frozen=True)
class RttEntry:
    """One decode-table row: host opcode -> array control vector."""

    opcode: int          # 8-bit command opcode
    action: str          # load_config | load_data | launch | store_results | load_manifest
    defaults: tuple = ()


@dataclass(frozen=True)
class HostCommand:
    opcode: int
    args: tuple


@dataclass(frozen=True)
class ControlVector:
    action: str
    rpu_mask: int
    args: tuple


class Rtt:
    """Register transformation table: at most 16 entries, unique opcodes."""

    def __init__(self, entries: list[RttEntry]):
        if len(entries) > 16:
            raise ValueError("RTT holds at most 16 entries")
        self.entries = {}
        for e in entries:
            if e.opcode in self.entries:
                raise ValueError(f"duplicate RTT opcode {e.opcode:#x}")
            self.entries[e.opcode] = e

    def decode(self, cmd: HostCommand) -> ControlVector:
        entry = self.entries.get(cmd.opcode)
        if entry is None:
            raise UnknownOpcode(f"host opcode {cmd.opcode:#04x} not in RTT")
        if not cmd.args:
            raise UnknownOpcode(f"command {cmd.opcode:#04x} missing the RPU mask")
        mask = cmd.args[0]
        args = tuple(cmd.args[1:]) or entry.defaults
        return ControlVector(entry.action, mask, args)


def default_rtt() -> Rtt:
    return Rtt([
        RttEntry(0x01, "load_config", (0,)),
        RttEntry(0x02, "load_data"),
        RttEntry(0x03, "launch"),
        RttEntry(0x04, "store_results"),
        RttEntry(0x05, "load_manifest"),
    ])


def parse_script(text: str) -> list[HostCommand]:
    """Host command script: one `OPCODE arg...` line per command, hex."""
    commands = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            tokens = [int(t, 16) for t in line.split()]
        except ValueError:
            raise ParseError(f"non-hex token in {line!r}", lineno)
        commands.append(HostCommand(tokens[0], tuple(tokens[1:])))
    return commands


@dataclass
class Action:
    """One decoded control-vector instance queued on an RPU."""

    kind: str
    config_id: int = 0
    ext_addr: int = 0
    sm_addr: int = 0
    length: int = 0
    staging: bool = False
    manifest_idx: int | None = None


def _action_from_vector(vec: ControlVector) -> Action:
    a = vec.args
    if vec.action == "load_config":
        return Action("load_config", config_id=a[0] if a else 0)
    if vec.action == "load_data":
        if len(a) < 3:
            raise UnknownOpcode("load_data needs ext, sm, length operands")
        staging = bool(a[3]) if len(a) > 3 else True
        return Action("load_data", ext_addr=a[0], sm_addr=a[1], length=a[2],
                      staging=staging)
    if vec.action == "launch":
        return Action("launch")
    if vec.action == "store_results":
        if len(a) < 3:
            raise UnknownOpcode("store_results needs sm, ext, length operands")
        return Action("store_results", sm_addr=a[0], ext_addr=a[1], length=a[2])
    raise UnknownOpcode(f"unhandled action {vec.action!r}")


# --- statistics ---------------------------------------------------------------


@dataclass
class SimStats:
    total_cycles: int = 0
    pe_active_cycles: int = 0
    pe_idle_cycles: int = 0
    bank_conflicts: int = 0
    arbiter_grants: int = 0
    dma_stall_cycles: int = 0
    pingpong_toggles: int = 0
    host_commands: int = 0
    sreg_conflicts: int = 0
    grants_per_lsu: dict = field(default_factory=dict)
    pe_active: dict = field(default_factory=dict)

    CSV_COLUMNS = ("total_cycles", "pe_active_cycles", "pe_idle_cycles",
                   "bank_conflicts", "arbiter_grants", "dma_stall_cycles",
                   "pingpong_toggles", "host_commands", "sreg_conflicts")

    def csv_header(self) -> str:
        return ",".join(self.CSV_COLUMNS)

    def csv_row(self) -> str:
        return ",".join(str(getattr(self, c)) for c in self.CSV_COLUMNS)


# --- one RPU -------------------------------------------------------------------


class RpuStatus:
    IDLE = "idle"
    CONFIGURED = "configured"
    RUNNING = "running"
    DONE = "done"


class Rpu:
    """PE array + private scratchpad + DMA + controller action queue.

    Also the bus facade the PEs tick against: latch, shared-register and
    memory accesses all go through this object using start-of-cycle
    snapshots, with effects applied together at the end of the cycle.
    """

    def __init__(self, rpu_id: int, params: ArchParams, ext_memory: list[int]):
        self.id = rpu_id
        self.params = params
        dims = (params.rows, params.cols)
        ports = neighbor_map(params.topology, dims)
        self.pes: dict[tuple[int, int], PE] = {}
        for r, c in params.coords():
            self.pes[(r, c)] = PE((r, c), params.pe_type(r, c), ports[(r, c)])
        self.sram = BankedSram(params.sm_banks, params.bank_depth, params.bank_width)
        self.half_words = self.sram.words // 2
        lsu_order = [coord for coord in sorted(self.pes) if
                     self.pes[coord].pe_type is PeType.LSU]
        self.pai = PaiArbiter(params.sm_banks, lsu_order + [("ring",)])
        self.dma = DmaController(ext_memory, self.half_words)
        self.sregs = SharedRegFile(params.shared_reg_mode, dims, params.shared_reg_count)
        self.queue: list[Action] = []
        self.manifest: list[tuple] = []
        self.status = RpuStatus.IDLE
        self.launch_count = 0
        self.batches_enqueued = 0
        self.running_cycles = 0
        self.action_log: list[str] = []
        # staged cycle effects
        self._consumes: list = []
        self._deliveries: list = []
        self._responses_now: dict = {}
        self._delayed: list = []          # (delay, coord, payload)
        self._cpe_actions: list[int] = []
        # ring: outgoing read requests and the LSU awaiting a remote value
        self.ring_out: list = []
        self.ring_wait = None
        # per-cycle access halves, for the ping-pong safety assertion
        self.cycle_pea_halves: set[int] = set()
        self.cycle_dma_half: int | None = None

    # -- configuration actions -------------------------------------------

    @property
    def array_half(self) -> int:
        return self.dma.array_half

    def load_config(self, records: list[tuple[int, int, list[ConfigWord]]]):
        validate_bitstream(self.params, records)
        cap = self.params.context_capacity()
        for pe in self.pes.values():
            pe.context = []
        for row, col, words in records:
            if self.params.exec_mode is ExecMode.SCMD:
                for c in range(self.params.cols):
                    self.pes[(row, c)].load_context(words, cap)
            else:
                self.pes[(row, col)].load_context(words, cap)
        self.status = RpuStatus.CONFIGURED

    def launch(self):
        if self.status != RpuStatus.CONFIGURED:
            raise ProtocolOrderViolation(
                f"rpu {self.id}: launch from {self.status!r}, expected configured")
        for pe in self.pes.values():
            pe.launch_reset()
        self.sregs.clear()
        self.status = RpuStatus.RUNNING
        self.launch_count += 1
        self.running_cycles = 0

    def store_results(self, sm_addr: int, length: int) -> list[int]:
        """Read a half-relative region out of the DMA-owned half (after the
        finish toggle that is where the results of the last phase live)."""
        base = self.dma.half * self.half_words
        out = []
        for i in range(length):
            if sm_addr + i >= self.half_words:
                raise AddressOutOfRange(
                    f"results region {sm_addr}+{length} outside half space")
            out.append(self.sram.read(base + sm_addr + i))
        return out

    # -- bus facade for PE.tick -------------------------------------------

    def latch_free(self, coord, direction) -> bool:
        return direction not in self.pes[coord].latch

    def deliver(self, coord, direction, value):
        self._deliveries.append((coord, direction, value))

    def consume_latch(self, coord, direction):
        self._consumes.append((coord, direction))

    def sreg_read(self, coord, idx):
        return self.sregs.read(coord, idx)

    def sreg_write(self, coord, idx, value):
        self.sregs.write(coord, idx, value)

    def mem_request(self, coord, op, addr, data=None):
        if addr >= self.sram.words:
            # remote window: read-only access to the clockwise neighbor
            rel = addr - self.sram.words
            if op != "read":
                raise AddressOutOfRange(f"remote window is read-only (addr {addr})")
            if rel >= self.half_words:
                raise AddressOutOfRange(f"remote address {rel} outside half space")
            self.ring_out.append((coord, rel))
            return
        if addr >= self.half_words:
            raise AddressOutOfRange(
                f"PE address {addr} outside the half space ({self.half_words} words)")
        phys = addr + self.array_half * self.half_words
        self.pai.post(Request(coord, op, phys, data))

    def mem_response(self, coord):
        return self._responses_now.pop(coord, None)

    def rtt_action(self, coord, imm16):
        if self.pes[coord].pe_type is not PeType.CPE:
            raise SimulationError(f"RTT action from non-controller PE {coord}")
        self._cpe_actions.append(imm16)

    # -- cycle advance ------------------------------------------------------

    def tick_pes(self):
        self.cycle_pea_halves = set()
        self.cycle_dma_half = None
        for coord in sorted(self.pes):
            pe = self.pes[coord]
            if not pe.done:
                pe.tick(self)

    def end_cycle(self, system):
        for coord, direction in set(self._consumes):
            del self.pes[coord].latch[direction]
        self._consumes.clear()
        for coord, direction, value in self._deliveries:
            latch = self.pes[coord].latch
            if direction in latch:
                raise SimulationError(f"latch overrun at {coord} {direction}")
            latch[direction] = value
        self._deliveries.clear()
        self.sregs.commit()

        grants = self.pai.arbitrate(self.sram)
        blocked = set()
        for g in grants:
            blocked.add(g.bank)
            self.cycle_pea_halves.add(self.sram.half_of(g.addr))
            if g.op == "read":
                value = self.sram.read(g.addr)
                if g.requester == ("ring",):
                    system.ring_response(self.id, value)
                else:
                    self._delayed.append((1, g.requester, (value,)))
            else:
                self.sram.write(g.addr, g.data)
                self._delayed.append((1, g.requester, (None,)))

        dma_bank = self.dma.step(self.sram, blocked)
        if dma_bank is not None:
            self.cycle_dma_half = self.dma._active_half
        if (self.status == RpuStatus.RUNNING and self.cycle_dma_half is not None
                and self.cycle_dma_half in self.cycle_pea_halves):
            raise SimulationError(
                f"rpu {self.id}: DMA and array touched half {self.cycle_dma_half}")

        self._responses_now = {}
        still = []
        for delay, coord, payload in self._delayed:
            if delay <= 1:
                self._responses_now[coord] = payload
            else:
                still.append((delay - 1, coord, payload))
        self._delayed = still

        if self.status == RpuStatus.RUNNING:
            self.running_cycles += 1
            if all(pe.done for pe in self.pes.values()):
                self.status = RpuStatus.DONE
                self.dma.request_toggle()
            elif self.running_cycles > system.cycle_limit:
                raise CycleLimitExceeded(
                    f"rpu {self.id}: no completion within {system.cycle_limit} cycles")

    def quiescent(self) -> bool:
        return (self.status != RpuStatus.RUNNING and not self.queue
                and self.dma.idle() and not self._delayed and not self._responses_now
                and not self.pai.pending and not self.ring_out
                and self.ring_wait is None and not self._cpe_actions)


class SystemSim:
    """All RPUs, the host bridge, external memory, and the tick loop."""

    def __init__(self, params: ArchParams, data_image: list[int] | None = None,
                 rtt: Rtt | None = None, cycle_limit: int = DEFAULT_CYCLE_LIMIT):
        self.params = validate(params)
        self.ext_memory = list(data_image or [])
        self.rtt = rtt or default_rtt()
        self.cycle_limit = cycle_limit
        self.rpus = [Rpu(i, params, self.ext_memory) for i in range(params.rpu_count)]
        self.configs: dict[int, list] = {}
        self.script: list[HostCommand] = []
        self._script_pos = 0
        self.results_buffer: dict[int, int] = {}
        self.stats = SimStats()
        self.trace_hook = None
        self._ring_staging: list = []

    # -- host-side setup ----------------------------------------------------

    def register_config(self, config_id: int, records: list):
        for rpu in self.rpus:
            validate_bitstream(rpu.params, records)
        self.configs[config_id] = records

    def submit_script(self, commands: list[HostCommand]):
        self.script.extend(commands)

    # -- ring plumbing --------------------------------------------------------

    def clockwise(self, rpu_id: int) -> "Rpu":
        return self.rpus[(rpu_id + 1) % len(self.rpus)]

    def ring_response(self, serving_rpu_id: int, value: int):
        """A ring grant at the serving RPU routes data back to the origin
        (its counterclockwise neighbor) with one extra transit cycle."""
        origin = self.rpus[(serving_rpu_id - 1) % len(self.rpus)]
        if origin.ring_wait is None:
            raise SimulationError("ring response with no waiting LSU")
        # staged at the system level so delivery timing does not depend on
        # the relative tick order of the two RPUs
        self._ring_staging.append((origin.id, origin.ring_wait, value))
        origin.ring_wait = None

    def _step_ring(self):
        if len(self.rpus) < 2:
            return
        for rpu in self.rpus:
            if rpu.ring_out and rpu.ring_wait is None:
                neighbor = self.clockwise(rpu.id)
                if ("ring",) not in neighbor.pai.pending:
                    coord, rel = rpu.ring_out.pop(0)
                    rpu.ring_wait = coord
                    phys = rel + neighbor.array_half * neighbor.half_words
                    neighbor.pai.post(Request(("ring",), "read", phys))

    # -- command dispatch -----------------------------------------------------

    def _dispatch_one_command(self):
        if self._script_pos >= len(self.script):
            return
        cmd = self.script[self._script_pos]
        self._script_pos += 1
        self.stats.host_commands += 1
        vec = self.rtt.decode(cmd)
        if vec.action == "load_manifest":
            a = list(vec.args)
            n = a[0] if a else 0
            if len(a) < 1 + 4 * n:
                raise UnknownOpcode("load_manifest operand stream too short")
            entries = [tuple(a[1 + 4 * i: 5 + 4 * i]) for i in range(n)]
            for rpu in self._targets(vec.rpu_mask):
                rpu.manifest = entries
            return
        action = _action_from_vector(vec)
        for rpu in self._targets(vec.rpu_mask):
            rpu.queue.append(action)

    def _targets(self, mask: int) -> list[Rpu]:
        return [r for r in self.rpus if mask & (1 << r.id)]

    def _decode_cpe_action(self, rpu: Rpu, imm16: int) -> Action:
        opcode = (imm16 >> 12) & 0xF
        operand = imm16 & 0xFFF
        if opcode == 0x1:
            return Action("load_config", config_id=operand)
        if opcode == 0x3:
            return Action("launch")
        if opcode in (0x2, 0x4):
            if operand >= len(rpu.manifest):
                raise UnknownOpcode(f"controller descriptor {operand} not in manifest")
            a, b, c, d = rpu.manifest[operand]
            if opcode == 0x2:
                return Action("load_data", ext_addr=a, sm_addr=b, length=c,
                              staging=bool(d))
            return Action("store_results", sm_addr=a, ext_addr=b, length=c)
        raise UnknownOpcode(f"controller action nibble {opcode:#x} undefined")

    def _controller_step(self, rpu: Rpu):
        for imm16 in rpu._cpe_actions:
            rpu.queue.append(self._decode_cpe_action(rpu, imm16))
        rpu._cpe_actions.clear()
        if not rpu.queue or rpu.status == RpuStatus.RUNNING:
            return
        head = rpu.queue[0]
        if head.kind == "load_config":
            records = self.configs.get(head.config_id)
            if records is None:
                raise UnknownOpcode(f"config {head.config_id} never registered")
            rpu.load_config(records)
        elif head.kind == "load_data":
            rpu.dma.enqueue(TransferBatch(head.ext_addr, head.sm_addr, head.length,
                                          staging=head.staging))
            rpu.batches_enqueued += 1
        elif head.kind == "launch":
            need = min(rpu.batches_enqueued, rpu.launch_count + 1)
            if rpu.dma.completed < need:
                return  # wait for this phase's data
            rpu.launch()
        elif head.kind == "store_results":
            if rpu.dma._toggle_pending:
                return  # results half settles once the in-flight batch ends
            words = rpu.store_results(head.sm_addr, head.length)
            for i, w in enumerate(words):
                self.results_buffer[head.ext_addr + i] = w
        rpu.queue.pop(0)
        rpu.action_log.append(head.kind)

    # -- main loop -------------------------------------------------------------

    def tick(self):
        self._dispatch_one_command()
        for rpu in self.rpus:
            self._controller_step(rpu)
        # forward ring requests enqueued on previous cycles (1 transit cycle)
        self._step_ring()
        for rpu in self.rpus:
            rpu.tick_pes()
        for rpu in self.rpus:
            rpu.end_cycle(self)
        for origin_id, coord, value in self._ring_staging:
            # one transit cycle back; the staging boundary adds the other
            self.rpus[origin_id]._delayed.append((1, coord, (value,)))
        self._ring_staging.clear()
        self.stats.total_cycles += 1
        if self.trace_hook is not None:
            self.trace_hook(self)

    def quiescent(self) -> bool:
        return (self._script_pos >= len(self.script)
                and all(r.quiescent() for r in self.rpus))

    def run(self, max_cycles: int | None = None):
        guard = max_cycles or (self.cycle_limit * 16)
        while not self.quiescent():
            if self.stats.total_cycles >= guard:
                raise CycleLimitExceeded(f"system made no progress in {guard} cycles")
            self.tick()
        self._finalize_stats()
        return self.stats

    def _finalize_stats(self):
        st = self.stats
        st.bank_conflicts = sum(r.pai.conflicts for r in self.rpus)
        st.arbiter_grants = sum(r.pai.total_grants for r in self.rpus)
        st.dma_stall_cycles = sum(r.dma.stall_cycles for r in self.rpus)
        st.pingpong_toggles = sum(r.dma.toggles for r in self.rpus)
        st.sreg_conflicts = sum(r.sregs.conflicts for r in self.rpus)
        st.grants_per_lsu = {
            (r.id, coord): n
            for r in self.rpus
            for coord, n in sorted(r.pai.grant_counts.items(),
                                   key=lambda kv: str(kv[0]))
            if coord != ("ring",)
        }
        st.pe_active = {(r.id, coord): r.pes[coord].active_cycles
                        for r in self.rpus for coord in sorted(r.pes)}
        st.pe_active_cycles = sum(st.pe_active.values())
        n_pes = sum(len(r.pes) for r in self.rpus)
        st.pe_idle_cycles = st.total_cycles * n_pes - st.pe_active_cycles

    def results_words(self, length: int, base: int = 0) -> list[int]:
        return [self.results_buffer.get(base + i, 0) for i in range(length)]


def run_protocol(system: SystemSim, records: list, image: list[int],
                 result_addr: int, result_len: int,
                 load_len: int | None = None) -> tuple[list[int], SimStats]:
    """The canonical 4-step host flow against RPU 0.

    Loads the bitstream, streams the image into the scratchpad, launches
    until done, and copies the result region back to the host buffer.
    """
    system.ext_memory.clear()
    system.ext_memory.extend(image)
    system.register_config(0, records)
    n = load_len if load_len is not None else len(image)
    script = [
        HostCommand(0x01, (0x1, 0)),
        HostCommand(0x02, (0x1, 0, 0, n, 1)),
        HostCommand(0x03, (0x1,)),
        HostCommand(0x04, (0x1, result_addr, 0, result_len)),
    ]
    system.submit_script(script)
    stats = system.run()
    return system.results_words(result_len), stats
