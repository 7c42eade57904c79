"""Banked scratchpad, parallel access interface, and double-buffered DMA.

The scratchpad is ``sm_banks`` single-ported banks of ``bank_depth`` 32-bit
words, word-interleaved on the low address bits so unit-stride streams are
conflict free. Each bank grants at most one access per cycle; the grant goes
to the first requester strictly after the bank's round-robin pointer in
cyclic order, losers stall and retry. Granted loads return data one cycle
after the grant.

Double buffering splits every bank in half on the top row-address bit. The
DMA controller owns one half (initially half 1) and streams queued batches
into it one word per cycle; the compute array only ever touches the other
half. The array's finish signal flips ownership; a flip requested mid-batch
is deferred until the batch completes.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import AddressOutOfRange


class BankedSram:
    """Word-addressed banked SRAM. Bank = low bits, row = high bits."""

    def __init__(self, banks: int, depth: int, width: int = 32):
        self.banks = banks
        self.depth = depth
        self.width = width
        self.words = banks * depth
        self.data = [0] * self.words

    def _check(self, addr: int):
        if not 0 <= addr < self.words:
            raise AddressOutOfRange(f"address {addr} outside {self.words} words")

    def bank_of(self, addr: int) -> int:
        self._check(addr)
        return addr % self.banks

    def row_of(self, addr: int) -> int:
        self._check(addr)
        return addr // self.banks

    def read(self, addr: int) -> int:
        self._check(addr)
        return self.data[addr]

    def write(self, addr: int, value: int):
        self._check(addr)
        self.data[addr] = value & ((1 << self.width) - 1)

    def half_of(self, addr: int) -> int:
        """Ping-pong half: top bit of the row address."""
        return self.row_of(addr) // (self.depth // 2)


@dataclass
class Request:
    requester: object          # LSU coord, or ("ring", rpu_id)
    op: str                    # "read" | "write"
    addr: int                  # physical word address
    data: int | None = None


@dataclass
class Grant:
    bank: int
    requester: object
    op: str
    addr: int
    data: int | None = None


class PaiArbiter:
    """Per-bank round-robin arbitration over the pending LSU requests.

    ``order`` fixes the cyclic requester order (LSU coordinates in raster
    order, with the ring port last). Each requester holds at most one
    pending request; it stays pending until granted.
    """

    def __init__(self, n_banks: int, order: list):
        self.n_banks = n_banks
        self.order = list(order)
        self._pos = {req: i for i, req in enumerate(self.order)}
        self.rr_pointer = [len(self.order) - 1] * n_banks  # so index 0 wins first
        self.pending: dict[object, Request] = {}
        self.grant_counts: dict[object, int] = {req: 0 for req in self.order}
        self.conflicts = 0
        self.total_grants = 0
        self.total_requests = 0

    def post(self, request: Request):
        assert request.requester not in self.pending, "one pending request per LSU"
        self.pending[request.requester] = request
        self.total_requests += 1

    def arbitrate(self, sram: BankedSram) -> list[Grant]:
        """Pick one winner per contested bank and advance its pointer."""
        by_bank: dict[int, list[int]] = {}
        for req in self.pending.values():
            by_bank.setdefault(sram.bank_of(req.addr), []).append(self._pos[req.requester])
        grants = []
        for bank in sorted(by_bank):
            contenders = by_bank[bank]
            self.conflicts += len(contenders) - 1
            start = self.rr_pointer[bank]
            n = len(self.order)
            winner_pos = min(contenders, key=lambda p: (p - start - 1) % n)
            self.rr_pointer[bank] = winner_pos
            requester = self.order[winner_pos]
            req = self.pending.pop(requester)
            self.grant_counts[requester] += 1
            self.total_grants += 1
            grants.append(Grant(bank, requester, req.op, req.addr, req.data))
        return grants


@dataclass
class TransferBatch:
    """One queued DMA job: copy ``length`` words from external memory into
    the scratchpad, at one word per cycle."""

    ext_addr: int
    sm_addr: int               # half-relative word address
    length: int
    staging: bool = False      # pre-launch load: half chosen by the array side
    progress: int = 0


class DmaController:
    """Streams transfer batches into the DMA-owned scratchpad half.

    Staging batches (pre-launch loads) target the array's half and start
    immediately. The j-th streamed batch (phase-j data, 1-based) is gated on
    j-1 completed ping-pong toggles, which is exactly "the half I own now is
    the half this batch belongs in". The array's finish signal flips
    ownership; a flip requested mid-batch is deferred until the batch
    completes, never dropped.
    """

    def __init__(self, ext_memory: list[int], half_words: int):
        self.ext = ext_memory
        self.half_words = half_words
        self.half = 1                     # DMA-owned half at reset
        self.queue: list[TransferBatch] = []
        self.active: TransferBatch | None = None
        self._active_half = 0
        self.streamed_started = 0
        self.completed = 0
        self.toggles = 0
        self._toggle_pending = False
        self.stall_cycles = 0

    @property
    def busy(self) -> bool:
        return self.active is not None

    @property
    def array_half(self) -> int:
        return 1 - self.half

    def enqueue(self, batch: TransferBatch):
        self.queue.append(batch)

    def idle(self) -> bool:
        return self.active is None and not self.queue

    def request_toggle(self):
        """Finish signal from the array; deferred while a batch is in flight."""
        if self.busy:
            self._toggle_pending = True
        else:
            self._apply_toggle()

    def _apply_toggle(self):
        self.half = 1 - self.half
        self.toggles += 1
        self._toggle_pending = False

    def step(self, sram: BankedSram, blocked_banks: set[int]) -> int | None:
        """Advance one cycle. Returns the bank written this cycle, if any.

        ``blocked_banks`` are banks already granted to the array this cycle;
        the array wins same-bank ties, the DMA stalls and retries.
        """
        if self.active is None:
            if self.queue:
                head = self.queue[0]
                if head.staging:
                    self.active = self.queue.pop(0)
                    self._active_half = self.array_half
                elif self.toggles >= self.streamed_started:
                    self.active = self.queue.pop(0)
                    self._active_half = self.half
                    self.streamed_started += 1
            if self.active is None:
                return None
        batch = self.active
        addr = (batch.sm_addr + batch.progress) % self.half_words \
            + self._active_half * self.half_words
        bank = sram.bank_of(addr)
        if bank in blocked_banks:
            self.stall_cycles += 1
            return None
        ext_idx = batch.ext_addr + batch.progress
        value = self.ext[ext_idx] if ext_idx < len(self.ext) else 0
        sram.write(addr, value)
        batch.progress += 1
        if batch.progress >= batch.length:
            self.active = None
            self.completed += 1
            if self._toggle_pending:
                self._apply_toggle()
        return bank
