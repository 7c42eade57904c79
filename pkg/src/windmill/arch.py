"""Architecture parameter schema, validation, and the description file format.

An architecture instance is one ``ArchParams`` value: grid geometry, the
per-cell PE type map, interconnect topology, execution mode, shared-memory
banking, shared-register scoping and the host-system counts. ``validate``
checks every invariant and reports all violations at once. ``derive_counts``
turns validated parameters into a resource report (PE counts by type, context
bits, memory bytes, link counts).

The on-disk form is a small ``key = value`` text format under three section
headers, with the PE type map written as rows of single-letter codes::

    [array]
    rows = 8
    cols = 8
    topology = mesh2d
    exec_mode = mcmd
    data_width = 32
    LLLLLLLL
    LCGGGGGL
    ...

    [memory]
    sm_banks = 16
    bank_depth = 256
    bank_width = 32

    [system]
    rpu_count = 4
    cpe = on
    context_depth_mcmd = 16
    shared_reg_mode = global
    shared_reg_count = 4

Unknown keys are rejected. ``serialize`` and ``parse_arch_file`` round-trip.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

from .errors import ParseError, ValidationError


class PeType(Enum):
    GPE = "G"
    LSU = "L"
    CPE = "C"


class TopologyKind(Enum):
    MESH2D = "mesh2d"
    ONE_HOP = "onehop"
    TORUS = "torus"


class ExecMode(Enum):
    SCMD = "scmd"
    MCMD = "mcmd"


class SharedRegScope(Enum):
    LINE = "line"        # one scope per column
    ROW = "row"          # one scope per row
    QUADRANT = "quadrant"
    GLOBAL = "global"


# SCMD shares one configuration stream across a PE row, freeing the context
# memory to hold this many times more words than MCMD.
SCMD_CONTEXT_FACTOR = 8


@dataclass(frozen=True)
class ArchParams:
    rows: int = 8
    cols: int = 8
    pe_type_map: tuple[tuple[PeType, ...], ...] = ()
    topology: TopologyKind = TopologyKind.MESH2D
    exec_mode: ExecMode = ExecMode.MCMD
    data_width: int = 32
    sm_banks: int = 16
    bank_depth: int = 256
    bank_width: int = 32
    context_depth_mcmd: int = 16
    shared_reg_mode: SharedRegScope = SharedRegScope.GLOBAL
    shared_reg_count: int = 4
    rpu_count: int = 4
    cpe_enabled: bool = True

    def pe_type(self, row: int, col: int) -> PeType:
        t = self.pe_type_map[row][col]
        if t is PeType.CPE and not self.cpe_enabled:
            return PeType.GPE
        return t

    def coords(self):
        for r in range(self.rows):
            for c in range(self.cols):
                yield (r, c)

    @property
    def sm_words(self) -> int:
        return self.sm_banks * self.bank_depth

    def context_capacity(self) -> int:
        """Configuration words one PE can hold under the execution mode."""
        if self.exec_mode is ExecMode.SCMD:
            return SCMD_CONTEXT_FACTOR * self.context_depth_mcmd
        return self.context_depth_mcmd


def perimeter_lsu_map(rows: int, cols: int, cpe_at: tuple[int, int] | None = (1, 1)):
    """Type map with LSUs on the grid perimeter, GPEs inside, one CPE.

    The CPE sits in the interior cell adjacent to the host-bridge corner,
    (1, 1) by default. Pass ``cpe_at=None`` for a CPE-free map.
    """
    grid = []
    for r in range(rows):
        row = []
        for c in range(cols):
            if r in (0, rows - 1) or c in (0, cols - 1):
                row.append(PeType.LSU)
            elif cpe_at is not None and (r, c) == cpe_at:
                row.append(PeType.CPE)
            else:
                row.append(PeType.GPE)
        grid.append(tuple(row))
    return tuple(grid)


def standard_preset() -> ArchParams:
    """The reference 8x8 instance: 28 perimeter LSUs around 35 GPEs and one
    CPE, a 2D mesh, and 16 banks of 256x32-bit shared memory."""
    return ArchParams(pe_type_map=perimeter_lsu_map(8, 8))


def validate(params: ArchParams) -> ArchParams:
    """Check every invariant; raise ValidationError listing all violations."""
    errs = []
    if params.rows < 2:
        errs.append("rows: must be >= 2")
    if params.cols < 2:
        errs.append("cols: must be >= 2")
    if len(params.pe_type_map) != params.rows:
        errs.append(f"pe_type_map: {len(params.pe_type_map)} rows, expected {params.rows}")
    else:
        for r, row in enumerate(params.pe_type_map):
            if len(row) != params.cols:
                errs.append(f"pe_type_map: row {r} has {len(row)} cells, expected {params.cols}")
    if params.sm_banks < 1 or params.sm_banks & (params.sm_banks - 1):
        errs.append("sm_banks: must be a power of two")
    if params.bank_depth < 2 or params.bank_depth & (params.bank_depth - 1):
        errs.append("bank_depth: must be a power of two >= 2 (ping-pong halves split "
                    "on the top row-address bit)")
    if params.bank_width != params.data_width:
        errs.append(f"bank_width: {params.bank_width} != data_width {params.data_width}")
    if params.data_width != 32:
        errs.append("data_width: only 32-bit datapaths are supported")
    if params.context_depth_mcmd < 1:
        errs.append("context_depth_mcmd: must be >= 1")
    if params.shared_reg_count < 1 or params.shared_reg_count > 16:
        errs.append("shared_reg_count: must be in 1..16 (4-bit register index)")
    if params.rpu_count < 1:
        errs.append("rpu_count: must be >= 1")
    if not errs and params.cpe_enabled:
        n_cpe = sum(row.count(PeType.CPE) for row in params.pe_type_map)
        if n_cpe != 1:
            errs.append(f"pe_type_map: exactly one CPE per RPU required, found {n_cpe}")
    if errs:
        raise ValidationError(errs)
    return params


@dataclass(frozen=True)
class ResourceReport:
    """Pure function of validated parameters; what a generated instance costs
    in countable resources (the desk-scale stand-in for silicon area)."""

    rows: int
    cols: int
    gpe_count: int
    lsu_count: int
    cpe_count: int
    topology: str
    exec_mode: str
    links_directed: int
    context_words_per_pe: int
    context_bits_total: int
    sm_banks: int
    bank_depth: int
    bank_width: int
    sm_bytes: int
    shared_reg_mode: str
    shared_reg_count: int
    rpu_count: int

    CSV_COLUMNS = (
        "rows", "cols", "gpe_count", "lsu_count", "cpe_count", "topology",
        "exec_mode", "links_directed", "context_words_per_pe",
        "context_bits_total", "sm_banks", "bank_depth", "bank_width",
        "sm_bytes", "shared_reg_mode", "shared_reg_count", "rpu_count",
    )

    def csv_row(self) -> str:
        return ",".join(str(getattr(self, c)) for c in self.CSV_COLUMNS)


def link_count(topology: TopologyKind, rows: int, cols: int) -> int:
    """Directed link count for one grid under the given topology."""
    mesh = 2 * (rows * (cols - 1) + cols * (rows - 1))
    if topology is TopologyKind.MESH2D:
        return mesh
    if topology is TopologyKind.TORUS:
        # every cell drives 4 outgoing wraparound-or-local links
        return 4 * rows * cols
    # 1-hop: mesh plus in-grid straight-line distance-2 links
    dist2 = 2 * (rows * max(cols - 2, 0) + cols * max(rows - 2, 0))
    return mesh + dist2


def derive_counts(params: ArchParams) -> ResourceReport:
    counts = {PeType.GPE: 0, PeType.LSU: 0, PeType.CPE: 0}
    for r, c in params.coords():
        counts[params.pe_type(r, c)] += 1
    cap = params.context_capacity()
    n_pes = params.rows * params.cols
    return ResourceReport(
        rows=params.rows,
        cols=params.cols,
        gpe_count=counts[PeType.GPE],
        lsu_count=counts[PeType.LSU],
        cpe_count=counts[PeType.CPE],
        topology=params.topology.value,
        exec_mode=params.exec_mode.value,
        links_directed=link_count(params.topology, params.rows, params.cols),
        context_words_per_pe=cap,
        context_bits_total=cap * 64 * n_pes,
        sm_banks=params.sm_banks,
        bank_depth=params.bank_depth,
        bank_width=params.bank_width,
        sm_bytes=params.sm_banks * params.bank_depth * params.bank_width // 8,
        shared_reg_mode=params.shared_reg_mode.value,
        shared_reg_count=params.shared_reg_count,
        rpu_count=params.rpu_count,
    )


# --- description file parsing ----------------------------------------------

_SECTIONS = ("array", "memory", "system")

_KEY_HOME = {
    "rows": "array", "cols": "array", "topology": "array",
    "exec_mode": "array", "data_width": "array",
    "sm_banks": "memory", "bank_depth": "memory", "bank_width": "memory",
    "rpu_count": "system", "cpe": "system", "context_depth_mcmd": "system",
    "shared_reg_mode": "system", "shared_reg_count": "system",
}

_INT_KEYS = {"rows", "cols", "data_width", "sm_banks", "bank_depth",
             "bank_width", "rpu_count", "context_depth_mcmd",
             "shared_reg_count"}


def _parse_enum(enum_cls, value, key, lineno):
    try:
        return enum_cls(value.lower())
    except ValueError:
        legal = "/".join(e.value for e in enum_cls)
        raise ParseError(f"{key}: expected one of {legal}, got {value!r}", lineno)


def parse_arch_file(text: str) -> ArchParams:
    """Parse and validate one architecture description."""
    section = None
    values: dict[str, object] = {}
    grid_rows: list[tuple[PeType, ...]] = []
    saw_any = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        saw_any = True
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip().lower()
            if name not in _SECTIONS:
                raise ParseError(f"unknown section [{name}]", lineno)
            section = name
            continue
        if section is None:
            raise ParseError("content before any section header", lineno)
        if "=" in line:
            key, _, value = line.partition("=")
            key, value = key.strip().lower(), value.strip()
            home = _KEY_HOME.get(key)
            if home is None:
                raise ParseError(f"unknown key {key!r}", lineno)
            if home != section:
                raise ParseError(f"key {key!r} belongs in [{home}]", lineno)
            if key in values:
                raise ParseError(f"duplicate key {key!r}", lineno)
            if key in _INT_KEYS:
                try:
                    values[key] = int(value, 0)
                except ValueError:
                    raise ParseError(f"{key}: expected an integer, got {value!r}", lineno)
            elif key == "topology":
                values[key] = _parse_enum(TopologyKind, value, key, lineno)
            elif key == "exec_mode":
                values[key] = _parse_enum(ExecMode, value, key, lineno)
            elif key == "shared_reg_mode":
                values[key] = _parse_enum(SharedRegScope, value, key, lineno)
            elif key == "cpe":
                if value.lower() not in ("on", "off"):
                    raise ParseError(f"cpe: expected on/off, got {value!r}", lineno)
                values[key] = value.lower() == "on"
            continue
        if section == "array" and set(line) <= {"G", "L", "C"}:
            grid_rows.append(tuple(PeType(ch) for ch in line))
            continue
        raise ParseError(f"unrecognized line {line!r}", lineno)

    if not saw_any:
        raise ParseError("empty architecture description", 1)

    kwargs = {}
    for key, value in values.items():
        kwargs["cpe_enabled" if key == "cpe" else key] = value
    params = ArchParams(pe_type_map=tuple(grid_rows), **kwargs)
    if not grid_rows:
        # no explicit map: default to the perimeter-LSU pattern
        cpe_at = (1, 1) if params.cpe_enabled else None
        params = replace(params, pe_type_map=perimeter_lsu_map(params.rows, params.cols, cpe_at))
    return validate(params)


def serialize(params: ArchParams) -> str:
    """Canonical text form; parses back to an equal ArchParams."""
    lines = [
        "[array]",
        f"rows = {params.rows}",
        f"cols = {params.cols}",
        f"topology = {params.topology.value}",
        f"exec_mode = {params.exec_mode.value}",
        f"data_width = {params.data_width}",
    ]
    for row in params.pe_type_map:
        lines.append("".join(t.value for t in row))
    lines += [
        "",
        "[memory]",
        f"sm_banks = {params.sm_banks}",
        f"bank_depth = {params.bank_depth}",
        f"bank_width = {params.bank_width}",
        "",
        "[system]",
        f"rpu_count = {params.rpu_count}",
        f"cpe = {'on' if params.cpe_enabled else 'off'}",
        f"context_depth_mcmd = {params.context_depth_mcmd}",
        f"shared_reg_mode = {params.shared_reg_mode.value}",
        f"shared_reg_count = {params.shared_reg_count}",
    ]
    return "\n".join(lines) + "\n"
