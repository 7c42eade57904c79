"""Grid topologies, per-cycle value exchange, and scoped shared registers.

Three topologies connect the PE grid: the plain 2D mesh, the torus (mesh
with wraparound), and the 1-hop network (mesh plus straight-line distance-2
links). Every link has one cycle of latency, including the distance-2 links.

``exchange`` is the pure per-cycle contract: each PE drives at most one
(direction, value) output; the map of inputs for the next cycle is exactly
those outputs relabeled onto the receiving PE's entry port.
"""

from __future__ import annotations

from enum import Enum

from .arch import SharedRegScope, TopologyKind
from .errors import IndexOutOfRange

Coord = tuple[int, int]


class Direction(Enum):
    # (row delta, col delta); *2 variants are the distance-2 straight links
    N = (-1, 0)
    S = (1, 0)
    E = (0, 1)
    W = (0, -1)
    N2 = (-2, 0)
    S2 = (2, 0)
    E2 = (0, 2)
    W2 = (0, -2)

    @property
    def opposite(self) -> "Direction":
        dr, dc = self.value
        return Direction((-dr, -dc))

    @property
    def is_two_hop(self) -> bool:
        dr, dc = self.value
        return abs(dr) + abs(dc) == 2


_ONE_HOP_ORDER = (Direction.N, Direction.S, Direction.E, Direction.W,
                  Direction.N2, Direction.S2, Direction.E2, Direction.W2)
_MESH_ORDER = _ONE_HOP_ORDER[:4]


def neighbors(topology: TopologyKind, coord: Coord, dims: Coord) -> list[tuple[Direction, Coord]]:
    """Outgoing ports of one PE: (direction, destination coordinate).

    Mesh: in-grid orthogonal adjacents. Torus: orthogonal with wraparound
    (directions are always 4; destinations may coincide on 2-wide grids).
    1-hop: mesh links plus in-grid distance-2 straight links.
    """
    rows, cols = dims
    r, c = coord
    if not (0 <= r < rows and 0 <= c < cols):
        raise IndexOutOfRange(f"coord {coord} outside {rows}x{cols} grid")
    out = []
    if topology is TopologyKind.TORUS:
        for d in _MESH_ORDER:
            dr, dc = d.value
            out.append((d, ((r + dr) % rows, (c + dc) % cols)))
        return out
    order = _ONE_HOP_ORDER if topology is TopologyKind.ONE_HOP else _MESH_ORDER
    for d in order:
        dr, dc = d.value
        nr, nc = r + dr, c + dc
        if 0 <= nr < rows and 0 <= nc < cols:
            out.append((d, (nr, nc)))
    return out


def neighbor_map(topology: TopologyKind, dims: Coord) -> dict[Coord, dict[Direction, Coord]]:
    """Precomputed outgoing ports for every coordinate."""
    rows, cols = dims
    return {
        (r, c): dict(neighbors(topology, (r, c), dims))
        for r in range(rows) for c in range(cols)
    }


def exchange(outputs: dict[Coord, tuple[Direction, int]],
             topology: TopologyKind, dims: Coord) -> dict[tuple[Coord, Direction], int]:
    """Relabel cycle-t outputs into cycle-t+1 inputs.

    ``outputs`` maps a producing coordinate to the single (direction, value)
    it drives this cycle. The result maps (receiving coordinate, entry
    direction) to the delivered value; the entry direction is the opposite
    of the drive direction. Values are conserved: one input per output.
    """
    inputs: dict[tuple[Coord, Direction], int] = {}
    for coord in sorted(outputs):
        direction, value = outputs[coord]
        ports = dict(neighbors(topology, coord, dims))
        dest = ports.get(direction)
        if dest is None:
            continue  # driving off the grid edge: the value is lost
        inputs[(dest, direction.opposite)] = value
    return inputs


# --- shared registers --------------------------------------------------------


def scope_of(mode: SharedRegScope, coord: Coord, dims: Coord) -> int:
    """Scope instance owning a coordinate. Instances partition the grid."""
    rows, cols = dims
    r, c = coord
    if mode is SharedRegScope.LINE:
        return c
    if mode is SharedRegScope.ROW:
        return r
    if mode is SharedRegScope.QUADRANT:
        return 2 * (r >= rows // 2) + (c >= cols // 2)
    return 0


def scope_count(mode: SharedRegScope, dims: Coord) -> int:
    rows, cols = dims
    return {SharedRegScope.LINE: cols, SharedRegScope.ROW: rows,
            SharedRegScope.QUADRANT: 4, SharedRegScope.GLOBAL: 1}[mode]


class SharedRegFile:
    """Scoped 32-bit registers with validity bits for cross-schedule delivery.

    Reads see the state committed at the end of the previous cycle. Writes
    are staged and committed together; two writes to the same register in
    one cycle resolve to the lowest (row, col) writer and count a conflict.
    """

    def __init__(self, mode: SharedRegScope, dims: Coord, reg_count: int):
        self.mode = mode
        self.dims = dims
        self.reg_count = reg_count
        n = scope_count(mode, dims)
        self._value = [[0] * reg_count for _ in range(n)]
        self._valid = [[False] * reg_count for _ in range(n)]
        self._pending: dict[tuple[int, int], tuple[Coord, int]] = {}
        self.conflicts = 0

    def _check_idx(self, idx: int):
        if not 0 <= idx < self.reg_count:
            raise IndexOutOfRange(f"shared register {idx} (count {self.reg_count})")

    def read(self, coord: Coord, idx: int) -> tuple[int, bool]:
        self._check_idx(idx)
        s = scope_of(self.mode, coord, self.dims)
        return self._value[s][idx], self._valid[s][idx]

    def write(self, coord: Coord, idx: int, value: int):
        """Stage a write; committed at cycle end by ``commit``."""
        self._check_idx(idx)
        s = scope_of(self.mode, coord, self.dims)
        key = (s, idx)
        prior = self._pending.get(key)
        if prior is None:
            self._pending[key] = (coord, value)
        else:
            self.conflicts += 1
            if coord < prior[0]:
                self._pending[key] = (coord, value)

    def commit(self):
        for (s, idx), (_, value) in self._pending.items():
            self._value[s][idx] = value & 0xFFFFFFFF
            self._valid[s][idx] = True
        self._pending.clear()

    def clear(self):
        for bank_v, bank_f in zip(self._value, self._valid):
            for i in range(self.reg_count):
                bank_v[i] = 0
                bank_f[i] = False
        self._pending.clear()
