"""2D occupancy worlds: generation, rendering, geodesics and agent motion.

A floor plan is a boolean occupancy grid (True = wall) over square cells.
Agents are points moving in continuous coordinates; the grid inflated by the
agent radius is the authority for collisions and geodesic distances, while
the raw grid is what the renderer sees.

Geodesic distances use 8-connected moves without corner cutting, so every
finite distance corresponds to a drivable path.  Distances are tracked as
integer pairs (straight steps, diagonal steps) and only converted to meters
once at the end; this keeps the field reproducible bit for bit by any
independent search that relaxes the same moves.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np
from scipy import ndimage

SQRT2 = math.sqrt(2.0)

AGENT_RADIUS = 0.18
FORWARD_STEP = 0.25
TURN_STEP = math.radians(10.0)
DEFAULT_CELL_SIZE = 0.1
DEFAULT_FOV = math.pi / 2
WALL_HALF_HEIGHT = 0.75  # meters above/below the camera axis


class Action(IntEnum):
    STOP = 0
    FORWARD = 1
    TURN_LEFT = 2
    TURN_RIGHT = 3


NUM_ACTIONS = 4


@dataclass
class Pose:
    x: float
    y: float
    theta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta], dtype=np.float64)


@dataclass
class FloorPlan:
    seed: int
    cell_size: float
    grid: np.ndarray  # bool [height, width], True = occupied
    _inflated: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def height(self) -> int:
        return self.grid.shape[0]

    @property
    def width(self) -> int:
        return self.grid.shape[1]

    @property
    def extent(self) -> tuple[float, float]:
        """World-size (x, y) in meters."""
        return (self.width * self.cell_size, self.height * self.cell_size)

    def inflated(self) -> np.ndarray:
        """Occupancy dilated by the agent radius (cached)."""
        if self._inflated is None:
            self._inflated = inflate_grid(self.grid, self.cell_size, AGENT_RADIUS)
        return self._inflated


def inflate_grid(grid: np.ndarray, cell_size: float, radius: float) -> np.ndarray:
    """Dilate occupancy by a disc of the given radius (in meters)."""
    r_cells = radius / cell_size
    n = int(math.ceil(r_cells))
    dy, dx = np.mgrid[-n:n + 1, -n:n + 1]
    disc = (dx * dx + dy * dy) <= r_cells * r_cells
    out = np.zeros_like(grid)
    occ_y, occ_x = np.nonzero(grid)
    h, w = grid.shape
    for oy, ox in zip(*np.nonzero(disc)):
        sy, sx = oy - n, ox - n
        ys = np.clip(occ_y + sy, 0, h - 1)
        xs = np.clip(occ_x + sx, 0, w - 1)
        out[ys, xs] = True
    return out


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def _rle_encode(flat: np.ndarray) -> list[int]:
    """Alternating run lengths, first run counts zeros (may be 0)."""
    runs: list[int] = []
    current = 0
    count = 0
    for v in flat.astype(np.uint8):
        if v == current:
            count += 1
        else:
            runs.append(count)
            current = 1 - current
            count = 1
    runs.append(count)
    return runs


def _rle_decode(runs: list[int], size: int) -> np.ndarray:
    flat = np.zeros(size, dtype=bool)
    pos = 0
    val = False
    for r in runs:
        if r:
            flat[pos:pos + r] = val
        pos += r
        val = not val
    if pos != size:
        raise ValueError(f"run lengths sum to {pos}, expected {size}")
    return flat


def plan_to_json(plan: FloorPlan) -> dict:
    return {
        "seed": int(plan.seed),
        "cell_size": float(plan.cell_size),
        "width": int(plan.width),
        "height": int(plan.height),
        "rle_grid": _rle_encode(plan.grid.reshape(-1)),
    }


def plan_from_json(obj: dict) -> FloorPlan:
    for key in ("seed", "cell_size", "width", "height", "rle_grid"):
        if key not in obj:
            raise ValueError(f"floor plan json missing key {key!r}")
    w, h = int(obj["width"]), int(obj["height"])
    grid = _rle_decode(list(obj["rle_grid"]), w * h).reshape(h, w)
    return FloorPlan(seed=int(obj["seed"]), cell_size=float(obj["cell_size"]), grid=grid)


def save_plan(plan: FloorPlan, path: str | Path) -> None:
    Path(path).write_text(json.dumps(plan_to_json(plan)))


def load_plan(path: str | Path) -> FloorPlan:
    return plan_from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def generate_floorplan(seed: int, width: int = 96, height: int = 96,
                       cell_size: float = DEFAULT_CELL_SIZE,
                       min_room: int = 14, door_cells: int = 9,
                       max_pillars: int = 3) -> FloorPlan:
    """Rooms from recursive splits, one door per dividing wall, a few pillars.

    Retries with derived seeds until the inflated free space is one connected
    component covering a reasonable share of the map.
    """
    for attempt in range(64):
        rng = np.random.default_rng([seed, attempt])
        grid = np.zeros((height, width), dtype=bool)
        grid[0, :] = grid[-1, :] = True
        grid[:, 0] = grid[:, -1] = True
        _split_rooms(rng, grid, 1, 1, height - 1, width - 1, min_room, door_cells)
        _place_pillars(rng, grid, max_pillars)
        plan = FloorPlan(seed=seed, cell_size=cell_size, grid=grid)
        if _plan_ok(plan):
            return plan
    raise RuntimeError(f"could not generate a connected plan for seed {seed}")


def _split_rooms(rng, grid, y0, x0, y1, x1, min_room, door_cells) -> None:
    h, w = y1 - y0, x1 - x0
    can_v = w >= 2 * min_room + 1
    can_h = h >= 2 * min_room + 1
    if not can_v and not can_h:
        return
    if can_v and can_h:
        vertical = bool(rng.integers(2)) if abs(w - h) <= 4 else (w > h)
    else:
        vertical = can_v
    if vertical:
        xs = int(rng.integers(x0 + min_room, x1 - min_room))
        door = int(rng.integers(y0, y1 - door_cells + 1))
        grid[y0:y1, xs] = True
        grid[door:door + door_cells, xs] = False
        _split_rooms(rng, grid, y0, x0, y1, xs, min_room, door_cells)
        _split_rooms(rng, grid, y0, xs + 1, y1, x1, min_room, door_cells)
    else:
        ys = int(rng.integers(y0 + min_room, y1 - min_room))
        door = int(rng.integers(x0, x1 - door_cells + 1))
        grid[ys, x0:x1] = True
        grid[ys, door:door + door_cells] = False
        _split_rooms(rng, grid, y0, x0, ys, x1, min_room, door_cells)
        _split_rooms(rng, grid, ys + 1, x0, y1, x1, min_room, door_cells)


def _place_pillars(rng, grid, max_pillars: int) -> None:
    h, w = grid.shape
    for _ in range(int(rng.integers(0, max_pillars + 1))):
        for _try in range(20):
            iy = int(rng.integers(4, h - 6))
            ix = int(rng.integers(4, w - 6))
            if not grid[iy - 3:iy + 5, ix - 3:ix + 5].any():
                grid[iy:iy + 2, ix:ix + 2] = True
                break


def _plan_ok(plan: FloorPlan) -> bool:
    free = ~plan.inflated()
    n_free = int(free.sum())
    if n_free < 0.3 * free.size:
        return False
    labels, n = ndimage.label(free, structure=np.ones((3, 3), dtype=int))
    return n == 1


def generate_corridor_plan(seed: int, length_m: float = 8.0,
                           width_m: float = 1.4,
                           cell_size: float = DEFAULT_CELL_SIZE) -> FloorPlan:
    """A straight corridor: walls on the border, otherwise empty."""
    w = int(round(length_m / cell_size)) + 2
    h = int(round(width_m / cell_size)) + 2
    grid = np.zeros((h, w), dtype=bool)
    grid[0, :] = grid[-1, :] = True
    grid[:, 0] = grid[:, -1] = True
    return FloorPlan(seed=seed, cell_size=cell_size, grid=grid)


def generate_open_plan(seed: int, size_m: float = 6.0,
                       cell_size: float = DEFAULT_CELL_SIZE) -> FloorPlan:
    """A square empty room: walls on the border, otherwise empty."""
    n = int(round(size_m / cell_size)) + 2
    grid = np.zeros((n, n), dtype=bool)
    grid[0, :] = grid[-1, :] = True
    grid[:, 0] = grid[:, -1] = True
    return FloorPlan(seed=seed, cell_size=cell_size, grid=grid)


# ---------------------------------------------------------------------------
# coordinates and collision queries
# ---------------------------------------------------------------------------

def cell_of(plan: FloorPlan, x: float, y: float) -> tuple[int, int]:
    """Grid indices (iy, ix) of a world point; points outside are clipped."""
    cs = plan.cell_size
    ix = min(max(int(x // cs), 0), plan.width - 1)
    iy = min(max(int(y // cs), 0), plan.height - 1)
    return iy, ix


def _in_bounds(plan: FloorPlan, x: float, y: float) -> bool:
    ex, ey = plan.extent
    return 0.0 <= x < ex and 0.0 <= y < ey


def is_free(plan: FloorPlan, x: float, y: float) -> bool:
    """True when the point's cell is free on the inflated grid."""
    if not _in_bounds(plan, x, y):
        return False
    iy, ix = cell_of(plan, x, y)
    return not plan.inflated()[iy, ix]


def segment_hits(occ: np.ndarray, cell_size: float,
                 p0: tuple[float, float], p1: tuple[float, float]) -> tuple[bool, int | None]:
    """Walk the segment through the grid; report the first occupied cell.

    Returns (blocked, axis) where axis is 0 if the blocking cell was entered
    across a vertical boundary (wall normal along x), 1 across a horizontal
    one, and None when the start cell itself is occupied or out of bounds.
    """
    h, w = occ.shape
    x0, y0 = p0
    x1, y1 = p1

    def occupied(ix: int, iy: int) -> bool:
        if ix < 0 or iy < 0 or ix >= w or iy >= h:
            return True
        return bool(occ[iy, ix])

    ix, iy = int(x0 // cell_size), int(y0 // cell_size)
    tx, ty = int(x1 // cell_size), int(y1 // cell_size)
    if occupied(ix, iy):
        return True, None
    dx, dy = x1 - x0, y1 - y0
    step_x = 1 if dx > 0 else -1
    step_y = 1 if dy > 0 else -1
    if dx != 0:
        nx = (ix + (step_x > 0)) * cell_size
        t_max_x = (nx - x0) / dx
        t_dx = cell_size / abs(dx)
    else:
        t_max_x, t_dx = math.inf, math.inf
    if dy != 0:
        ny = (iy + (step_y > 0)) * cell_size
        t_max_y = (ny - y0) / dy
        t_dy = cell_size / abs(dy)
    else:
        t_max_y, t_dy = math.inf, math.inf
    for _ in range((abs(tx - ix) + abs(ty - iy)) + 4):
        if ix == tx and iy == ty:
            return False, None
        if t_max_x <= t_max_y:
            if t_max_x > 1.0:
                return False, None
            ix += step_x
            t_max_x += t_dx
            axis = 0
        else:
            if t_max_y > 1.0:
                return False, None
            iy += step_y
            t_max_y += t_dy
            axis = 1
        if occupied(ix, iy):
            return True, axis
    return False, None


def segment_blocked(plan: FloorPlan, p0: tuple[float, float],
                    p1: tuple[float, float]) -> bool:
    return segment_hits(plan.inflated(), plan.cell_size, p0, p1)[0]


# ---------------------------------------------------------------------------
# motion
# ---------------------------------------------------------------------------

def step_dynamics(plan: FloorPlan, pose: Pose, action: int,
                  sliding: bool) -> tuple[Pose, bool]:
    """Apply one action.  Returns (new pose, collided flag).

    Forward motion is blocked by the inflated grid.  With sliding enabled a
    blocked move is retried with the full commanded displacement projected
    onto the wall tangent (the axis of the first blocked crossing); without
    sliding the agent stays in place.  The resulting pose is always in free
    space.
    """
    if action == Action.TURN_LEFT:
        return Pose(pose.x, pose.y, _wrap_angle(pose.theta + TURN_STEP)), False
    if action == Action.TURN_RIGHT:
        return Pose(pose.x, pose.y, _wrap_angle(pose.theta - TURN_STEP)), False
    if action != Action.FORWARD:
        return Pose(pose.x, pose.y, pose.theta), False

    occ = plan.inflated()
    cs = plan.cell_size
    d = np.array([math.cos(pose.theta), math.sin(pose.theta)]) * FORWARD_STEP
    p0 = (pose.x, pose.y)
    collided = False
    for _ in range(2):
        p1 = (p0[0] + d[0], p0[1] + d[1])
        blocked, axis = segment_hits(occ, cs, p0, p1)
        if not blocked:
            return Pose(p1[0], p1[1], pose.theta), collided
        collided = True
        if not sliding or axis is None:
            break
        d[axis] = 0.0
        if abs(d[0]) + abs(d[1]) < 1e-12:
            break
    return Pose(pose.x, pose.y, pose.theta), collided


def _wrap_angle(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi


def sample_free_pose(rng: np.random.Generator, plan: FloorPlan) -> Pose:
    free_cells = np.argwhere(~plan.inflated())
    iy, ix = free_cells[rng.integers(len(free_cells))]
    cs = plan.cell_size
    x = (ix + rng.uniform(0.05, 0.95)) * cs
    y = (iy + rng.uniform(0.05, 0.95)) * cs
    return Pose(x, y, rng.uniform(-math.pi, math.pi))


# ---------------------------------------------------------------------------
# geodesics
# ---------------------------------------------------------------------------

_MOVES = [(-1, 0, False), (1, 0, False), (0, -1, False), (0, 1, False),
          (-1, -1, True), (-1, 1, True), (1, -1, True), (1, 1, True)]


def step_counts_to_meters(straight: np.ndarray, diagonal: np.ndarray,
                          cell_size: float) -> np.ndarray:
    """Convert move counts into meters; the one conversion both the runtime
    search and any checking search must share for distances to agree."""
    s = np.asarray(straight, dtype=np.float64)
    d = np.asarray(diagonal, dtype=np.float64)
    out = (s + SQRT2 * d) * cell_size
    return np.where(s < 0, np.inf, out)


def distance_counts(plan: FloorPlan, goal_xy: tuple[float, float]) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell (straight, diagonal) move counts of the shortest 8-connected
    path to the goal cell, without corner cutting.  Unreached cells hold -1.
    """
    occ = plan.inflated()
    h, w = occ.shape
    giy, gix = cell_of(plan, *goal_xy)
    straight = np.full((h, w), -1, dtype=np.int32)
    diagonal = np.full((h, w), -1, dtype=np.int32)
    if occ[giy, gix]:
        return straight, diagonal
    best = np.full((h, w), np.inf)
    straight[giy, gix] = 0
    diagonal[giy, gix] = 0
    best[giy, gix] = 0.0
    heap = [(0.0, giy, gix)]
    while heap:
        dist, iy, ix = heapq.heappop(heap)
        if dist > best[iy, ix]:
            continue
        sa = straight[iy, ix]
        sb = diagonal[iy, ix]
        for dy, dx, diag in _MOVES:
            ny, nx = iy + dy, ix + dx
            if ny < 0 or nx < 0 or ny >= h or nx >= w or occ[ny, nx]:
                continue
            if diag and (occ[iy, nx] or occ[ny, ix]):
                continue
            na = sa + (0 if diag else 1)
            nb = sb + (1 if diag else 0)
            nd = na + SQRT2 * nb
            if nd < best[ny, nx]:
                best[ny, nx] = nd
                straight[ny, nx] = na
                diagonal[ny, nx] = nb
                heapq.heappush(heap, (nd, ny, nx))
    return straight, diagonal


def distance_field(plan: FloorPlan, goal_xy: tuple[float, float]) -> np.ndarray:
    """Geodesic meters from every cell to the goal cell (inf if unreachable)."""
    straight, diagonal = distance_counts(plan, goal_xy)
    return step_counts_to_meters(straight, diagonal, plan.cell_size)


def geodesic_distance(plan: FloorPlan, a_xy: tuple[float, float],
                      b_xy: tuple[float, float]) -> float:
    field_b = distance_field(plan, b_xy)
    iy, ix = cell_of(plan, *a_xy)
    return float(field_b[iy, ix])


def greedy_descent_path(plan: FloorPlan, field_to_goal: np.ndarray,
                        start_xy: tuple[float, float]) -> list[tuple[int, int]]:
    """Cells from the start to the goal following the steepest distance drop."""
    occ = plan.inflated()
    h, w = occ.shape
    iy, ix = cell_of(plan, *start_xy)
    if not np.isfinite(field_to_goal[iy, ix]):
        return []
    path = [(iy, ix)]
    for _ in range(h * w):
        if field_to_goal[iy, ix] == 0.0:
            return path
        best = None
        for dy, dx, diag in _MOVES:
            ny, nx = iy + dy, ix + dx
            if ny < 0 or nx < 0 or ny >= h or nx >= w or occ[ny, nx]:
                continue
            if diag and (occ[iy, nx] or occ[ny, ix]):
                continue
            v = field_to_goal[ny, nx]
            if best is None or v < best[0]:
                best = (v, ny, nx)
        if best is None or best[0] >= field_to_goal[iy, ix]:
            return path
        iy, ix = best[1], best[2]
        path.append((iy, ix))
    return path


def cell_center(plan: FloorPlan, iy: int, ix: int) -> tuple[float, float]:
    cs = plan.cell_size
    return ((ix + 0.5) * cs, (iy + 0.5) * cs)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _hash_hue(seed: int, ix: np.ndarray, iy: np.ndarray) -> np.ndarray:
    """Stable pseudo-random hue in [0,1) per wall cell."""
    with np.errstate(over="ignore"):
        h = (np.uint64(seed & 0xFFFFFFFF) * np.uint64(0x9E3779B97F4A7C15)
             ^ ix.astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
             ^ iy.astype(np.uint64) * np.uint64(0x165667B19E3779F9))
        h ^= h >> np.uint64(33)
        h *= np.uint64(0xFF51AFD7ED558CCD)
        h ^= h >> np.uint64(29)
    return (h & np.uint64(0xFFFFFF)).astype(np.float64) / float(0x1000000)


def _hsv_to_rgb(h: np.ndarray, s: float, v: np.ndarray) -> np.ndarray:
    """Vectorized HSV to RGB; returns [3, ...]."""
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, q, q])
    return np.stack([r, g, b])


def raycast(plan: FloorPlan, origin: tuple[float, float],
            angles: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Distances and hit cells for rays against the raw grid.

    Samples each ray densely then refines the boundary by bisection; good to
    well under a cell for rendering.  Returns (depth, hit_iy, hit_ix).
    """
    cs = plan.cell_size
    h, w = plan.grid.shape
    ex, ey = plan.extent
    max_range = math.hypot(ex, ey)
    dirx, diry = np.cos(angles), np.sin(angles)
    step = cs * 0.5
    ts = np.arange(step, max_range + step, step)

    def occupied_at(t):
        px = origin[0] + t * dirx
        py = origin[1] + t * diry
        ix = np.floor(px / cs).astype(np.int64)
        iy = np.floor(py / cs).astype(np.int64)
        inside = (ix >= 0) & (iy >= 0) & (ix < w) & (iy < h)
        occ = np.ones(px.shape, dtype=bool)
        occ[inside] = plan.grid[iy[inside], ix[inside]]
        return occ

    occ_along = occupied_at(ts[:, None])
    hit_any = occ_along.any(axis=0)
    first = occ_along.argmax(axis=0)
    t_hi = np.where(hit_any, ts[first], max_range)
    t_lo = np.maximum(t_hi - step, 0.0)
    for _ in range(10):
        t_mid = 0.5 * (t_lo + t_hi)
        mid_occ = occupied_at(t_mid)
        t_hi = np.where(mid_occ, t_mid, t_hi)
        t_lo = np.where(mid_occ, t_lo, t_mid)
    depth = np.where(hit_any, t_hi, max_range)
    hx = origin[0] + t_hi * dirx
    hy = origin[1] + t_hi * diry
    hit_ix = np.clip(np.floor(hx / cs).astype(np.int64), 0, w - 1)
    hit_iy = np.clip(np.floor(hy / cs).astype(np.int64), 0, h - 1)
    return depth, hit_iy, hit_ix


def render(plan: FloorPlan, pose: Pose, width: int = 32, height: int = 32,
           fov: float = DEFAULT_FOV) -> np.ndarray:
    """First-person color view [3, height, width] in [0, 1], float32.

    Column direction sweeps from +fov/2 (left edge) to -fov/2.  Wall column
    extent shrinks with along-ray distance; wall color is the stable per-cell
    hue shaded by distance, over a graded ceiling and floor.
    """
    offs = fov * (0.5 - np.arange(width) / (width - 1))
    angles = pose.theta + offs
    depth, hit_iy, hit_ix = raycast(plan, (pose.x, pose.y), angles)
    depth = np.maximum(depth, 1e-3)

    rows = np.arange(height, dtype=np.float64)
    img = np.empty((3, height, width), dtype=np.float64)
    half_h = height / 2.0
    ceiling = 0.42 + 0.16 * np.clip((half_h - rows) / half_h, 0.0, 1.0)
    floor = 0.20 + 0.22 * np.clip((rows - half_h) / half_h, 0.0, 1.0)
    base = np.where(rows < half_h, ceiling, floor)
    img[:] = base[None, :, None]

    shade = np.clip(1.15 / (1.0 + 0.25 * depth), 0.0, 1.0)
    hue = _hash_hue(plan.seed, hit_ix, hit_iy)
    wall_rgb = _hsv_to_rgb(hue, 0.5, shade)  # [3, width]
    span = half_h * (WALL_HALF_HEIGHT / depth) / math.tan(fov / 2.0)
    top = half_h - span
    bot = half_h + span
    mask = (rows[:, None] >= top[None, :]) & (rows[:, None] <= bot[None, :])
    img = np.where(mask[None, :, :], wall_rgb[:, None, :], img)
    return img.astype(np.float32)
