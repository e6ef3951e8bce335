"""Deterministic 9x9 gridworld mazes with a speaker view and a listener view.

Coordinates are ``(x, y)`` with ``x`` the column and ``y`` the row, row 0 at
the top. Grids and renders are indexed ``[y, x]``.
"""

from __future__ import annotations

import dataclasses
import enum
from collections import deque
from importlib import resources
from typing import Iterable

import numpy as np

GRID_SIZE = 9
EPISODE_TIMEOUT = 100

Cell = tuple[int, int]

WALL_RGB = (1, 1, 1)
FLOOR_RGB = (0, 0, 0)
AGENT_RGB = (0, 1, 0)
GOAL_RGB = (0, 0, 1)


class LayoutId(str, enum.Enum):
    TMAZE = "tmaze"
    DEAD_ENDS = "dead_ends"
    FOUR_ROOMS = "four_rooms"


class Heading(enum.IntEnum):
    UP = 0
    DOWN = 1
    RIGHT = 2
    LEFT = 3


class Action(enum.IntEnum):
    """Listener actions. Movement actions are absolute grid directions."""

    MOVE_UP = 0
    MOVE_DOWN = 1
    MOVE_RIGHT = 2
    MOVE_LEFT = 3
    STAY = 4


N_ACTIONS = len(Action)

# Movement actions share their index with the heading they produce.
_DELTA = {
    Heading.UP: (0, -1),
    Heading.DOWN: (0, 1),
    Heading.RIGHT: (1, 0),
    Heading.LEFT: (-1, 0),
}
# Counter-clockwise quarter turns that bring the heading to "up".
_ROTATIONS = {Heading.UP: 0, Heading.RIGHT: 1, Heading.DOWN: 2, Heading.LEFT: 3}


class Visibility(str, enum.Enum):
    NONE = "none"
    PARTIAL = "partial"


class Unreachable(Exception):
    """Raised by :func:`shortest_path` when no floor path joins two cells."""


class EpisodeFinished(RuntimeError):
    """Stepping an environment whose episode already terminated."""


@dataclasses.dataclass(frozen=True)
class MazeLayout:
    id: LayoutId
    walls: np.ndarray  # bool [y, x], True for wall
    start: Cell
    goal_candidates: tuple[Cell, ...]
    s_opt: int

    def is_floor(self, cell: Cell) -> bool:
        x, y = cell
        if not (0 <= x < GRID_SIZE and 0 <= y < GRID_SIZE):
            return False
        return not self.walls[y, x]

    def floor_cells(self) -> list[Cell]:
        ys, xs = np.nonzero(~self.walls)
        return [(int(x), int(y)) for y, x in zip(ys, xs)]

    def to_text(self) -> str:
        rows = []
        goals = set(self.goal_candidates)
        for y in range(GRID_SIZE):
            row = []
            for x in range(GRID_SIZE):
                if (x, y) == self.start:
                    row.append("S")
                elif (x, y) in goals:
                    row.append("G")
                else:
                    row.append("#" if self.walls[y, x] else ".")
            rows.append("".join(row))
        return f"layout {self.id.value} s_opt {self.s_opt}\n" + "\n".join(rows) + "\n"


@dataclasses.dataclass(frozen=True)
class EnvState:
    agent_pos: Cell
    heading: Heading
    goal_pos: Cell
    step_count: int = 0
    done: bool = False


def parse_layout(text: str) -> MazeLayout:
    """Parse the plain-text layout format (header line, then 9 grid rows)."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    header = lines[0].split()
    if len(header) != 4 or header[0] != "layout" or header[2] != "s_opt":
        raise ValueError(f"bad layout header: {lines[0]!r}")
    rows = lines[1:]
    if len(rows) != GRID_SIZE or any(len(r) != GRID_SIZE for r in rows):
        raise ValueError("layout grid must be 9x9")
    walls = np.zeros((GRID_SIZE, GRID_SIZE), dtype=bool)
    start = None
    goals: list[Cell] = []
    for y, row in enumerate(rows):
        for x, ch in enumerate(row):
            if ch == "#":
                walls[y, x] = True
            elif ch == "S":
                start = (x, y)
            elif ch == "G":
                goals.append((x, y))
            elif ch != ".":
                raise ValueError(f"unknown cell character {ch!r}")
    if start is None:
        raise ValueError("layout has no start cell")
    walls.setflags(write=False)
    layout = MazeLayout(LayoutId(header[1]), walls, start, tuple(goals), int(header[3]))
    validate_layout(layout)
    return layout


def validate_layout(layout: MazeLayout) -> None:
    w = layout.walls
    if w.shape != (GRID_SIZE, GRID_SIZE):
        raise ValueError("grid must be 9x9")
    if not (w[0].all() and w[-1].all() and w[:, 0].all() and w[:, -1].all()):
        raise ValueError("border cells must be walls")
    if not layout.is_floor(layout.start):
        raise ValueError("start must be a floor cell")
    dist = bfs_distances(layout, layout.start)
    for g in layout.goal_candidates:
        if g not in dist:
            raise ValueError(f"goal {g} unreachable from start")
    if layout.s_opt < 1:
        raise ValueError("s_opt must be positive")


_LAYOUT_CACHE: dict[LayoutId, MazeLayout] = {}


def build_layout(layout_id: LayoutId | str) -> MazeLayout:
    """Load one of the bundled canonical layouts."""
    layout_id = LayoutId(layout_id)
    if layout_id not in _LAYOUT_CACHE:
        text = resources.files("sitcom.layouts").joinpath(f"{layout_id.value}.txt").read_text()
        _LAYOUT_CACHE[layout_id] = parse_layout(text)
    return _LAYOUT_CACHE[layout_id]


def neighbours(layout: MazeLayout, cell: Cell) -> Iterable[Cell]:
    x, y = cell
    for dx, dy in _DELTA.values():
        nxt = (x + dx, y + dy)
        if layout.is_floor(nxt):
            yield nxt


def bfs_distances(layout: MazeLayout, source: Cell) -> dict[Cell, int]:
    dist = {source: 0}
    queue = deque([source])
    while queue:
        cell = queue.popleft()
        for nxt in neighbours(layout, cell):
            if nxt not in dist:
                dist[nxt] = dist[cell] + 1
                queue.append(nxt)
    return dist


def shortest_path(layout: MazeLayout, source: Cell, target: Cell) -> int:
    """BFS step count between two floor cells over 4-connected floor."""
    if not (layout.is_floor(source) and layout.is_floor(target)):
        raise ValueError("shortest_path endpoints must be floor cells")
    dist = bfs_distances(layout, source)
    if target not in dist:
        raise Unreachable(f"{target} unreachable from {source}")
    return dist[target]


def next_move_towards(layout: MazeLayout, source: Cell, target: Cell) -> Action:
    """First action of a shortest path (lowest action index among ties)."""
    if source == target:
        return Action.STAY
    dist = bfs_distances(layout, target)
    if source not in dist:
        raise Unreachable(f"{target} unreachable from {source}")
    for action in (Action.MOVE_UP, Action.MOVE_DOWN, Action.MOVE_RIGHT, Action.MOVE_LEFT):
        dx, dy = _DELTA[Heading(action)]
        nxt = (source[0] + dx, source[1] + dy)
        if dist.get(nxt, -1) == dist[source] - 1:
            return action
    raise AssertionError("BFS predecessor missing")


def reset(layout: MazeLayout, rng: np.random.Generator) -> EnvState:
    goal = layout.goal_candidates[int(rng.integers(len(layout.goal_candidates)))]
    return EnvState(agent_pos=layout.start, heading=Heading.UP, goal_pos=goal)


def apply_action(
    layout: MazeLayout, state: EnvState, action: Action | int
) -> tuple[EnvState, float, bool]:
    if state.done:
        raise EpisodeFinished("episode already finished")
    action = Action(action)
    pos, heading = state.agent_pos, state.heading
    if action is not Action.STAY:
        heading = Heading(int(action))
        dx, dy = _DELTA[heading]
        target = (pos[0] + dx, pos[1] + dy)
        if layout.is_floor(target):
            pos = target
    step_count = state.step_count + 1
    reached = pos == state.goal_pos
    reward = 1.0 if reached else 0.0
    done = reached or step_count >= EPISODE_TIMEOUT
    return EnvState(pos, heading, state.goal_pos, step_count, done), reward, done


def render(layout: MazeLayout, state: EnvState | None = None) -> np.ndarray:
    """Unrotated 9x9x3 binary rendering, with agent and goal overlays if given."""
    img = np.zeros((GRID_SIZE, GRID_SIZE, 3), dtype=np.float64)
    img[layout.walls] = WALL_RGB
    if state is not None:
        gx, gy = state.goal_pos
        img[gy, gx] = GOAL_RGB
        ax, ay = state.agent_pos
        img[ay, ax] = AGENT_RGB
    return img


def rotate_to_heading(img: np.ndarray, heading: Heading) -> np.ndarray:
    return np.rot90(img, k=_ROTATIONS[Heading(heading)], axes=(0, 1))


def speaker_view(layout: MazeLayout, state: EnvState) -> np.ndarray:
    """Full map rotated so that the listener's heading points up."""
    return np.ascontiguousarray(rotate_to_heading(render(layout, state), state.heading))


def view_cells(state: EnvState) -> tuple[Cell, Cell, Cell]:
    """(front-left, front, front-right) relative to the heading."""
    x, y = state.agent_pos
    dx, dy = _DELTA[state.heading]
    fx, fy = x + dx, y + dy
    # left of the heading is the heading turned counter-clockwise on screen
    lx, ly = dy, -dx
    return (fx + lx, fy + ly), (fx, fy), (fx - lx, fy - ly)


def cell_color(layout: MazeLayout, state: EnvState, cell: Cell) -> tuple[int, int, int]:
    if not layout.is_floor(cell):
        return WALL_RGB
    if cell == state.agent_pos:
        return AGENT_RGB
    if cell == state.goal_pos:
        return GOAL_RGB
    return FLOOR_RGB


def listener_view(
    layout: MazeLayout, state: EnvState, visibility: Visibility | str
) -> list[tuple[int, int, int]]:
    if Visibility(visibility) is Visibility.NONE:
        return []
    return [cell_color(layout, state, c) for c in view_cells(state)]


def is_junction(layout: MazeLayout, cell: Cell) -> bool:
    """A floor cell with three or more open neighbours."""
    return layout.is_floor(cell) and sum(1 for _ in neighbours(layout, cell)) >= 3


def front_is_floor(layout: MazeLayout, state: EnvState) -> bool:
    return layout.is_floor(view_cells(state)[1])
