"""Symbolic blocks-and-bowls grid world.

A state is a ``(G, G)`` integer array of cell codes. Every operation here is a
pure function of its arguments (plus an explicit seed), so data generation can
be fanned out to workers without coordination.

Cell codes::

    0                     Empty
    1 + c                 Block(c)
    1 + C + c             Bowl(c)
    1 + 2C + C*b + w      BlockInBowl(block=b, bowl=w)

with ``C = len(COLORS)``.
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field

import numpy as np

COLORS = ("red", "green", "blue", "yellow", "purple", "orange")
N_COLORS = len(COLORS)
GRID = 8
PIXELS_PER_CELL = 8

EMPTY = 0
N_CODES = 1 + 2 * N_COLORS + N_COLORS * N_COLORS

ZONES = ("left", "right", "top", "bottom")


class IllegalAction(Exception):
    pass


class Unsolvable(Exception):
    pass


class Family(str, enum.Enum):
    MOVE_TO_ZONE = "MoveToZone"
    STACK_BY_COLOR = "StackByColor"
    MATCH_BOWLS = "MatchBowls"


def block(c: int) -> int:
    return 1 + c


def bowl(c: int) -> int:
    return 1 + N_COLORS + c


def block_in_bowl(b: int, w: int) -> int:
    return 1 + 2 * N_COLORS + N_COLORS * b + w


def decode_cell(code: int) -> tuple[str, int | None, int | None]:
    """Return ``(kind, block_color, bowl_color)`` for a cell code."""
    code = int(code)
    if code == EMPTY:
        return "empty", None, None
    if code <= N_COLORS:
        return "block", code - 1, None
    if code <= 2 * N_COLORS:
        return "bowl", None, code - 1 - N_COLORS
    if code < N_CODES:
        k = code - 1 - 2 * N_COLORS
        return "block_in_bowl", k // N_COLORS, k % N_COLORS
    raise ValueError(f"not a cell code: {code}")


def block_color(code: int) -> int | None:
    return decode_cell(code)[1]


def bowl_color(code: int) -> int | None:
    return decode_cell(code)[2]


def empty_state(size: int = GRID) -> np.ndarray:
    return np.zeros((size, size), dtype=np.int64)


# --------------------------------------------------------------------------
# tasks


@dataclass(frozen=True)
class TaskSpec:
    family: Family
    zone: str | None = None
    color: int | None = None
    column: int | None = None

    @property
    def instruction(self) -> str:
        if self.family is Family.MOVE_TO_ZONE:
            return f"move all the blocks to the {self.zone} area"
        if self.family is Family.STACK_BY_COLOR:
            return f"stack all the {COLORS[self.color]} blocks in column {self.column}"
        return "put the blocks in the bowls with matching colors"

    def params(self) -> dict:
        out = {}
        if self.zone is not None:
            out["zone"] = self.zone
        if self.color is not None:
            out["color"] = COLORS[self.color]
        if self.column is not None:
            out["column"] = self.column
        return out


_MOVE_RE = re.compile(r"^move all the blocks to the (\w+) area$")
_STACK_RE = re.compile(r"^stack all the (\w+) blocks in column (\d+)$")


def parse_instruction(text: str) -> TaskSpec:
    m = _MOVE_RE.match(text)
    if m and m.group(1) in ZONES:
        return TaskSpec(Family.MOVE_TO_ZONE, zone=m.group(1))
    m = _STACK_RE.match(text)
    if m and m.group(1) in COLORS:
        return TaskSpec(Family.STACK_BY_COLOR, color=COLORS.index(m.group(1)), column=int(m.group(2)))
    if text == "put the blocks in the bowls with matching colors":
        return TaskSpec(Family.MATCH_BOWLS)
    raise ValueError(f"unrecognised instruction: {text!r}")


def in_zone(zone: str, r: int, c: int, size: int = GRID) -> bool:
    half = size // 2
    return {
        "left": c < half,
        "right": c >= half,
        "top": r < half,
        "bottom": r >= half,
    }[zone]


# --------------------------------------------------------------------------
# actions


@dataclass(frozen=True)
class Action:
    """``move the <color> block at (r1,c1) to (r2,c2)``."""

    color: int
    source: tuple[int, int]
    target: tuple[int, int]

    @property
    def text(self) -> str:
        (r1, c1), (r2, c2) = self.source, self.target
        return f"move the {COLORS[self.color]} block at ({r1},{c1}) to ({r2},{c2})"


_ACTION_RE = re.compile(r"^move the (\w+) block at \((\d+),(\d+)\) to \((\d+),(\d+)\)$")


def parse_action(text: str) -> Action:
    m = _ACTION_RE.match(text.strip())
    if not m or m.group(1) not in COLORS:
        raise IllegalAction(f"cannot parse action {text!r}")
    r1, c1, r2, c2 = (int(g) for g in m.groups()[1:])
    return Action(COLORS.index(m.group(1)), (r1, c1), (r2, c2))


def apply_action(state: np.ndarray, action: Action | str) -> np.ndarray:
    """Execute one move; the input state is left untouched."""
    if isinstance(action, str):
        action = parse_action(action)
    size = state.shape[0]
    (r1, c1), (r2, c2) = action.source, action.target
    for r, c in (action.source, action.target):
        if not (0 <= r < size and 0 <= c < size):
            raise IllegalAction(f"cell ({r},{c}) is off the grid")
    if action.source == action.target:
        raise IllegalAction("source and target coincide")
    kind, b, w = decode_cell(state[r1, c1])
    if kind not in ("block", "block_in_bowl") or b != action.color:
        raise IllegalAction(f"no {COLORS[action.color]} block at ({r1},{c1})")
    tkind, _, tw = decode_cell(state[r2, c2])
    if tkind not in ("empty", "bowl"):
        raise IllegalAction(f"target ({r2},{c2}) is occupied")

    out = state.copy()
    out[r1, c1] = EMPTY if kind == "block" else bowl(w)
    out[r2, c2] = block(b) if tkind == "empty" else block_in_bowl(b, tw)
    return out


# --------------------------------------------------------------------------
# success predicates and oracle


def _blocks(state: np.ndarray):
    """Row-major ``(r, c, block_color)`` of every cell holding a block."""
    size = state.shape[0]
    for r in range(size):
        for c in range(size):
            b = block_color(state[r, c])
            if b is not None:
                yield r, c, b


def _stack_cells(task: TaskSpec, state: np.ndarray) -> list[tuple[int, int]]:
    n = sum(1 for _, _, b in _blocks(state) if b == task.color)
    return [(i, task.column) for i in range(n)]


def _misplaced(task: TaskSpec, state: np.ndarray) -> list[tuple[int, int, int]]:
    if task.family is Family.MOVE_TO_ZONE:
        return [(r, c, b) for r, c, b in _blocks(state) if not in_zone(task.zone, r, c, state.shape[0])]
    if task.family is Family.STACK_BY_COLOR:
        cells = set(_stack_cells(task, state))
        return [(r, c, b) for r, c, b in _blocks(state) if b == task.color and (r, c) not in cells]
    return [(r, c, b) for r, c, b in _blocks(state) if bowl_color(state[r, c]) != b]


def check_success(task: TaskSpec, state: np.ndarray) -> bool:
    return not _misplaced(task, state)


def _free_targets(task: TaskSpec, state: np.ndarray, color: int) -> list[tuple[int, int]]:
    size = state.shape[0]
    if task.family is Family.MOVE_TO_ZONE:
        return [
            (r, c)
            for r in range(size)
            for c in range(size)
            if state[r, c] == EMPTY and in_zone(task.zone, r, c, size)
        ]
    if task.family is Family.STACK_BY_COLOR:
        return [(r, c) for r, c in _stack_cells(task, state) if state[r, c] == EMPTY]
    return [(r, c) for r in range(size) for c in range(size) if state[r, c] == bowl(color)]


def next_oracle_action(task: TaskSpec, state: np.ndarray) -> Action | None:
    """First move of the oracle plan from ``state`` (``None`` when solved)."""
    misplaced = _misplaced(task, state)
    if not misplaced:
        return None
    r, c, b = misplaced[0]
    targets = _free_targets(task, state, b)
    if not targets:
        raise Unsolvable(f"no free target for the {COLORS[b]} block at ({r},{c})")
    return Action(b, (r, c), targets[0])


def oracle_plan(task: TaskSpec, state: np.ndarray) -> list[Action]:
    """Greedy plan: misplaced objects in row-major order, each to its first free target."""
    plan = []
    for _ in range(state.size + 1):
        a = next_oracle_action(task, state)
        if a is None:
            return plan
        plan.append(a)
        state = apply_action(state, a)
    raise Unsolvable("oracle did not converge")


# --------------------------------------------------------------------------
# task generation

MAX_TRIES = 1000


def _place(rng: np.random.Generator, state: np.ndarray, codes: list[int], forbidden=()) -> None:
    size = state.shape[0]
    free = [i for i in range(size * size) if state.flat[i] == EMPTY and divmod(i, size) not in forbidden]
    cells = rng.choice(len(free), size=len(codes), replace=False)
    for code, j in zip(codes, cells):
        state.flat[free[j]] = code


def _generate(rng: np.random.Generator, family: Family, size: int) -> tuple[TaskSpec, np.ndarray]:
    state = empty_state(size)
    if family is Family.MOVE_TO_ZONE:
        task = TaskSpec(family, zone=ZONES[rng.integers(len(ZONES))])
        n = int(rng.integers(2, 7))
        _place(rng, state, [block(int(c)) for c in rng.integers(N_COLORS, size=n)])
    elif family is Family.STACK_BY_COLOR:
        color, column = int(rng.integers(N_COLORS)), int(rng.integers(size))
        task = TaskSpec(family, color=color, column=column)
        n = int(rng.integers(2, 5))
        others = [c for c in range(N_COLORS) if c != color]
        n_other = int(rng.integers(0, 6 - n + 1))
        distractors = [block(others[i]) for i in rng.integers(len(others), size=n_other)]
        _place(rng, state, distractors, forbidden={(i, column) for i in range(n)})
        _place(rng, state, [block(color)] * n)
    else:
        task = TaskSpec(family)
        k = int(rng.integers(1, 4))
        colors = [int(c) for c in rng.integers(N_COLORS, size=k)]
        _place(rng, state, [bowl(c) for c in colors])
        # some blocks may start inside their own bowl
        bowls = [i for i in range(size * size) if bowl_color(state.flat[i]) is not None]
        loose = []
        for c in colors:
            home = [i for i in bowls if state.flat[i] == bowl(c)]
            if home and rng.random() < 0.2:
                state.flat[home[0]] = block_in_bowl(c, c)
            else:
                loose.append(block(c))
        _place(rng, state, loose)
    return task, state


def new_task(seed: int, family: Family | str, size: int = GRID) -> tuple[TaskSpec, np.ndarray]:
    """Sample a solvable task with 2-6 objects; deterministic per ``(seed, family)``."""
    family = Family(family)
    rng = np.random.default_rng(seed)
    for _ in range(MAX_TRIES):
        task, state = _generate(rng, family, size)
        if check_success(task, state):
            continue
        try:
            plan = oracle_plan(task, state)
        except Unsolvable:
            continue
        s = state
        for a in plan:
            s = apply_action(s, a)
        if check_success(task, s):
            return task, state
    raise Unsolvable(f"no solvable {family.value} layout after {MAX_TRIES} tries (seed={seed})")


# --------------------------------------------------------------------------
# rendering

BACKGROUND = (24, 24, 24)
PALETTE = (
    (228, 38, 38),
    (40, 200, 64),
    (48, 92, 240),
    (240, 220, 40),
    (170, 60, 210),
    (250, 140, 20),
)


def _cell_patches(p: int = PIXELS_PER_CELL) -> np.ndarray:
    """One ``(p, p, 3)`` patch per cell code.

    Blocks fill the cell, bowls are a 1px ring on the cell border, and a block
    inside a bowl is the ring plus a centred square inset by 2px.
    """
    patches = np.empty((N_CODES, p, p, 3), dtype=np.uint8)
    patches[:] = BACKGROUND
    yy, xx = np.mgrid[:p, :p]
    edge = np.minimum(np.minimum(yy, xx), np.minimum(p - 1 - yy, p - 1 - xx))
    ring, inner = edge == 0, edge >= 2
    for code in range(1, N_CODES):
        _, b, w = decode_cell(code)
        if w is None:
            patches[code][:] = PALETTE[b]
            continue
        patches[code][ring] = PALETTE[w]
        if b is not None:
            patches[code][inner] = PALETTE[b]
    return patches


_PATCHES = _cell_patches()


def render(state: np.ndarray) -> np.ndarray:
    """``(G*P, G*P, 3)`` uint8 raster of a state."""
    size = state.shape[0]
    p = _PATCHES.shape[1]
    tiles = _PATCHES[state]  # (G, G, P, P, 3)
    return np.ascontiguousarray(tiles.transpose(0, 2, 1, 3, 4).reshape(size * p, size * p, 3))


def render_batch(states: np.ndarray) -> np.ndarray:
    n, size = states.shape[0], states.shape[1]
    p = _PATCHES.shape[1]
    tiles = _PATCHES[states]
    return np.ascontiguousarray(tiles.transpose(0, 1, 3, 2, 4, 5).reshape(n, size * p, size * p, 3))


# --------------------------------------------------------------------------
# datasets


@dataclass
class GoalTransition:
    episode: int
    step: int
    task: TaskSpec
    x_t: np.ndarray
    action: Action
    x_t1: np.ndarray
    split: str = "train"

    def to_record(self) -> dict:
        return {
            "episode": self.episode,
            "step": self.step,
            "family": self.task.family.value,
            "instruction": self.task.instruction,
            "state_before": [int(v) for v in self.x_t.ravel()],
            "action": self.action.text,
            "state_after": [int(v) for v in self.x_t1.ravel()],
            "split": self.split,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "GoalTransition":
        before = np.asarray(rec["state_before"], dtype=np.int64)
        size = int(round(np.sqrt(before.size)))
        task = parse_instruction(rec["instruction"])
        if task.family.value != rec["family"]:
            raise ValueError(f"family {rec['family']!r} does not match instruction")
        return cls(
            episode=int(rec["episode"]),
            step=int(rec["step"]),
            task=task,
            x_t=before.reshape(size, size),
            action=parse_action(rec["action"]),
            x_t1=np.asarray(rec["state_after"], dtype=np.int64).reshape(size, size),
            split=rec["split"],
        )


@dataclass
class Dataset:
    train: list[GoalTransition] = field(default_factory=list)
    test: list[GoalTransition] = field(default_factory=list)

    @property
    def all(self) -> list[GoalTransition]:
        return sorted(self.train + self.test, key=lambda t: (t.episode, t.step))

    def test_episodes(self) -> list[tuple[TaskSpec, np.ndarray]]:
        """Initial ``(task, state)`` of every held-out episode."""
        return [(t.task, t.x_t) for t in self.test if t.step == 0]


def sample_dataset(
    seed: int,
    count: int,
    families=tuple(Family),
    size: int = GRID,
    test_fraction: float = 0.1,
) -> Dataset:
    """Roll out oracle plans until ``count`` transitions exist, then split by episode."""
    if count <= 0:
        raise ValueError("count must be positive")
    families = [Family(f) for f in families]
    ss = np.random.SeedSequence(seed)
    episodes: list[list[GoalTransition]] = []
    total = 0
    ep = 0
    while total < count:
        family = families[ep % len(families)]
        task_seed = int(ss.spawn(1)[0].generate_state(1)[0])
        task, state = new_task(task_seed, family, size)
        steps = []
        for i, a in enumerate(oracle_plan(task, state)):
            nxt = apply_action(state, a)
            steps.append(GoalTransition(ep, i, task, state, a, nxt))
            state = nxt
            total += 1
            if total == count:
                break
        episodes.append(steps)
        ep += 1

    rng = np.random.default_rng(seed)
    n_test = int(round(test_fraction * len(episodes)))
    test_ids = set(int(i) for i in rng.permutation(len(episodes))[:n_test])
    out = Dataset()
    for i, steps in enumerate(episodes):
        for t in steps:
            t.split = "test" if i in test_ids else "train"
            (out.test if i in test_ids else out.train).append(t)
    return out


def write_jsonl(path, transitions) -> None:
    import json

    with open(path, "w") as fh:
        for t in transitions:
            fh.write(json.dumps(t.to_record(), separators=(",", ":")) + "\n")


def read_jsonl(path) -> list[GoalTransition]:
    import json

    with open(path) as fh:
        return [GoalTransition.from_record(json.loads(line)) for line in fh if line.strip()]


def random_state(rng: np.random.Generator, size: int = GRID, max_objects: int = 6) -> np.ndarray:
    """Arbitrary (not necessarily task-reachable) state, for property tests."""
    state = empty_state(size)
    n = int(rng.integers(0, max_objects + 1))
    cells = rng.choice(size * size, size=n, replace=False)
    state.flat[cells] = rng.integers(1, N_CODES, size=n)
    return state


# --------------------------------------------------------------------------
# binary PPM (P6) images


def write_ppm(path, raster: np.ndarray) -> None:
    """Write an ``H x W x 3`` uint8 raster as binary PPM."""
    r = np.ascontiguousarray(raster, dtype=np.uint8)
    if r.ndim != 3 or r.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 raster, got shape {r.shape}")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{r.shape[1]} {r.shape[0]}\n255\n".encode() + r.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise ValueError(f"{path}: truncated PPM header")
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P6" or fields[3] != b"255":
        raise ValueError(f"{path}: only 8-bit binary PPM (P6) is supported")
    w, h = int(fields[1]), int(fields[2])
    pixels = data[pos + 1:pos + 1 + w * h * 3]
    if len(pixels) != w * h * 3:
        raise ValueError(f"{path}: expected {w * h * 3} pixel bytes, found {len(pixels)}")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3).copy()
