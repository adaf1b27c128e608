from __future__ import annotations

import hashlib
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st

from visplan import gridworld as gw

RED, GREEN = 0, 1


def _state(cells: dict, size: int = gw.GRID) -> np.ndarray:
    s = gw.empty_state(size)
    for (r, c), code in cells.items():
        s[r, c] = code
    return s


# --- new_task -----------------------------------------------------------------


def test_new_task_deterministic():
    a = gw.new_task(7, gw.Family.MOVE_TO_ZONE)
    b = gw.new_task(7, gw.Family.MOVE_TO_ZONE)
    assert a[0] == b[0]
    assert np.array_equal(a[1], b[1])


def test_match_bowls_has_equal_blocks_and_bowls_per_color():
    task, state = gw.new_task(1, gw.Family.MATCH_BOWLS)
    blocks, bowls = Counter(), Counter()
    for code in state.ravel():
        kind, b, w = gw.decode_cell(int(code))
        if b is not None:
            blocks[b] += 1
        if w is not None:
            bowls[w] += 1
    assert blocks == bowls and blocks


def test_stack_instruction_matches_template():
    task, _ = gw.new_task(2, gw.Family.STACK_BY_COLOR)
    assert task.instruction == f"stack all the {gw.COLORS[task.color]} blocks in column {task.column}"
    assert gw.parse_instruction(task.instruction) == task


@given(st.integers(0, 10**6), st.sampled_from(list(gw.Family)))
def test_generated_tasks_have_2_to_6_objects_and_are_unsolved(seed, family):
    task, state = gw.new_task(seed, family)
    n_objects = sum(
        (gw.block_color(int(c)) is not None) + (gw.bowl_color(int(c)) is not None) for c in state.ravel()
    )
    assert 2 <= n_objects <= 6
    assert not gw.check_success(task, state)


# --- apply_action ---------------------------------------------------------------


def test_move_block_to_empty_cell():
    s = _state({(1, 1): gw.block(RED)})
    out = gw.apply_action(s, "move the red block at (1,1) to (1,2)")
    assert out[1, 2] == gw.block(RED) and out[1, 1] == gw.EMPTY
    assert s[1, 1] == gw.block(RED)  # input untouched


def test_move_onto_bowl_makes_block_in_bowl():
    s = _state({(0, 0): gw.block(RED), (3, 3): gw.bowl(RED)})
    out = gw.apply_action(s, gw.Action(RED, (0, 0), (3, 3)))
    assert out[3, 3] == gw.block_in_bowl(RED, RED)


def test_moving_out_of_a_bowl_leaves_the_bowl():
    s = _state({(2, 2): gw.block_in_bowl(GREEN, RED)})
    out = gw.apply_action(s, gw.Action(GREEN, (2, 2), (0, 0)))
    assert out[2, 2] == gw.bowl(RED) and out[0, 0] == gw.block(GREEN)


@pytest.mark.parametrize("action", [
    "move the red block at (4,4) to (1,2)",  # empty source
    "move the green block at (1,1) to (1,2)",  # wrong colour
    "move the red block at (1,1) to (2,2)",  # occupied target
    "move the red block at (1,1) to (9,9)",  # off grid
    "shuffle the red block",  # bad parse
])
def test_illegal_actions(action):
    s = _state({(1, 1): gw.block(RED), (2, 2): gw.block(GREEN)})
    with pytest.raises(gw.IllegalAction):
        gw.apply_action(s, action)


@given(st.integers(0, 10**6))
def test_legal_moves_conserve_block_counts(seed):
    rng = np.random.default_rng(seed)
    s = gw.random_state(rng)
    blocks = [(r, c) for r in range(gw.GRID) for c in range(gw.GRID) if gw.block_color(int(s[r, c])) is not None]
    free = [(r, c) for r in range(gw.GRID) for c in range(gw.GRID) if gw.decode_cell(int(s[r, c]))[0] in ("empty", "bowl")]
    if not blocks or not free:
        return
    src = blocks[rng.integers(len(blocks))]
    dst = free[rng.integers(len(free))]
    out = gw.apply_action(s, gw.Action(gw.block_color(int(s[src])), src, dst))

    def counts(state):
        c = Counter()
        for code in state.ravel():
            _, b, w = gw.decode_cell(int(code))
            c[("block", b)] += b is not None
            c[("bowl", w)] += w is not None
        return +c

    assert counts(out) == counts(s)
    changed = np.argwhere(out != s)
    assert {tuple(x) for x in changed} <= {src, dst}


# --- oracle and success ------------------------------------------------------


def test_move_to_zone_plan_length_equals_misplaced_count():
    task = gw.TaskSpec(gw.Family.MOVE_TO_ZONE, zone="left")
    s = _state({(0, 6): gw.block(RED), (3, 5): gw.block(GREEN), (7, 7): gw.block(2), (1, 1): gw.block(3)})
    plan = gw.oracle_plan(task, s)
    assert len(plan) == 3
    for a in plan:
        s = gw.apply_action(s, a)
    assert gw.check_success(task, s)


def test_solved_state_has_empty_plan():
    task = gw.TaskSpec(gw.Family.MOVE_TO_ZONE, zone="left")
    s = _state({(0, 0): gw.block(RED)})
    assert gw.check_success(task, s)
    assert gw.oracle_plan(task, s) == []


def test_match_bowls_plan_replays_to_success():
    task = gw.TaskSpec(gw.Family.MATCH_BOWLS)
    s = _state({(0, 0): gw.block_in_bowl(RED, GREEN), (5, 5): gw.bowl(RED), (6, 1): gw.block(GREEN)})
    plan = gw.oracle_plan(task, s)
    for a in plan:
        s = gw.apply_action(s, a)
    assert gw.check_success(task, s)


def test_check_success_definitions():
    left = gw.TaskSpec(gw.Family.MOVE_TO_ZONE, zone="left")
    assert gw.check_success(left, _state({(0, 0): gw.block(RED), (7, 3): gw.block(GREEN)}))
    assert not gw.check_success(left, _state({(0, 0): gw.block(RED), (7, 4): gw.block(GREEN)}))
    match = gw.TaskSpec(gw.Family.MATCH_BOWLS)
    assert gw.check_success(match, _state({(0, 0): gw.block_in_bowl(RED, RED), (1, 1): gw.block_in_bowl(GREEN, GREEN)}))
    assert not gw.check_success(match, _state({(0, 0): gw.block_in_bowl(RED, GREEN)}))


def test_oracle_completeness_over_1000_tasks():
    families = list(gw.Family)
    for seed in range(1000):
        task, s = gw.new_task(seed, families[seed % 3])
        for a in gw.oracle_plan(task, s):
            s = gw.apply_action(s, a)
        assert gw.check_success(task, s), seed


# --- rendering -----------------------------------------------------------------


def test_empty_state_renders_background():
    r = gw.render(gw.empty_state())
    assert r.shape == (64, 64, 3) and r.dtype == np.uint8
    assert np.all(r == np.array(gw.BACKGROUND, dtype=np.uint8))


def test_single_block_renders_one_patch():
    r = gw.render(_state({(0, 0): gw.block(RED)}))
    non_bg = np.argwhere(np.any(r != np.array(gw.BACKGROUND, dtype=np.uint8), axis=-1))
    assert non_bg[:, 0].min() == 0 and non_bg[:, 0].max() == 7
    assert non_bg[:, 1].min() == 0 and non_bg[:, 1].max() == 7
    assert len(non_bg) == 64


def test_render_deterministic():
    s = gw.new_task(3, gw.Family.MATCH_BOWLS)[1]
    assert gw.render(s).tobytes() == gw.render(s).tobytes()


def test_rendering_injective_on_10000_random_states():
    states = random_states_unique(10_000)
    digests = {hashlib.sha256(gw.render(s).tobytes()).hexdigest() for s in states}
    assert len(digests) == len(states)


def random_states_unique(n):
    rng = np.random.default_rng(0)
    seen, out = set(), []
    while len(out) < n:
        s = gw.random_state(rng)
        key = s.tobytes()
        if key not in seen:
            seen.add(key)
            out.append(s)
    return out


def test_ppm_round_trip(tmp_path):
    r = gw.render(gw.new_task(4, gw.Family.STACK_BY_COLOR)[1])
    gw.write_ppm(tmp_path / "a.ppm", r)
    assert np.array_equal(gw.read_ppm(tmp_path / "a.ppm"), r)


# --- datasets ---------------------------------------------------------------------


def test_dataset_transitions_replay():
    ds = gw.sample_dataset(3, 100)
    assert len(ds.all) == 100
    for t in ds.all:
        assert np.array_equal(gw.apply_action(t.x_t, t.action), t.x_t1)
        assert t.action == gw.next_oracle_action(t.task, t.x_t)


def test_dataset_deterministic_and_split_disjoint():
    a, b = gw.sample_dataset(3, 300), gw.sample_dataset(3, 300)
    assert [t.to_record() for t in a.all] == [t.to_record() for t in b.all]
    train_eps = {t.episode for t in a.train}
    test_eps = {t.episode for t in a.test}
    assert not train_eps & test_eps
    assert round(0.1 * len(train_eps | test_eps)) == len(test_eps)


def test_jsonl_schema_and_round_trip(tmp_path):
    ds = gw.sample_dataset(8, 50)
    gw.write_jsonl(tmp_path / "d.jsonl", ds.all)
    back = gw.read_jsonl(tmp_path / "d.jsonl")
    assert [t.to_record() for t in back] == [t.to_record() for t in ds.all]
    rec = ds.all[0].to_record()
    assert set(rec) == {"episode", "step", "family", "instruction", "state_before", "action", "state_after", "split"}
    assert len(rec["state_before"]) == 64
