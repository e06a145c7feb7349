from src.morphdiff.state import LOSS_COLUMNS, create_initial_state, loss_log_lines, parse_loss_log, record_epoch


def _losses(total):
    return {"l_simple": 0.5, "l_df": 0.25, "l_bae": 0.0, "total": total}


def test_initial_state():
    state = create_initial_state(seed=3)
    assert state["epoch"] == 0
    assert state["best_total"] is None
    assert not state["metadata"]["resumed"]


def test_record_epoch_tracks_best_and_steps():
    state = create_initial_state(seed=0)
    state = record_epoch(state, _losses(1.0), steps=4)
    state = record_epoch(state, _losses(1.5), steps=4)
    assert state["epoch"] == 2
    assert [row["epoch"] for row in state["history"]] == [1, 2]
    assert state["best_total"] == 1.0
    assert state["metadata"]["steps"] == 8


def test_record_epoch_does_not_mutate_input():
    state = create_initial_state(seed=0)
    record_epoch(state, _losses(1.0))
    assert state["history"] == []


def test_resumed_state_picks_up_history():
    history = [{"epoch": 1, **_losses(0.75)}]
    state = create_initial_state(seed=0, history=history)
    assert state["epoch"] == 1
    assert state["best_total"] == 0.75
    assert state["metadata"]["resumed"]


def test_loss_log_round_trip():
    state = create_initial_state(seed=0)
    state = record_epoch(state, {"l_simple": 0.1, "l_df": 1 / 3, "l_bae": 2.0, "total": 0.1 + 0.5 / 3})
    lines = loss_log_lines(state)
    assert lines[0] == ",".join(LOSS_COLUMNS)
    assert parse_loss_log("\n".join(lines)) == state["history"]
