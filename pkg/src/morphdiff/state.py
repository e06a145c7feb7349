from typing import Any, Dict, List, Optional, TypedDict

LOSS_COLUMNS = ("epoch", "l_simple", "l_df", "l_bae", "total")


class TrainingState(TypedDict):
    epoch: int
    seed: int
    history: List[Dict[str, float]]
    best_total: Optional[float]
    metadata: Dict[str, Any]


def create_initial_state(seed: int, history: List[Dict[str, float]] = None) -> TrainingState:
    if history is None:
        history = []

    return TrainingState(
        epoch=len(history),
        seed=seed,
        history=history,
        best_total=min((row["total"] for row in history), default=None),
        metadata={
            "resumed": bool(history),
            "steps": 0,
        },
    )


def record_epoch(state: TrainingState, losses: Dict[str, float], steps: int = 0) -> TrainingState:
    row = {"epoch": state["epoch"] + 1, **{k: float(losses[k]) for k in LOSS_COLUMNS[1:]}}
    best = state["best_total"]
    return {
        **state,
        "epoch": row["epoch"],
        "history": state["history"] + [row],
        "best_total": row["total"] if best is None else min(best, row["total"]),
        "metadata": {
            **state["metadata"],
            "steps": state["metadata"].get("steps", 0) + steps,
        },
    }


def loss_log_lines(state: TrainingState) -> List[str]:
    lines = [",".join(LOSS_COLUMNS)]
    for row in state["history"]:
        lines.append(",".join([str(int(row["epoch"]))] + [repr(row[k]) for k in LOSS_COLUMNS[1:]]))
    return lines


def parse_loss_log(text: str) -> List[Dict[str, float]]:
    rows = []
    for line in text.strip().splitlines()[1:]:
        values = line.split(",")
        rows.append({k: (int(v) if k == "epoch" else float(v)) for k, v in zip(LOSS_COLUMNS, values)})
    return rows
