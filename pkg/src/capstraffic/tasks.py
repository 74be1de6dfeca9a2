"""Forecasting task geometry: predict L steps for N segments from M past steps."""

from __future__ import annotations

from dataclasses import asdict, dataclass


@dataclass(frozen=True)
class TaskSpec:
    L: int
    M: int
    N: int
    name: str = "custom"

    def __post_init__(self):
        for field_name in ("L", "M", "N"):
            value = getattr(self, field_name)
            if not isinstance(value, int) or value < 1:
                raise ValueError(f"task {field_name} must be a positive integer, got {value!r}")

    @property
    def input_shape(self) -> tuple[int, int]:
        return (self.M, self.N)

    @property
    def label_size(self) -> int:
        return self.L * self.N

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(int(d["L"]), int(d["M"]), int(d["N"]), str(d.get("name", "custom")))

    def same_geometry(self, other: "TaskSpec") -> bool:
        return (self.L, self.M, self.N) == (other.L, other.M, other.N)


# 15-minute steps: L=1 is a 15-min forecast, M=10 is 150 min of history.
TASKS = {
    "task1": TaskSpec(L=1, M=10, N=20, name="task1"),
    "task2": TaskSpec(L=2, M=10, N=20, name="task2"),
    "task3": TaskSpec(L=1, M=14, N=50, name="task3"),
    "task4": TaskSpec(L=2, M=14, N=50, name="task4"),
}


def parse_task(text: str) -> TaskSpec:
    """Accept a named task (``task1``..``task4``) or an ``L,M,N`` triple."""
    key = text.strip().lower()
    if key in TASKS:
        return TASKS[key]
    parts = key.split(",")
    if len(parts) != 3:
        raise ValueError(f"unknown task {text!r}; use task1..task4 or L,M,N")
    try:
        L, M, N = (int(p) for p in parts)
    except ValueError:
        raise ValueError(f"task triple must be integers, got {text!r}") from None
    return TaskSpec(L, M, N, name=f"L{L}M{M}N{N}")
