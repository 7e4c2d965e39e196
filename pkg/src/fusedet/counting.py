"""Exact operation counting for forward passes.

Convention (pinned so internal comparisons are exact, documented in README):
  * one multiply-accumulate = 2 FLOPs (matmul of (m,k)x(k,n) costs 2*m*k*n),
  * softmax / layer norm / GELU and other transcendental maps cost 5 FLOPs
    per output element,
  * plain elementwise arithmetic and reductions cost 1 FLOP per element,
  * data movement (reshape, transpose, concat, slicing, unfold) is free.

Counts are attributed to the innermost active scope label.  Scopes nest;
labels are joined with '.'.  Counting is per-process and single-threaded,
matching the single-tape evaluation model.
"""

from __future__ import annotations

from contextlib import contextmanager

_ACTIVE: list["FlopCounter"] = []
_LABELS: list[str] = []


class FlopCounter:
    """Accumulates FLOPs per scope label while installed."""

    def __init__(self):
        self.by_label: dict[str, int] = {}
        self.total: int = 0

    def add(self, n: int, label: str) -> None:
        self.total += n
        self.by_label[label] = self.by_label.get(label, 0) + n

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def sum_matching(self, *substrings: str) -> int:
        """Total over labels containing every given substring."""
        return sum(
            v for k, v in self.by_label.items()
            if all(s in k for s in substrings)
        )

    def table(self) -> list[tuple[str, int]]:
        return sorted(self.by_label.items())


@contextmanager
def scope(label: str):
    """Attribute counts inside the block to `label` (nested labels join with '.')."""
    _LABELS.append(label)
    try:
        yield
    finally:
        _LABELS.pop()


def current_label() -> str:
    return ".".join(_LABELS) if _LABELS else "<root>"


def add(n: int) -> None:
    """Record `n` FLOPs against every installed counter. Hot path: no-op when idle."""
    if not _ACTIVE:
        return
    label = current_label()
    for c in _ACTIVE:
        c.add(n, label)


def active() -> bool:
    return bool(_ACTIVE)
