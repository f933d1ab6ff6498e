"""Lightweight call counters used to verify method isolation in tests."""

from __future__ import annotations

from collections import Counter

_COUNTS: Counter = Counter()


def count(event: str) -> None:
    _COUNTS[event] += 1


def snapshot() -> dict:
    return dict(_COUNTS)


def reset() -> None:
    _COUNTS.clear()
