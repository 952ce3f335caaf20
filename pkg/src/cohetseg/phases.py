"""Contrast-phase identifiers and their canonical ordering.

A study carries up to four co-registered acquisitions of the same anatomy:
non-contrast (NC), arterial (A), venous (V) and delay (D). Everything that
iterates over phases or phase subsets uses the fixed NC < A < V < D order so
that generated data, sampled view combinations and reports are reproducible.
"""

from __future__ import annotations

from itertools import combinations
from typing import Iterable, Sequence

PHASES: tuple[str, ...] = ("NC", "A", "V", "D")

_ORDER = {p: i for i, p in enumerate(PHASES)}


def is_phase(name: str) -> bool:
    return name in _ORDER


def canonical_phases(phases: Iterable[str]) -> tuple[str, ...]:
    """Return ``phases`` deduplicated and sorted into canonical order."""
    seen = set()
    for p in phases:
        if p not in _ORDER:
            raise ValueError(f"unknown phase {p!r}; expected one of {PHASES}")
        seen.add(p)
    return tuple(sorted(seen, key=_ORDER.__getitem__))


def view_combinations(available: Iterable[str]) -> list[tuple[str, ...]]:
    """All nonempty subsets of ``available`` phases, in deterministic order.

    Subsets are listed by increasing size, lexicographically within a size
    (following canonical phase order). For n available phases this yields
    2**n - 1 combinations; a full four-phase study has 15 views.
    """
    avail = canonical_phases(available)
    if not avail:
        raise ValueError("need at least one available phase")
    combos: list[tuple[str, ...]] = []
    for r in range(1, len(avail) + 1):
        combos.extend(combinations(avail, r))
    return combos
