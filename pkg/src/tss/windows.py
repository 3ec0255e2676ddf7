"""Overlapping window decompositions of the rung set.

Every rung must belong to exactly two windows (a double cover) and the
window overlap graph must be connected.  Degenerate "single window" runs
are encoded as two coincident full-range windows so that the double-cover
rule holds uniformly and the window-swap move simply toggles between two
statistically identical ledgers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "WindowSpecError",
    "CoverageError",
    "IrreducibilityError",
    "EmptyWindowError",
    "WindowLayout",
    "build_layout",
    "other_window",
]


class WindowSpecError(ValueError):
    """A window specification violates the layout invariants."""


class CoverageError(WindowSpecError):
    """Some rung is covered by a number of windows different from two."""


class IrreducibilityError(WindowSpecError):
    """The window overlap graph is disconnected."""


class EmptyWindowError(WindowSpecError):
    """A window contains no rungs."""


@dataclass(frozen=True)
class WindowLayout:
    """Validated double cover of the rung set.

    Attributes
    ----------
    members : tuple of int arrays
        Sorted rung indices of each window (deterministic iteration order).
    win : (K, 2) int array
        The two windows containing each rung, ascending.
    overlap_graph : (J, J) bool array
        True where two windows share at least one rung.
    position : (J, K) int array
        Position of rung k inside window j's member list, -1 if absent.
    """

    members: tuple
    win: np.ndarray
    overlap_graph: np.ndarray
    position: np.ndarray

    @property
    def count(self) -> int:
        return len(self.members)

    @property
    def rung_count(self) -> int:
        return self.win.shape[0]

    @property
    def max_size(self) -> int:
        return max(len(m) for m in self.members)

    def overlap_members(self, i: int, j: int) -> np.ndarray:
        """Rungs of W_i ∩ W_j (sorted)."""
        return np.intersect1d(self.members[i], self.members[j])


def _validate_and_build(member_lists, rung_count: int) -> WindowLayout:
    members = []
    for j, raw in enumerate(member_lists):
        rungs = np.unique(np.asarray(raw, dtype=int))
        if rungs.size == 0:
            raise EmptyWindowError(f"window {j} is empty")
        if rungs.min() < 0 or rungs.max() >= rung_count:
            raise WindowSpecError(f"window {j} references rungs outside [0, {rung_count})")
        members.append(rungs)
    count = len(members)
    if count < 2:
        raise CoverageError("a double cover needs at least two windows")

    cover = [[] for _ in range(rung_count)]
    for j, rungs in enumerate(members):
        for k in rungs:
            cover[k].append(j)
    bad = {k: len(js) for k, js in enumerate(cover) if len(js) != 2}
    if bad:
        raise CoverageError(f"rungs covered != 2 times: {bad}")
    win = np.array([sorted(js) for js in cover], dtype=int)

    overlap = np.zeros((count, count), dtype=bool)
    for j in range(count):
        overlap[j, j] = True
    for a, b in win:
        overlap[a, b] = overlap[b, a] = True

    seen = {0}
    stack = [0]
    while stack:
        for j in np.nonzero(overlap[stack.pop()])[0]:
            if j not in seen:
                seen.add(int(j))
                stack.append(int(j))
    if len(seen) != count:
        missing = sorted(set(range(count)) - seen)
        raise IrreducibilityError(f"window overlap graph is disconnected; unreachable windows {missing}")

    position = np.full((count, rung_count), -1, dtype=int)
    for j, rungs in enumerate(members):
        position[j, rungs] = np.arange(rungs.size)

    return WindowLayout(tuple(members), win, overlap, position)


def _pattern_members(rung_count: int, size: int, overlap: int):
    """Two interleaved partitions of the rung line: a double cover by blocks."""
    if size < 1 or size > rung_count:
        raise WindowSpecError(f"pattern size must lie in [1, {rung_count}], got {size}")
    if not 0 < overlap < size:
        raise WindowSpecError(f"pattern overlap must lie in (0, size), got {overlap}")
    first = [list(range(a, min(a + size, rung_count))) for a in range(0, rung_count, size)]
    second = [list(range(0, overlap))]
    for a in range(overlap, rung_count, size):
        second.append(list(range(a, min(a + size, rung_count))))
    return first + second


def build_layout(grid_or_count, spec) -> WindowLayout:
    """Construct and validate a window layout.

    ``spec`` is a mapping with a ``mode`` key:

    - ``{"mode": "explicit", "members": [[...], ...]}``
    - ``{"mode": "pattern", "size": s, "overlap": o}`` (o defaults to s // 2)
    - ``{"mode": "full_double"}`` — two coincident full-range windows

    Raises ``CoverageError`` / ``IrreducibilityError`` / ``EmptyWindowError``
    when the resulting layout violates the double-cover invariants.
    """
    rung_count = grid_or_count if isinstance(grid_or_count, int) else grid_or_count.count
    if isinstance(spec, (list, tuple)):
        spec = {"mode": "explicit", "members": spec}
    mode = spec.get("mode")
    if mode == "explicit":
        member_lists = spec["members"]
    elif mode == "pattern":
        size = int(spec["size"])
        overlap = int(spec.get("overlap", max(size // 2, 1)))
        member_lists = _pattern_members(rung_count, size, overlap)
    elif mode == "full_double":
        member_lists = [list(range(rung_count)), list(range(rung_count))]
    else:
        raise WindowSpecError(f"unknown window mode {mode!r}")
    return _validate_and_build(member_lists, rung_count)


def other_window(layout: WindowLayout, k: int, j: int) -> int:
    """The unique element of win(k) other than j (an involution in j)."""
    a, b = layout.win[k]
    if j == a:
        return int(b)
    if j == b:
        return int(a)
    raise ValueError(f"window {j} does not contain rung {k} (win({k}) = {{{a}, {b}}})")
