import numpy as np
import pytest

from tss.windows import (
    CoverageError,
    EmptyWindowError,
    IrreducibilityError,
    build_layout,
    other_window,
)

THREE_WINDOW = [list(range(0, 16)), list(range(0, 8)), list(range(8, 16))]
FIVE_WINDOW = [
    list(range(0, 8)),
    list(range(8, 16)),
    list(range(0, 4)),
    list(range(4, 12)),
    list(range(12, 16)),
]


def test_three_window_layout():
    layout = build_layout(16, {"mode": "explicit", "members": THREE_WINDOW})
    assert layout.count == 3
    assert tuple(layout.win[7]) == (0, 1)


def test_five_window_layout():
    layout = build_layout(16, {"mode": "explicit", "members": FIVE_WINDOW})
    assert layout.count == 5
    assert tuple(layout.win[11]) == (1, 3)


def test_pattern_matches_five_window():
    layout = build_layout(16, {"mode": "pattern", "size": 8, "overlap": 4})
    assert [list(m) for m in layout.members] == FIVE_WINDOW


def test_full_double_layout():
    layout = build_layout(16, {"mode": "full_double"})
    assert layout.count == 2
    assert all(m.size == 16 for m in layout.members)
    assert np.all(layout.win == [0, 1])


def test_coverage_error():
    members = [list(range(0, 16)), list(range(0, 8)), list(range(8, 16)), [0]]
    with pytest.raises(CoverageError):
        build_layout(16, {"mode": "explicit", "members": members})


def test_empty_window_error():
    with pytest.raises(EmptyWindowError):
        build_layout(4, {"mode": "explicit", "members": [[0, 1, 2, 3], [0, 1, 2, 3], []]})


def test_irreducibility_error():
    members = [[0, 1], [0, 1], [2, 3], [2, 3]]
    with pytest.raises(IrreducibilityError):
        build_layout(4, {"mode": "explicit", "members": members})


def test_other_window_involution():
    layout = build_layout(16, {"mode": "explicit", "members": THREE_WINDOW})
    assert other_window(layout, 7, 0) == 1
    assert other_window(layout, 7, 1) == 0
    with pytest.raises(ValueError):
        other_window(layout, 7, 2)
    for k in range(16):
        a, b = layout.win[k]
        assert other_window(layout, k, other_window(layout, k, a)) == a
        assert other_window(layout, k, other_window(layout, k, b)) == b


@pytest.mark.parametrize("members", [THREE_WINDOW, FIVE_WINDOW])
def test_overlaps_partition_each_window(members):
    layout = build_layout(16, {"mode": "explicit", "members": members})
    for i in range(layout.count):
        pieces = []
        for j in range(layout.count):
            if j == i:
                continue
            pieces.extend(layout.overlap_members(i, j).tolist())
        assert sorted(pieces) == list(layout.members[i])
