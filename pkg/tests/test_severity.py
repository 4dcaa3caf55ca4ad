import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from retina_grader.severity import (
    SEVERITY_GRID,
    CharacteristicGrades,
    GradeError,
    all_grades,
    enumerate_preimage,
    grades_from_probabilities,
    pigment_column,
    severity_from_grades,
    severity_trace,
)

# Transcribed independently from the published combination table; rows are drusen area 0-5.
PUBLISHED_ROWS = [
    [1, 2, 2, 4, 8, 9],
    [2, 4, 4, 4, 8, 9],
    [3, 4, 4, 5, 8, 9],
    [4, 5, 5, 6, 8, 9],
    [5, 6, 6, 7, 8, 9],
    [6, 7, 7, 8, 8, 9],
]


def test_grid_is_the_published_table():
    assert [list(r) for r in SEVERITY_GRID] == PUBLISHED_ROWS


@pytest.mark.parametrize(
    "ga,ip,dep,col", [(0, 0, 0, 0), (1, 1, 3, 5), (0, 1, 2, 3), (0, 1, 0, 1), (0, 0, 1, 2), (1, 0, 0, 5)]
)
def test_pigment_column(ga, ip, dep, col):
    assert pigment_column(ga, ip, dep) == col


@pytest.mark.parametrize(
    "grades,severity",
    [((0, 0, 0, 1), 2), ((0, 0, 0, 0), 1), ((0, 0, 2, 5), 8), ((1, 0, 0, 0), 9), ((0, 1, 0, 2), 4), ((0, 1, 3, 2), 8)],
)
def test_known_severities(grades, severity):
    assert severity_from_grades(CharacteristicGrades.from_tuple(grades)) == severity


def test_trace_reports_row_and_column():
    assert severity_trace(CharacteristicGrades(0, 1, 0, 3)) == (5, 3, 1)


def test_monotone_in_drusen_and_column():
    grid = np.array(SEVERITY_GRID)
    assert (np.diff(grid, axis=0) >= 0).all()
    assert (np.diff(grid, axis=1) >= 0).all()


def test_ga_always_gives_nine():
    assert {severity_from_grades(g) for g in all_grades() if g.geographic_atrophy} == {9}


def test_preimage_partitions_domain():
    groups = [enumerate_preimage(s) for s in range(1, 10)]
    flat = [g for grp in groups for g in grp]
    assert len(flat) == 96 == len(set(flat))
    assert len(groups[0]) == 1 and len(groups[8]) == 48
    assert all(groups)
    with pytest.raises(GradeError):
        enumerate_preimage(10)


@pytest.mark.parametrize("bad", [(2, 0, 0, 0), (0, -1, 0, 0), (0, 0, 4, 0), (0, 0, 0, 6), (0, 0, 0, 1.0), (True, 0, 0, 0)])
def test_invalid_grades_rejected(bad):
    with pytest.raises(GradeError):
        CharacteristicGrades(*bad)


def test_grades_from_probabilities_argmax_and_ties():
    g = grades_from_probabilities([1, 0], [1, 0], [0.25] * 4, [0.1] * 5 + [0.5])
    assert g.as_tuple() == (0, 0, 0, 5)
    with pytest.raises(GradeError):
        grades_from_probabilities([1, 0, 0], [1, 0], [1, 0, 0, 0], [1, 0, 0, 0, 0, 0])
    with pytest.raises(GradeError):
        grades_from_probabilities([0.7, 0.7], [1, 0], [1, 0, 0, 0], [1, 0, 0, 0, 0, 0])


@given(st.tuples(st.integers(0, 1), st.integers(0, 1), st.integers(0, 3), st.integers(0, 5)))
def test_one_hot_roundtrip(grades):
    onehots = [np.eye(k)[v] for k, v in zip((2, 2, 4, 6), grades)]
    assert grades_from_probabilities(*onehots).as_tuple() == grades


def test_every_combination_is_covered():
    combos = set(itertools.product(range(2), range(2), range(4), range(6)))
    assert {g.as_tuple() for g in all_grades()} == combos
