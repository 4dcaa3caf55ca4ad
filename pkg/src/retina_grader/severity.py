"""AREDS 9-step severity scale from the four graded characteristics."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

# Rows: drusen area 0-5. Columns: pigment abnormality column 0-5.
SEVERITY_GRID: tuple[tuple[int, ...], ...] = (
    (1, 2, 2, 4, 8, 9),
    (2, 4, 4, 4, 8, 9),
    (3, 4, 4, 5, 8, 9),
    (4, 5, 5, 6, 8, 9),
    (5, 6, 6, 7, 8, 9),
    (6, 7, 7, 8, 8, 9),
)

TASKS = ("ga", "ip", "dep", "drusen")
TASK_CLASS_COUNTS = {"ga": 2, "ip": 2, "dep": 4, "drusen": 6}
SEVERITY_LEVELS = tuple(range(1, 10))


class GradeError(ValueError):
    pass


@dataclass(frozen=True)
class CharacteristicGrades:
    geographic_atrophy: int
    increased_pigment: int
    depigmentation: int
    drusen_area: int

    def __post_init__(self):
        _check("geographic_atrophy", self.geographic_atrophy, 1)
        _check("increased_pigment", self.increased_pigment, 1)
        _check("depigmentation", self.depigmentation, 3)
        _check("drusen_area", self.drusen_area, 5)

    def as_tuple(self) -> tuple[int, int, int, int]:
        """Grades in task order (ga, ip, dep, drusen)."""
        return (self.geographic_atrophy, self.increased_pigment, self.depigmentation, self.drusen_area)

    @classmethod
    def from_tuple(cls, values: Sequence[int]) -> CharacteristicGrades:
        ga, ip, dep, dru = (int(v) for v in values)
        return cls(ga, ip, dep, dru)


def _check(name: str, value, upper: int) -> None:
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)) or not 0 <= value <= upper:
        raise GradeError(f"{name} must be an integer in [0, {upper}], got {value!r}")


def pigment_column(ga: int, ip: int, dep: int) -> int:
    """Column of the severity grid for a pigment-abnormality combination.

    Geographic atrophy takes precedence, then depigmentation; increased
    pigment only matters when both are absent.
    """
    _check("ga", ga, 1)
    _check("ip", ip, 1)
    _check("dep", dep, 3)
    if ga == 1:
        return 5
    if dep >= 1:
        return 1 + dep
    return 1 if ip == 1 else 0


def severity_trace(g: CharacteristicGrades) -> tuple[int, int, int]:
    """(severity, row, column) for a set of grades."""
    col = pigment_column(g.geographic_atrophy, g.increased_pigment, g.depigmentation)
    row = g.drusen_area
    return SEVERITY_GRID[row][col], row, col


def severity_from_grades(g: CharacteristicGrades) -> int:
    return severity_trace(g)[0]


def grades_from_probabilities(p_ga, p_ip, p_dep, p_drusen) -> CharacteristicGrades:
    """Per-task argmax; ties go to the lowest class index."""
    grades = []
    for name, probs in zip(TASKS, (p_ga, p_ip, p_dep, p_drusen)):
        v = np.asarray(probs, dtype=np.float64).ravel()
        k = TASK_CLASS_COUNTS[name]
        if v.size != k:
            raise GradeError(f"{name} probabilities need {k} entries, got {v.size}")
        if abs(v.sum() - 1.0) > 1e-4:
            raise GradeError(f"{name} probabilities sum to {v.sum():.6f}, expected 1")
        grades.append(int(np.argmax(v)))
    return CharacteristicGrades.from_tuple(grades)


def all_grades() -> list[CharacteristicGrades]:
    return [
        CharacteristicGrades(ga, ip, dep, dru)
        for ga, ip, dep, dru in itertools.product(range(2), range(2), range(4), range(6))
    ]


_PREIMAGE: dict[int, list[CharacteristicGrades]] = {s: [] for s in SEVERITY_LEVELS}
for _g in all_grades():
    _PREIMAGE[severity_from_grades(_g)].append(_g)


def enumerate_preimage(severity: int) -> list[CharacteristicGrades]:
    """Every grade combination that maps to ``severity``."""
    if severity not in _PREIMAGE:
        raise GradeError(f"severity must be in 1..9, got {severity!r}")
    return list(_PREIMAGE[severity])
