"""Vertebra label codes, names and anatomic groups.

Labels are small integers: 1-7 cervical (C1-C7), 8-19 thoracic (T1-T12),
20-24 lumbar (L1-L5).  Two transitional anatomies get dedicated codes that
never appear inside the label graph and are only produced by path
post-processing: 25 (T13, counted thoracic) and 26 (L6, counted lumbar).
"""

from __future__ import annotations

import enum


class Group(enum.Enum):
    """Coarse spine region a label belongs to."""

    CERVICAL = "cervical"
    THORACIC = "thoracic"
    LUMBAR = "lumbar"


GROUPS = (Group.CERVICAL, Group.THORACIC, Group.LUMBAR)

# label-code layout
C1, C7 = 1, 7
T1, T12 = 8, 19
L1, L5 = 20, 24
T13 = 25
L6 = 26

MIN_LABEL = 1
MAX_LABEL = 26
# codes allowed as graph nodes (transitional codes are post-processing only)
GRAPH_MIN, GRAPH_MAX = 1, 24
N_GRAPH_LABELS = 24

GROUP_SIZES = {Group.CERVICAL: 7, Group.THORACIC: 12, Group.LUMBAR: 5}
# first graph-space code of each group
GROUP_BASE = {Group.CERVICAL: C1, Group.THORACIC: T1, Group.LUMBAR: L1}


def is_valid(code: int) -> bool:
    return MIN_LABEL <= code <= MAX_LABEL


def check(code: int) -> int:
    if not isinstance(code, (int,)) or isinstance(code, bool) or not is_valid(code):
        raise ValueError(f"invalid vertebra label code: {code!r}")
    return code


def group_of(code: int) -> Group:
    """Anatomic group for any label code, transitional codes included."""
    check(code)
    if code <= C7:
        return Group.CERVICAL
    if code <= T12 or code == T13:
        return Group.THORACIC
    return Group.LUMBAR


def name_of(code: int) -> str:
    """Serialized label name, e.g. 1 -> 'C1', 25 -> 'T13', 26 -> 'L6'."""
    check(code)
    if code == T13:
        return "T13"
    if code == L6:
        return "L6"
    if code <= C7:
        return f"C{code}"
    if code <= T12:
        return f"T{code - C7}"
    return f"L{code - T12}"


_NAME_TO_CODE = {name_of(c): c for c in range(MIN_LABEL, MAX_LABEL + 1)}


def code_of(name: str) -> int:
    """Inverse of name_of; raises on anything outside C1..C7/T1..T13/L1..L6."""
    try:
        return _NAME_TO_CODE[name.strip().upper()]
    except KeyError:
        raise ValueError(f"unknown vertebra label name: {name!r}") from None


def successor(code: int) -> int:
    """Next label in graph space (C1->C2, ..., C7->T1, T12->L1, L4->L5).

    Defined on graph-space codes [1, 24) only; 24 has no successor and the
    transitional codes are not graph nodes.
    """
    check(code)
    if not (GRAPH_MIN <= code < GRAPH_MAX):
        raise ValueError(f"label {name_of(code)} has no graph-space successor")
    return code + 1


def within_group_index(code: int) -> int:
    """0-based position of a graph-space label inside its group."""
    check(code)
    if code > GRAPH_MAX:
        raise ValueError(f"transitional label {name_of(code)} is outside graph space")
    return code - GROUP_BASE[group_of(code)]


def group_labels(group: Group) -> range:
    """Graph-space codes of a group, in anatomic order."""
    base = GROUP_BASE[group]
    return range(base, base + GROUP_SIZES[group])
