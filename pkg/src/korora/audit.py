"""Policy audits: fixture SSP scan and the exhaustive level/category grid."""

from __future__ import annotations

from . import _kernels
from .policy import Response, SystemState, authorize, grid_cases, grid_codes, ssp_check

GRID_UNIVERSE = ("c0", "c1", "c2")


def two_axiom_oracle(attr: str, s_rank: int, s_cats, o_rank: int, o_cats, granted) -> bool:
    """No read down, no write up, categories contained, matrix grants attr."""
    if attr not in granted or not set(o_cats) <= set(s_cats):
        return False
    if attr in "re":
        return o_rank <= s_rank
    return s_rank <= o_rank


def grid_audit(universe=GRID_UNIVERSE):
    """Cross-check ``authorize`` and the batch kernel against the oracle.

    Returns ``(case_count, mismatches)``; each mismatch is a tuple
    ``(subject_level, object_level, attr, oracle, authorize, kernel)``.
    """
    cases = list(grid_cases(universe))
    codes = grid_codes(cases, universe)
    mismatches = []
    for (s, o, x), code in zip(cases, codes):
        state = SystemState(
            frozenset(), {("s", "o"): {x}}, {"s": s, "o": o}
        )
        want = two_axiom_oracle(x.value, s.rank, s.categories, o.rank, o.categories, x.value)
        got = authorize("s", "o", x, state) is Response.YES
        kern = int(code) == _kernels.OK
        if not (want == got == kern):
            mismatches.append((s, o, x, want, got, kern))
    return len(cases), mismatches


def audit_lines(state: SystemState) -> list:
    return [v.line() for v in ssp_check(state)]
