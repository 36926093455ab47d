"""Integrity state machine: levels, access matrix, rule evaluation, audits.

A state is the quaternion (triples, matrix, clearance, hierarchy). Access
decisions follow the integrity axioms: no read down, no write up, with
category containment and a matrix grant on top.
"""

from __future__ import annotations

import enum
import itertools
import random
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from . import _kernels


class PolicyError(ValueError):
    pass


class IntegrityLevel(enum.IntEnum):
    """Fixed integrity chain. Smaller rank means higher integrity."""

    TPM = 1
    TA = 2
    IDP = 3
    RP = 4
    UA = 5


@dataclass(frozen=True)
class SecurityLevel:
    level: IntegrityLevel
    categories: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "level", IntegrityLevel(self.level))
        object.__setattr__(self, "categories", frozenset(self.categories))

    @property
    def rank(self) -> int:
        return int(self.level)


class Access(enum.Enum):
    READ = "r"
    WRITE = "w"
    APPEND = "a"
    EXECUTE = "e"

    @property
    def code(self) -> int:
        return _ATTR_CODES[self]

    @property
    def readlike(self) -> bool:
        return self in (Access.READ, Access.EXECUTE)


_ATTR_CODES = {Access.READ: 0, Access.WRITE: 1, Access.APPEND: 2, Access.EXECUTE: 3}


def parse_access(text: str) -> frozenset:
    """``"rw"`` -> {READ, WRITE}."""
    return frozenset(Access(ch) for ch in text)


class Response(enum.Enum):
    YES = "yes"
    NO = "no"
    ERROR = "error"
    QUESTION = "question"


class Action(enum.Enum):
    ACQUIRE = "acquire"
    RELEASE = "release"


@dataclass(frozen=True)
class Request:
    requester: str
    target: str
    attribute: Access
    action: Action = Action.ACQUIRE


def _freeze_matrix(matrix) -> Mapping:
    return MappingProxyType({k: frozenset(v) for k, v in dict(matrix).items() if v})


@dataclass(frozen=True)
class SystemState:
    """``triples`` is the live access set a, ``matrix`` is B, ``clearance`` is c,
    ``hierarchy`` is D stored as child -> parent.

    Construction validates that every id has a clearance entry and that the
    hierarchy is acyclic. Whether held triples are backed by the matrix is
    a security question and is answered by :func:`ssp_check`.
    """

    triples: frozenset = frozenset()
    matrix: Mapping = field(default_factory=dict)
    clearance: Mapping = field(default_factory=dict)
    hierarchy: Mapping = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "triples", frozenset(self.triples))
        if not isinstance(self.matrix, MappingProxyType):
            object.__setattr__(self, "matrix", _freeze_matrix(self.matrix))
        if not isinstance(self.clearance, MappingProxyType):
            object.__setattr__(self, "clearance", MappingProxyType(dict(self.clearance)))
        if not isinstance(self.hierarchy, MappingProxyType):
            object.__setattr__(self, "hierarchy", MappingProxyType(dict(self.hierarchy)))

        for s, o, x in self.triples:
            if not isinstance(x, Access):
                raise PolicyError(f"triple ({s}, {o}) has non-attribute {x!r}")
            for ident in (s, o):
                if ident not in self.clearance:
                    raise PolicyError(f"no clearance entry for {ident!r}")
        for s, o in self.matrix:
            for ident in (s, o):
                if ident not in self.clearance:
                    raise PolicyError(f"no clearance entry for {ident!r}")
        _check_forest(self.hierarchy)

    def granted(self, subject: str, obj: str) -> frozenset:
        return self.matrix.get((subject, obj), frozenset())

    def with_triples(self, triples) -> "SystemState":
        # clearance/matrix/hierarchy are shared, so skip revalidation
        new = object.__new__(SystemState)
        object.__setattr__(new, "triples", frozenset(triples))
        object.__setattr__(new, "matrix", self.matrix)
        object.__setattr__(new, "clearance", self.clearance)
        object.__setattr__(new, "hierarchy", self.hierarchy)
        return new

    def without_grant(self, subject: str, obj: str, attr: Access) -> "SystemState":
        matrix = dict(self.matrix)
        matrix[(subject, obj)] = self.granted(subject, obj) - {attr}
        return replace(self, matrix=_freeze_matrix(matrix))


def _check_forest(parent: Mapping):
    for start in parent:
        seen = {start}
        node = parent.get(start)
        while node is not None:
            if node in seen:
                raise PolicyError(f"hierarchy cycle through {node!r}")
            seen.add(node)
            node = parent.get(node)


def dominates(subject_level: SecurityLevel, object_level: SecurityLevel) -> bool:
    """True iff the subject has greater-or-equal integrity and a superset of
    the object's categories."""
    return (
        subject_level.rank <= object_level.rank
        and subject_level.categories >= object_level.categories
    )


# A level check takes (attr, subject level, object level) and returns a denial
# reason or None.
LevelCheck = Callable[[Access, SecurityLevel, SecurityLevel], Optional[str]]


def biba_check(attr: Access, s: SecurityLevel, o: SecurityLevel) -> Optional[str]:
    if attr.readlike:
        if o.rank > s.rank:
            return "read-down"
    elif s.rank > o.rank:
        return "write-up"
    if not s.categories >= o.categories:
        return "category"
    return None


def literal_check(attr: Access, s: SecurityLevel, o: SecurityLevel) -> Optional[str]:
    """Subject must dominate the object for every attribute.

    Kept for comparison runs against :func:`biba_check`; denials of read-like
    access here are reported as ``read-up``.
    """
    if s.rank > o.rank:
        return "read-up" if attr.readlike else "write-up"
    if not s.categories >= o.categories:
        return "category"
    return None


def deny_reason(
    subject: str, obj: str, attr: Access, state: SystemState, check: LevelCheck = biba_check
) -> Optional[str]:
    """Reason the access would be refused, or None if allowed.

    Raises KeyError for ids without a clearance entry.
    """
    reason = check(attr, state.clearance[subject], state.clearance[obj])
    if reason is None and attr not in state.granted(subject, obj):
        reason = "matrix"
    return reason


def authorize(
    subject: str, obj: str, attr: Access, state: SystemState, check: LevelCheck = biba_check
) -> Response:
    if subject not in state.clearance or obj not in state.clearance:
        return Response.ERROR
    if deny_reason(subject, obj, attr, state, check) is None:
        return Response.YES
    return Response.NO


@dataclass(frozen=True)
class Rule:
    """``effect`` only runs when ``guard`` holds; otherwise the rule answers
    QUESTION and leaves the state alone."""

    id: int
    guard: Callable[[Request, SystemState], bool]
    effect: Callable[[Request, SystemState], tuple]

    def apply(self, request: Request, state: SystemState):
        if not self.guard(request, state):
            return Response.QUESTION, state
        return self.effect(request, state)


def make_authorize_rule(rule_id: int = 1, check: LevelCheck = biba_check) -> Rule:
    def effect(req: Request, state: SystemState):
        triple = (req.requester, req.target, req.attribute)
        if req.action is Action.RELEASE:
            if triple not in state.triples:
                return Response.ERROR, state
            return Response.YES, state.with_triples(state.triples - {triple})
        response = authorize(req.requester, req.target, req.attribute, state, check)
        if response is Response.YES and triple not in state.triples:
            return response, state.with_triples(state.triples | {triple})
        return response, state

    return Rule(rule_id, lambda req, state: True, effect)


DEFAULT_RULES = (make_authorize_rule(),)


def evaluate_request(
    request: Request, state: SystemState, rules: Sequence[Rule] = DEFAULT_RULES
):
    """Run ``rules`` in order; the first non-QUESTION answer decides.

    Returns ``(response, next_state)``.
    """
    if not rules:
        raise PolicyError("rule list is empty")
    for rule in rules:
        response, nxt = rule.apply(request, state)
        if response is not Response.QUESTION:
            return response, nxt
    return Response.QUESTION, state


@dataclass(frozen=True)
class Violation:
    subject: str
    object: str
    attr: Access
    reason: str

    def line(self) -> str:
        return (
            f"VIOLATION subject={self.subject} object={self.object} "
            f"attr={self.attr.value} reason={self.reason}"
        )


def _triple_key(t):
    return (t[0], t[1], t[2].value)


def ssp_check(
    state: SystemState, check: LevelCheck = biba_check, triples: Iterable = None
) -> list:
    """Every held triple that the access contract would refuse.

    ``triples`` restricts the scan to a subset of ``state.triples``.
    """
    todo = state.triples if triples is None else triples
    out = []
    for s, o, x in sorted(todo, key=_triple_key):
        reason = deny_reason(s, o, x, state, check)
        if reason is not None:
            out.append(Violation(s, o, x, reason))
    return out


@dataclass
class Trace:
    initial: SystemState
    steps: list = field(default_factory=list)

    @property
    def final(self) -> SystemState:
        return self.steps[-1][2] if self.steps else self.initial

    def record(self, request: Request, rules: Sequence[Rule] = DEFAULT_RULES) -> Response:
        response, nxt = evaluate_request(request, self.final, rules)
        self.steps.append((request, response, nxt))
        return response


def verify_trace(trace: Trace, check: LevelCheck = biba_check, incremental: bool = True) -> bool:
    """True iff z0 and every post-step state pass :func:`ssp_check`.

    With ``incremental`` set, a step that keeps matrix and clearance of its
    predecessor is checked only on the triples it added: the remaining ones
    were already checked under the same matrix and clearance.
    """
    prev = trace.initial
    if ssp_check(prev, check):
        return False
    for _, _, state in trace.steps:
        if incremental and state.matrix is prev.matrix and state.clearance is prev.clearance:
            bad = ssp_check(state, check, triples=state.triples - prev.triples)
        else:
            bad = ssp_check(state, check)
        if bad:
            return False
        prev = state
    return True


def random_requests(state: SystemState, rng: random.Random, n: int, release_prob: float = 0.3):
    """Random request stream over the ids in ``state.clearance``."""
    ids = sorted(state.clearance)
    attrs = list(Access)
    for _ in range(n):
        action = Action.RELEASE if rng.random() < release_prob else Action.ACQUIRE
        if action is Action.RELEASE and state.triples and rng.random() < 0.5:
            # bias releases toward held triples so they sometimes succeed
            s, o, x = rng.choice(sorted(state.triples, key=_triple_key))
        else:
            s, o, x = rng.choice(ids), rng.choice(ids), rng.choice(attrs)
        yield Request(s, o, x, action)


def random_state(
    rng: random.Random,
    n_ids: int = 6,
    categories: Sequence[str] = ("alpha", "beta", "gamma"),
    grant_prob: float = 0.5,
    secure: bool = True,
    n_triples: int = 8,
) -> SystemState:
    """Random well-formed state. With ``secure`` only allowed triples are held."""
    clearance = {}
    for i in range(n_ids):
        cats = frozenset(c for c in categories if rng.random() < 0.4)
        clearance[f"id{i}"] = SecurityLevel(IntegrityLevel(rng.randint(1, 5)), cats)
    ids = sorted(clearance)
    matrix = {}
    for s, o in itertools.product(ids, ids):
        got = frozenset(x for x in Access if rng.random() < grant_prob)
        if got:
            matrix[(s, o)] = got
    base = SystemState(frozenset(), matrix, clearance)
    triples = set()
    for _ in range(n_triples * 4):
        if len(triples) >= n_triples:
            break
        t = (rng.choice(ids), rng.choice(ids), rng.choice(list(Access)))
        if not secure or deny_reason(*t, base) is None:
            triples.add(t)
    return base.with_triples(triples)


# -- batch grid audit -------------------------------------------------------

_REASONS = {
    _kernels.READ_DOWN: "read-down",
    _kernels.WRITE_UP: "write-up",
    _kernels.CATEGORY: "category",
    _kernels.MATRIX: "matrix",
}


def grid_cases(universe: Sequence[str] = ("c0", "c1", "c2")):
    """All (subject level, object level, attr, granted) combinations, with
    category sets drawn from every subset of ``universe``. The matrix grant
    covers exactly the requested attribute so the level axioms decide."""
    subsets = [
        frozenset(c)
        for r in range(len(universe) + 1)
        for c in itertools.combinations(universe, r)
    ]
    for sr, orank, x, sc, oc in itertools.product(
        IntegrityLevel, IntegrityLevel, Access, subsets, subsets
    ):
        yield SecurityLevel(sr, sc), SecurityLevel(orank, oc), x


def grid_codes(cases: Sequence, universe: Sequence[str], granted: Sequence[frozenset] = None):
    """Decision codes for a batch of cases via the accelerated kernel."""
    bit = {c: 1 << i for i, c in enumerate(universe)}
    n = len(cases)
    s_rank = np.empty(n, np.int64)
    o_rank = np.empty(n, np.int64)
    s_cat = np.empty(n, np.int64)
    o_cat = np.empty(n, np.int64)
    attr = np.empty(n, np.int64)
    grant = np.empty(n, np.int64)
    for k, (s, o, x) in enumerate(cases):
        s_rank[k], o_rank[k] = s.rank, o.rank
        s_cat[k] = sum(bit[c] for c in s.categories)
        o_cat[k] = sum(bit[c] for c in o.categories)
        attr[k] = x.code
        g = {x} if granted is None else granted[k]
        grant[k] = sum(1 << a.code for a in g)
    return _kernels.access_codes(s_rank, s_cat, o_rank, o_cat, attr, grant)


def code_reason(code: int) -> Optional[str]:
    return _REASONS.get(int(code))


def state_codes(state: SystemState) -> list:
    """ssp_check over a (possibly large) state through the batch kernel.

    Returns violations in the same order as :func:`ssp_check` under
    :func:`biba_check`.
    """
    triples = sorted(state.triples, key=_triple_key)
    if not triples:
        return []
    universe = sorted({c for lvl in state.clearance.values() for c in lvl.categories})
    cases = [(state.clearance[s], state.clearance[o], x) for s, o, x in triples]
    grants = [state.granted(s, o) for s, o, _ in triples]
    codes = grid_codes(cases, universe, grants)
    return [
        Violation(s, o, x, _REASONS[int(c)])
        for (s, o, x), c in zip(triples, codes)
        if c != _kernels.OK
    ]
