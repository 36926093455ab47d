import itertools
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from korora.policy import (
    DEFAULT_RULES,
    Access,
    Action,
    IntegrityLevel,
    PolicyError,
    Request,
    Response,
    Rule,
    SecurityLevel,
    SystemState,
    Trace,
    authorize,
    dominates,
    evaluate_request,
    grid_cases,
    literal_check,
    random_requests,
    random_state,
    ssp_check,
    state_codes,
    verify_trace,
)

TPM, TA, IDP, RP, UA = (IntegrityLevel[n] for n in ("TPM", "TA", "IDP", "RP", "UA"))
R, W, A, E = Access.READ, Access.WRITE, Access.APPEND, Access.EXECUTE


def oracle_allows(attr, s_rank, s_cats, o_rank, o_cats, granted):
    # the two integrity axioms, written out without the library
    if attr not in granted:
        return False
    if not set(o_cats) <= set(s_cats):
        return False
    if attr in (R, E):
        return o_rank <= s_rank  # no read down
    return s_rank <= o_rank  # no write up


def two_party(s_level, o_level, grants=frozenset(Access), triples=()):
    return SystemState(
        frozenset(triples), {("s", "o"): grants}, {"s": s_level, "o": o_level}
    )


def lvl(rank, *cats):
    return SecurityLevel(rank, frozenset(cats))


# -- levels -----------------------------------------------------------------


def test_rank_mapping_is_fixed():
    assert [int(x) for x in (TPM, TA, IDP, RP, UA)] == [1, 2, 3, 4, 5]


@pytest.mark.parametrize(
    "s,o,want",
    [
        (lvl(TPM), lvl(UA), True),
        (lvl(RP, "alpha"), lvl(RP, "alpha"), True),
        (lvl(IDP, "alpha"), lvl(RP, "alpha", "beta"), False),
        (lvl(UA), lvl(TPM), False),
    ],
)
def test_dominates_examples(s, o, want):
    assert dominates(s, o) is want


levels = st.builds(
    SecurityLevel,
    st.sampled_from(list(IntegrityLevel)),
    st.frozensets(st.sampled_from(["a", "b", "c"])),
)


@given(levels, levels, levels)
def test_dominates_is_partial_order(x, y, z):
    assert dominates(x, x)
    if dominates(x, y) and dominates(y, x):
        assert (x.rank, x.categories) == (y.rank, y.categories)
    if dominates(x, y) and dominates(y, z):
        assert dominates(x, z)


# -- authorize --------------------------------------------------------------


def test_authorize_examples():
    assert authorize("s", "o", R, two_party(lvl(UA), lvl(TPM), {R})) is Response.YES
    assert authorize("s", "o", R, two_party(lvl(TPM), lvl(UA))) is Response.NO
    assert authorize("s", "o", W, two_party(lvl(TPM), lvl(UA), {W})) is Response.YES
    assert authorize("s", "o", W, two_party(lvl(UA), lvl(TPM))) is Response.NO


def test_authorize_unknown_id_is_error():
    st_ = two_party(lvl(TA), lvl(TA))
    assert authorize("ghost", "o", R, st_) is Response.ERROR
    assert authorize("s", "ghost", R, st_) is Response.ERROR


def test_authorize_needs_matrix_grant():
    assert authorize("s", "o", R, two_party(lvl(TA), lvl(TA), {W})) is Response.NO


def test_authorize_matches_oracle_on_full_grid():
    cases = list(grid_cases(("c0", "c1", "c2")))
    assert len(cases) == 6400
    for s, o, x in cases:
        for grants in ({x}, set(Access) - {x}):
            want = oracle_allows(x, s.rank, s.categories, o.rank, o.categories, grants)
            got = authorize("s", "o", x, two_party(s, o, grants)) is Response.YES
            assert got == want, (s, o, x, grants)


def test_literal_check_differs_on_reads():
    # the literal inequality allows reading down and forbids reading up
    st_ = two_party(lvl(TPM), lvl(UA))
    assert authorize("s", "o", R, st_, literal_check) is Response.YES
    st_ = two_party(lvl(UA), lvl(TPM))
    assert authorize("s", "o", R, st_, literal_check) is Response.NO


# -- state ------------------------------------------------------------------


def test_state_requires_clearance():
    with pytest.raises(PolicyError):
        SystemState({("s", "x", R)}, {}, {"s": lvl(TA)})
    with pytest.raises(PolicyError):
        SystemState((), {("s", "x"): {R}}, {"s": lvl(TA)})


def test_state_rejects_hierarchy_cycle():
    c = {"a": lvl(TA), "b": lvl(TA), "c": lvl(TA)}
    SystemState((), {}, c, {"a": "b", "b": "c"})
    with pytest.raises(PolicyError):
        SystemState((), {}, c, {"a": "b", "b": "c", "c": "a"})


# -- evaluate_request -------------------------------------------------------


def test_acquire_yes_adds_triple():
    st_ = two_party(lvl(UA), lvl(TPM), {R})
    resp, nxt = evaluate_request(Request("s", "o", R), st_)
    assert resp is Response.YES
    assert nxt.triples == {("s", "o", R)}
    assert st_.triples == frozenset()


def test_release_of_unheld_triple_is_error():
    st_ = two_party(lvl(UA), lvl(TPM), {R})
    resp, nxt = evaluate_request(Request("s", "o", R, Action.RELEASE), st_)
    assert resp is Response.ERROR and nxt is st_


def test_release_removes_triple():
    st_ = two_party(lvl(UA), lvl(TPM), {R}, [("s", "o", R)])
    resp, nxt = evaluate_request(Request("s", "o", R, Action.RELEASE), st_)
    assert resp is Response.YES and nxt.triples == frozenset()


def test_matrix_denial_leaves_state():
    st_ = two_party(lvl(UA), lvl(TPM), {W})
    resp, nxt = evaluate_request(Request("s", "o", R), st_)
    assert resp is Response.NO and nxt is st_


def test_unknown_requester_error():
    st_ = two_party(lvl(UA), lvl(TPM), {R})
    resp, nxt = evaluate_request(Request("nobody", "o", R), st_)
    assert resp is Response.ERROR and nxt is st_


def test_first_deciding_rule_wins():
    never = Rule(1, lambda r, s: False, lambda r, s: (Response.YES, s))
    deny = Rule(2, lambda r, s: True, lambda r, s: (Response.NO, s))
    st_ = two_party(lvl(UA), lvl(TPM), {R})
    resp, _ = evaluate_request(Request("s", "o", R), st_, [never, deny, *DEFAULT_RULES])
    assert resp is Response.NO


def test_question_only_rules_never_mutate():
    q = Rule(9, lambda r, s: False, lambda r, s: (Response.YES, s.with_triples(())))
    rng = random.Random(3)
    st_ = random_state(rng)
    for req in random_requests(st_, rng, 200):
        resp, nxt = evaluate_request(req, st_, [q, q])
        assert resp is Response.QUESTION and nxt is st_


def test_empty_rule_list_rejected():
    with pytest.raises(PolicyError):
        evaluate_request(Request("s", "o", R), two_party(lvl(TA), lvl(TA)), [])


# -- ssp_check --------------------------------------------------------------


def test_ssp_empty_state_is_secure():
    assert ssp_check(two_party(lvl(TA), lvl(TA))) == []


def test_ssp_flags_read_down():
    st_ = two_party(lvl(TPM), lvl(UA), {R}, [("s", "o", R)])
    [v] = ssp_check(st_)
    assert v.line() == "VIOLATION subject=s object=o attr=r reason=read-down"


def test_ssp_reasons():
    st_ = SystemState(
        {("hi", "lo", W), ("lo", "hi", W), ("hi", "cat", W), ("lo", "lo2", R)},
        {("hi", "lo"): {W}, ("lo", "hi"): {W}, ("hi", "cat"): {W}},
        {"hi": lvl(TPM), "lo": lvl(UA), "cat": lvl(UA, "x"), "lo2": lvl(UA)},
    )
    reasons = {(v.subject, v.object): v.reason for v in ssp_check(st_)}
    assert reasons == {("lo", "hi"): "write-up", ("hi", "cat"): "category", ("lo", "lo2"): "matrix"}


def _oracle_violations(state):
    out = set()
    for s, o, x in state.triples:
        a, b = state.clearance[s], state.clearance[o]
        if not oracle_allows(x, a.rank, a.categories, b.rank, b.categories, state.granted(s, o)):
            out.add((s, o, x))
    return out


@pytest.mark.parametrize("seed", range(40))
def test_ssp_matches_oracle_on_random_states(seed):
    st_ = random_state(random.Random(seed), n_ids=7, secure=False, n_triples=20)
    got = {(v.subject, v.object, v.attr) for v in ssp_check(st_)}
    assert got == _oracle_violations(st_)
    assert state_codes(st_) == ssp_check(st_)


# -- traces -----------------------------------------------------------------


def test_empty_trace_on_secure_state():
    assert verify_trace(Trace(two_party(lvl(TA), lvl(TA))))


def test_denied_step_keeps_trace_secure():
    tr = Trace(two_party(lvl(TPM), lvl(UA), {R}))
    assert tr.record(Request("s", "o", R)) is Response.NO
    assert tr.steps[0][2] is tr.initial
    assert verify_trace(tr)


def test_insecure_initial_state_fails_trace():
    assert not verify_trace(Trace(two_party(lvl(TPM), lvl(UA), {R}, [("s", "o", R)])))


@pytest.mark.parametrize("seed", range(10))
def test_random_traces_stay_secure(seed):
    rng = random.Random(seed)
    tr = Trace(random_state(rng, n_ids=6))
    for req in random_requests(tr.initial, rng, 1000):
        tr.record(req)
    assert verify_trace(tr)
    assert verify_trace(tr, incremental=False)


def test_trace_with_rogue_rule_is_caught():
    grant_all = Rule(
        1, lambda r, s: r.action is Action.ACQUIRE,
        lambda r, s: (Response.YES, s.with_triples(s.triples | {(r.requester, r.target, r.attribute)})),
    )
    tr = Trace(two_party(lvl(TPM), lvl(UA), {R}))
    tr.record(Request("s", "o", R), [grant_all])
    assert not verify_trace(tr)
    assert not verify_trace(tr, incremental=False)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000))
def test_matrix_monotonicity(seed):
    rng = random.Random(seed)
    st_ = random_state(rng, n_ids=5)
    grants = sorted(((s, o), x.value) for (s, o), g in st_.matrix.items() for x in g)
    (s, o), x = rng.choice(grants)
    smaller = st_.without_grant(s, o, Access(x))
    for a, b, y in itertools.product(sorted(st_.clearance), sorted(st_.clearance), Access):
        if authorize(a, b, y, st_) is Response.NO:
            assert authorize(a, b, y, smaller) is Response.NO
