import itertools

import pytest
from hypothesis import given, strategies as st

from gpcgate.roles import (
    DuplicateActivity,
    EntityActivityBinding,
    InconsistentBinding,
    PartyRole,
    classify,
    split_roles,
)


def b(activity="a", determines=False, on_behalf=False, intended=False, entity="e"):
    return EntityActivityBinding(entity, activity, determines, on_behalf, intended)


def test_classify_examples():
    assert classify(b(determines=True, intended=True)) is PartyRole.CONTROLLER
    assert classify(b(on_behalf=True)) is PartyRole.PROCESSOR
    assert classify(b()) is PartyRole.THIRD_PARTY


def test_both_flags_is_inconsistent():
    with pytest.raises(InconsistentBinding):
        classify(b(determines=True, on_behalf=True))


def test_own_purpose_controller_is_third_party_to_the_site():
    assert classify(b(determines=True, intended=False)) is PartyRole.THIRD_PARTY


def test_payment_provider_dual_role():
    roles = split_roles("psp", [
        b("payment-execution", on_behalf=True, entity="psp"),
        b("fraud-detection", determines=True, entity="psp"),
    ])
    assert roles == {"payment-execution": PartyRole.PROCESSOR, "fraud-detection": PartyRole.THIRD_PARTY}


def test_single_binding():
    assert split_roles("site", [b("x", determines=True, intended=True, entity="site")]) == {
        "x": PartyRole.CONTROLLER}


def test_three_flag_patterns_three_roles():
    patterns = [dict(determines=True, intended=True), dict(on_behalf=True), dict()]
    bindings = [b(f"act{i}", **p) for i, p in enumerate(patterns)]
    roles = split_roles("e", bindings)
    assert len(set(roles.values())) == 3
    assert all(roles[x.activity_id] is classify(x) for x in bindings)


def test_duplicate_activity():
    with pytest.raises(DuplicateActivity):
        split_roles("e", [b("x"), b("x", on_behalf=True)])


def test_foreign_entity_rejected():
    with pytest.raises(InconsistentBinding):
        split_roles("e", [b("x", entity="other")])


def test_totality_and_partition():
    seen = set()
    for d, o, i in itertools.product([False, True], repeat=3):
        if d and o:
            continue
        seen.add(classify(b(determines=d, on_behalf=o, intended=i)))
    assert seen == set(PartyRole)


def test_processor_never_third_party():
    for d, i in itertools.product([False], [False, True]):
        assert classify(b(determines=d, on_behalf=True, intended=i)) is PartyRole.PROCESSOR


flag_patterns = st.sampled_from([(True, False), (False, True), (False, False)])
binding_lists = st.lists(st.tuples(flag_patterns, st.booleans()), min_size=1, max_size=8)


@given(binding_lists, binding_lists)
def test_dual_role_independence(first, second):
    b1 = [b(f"a{i}", d, o, t) for i, ((d, o), t) in enumerate(first)]
    b2 = [b(f"b{i}", d, o, t) for i, ((d, o), t) in enumerate(second)]
    union = split_roles("e", b1 + b2)
    alone = split_roles("e", b1)
    assert {k: union[k] for k in alone} == alone
