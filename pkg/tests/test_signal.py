import email.message
import itertools

import pytest
from hypothesis import given, strategies as st

from gpcgate.signal import (
    ABSENT,
    ACTIVE,
    EmitInvalid,
    MalformedRecord,
    SignalKind,
    SignalState,
    WellKnownRecord,
    emit_signal,
    parse_signal,
    parse_well_known,
    serialize_well_known,
)

# Hand-built corpus of values a client might put in the field.
VALUE_CORPUS = [
    "", " ", "0", "1", " 1", "1 ", " 1 ", "\t1", "1\t", "01", "10", "11", "1.0", "+1", "-1",
    "2", "true", "True", "TRUE", "yes", "on", "y", "t", "\"1\"", "'1'", "1,1", "1, 1", "1;",
    "1\r\n", "\n1", "one", "I", "l", "１", "¹", "1\x00", "null", "None", "undefined", "?1",
    "1=1", "gpc=1", "Sec-GPC: 1", "0x1", "1e0", "%31", "&#49;", "[1]", "{1}", "*", "false",
    "1" * 3, "​1", "1​",
]

NAME_VARIANTS = ["Sec-GPC", "sec-gpc", "SEC-GPC", "Sec-Gpc", "sEc-GpC"]


def test_corpus_is_large_enough():
    assert len(set(VALUE_CORPUS)) >= 50


@pytest.mark.parametrize("value", VALUE_CORPUS)
def test_only_exact_one_is_active(value):
    got = parse_signal({"Sec-GPC": value})
    if value == "1":
        assert got == ACTIVE
    else:
        assert got == SignalState.invalid(value)


@pytest.mark.parametrize("name", NAME_VARIANTS)
def test_name_is_case_insensitive(name):
    assert parse_signal({name: "1"}) == ACTIVE


def test_examples():
    assert parse_signal({"Sec-GPC": "1"}) == ACTIVE
    assert parse_signal({}) == ABSENT
    assert parse_signal({"Sec-GPC": "0"}) == SignalState.invalid("0")


def test_enumerated_small_corpus():
    # the enumeration quoted for the "0" example
    outcomes = {v: parse_signal({"Sec-GPC": v}) for v in ["", "0", "1", "true", " 1 "]}
    assert [v for v, s in outcomes.items() if s.is_active] == ["1"]
    assert all(s.kind is SignalKind.INVALID for v, s in outcomes.items() if v != "1")


def test_other_headers_are_ignored():
    assert parse_signal({"DNT": "1", "Accept": "*/*", "X-Sec-GPC": "1"}) == ABSENT


def test_duplicates_all_one_is_active():
    assert parse_signal([("Sec-GPC", "1"), ("sec-gpc", "1")]) == ACTIVE


def test_duplicates_mixed_are_invalid_with_joined_raw():
    got = parse_signal([("Sec-GPC", "1"), ("sec-gpc", "0")])
    assert got == SignalState.invalid("1, 0")


def test_list_valued_mapping():
    assert parse_signal({"Sec-GPC": ["1", "1"]}) == ACTIVE
    assert parse_signal({"Sec-GPC": ["1", "yes"]}).kind is SignalKind.INVALID


def test_message_object_keeps_duplicates():
    msg = email.message.Message()
    msg["Sec-GPC"] = "1"
    msg["Sec-GPC"] = "true"
    assert parse_signal(msg) == SignalState.invalid("1, true")
    single = email.message.Message()
    single["sec-gpc"] = "1"
    assert parse_signal(single) == ACTIVE


def test_bytes_values():
    assert parse_signal([(b"Sec-GPC", b"1")]) == ACTIVE


def test_non_text_value_is_never_active():
    assert parse_signal({"Sec-GPC": 1}).kind is SignalKind.INVALID


def test_garbage_input_never_raises():
    assert parse_signal(None) == ABSENT
    assert parse_signal(42) == ABSENT


@given(st.dictionaries(st.text(max_size=12), st.text(max_size=6), max_size=6))
def test_parse_never_raises_and_single_value(fields):
    got = parse_signal(fields)
    matches = [v for k, v in fields.items() if k.lower() == "sec-gpc"]
    if not matches:
        assert got == ABSENT
    elif all(v == "1" for v in matches):
        assert got == ACTIVE
    else:
        assert got.kind is SignalKind.INVALID


def test_emit():
    assert emit_signal(ACTIVE) == {"Sec-GPC": "1"}
    assert emit_signal(ABSENT) == {}
    with pytest.raises(EmitInvalid):
        emit_signal(SignalState.invalid("0"))


@pytest.mark.parametrize("state", [ACTIVE, ABSENT])
def test_round_trip(state):
    assert parse_signal(emit_signal(state)) == state


def test_fingerprinting_surface_is_one_bit():
    outputs = {tuple(sorted(emit_signal(s).items())) for s in (ACTIVE, ABSENT)}
    assert len(outputs) == 2  # log2(2) = 1 bit
    # absence adds nothing a never-configured client would not send
    assert emit_signal(ABSENT) == {}


def test_invalid_requires_raw():
    with pytest.raises(ValueError):
        SignalState(SignalKind.INVALID)
    with pytest.raises(ValueError):
        SignalState(SignalKind.ACTIVE, "1")


def test_signal_json_round_trip():
    for s in (ACTIVE, ABSENT, SignalState.invalid(" 1 ")):
        assert SignalState.from_json(s.to_json()) == s


# well-known resource

def test_parse_well_known_examples():
    rec = parse_well_known(b'{"gpc": true, "lastUpdate": "2025-11-25"}')
    assert rec.gpc_supported is True
    assert rec.last_update == "2025-11-25"
    rec = parse_well_known(b'{"gpc": false}')
    assert rec == WellKnownRecord(False, None)


@pytest.mark.parametrize("gpc", ['"yes"', "1", "0", "null", '"true"', "[]", "{}"])
def test_gpc_must_be_boolean(gpc):
    with pytest.raises(MalformedRecord) as exc:
        parse_well_known(b'{"gpc": ' + gpc.encode() + b"}")
    assert exc.value.reason == "gpc not boolean"


@pytest.mark.parametrize("body,reason", [
    (b"[]", "not an object"),
    (b'"gpc"', "not an object"),
    (b"{}", "gpc missing"),
    (b'{"GPC": true}', "gpc missing"),
    (b"\xff\xfe{}", "undecodable text"),
    (b"{gpc: true}", "invalid JSON"),
    (b'{"gpc": true} trailing', "invalid JSON"),
    (b"", "invalid JSON"),
    (b'{"gpc": true, "lastUpdate": "yesterday"}', "lastUpdate not ISO-8601"),
    (b'{"gpc": true, "lastUpdate": 20251125}', "lastUpdate not ISO-8601"),
])
def test_malformed_bodies(body, reason):
    with pytest.raises(MalformedRecord) as exc:
        parse_well_known(body)
    assert exc.value.reason == reason


def test_bom_and_trailing_newline_tolerated():
    assert parse_well_known(b'\xef\xbb\xbf{"gpc":true}\n') == WellKnownRecord(True)
    assert parse_well_known(b'{"gpc":true}\r\n') == WellKnownRecord(True)


@pytest.mark.parametrize("stamp", ["2025-11-25", "2025-11-25T10:00:00Z", "2025-11-25T10:00:00+01:00",
                                   "2025-11-25T10:00:00.123"])
def test_iso_dates_accepted(stamp):
    assert parse_well_known(f'{{"gpc":true,"lastUpdate":"{stamp}"}}'.encode()).last_update == stamp


def test_serialize_examples():
    assert serialize_well_known(WellKnownRecord(True, "2025-11-25")) == b'{"gpc":true,"lastUpdate":"2025-11-25"}'
    assert serialize_well_known(WellKnownRecord(False)) == b'{"gpc":false}'


dates = st.dates().map(lambda d: d.isoformat())
datetimes = st.datetimes(timezones=st.just(__import__("datetime").timezone.utc)).map(
    lambda d: d.isoformat().replace("+00:00", "Z"))
records = st.builds(WellKnownRecord, st.booleans(), st.none() | dates | datetimes)


@given(records)
def test_well_known_round_trip(rec):
    assert parse_well_known(serialize_well_known(rec)) == rec


def test_invalid_record_rejected_at_construction():
    with pytest.raises(MalformedRecord):
        WellKnownRecord("yes")
    with pytest.raises(MalformedRecord):
        WellKnownRecord(True, "soon")


def test_cross_product_of_names_and_values():
    for name, value in itertools.product(NAME_VARIANTS, VALUE_CORPUS):
        assert parse_signal({name: value}).is_active == (value == "1")
