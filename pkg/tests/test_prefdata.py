import json
import math
from collections import Counter
from fractions import Fraction
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssrmlab.prefdata import (
    CONTEXT_MARKER,
    RESPONSE_A_MARKER,
    RESPONSE_B_MARKER,
    DatasetError,
    Label,
    LabeledExample,
    LabelSource,
    PreferenceDataset,
    PreferenceTriplet,
    SplitSpec,
    dump_jsonl,
    format_template,
    load_jsonl,
    randomize_order,
    split,
    swap_example,
)

FIXTURES = Path(__file__).parent / "fixtures"


def make_examples(n, prefix=""):
    return [LabeledExample(PreferenceTriplet(f"p{i}", f"a{i}", f"b{i}", id=f"{prefix}{i}"),
                           Label.A if i % 3 else Label.B) for i in range(n)]


# --- load_jsonl -----------------------------------------------------------

def test_single_labeled_line(tmp_path):
    p = tmp_path / "one.jsonl"
    p.write_text('{"prompt":"p","response_a":"x","response_b":"y","label":"A"}\n')
    ds = load_jsonl(p)
    assert (ds.m, ds.n) == (1, 0)
    assert ds.labeled[0].label is Label.A
    assert ds.labeled[0].label_source is LabelSource.GROUND_TRUTH


def test_empty_file(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_text("")
    ds = load_jsonl(p)
    assert (ds.m, ds.n) == (0, 0)


def test_eight_records_two_labeled():
    ds = load_jsonl(FIXTURES / "eight_records.jsonl")
    assert (ds.m, ds.n) == (2, 6)
    assert [ex.id for ex in ds.labeled] == ["0", "3"]
    assert [t.id for t in ds.unlabeled] == ["1", "2", "4", "5", "6", "7"]
    assert ds.order == tuple(str(i) for i in range(8))
    assert ds.labeled[1].triplet.category == "chat"


def test_malformed_line_reports_line_number(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"prompt":"p","response_a":"x","response_b":"y"}\n{not json\n')
    with pytest.raises(DatasetError, match="line 2"):
        load_jsonl(p)


def test_bad_label_reports_record_id(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"id":"rec-9","prompt":"p","response_a":"x","response_b":"y","label":"C"}\n')
    with pytest.raises(DatasetError, match="rec-9"):
        load_jsonl(p)


def test_missing_field_rejected(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"prompt":"p","response_a":"x"}\n')
    with pytest.raises(DatasetError, match="response_b"):
        load_jsonl(p)


@pytest.mark.parametrize("name", ["roundtrip.jsonl", "roundtrip_meta.jsonl"])
def test_jsonl_round_trip_is_byte_stable(tmp_path, name):
    src = FIXTURES / name
    out = tmp_path / name
    dump_jsonl(load_jsonl(src), out)
    assert out.read_bytes() == src.read_bytes()


def test_round_trip_field_for_field(tmp_path):
    ds = load_jsonl(FIXTURES / "roundtrip.jsonl")
    out = tmp_path / "rt.jsonl"
    dump_jsonl(ds, out)
    original = [json.loads(line) for line in (FIXTURES / "roundtrip.jsonl").read_text().splitlines()]
    again = [json.loads(line) for line in out.read_text().splitlines()]
    assert original == again


def test_pseudo_records_keep_provenance():
    ds = load_jsonl(FIXTURES / "roundtrip_meta.jsonl")
    assert ds.meta == {"config_hash": "abc", "kind": "labeled"}
    pseudo = ds.labeled[1]
    assert pseudo.label_source is LabelSource.PSEUDO and pseudo.confidence == 0.875


def test_dataset_rejects_shared_ids():
    ex = make_examples(2)
    with pytest.raises(DatasetError):
        PreferenceDataset(ex, [ex[0].triplet])


# --- format_template ------------------------------------------------------

def test_template_worked_example():
    t = PreferenceTriplet("What is 2+2?", "4", "5")
    assert format_template(t) == "[CONTEXT]What is 2+2?[RESPONSE A]4[RESPONSE B]5"


def test_template_empty_fields():
    assert format_template(PreferenceTriplet("", "", "")) == "[CONTEXT][RESPONSE A][RESPONSE B]"


def test_template_swap_exchanges_segments():
    t = PreferenceTriplet("x", "first", "second")
    assert format_template(t.swapped()) == "[CONTEXT]x[RESPONSE A]second[RESPONSE B]first"
    assert format_template(t) != format_template(t.swapped())


def test_template_golden_file():
    lines = (FIXTURES / "template_golden.jsonl").read_text(encoding="utf-8").splitlines()
    assert len(lines) == 50
    for line in lines:
        case = json.loads(line)
        t = PreferenceTriplet(case["prompt"], case["response_a"], case["response_b"])
        assert format_template(t).encode("utf-8") == case["expected"].encode("utf-8")


marker_free = st.text(max_size=30).filter(lambda s: "[" not in s)


@given(marker_free, marker_free, marker_free)
def test_template_markers_once_in_order(x, a1, a2):
    s = format_template(PreferenceTriplet(x, a1, a2))
    positions = [s.find(m) for m in (CONTEXT_MARKER, RESPONSE_A_MARKER, RESPONSE_B_MARKER)]
    assert all(s.count(m) == 1 for m in (CONTEXT_MARKER, RESPONSE_A_MARKER, RESPONSE_B_MARKER))
    assert positions == sorted(positions) and positions[0] == 0


# --- randomize_order -------------------------------------------------------

def test_swap_flips_label_and_responses():
    ex = LabeledExample(PreferenceTriplet("x", "good", "bad"), Label.A)
    sw = swap_example(ex)
    assert (sw.triplet.response_a, sw.triplet.response_b, sw.label) == ("bad", "good", Label.B)


def test_randomize_is_deterministic():
    ex = make_examples(50)
    assert randomize_order(ex, 11) == randomize_order(ex, 11)


def test_randomize_swap_rate():
    ex = make_examples(10_000)
    out = randomize_order(ex, 3)
    swapped = sum(o.triplet.response_a != e.triplet.response_a for o, e in zip(out, ex))
    assert abs(swapped / 10_000 - 0.5) <= 0.02


def _semantic(ex):
    winner = ex.triplet.response_a if ex.label is Label.A else ex.triplet.response_b
    return (ex.triplet.prompt, frozenset((ex.triplet.response_a, ex.triplet.response_b)), winner)


@given(st.integers(0, 2**32), st.integers(1, 60))
@settings(max_examples=30)
def test_randomize_preserves_preferences(seed, n):
    ex = make_examples(n)
    assert Counter(map(_semantic, randomize_order(ex, seed))) == Counter(map(_semantic, ex))


# --- split -------------------------------------------------------------------

def test_split_one_sixteenth():
    ds = split(make_examples(16), SplitSpec(Fraction(1, 16), seed=0))
    assert (ds.m, ds.n) == (1, 15)


def test_split_full():
    ds = split(make_examples(10), SplitSpec(1, seed=0))
    assert (ds.m, ds.n) == (10, 0)


def test_split_quarter_of_700k():
    examples = [LabeledExample(PreferenceTriplet("p", "a", "b", id=str(i)), Label.A)
                for i in range(700_000)]
    ds = split(examples, SplitSpec(Fraction(1, 4), seed=0, shuffle=False))
    assert ds.m == 175_000


@pytest.mark.parametrize("frac", [0, -0.1, 1.5, Fraction(5, 4)])
def test_split_rejects_bad_fraction(frac):
    with pytest.raises(ValueError):
        SplitSpec(frac)


@given(st.integers(0, 200), st.fractions(min_value=Fraction(1, 1000), max_value=1),
       st.integers(0, 2**32), st.booleans())
@settings(max_examples=50)
def test_split_partitions(n, frac, seed, shuffle):
    ex = make_examples(n)
    spec = SplitSpec(frac, seed, shuffle)
    ds = split(ex, spec)
    ids_l = {e.id for e in ds.labeled}
    ids_u = {t.id for t in ds.unlabeled}
    assert ids_l | ids_u == {e.id for e in ex}
    assert not ids_l & ids_u
    assert ds.m == math.floor(frac * n)
    assert split(ex, spec) == ds
