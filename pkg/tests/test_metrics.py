import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pvada.corruptions import ATOMIC_KINDS
from pvada.exceptions import UndefinedBaselineError, ValidationError
from pvada.metrics import (
    BaselineTable, EvalReport, build_report, corruption_error, mean_ce, overall_accuracy, render_table,
)

SET_NAMES = [f"{k.value}_{s}" for k in ATOMIC_KINDS for s in range(1, 6)]


def full_sets(value=0.7, **overrides):
    sets = {name: value for name in SET_NAMES}
    sets["clean"] = 0.9
    sets.update(overrides)
    return sets


# --- OA -------------------------------------------------------------------


def test_all_correct():
    assert overall_accuracy([1, 2, 3], [1, 2, 3]) == 1.0


def test_partial():
    assert overall_accuracy([0, 1, 2], [0, 1, 3]) == pytest.approx(2 / 3)


def test_empty_and_mismatched():
    with pytest.raises(ValidationError):
        overall_accuracy([], [])
    with pytest.raises(ValidationError):
        overall_accuracy([0, 1], [0])


# --- CE -------------------------------------------------------------------


def test_ce_equal_to_baseline_is_one():
    base = [0.9, 0.85, 0.8, 0.7, 0.6]
    assert corruption_error(base, base) == 1.0


def test_ce_of_perfect_model_is_zero():
    assert corruption_error([1.0] * 5, [0.8] * 5) == 0.0


def test_ce_worked_example():
    assert corruption_error([0.9] * 5, [0.8] * 5) == pytest.approx(0.5)


def test_ce_undefined_baseline():
    with pytest.raises(UndefinedBaselineError):
        corruption_error([0.9] * 5, [1.0] * 5)


def test_ce_needs_five_severities():
    with pytest.raises(ValidationError):
        corruption_error([0.9] * 4, [0.8] * 5)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=5, max_size=5), st.lists(st.floats(0, 0.99), min_size=5, max_size=5),
       st.floats(0.01, 1))
def test_ce_scales_with_error_mass(oa, base, c):
    scaled = [1 - c * (1 - x) for x in oa]
    assert corruption_error(scaled, base) == pytest.approx(c * corruption_error(oa, base), rel=1e-9, abs=1e-12)


# --- mCE ------------------------------------------------------------------


def test_mean_ce_examples():
    assert mean_ce([1.0] * 7) == 1.0
    assert mean_ce([0, 0, 0, 0, 0, 0, 7]) == 1.0


@pytest.mark.parametrize("n", [6, 8])
def test_mean_ce_needs_seven(n):
    with pytest.raises(ValidationError):
        mean_ce([1.0] * n)


# --- baseline table -------------------------------------------------------


def test_identity_baseline_reports_raw_error_mass():
    table = BaselineTable.identity()
    assert "not DGCNN" in table.name
    report = build_report(full_sets(0.7), table)
    for k in ATOMIC_KINDS:
        assert report.ce[k.value] == pytest.approx(5 * 0.3)


def test_baseline_requires_all_35_entries():
    entries = {name: 0.8 for name in SET_NAMES[:-1]}
    with pytest.raises(ValidationError, match="rotate_5"):
        BaselineTable(entries)


@pytest.mark.parametrize("bad", [0.0, 1.0, 1.2])
def test_baseline_entries_in_open_unit_interval(bad):
    entries = {name: 0.8 for name in SET_NAMES}
    entries["jitter_2"] = bad
    with pytest.raises(ValidationError, match="jitter_2"):
        BaselineTable(entries)


def test_baseline_load_both_layouts(tmp_path):
    entries = {name: 0.5 + i / 100 for i, name in enumerate(SET_NAMES)}
    (tmp_path / "flat.json").write_text(json.dumps(entries))
    (tmp_path / "named.json").write_text(json.dumps({"name": "ref", "entries": entries}))
    flat = BaselineTable.load(tmp_path / "flat.json")
    named = BaselineTable.load(tmp_path / "named.json")
    assert flat.entries == named.entries and named.name == "ref"
    assert flat.row("add_local") == [entries[f"add_local_{s}"] for s in range(1, 6)]
    assert BaselineTable(flat.to_dict()["entries"]).entries == flat.entries


# --- report ---------------------------------------------------------------


def test_report_equal_to_baseline_gives_unit_ce():
    base = {name: 0.5 + i / 100 for i, name in enumerate(SET_NAMES)}
    report = build_report(dict(base), BaselineTable(base))
    assert all(v == pytest.approx(1.0) for v in report.ce.values())
    assert report.mce == pytest.approx(1.0)
    assert len(report.ce) == 7


def test_report_values():
    sets = full_sets(0.7, jitter_3=0.2)
    report = build_report(sets, BaselineTable.identity(), model="m")
    assert report.clean_oa == 0.9
    assert report.moa == pytest.approx((34 * 0.7 + 0.2) / 35)
    assert report.kind_oa("jitter") == pytest.approx((4 * 0.7 + 0.2) / 5)
    assert report.mce == pytest.approx(np.mean(list(report.ce.values())))


def test_missing_sets_are_a_hard_error():
    sets = full_sets()
    del sets["scale_3"], sets["rotate_1"]
    with pytest.raises(ValidationError) as info:
        build_report(sets, BaselineTable.identity())
    assert "scale_3" in str(info.value) and "rotate_1" in str(info.value)


def test_report_round_trip_is_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    sets = {name: float(rng.uniform(0.3, 0.95)) for name in SET_NAMES}
    sets["clean"] = 0.93
    report = build_report(sets, BaselineTable.identity(), model="x")
    path = tmp_path / "r.json"
    path.write_text(report.to_json())
    loaded = EvalReport.load(path)
    assert loaded.moa == report.moa and loaded.mce == report.mce
    assert loaded.to_json() == report.to_json()


def test_render_table_column_order():
    report = build_report(full_sets(), BaselineTable.identity(), model="pvada")
    text = render_table([report])
    header = text.splitlines()[0]
    titles = ["Clean", "mOA", "Scale", "Jitter", "Drop-G", "Drop-L", "Add-G", "Add-L", "Rotate"]
    positions = [header.index(t) for t in titles]
    assert positions == sorted(positions)
    assert "pvada" in text and "mCE" in text


def test_render_table_several_models():
    a = build_report(full_sets(0.7), BaselineTable.identity(), model="a")
    b = build_report(full_sets(0.8), BaselineTable.identity(), model="bbbbbbbbbb")
    lines = render_table([a, b]).splitlines()
    assert sum(line.startswith("a ") for line in lines) == 2
    assert sum(line.startswith("bbbbbbbbbb") for line in lines) == 2
