"""Cohort data model, loading, and design construction."""

import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from longpred.cohort import (
    COLUMN_NAMES,
    CohortDataset,
    DesignPair,
    Observation,
    Subject,
    build_design,
    load_cohort,
    save_cohort,
    stack_designs,
)
from longpred.errors import (
    EmptyResponseError,
    RecordError,
    SchemaError,
    SubjectError,
)
from tests.conftest import make_subject


def write_csv(path, rows, header="subject_id,time_months,cd4,wbc,lymph_pct"):
    path.write_text(header + "\n" + "\n".join(rows) + "\n")
    return path


class TestTypes:
    def test_observation_rejects_nonpositive_cd4(self):
        with pytest.raises(RecordError):
            Observation(time_months=0.0, cd4=0.0, wbc=5.0, lymph_pct=25.0)
        with pytest.raises(RecordError):
            Observation(time_months=0.0, cd4=-5.0, wbc=5.0, lymph_pct=25.0)

    def test_observation_rejects_bad_lymph(self):
        with pytest.raises(RecordError):
            Observation(time_months=0.0, cd4=100.0, wbc=5.0, lymph_pct=0.0)
        with pytest.raises(RecordError):
            Observation(time_months=0.0, cd4=100.0, wbc=5.0, lymph_pct=101.0)

    def test_observation_rejects_negative_time(self):
        with pytest.raises(RecordError):
            Observation(time_months=-1.0, cd4=100.0, wbc=5.0, lymph_pct=25.0)

    def test_subject_needs_baseline(self):
        with pytest.raises(SubjectError):
            make_subject("a", [1.0, 2.0], [100, 110])

    def test_subject_times_strictly_increasing(self):
        with pytest.raises(SubjectError):
            make_subject("a", [0.0, 2.0, 2.0], [100, 110, 120])

    def test_dataset_unique_ids(self):
        s = make_subject("a", [0.0, 1.0], [100, 110])
        with pytest.raises(SubjectError):
            CohortDataset(subjects=(s, s))

    def test_dataset_counts(self):
        subjects = tuple(
            make_subject(f"s{i}", [0.0, 1.0, 2.0, 3.0], [100, 110, 120, 130])
            for i in range(3)
        )
        data = CohortDataset(subjects=subjects)
        assert data.n_subjects == 3
        assert data.n_records == 12
        assert data.n_post_baseline == 9

    def test_design_pair_shape_checks(self):
        with pytest.raises(SubjectError):
            DesignPair(x=np.zeros((3, 5)), z=np.zeros((3, 2)))
        with pytest.raises(SubjectError):
            DesignPair(x=np.zeros((3, 12)), z=np.zeros((2, 2)))


class TestLoad:
    def test_counts_preserved(self, tmp_path):
        rows = []
        for sid in ("p1", "p2", "p3"):
            for t in (0, 1, 2, 3):
                rows.append(f"{sid},{t},150,5.0,25.0")
        data = load_cohort(write_csv(tmp_path / "c.csv", rows))
        assert data.n_subjects == 3
        assert data.n_records == 12

    def test_negative_cd4_is_record_error(self, tmp_path):
        rows = ["p1,0,150,5,25", "p1,1,-5,5,25"]
        with pytest.raises(RecordError) as exc:
            load_cohort(write_csv(tmp_path / "c.csv", rows))
        assert exc.value.row_index == 2

    def test_missing_column_is_schema_error(self, tmp_path):
        path = tmp_path / "c.csv"
        path.write_text("subject_id,time_months,cd4,wbc\np1,0,150,5\n")
        with pytest.raises(SchemaError):
            load_cohort(path)

    def test_no_baseline_names_subject(self, tmp_path):
        rows = ["p1,0,150,5,25", "p1,1,160,5,25", "p2,1,120,5,25"]
        with pytest.raises(SubjectError, match="p2"):
            load_cohort(write_csv(tmp_path / "c.csv", rows))

    def test_schema_remap(self, tmp_path):
        path = tmp_path / "c.csv"
        path.write_text("pid,months,cd4count,white,lpct\nq1,0,150,5,25\nq1,2,160,5,25\n")
        data = load_cohort(path, schema={
            "subject_id": "pid", "time_months": "months", "cd4": "cd4count",
            "wbc": "white", "lymph_pct": "lpct"})
        assert data.subjects[0].id == "q1"
        assert data.n_records == 2

    def test_missing_covariate_row_dropped_with_warning(self, tmp_path, caplog):
        rows = ["p1,0,150,5,25", "p1,1,160,,25", "p1,2,170,5,25"]
        with caplog.at_level("WARNING", logger="longpred.cohort"):
            data = load_cohort(write_csv(tmp_path / "c.csv", rows))
        assert data.n_records == 2
        assert any("dropped" in r.message for r in caplog.records)

    def test_rows_sorted_by_time(self, tmp_path):
        rows = ["p1,2,170,5,25", "p1,0,150,5,25", "p1,1,160,5,25"]
        data = load_cohort(write_csv(tmp_path / "c.csv", rows))
        times = [o.time_months for o in data.subjects[0].observations]
        assert times == [0.0, 1.0, 2.0]

    def test_london_shaped_counts(self):
        # 270 subjects, 2635 records total -> 2365 post-baseline records
        subjects = []
        sizes = [9] * 270
        extra = 2635 - 270 * 9  # distribute the remainder one row at a time
        for i in range(extra):
            sizes[i] += 1
        for i, n in enumerate(sizes):
            times = [0.0] + [float(t) for t in range(1, n)]
            subjects.append(make_subject(f"s{i}", times, [150] * n))
        data = CohortDataset(subjects=tuple(subjects))
        assert data.n_subjects == 270
        assert data.n_records == 2635
        assert data.n_post_baseline == 2365


class TestBuildDesign:
    def test_hinge_at_knot(self):
        subj = make_subject("a", [0.0, 0.5, 2.0], [100, 120, 140])
        pair, _ = build_design(subj, knot_months=1.0)
        t_col = COLUMN_NAMES.index("time")
        h_col = COLUMN_NAMES.index("time_after_knot")
        assert pair.x[0, h_col] == 0.0   # t = 0.5
        assert pair.x[1, h_col] == 1.0   # t = 2.0
        assert pair.x[0, t_col] == 0.5

    def test_log10_baseline(self):
        subj = make_subject("a", [0.0, 1.0], [100, 120])
        pair, _ = build_design(subj)
        assert pair.x[0, COLUMN_NAMES.index("log10_cd4_baseline")] == pytest.approx(2.0, abs=1e-15)

    def test_dichotomized_response(self):
        subj = make_subject("a", [0.0, 1.0, 2.0], [100, 250, 180])
        _, resp = build_design(subj, outcome="dichotomized", threshold_k=200.0)
        assert resp.tolist() == [1.0, 0.0]

    def test_response_excludes_baseline(self):
        subj = make_subject("a", [0.0, 1.0, 2.0], [100, 250, 180])
        pair, resp = build_design(subj)
        assert pair.x.shape == (2, 12)
        assert resp.tolist() == [250.0, 180.0]

    def test_baseline_only_subject_rejected(self):
        subj = make_subject("a", [0.0], [100])
        with pytest.raises(EmptyResponseError):
            build_design(subj)

    def test_z_columns(self):
        subj = make_subject("a", [0.0, 0.5, 3.0], [100, 120, 140])
        pair, _ = build_design(subj)
        assert np.array_equal(pair.z, np.array([[1.0, 0.5], [1.0, 3.0]]))

    def test_interaction_columns(self):
        subj = make_subject("a", [0.0, 2.0], [100, 120], wbc=[6.0, 4.0], lymph=[30.0, 20.0])
        pair, _ = build_design(subj)
        row = pair.x[0]
        names = COLUMN_NAMES
        assert row[names.index("wbc_baseline")] == 6.0
        assert row[names.index("wbc")] == 4.0
        assert row[names.index("time_x_wbc_baseline")] == 2.0 * 6.0
        assert row[names.index("time_after_knot_x_lymph_baseline")] == 1.0 * 30.0


class TestProperties:
    @given(
        times=st.lists(st.floats(0.01, 40.0), min_size=1, max_size=10, unique=True),
        knot=st.floats(0.1, 12.0),
    )
    @settings(max_examples=100, deadline=None)
    def test_hinge_property(self, times, knot):
        assume(all(abs(t - knot) > 1e-9 for t in times))
        times = sorted(times)
        subj = make_subject("h", [0.0] + times, [100.0] * (len(times) + 1))
        pair, _ = build_design(subj, knot_months=knot)
        t = pair.x[:, COLUMN_NAMES.index("time")]
        h = pair.x[:, COLUMN_NAMES.index("time_after_knot")]
        assert np.all(t - h <= knot + 1e-12)
        at_cap = np.isclose(t - h, knot, rtol=1e-12, atol=1e-12)
        assert np.array_equal(at_cap, t >= knot)

    @given(
        cd4=st.lists(st.floats(1.0, 2000.0), min_size=2, max_size=8),
        k=st.floats(50.0, 400.0),
        dk=st.floats(1.0, 300.0),
    )
    @settings(max_examples=100, deadline=None)
    def test_dichotomization_ordering(self, cd4, k, dk):
        times = [0.0] + [float(i) for i in range(1, len(cd4) + 1)]
        subj = make_subject("o", times, [100.0] + cd4)
        _, y_low = build_design(subj, outcome="dichotomized", threshold_k=k)
        _, y_high = build_design(subj, outcome="dichotomized", threshold_k=k + dk)
        assert np.all(y_low >= y_high)

    def test_roundtrip_bitwise(self, sim_cohort, tmp_path):
        data, _ = sim_cohort
        path = tmp_path / "roundtrip.csv"
        save_cohort(data, path)
        reloaded = load_cohort(path)
        d0, r0, ids0 = stack_designs(data)
        d1, r1, ids1 = stack_designs(reloaded)
        assert ids0 == ids1
        for a, b, ra, rb in zip(d0, d1, r0, r1):
            assert np.array_equal(a.x, b.x)
            assert np.array_equal(a.z, b.z)
            assert np.array_equal(ra, rb)
