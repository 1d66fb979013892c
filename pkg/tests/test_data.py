import numpy as np
import pytest

from ivcm.data import (
    LongitudinalDataset,
    SubjectTrajectory,
    apply_gap_filter,
    load_dataset,
    write_dataset,
)
from ivcm.errors import (
    DuplicateTime,
    MalformedInput,
    MissingFollowUp,
    NonFiniteValue,
    TimeOutOfRange,
)


def write_files(tmp_path, obs_rows, fu_rows, obs_header="subject_id,time,outcome,x1"):
    obs = tmp_path / "obs.csv"
    fu = tmp_path / "fu.csv"
    obs.write_text(obs_header + "\n" + "\n".join(obs_rows) + ("\n" if obs_rows else ""))
    fu.write_text("subject_id,followup\n" + "\n".join(fu_rows) + "\n")
    return obs, fu


def make_subject(sid, times, outcomes=None, follow_up=10.0, d=1):
    times = np.asarray(times, dtype=float)
    m = times.shape[0]
    outcomes = np.zeros(m) if outcomes is None else np.asarray(outcomes, float)
    return SubjectTrajectory(sid, follow_up, times, outcomes, np.ones((m, d)))


class TestLoadDataset:
    def test_basic_parse(self, tmp_path):
        obs, fu = write_files(
            tmp_path,
            ["s1,0.0,1.0,0.5", "s1,2.0,1.5,0.5"],
            ["s1,10.0"],
        )
        ds = load_dataset(obs, fu, tau=10.0)
        assert ds.n_subjects == 1
        assert ds.d == 2
        subj = ds.subjects[0]
        assert subj.n_observations == 2
        np.testing.assert_array_equal(subj.covariates[0], [1.0, 0.5])
        assert ds.covariate_names == ("intercept", "x1")

    def test_rows_sorted_by_time(self, tmp_path):
        obs, fu = write_files(
            tmp_path, ["s1,2.0,1.0,0.0", "s1,0.0,2.0,0.0"], ["s1,10.0"])
        ds = load_dataset(obs, fu, tau=10.0)
        np.testing.assert_array_equal(ds.subjects[0].times, [0.0, 2.0])
        np.testing.assert_array_equal(ds.subjects[0].outcomes, [2.0, 1.0])

    def test_time_beyond_followup_rejected(self, tmp_path):
        obs, fu = write_files(tmp_path, ["s1,11.0,1.0,0.0"], ["s1,10.0"])
        with pytest.raises(TimeOutOfRange):
            load_dataset(obs, fu, tau=20.0)

    def test_negative_time_rejected(self, tmp_path):
        obs, fu = write_files(tmp_path, ["s1,-0.5,1.0,0.0"], ["s1,10.0"])
        with pytest.raises(TimeOutOfRange):
            load_dataset(obs, fu, tau=10.0)

    def test_missing_followup(self, tmp_path):
        obs, fu = write_files(tmp_path, ["s1,1.0,1.0,0.0"], ["s2,10.0"])
        with pytest.raises(MissingFollowUp):
            load_dataset(obs, fu, tau=10.0)

    def test_duplicate_time_rejected(self, tmp_path):
        obs, fu = write_files(
            tmp_path, ["s1,1.0,1.0,0.0", "s1,1.0,2.0,0.0"], ["s1,10.0"])
        with pytest.raises(DuplicateTime):
            load_dataset(obs, fu, tau=10.0)

    def test_non_finite_rejected(self, tmp_path):
        obs, fu = write_files(tmp_path, ["s1,1.0,nan,0.0"], ["s1,10.0"])
        with pytest.raises(NonFiniteValue):
            load_dataset(obs, fu, tau=10.0)

    def test_missing_field_rejected(self, tmp_path):
        obs, fu = write_files(tmp_path, ["s1,1.0,,0.0"], ["s1,10.0"])
        with pytest.raises(MalformedInput):
            load_dataset(obs, fu, tau=10.0)

    def test_bad_header_rejected(self, tmp_path):
        obs, fu = write_files(tmp_path, ["s1,1.0,1.0"], ["s1,10.0"],
                              obs_header="id,time,outcome")
        with pytest.raises(MalformedInput):
            load_dataset(obs, fu, tau=10.0)

    def test_followup_only_subject_kept_empty(self, tmp_path):
        obs, fu = write_files(tmp_path, ["s1,1.0,1.0,0.0"],
                              ["s1,10.0", "s2,5.0"])
        ds = load_dataset(obs, fu, tau=10.0)
        assert ds.n_subjects == 2
        empty = [s for s in ds.subjects if s.subject_id == "s2"][0]
        assert empty.n_observations == 0

    def test_row_permutation_invariance(self, tmp_path):
        rows = ["s2,1.5,0.3,1.2", "s1,0.0,1.0,0.5", "s1,2.0,1.5,0.5",
                "s2,0.5,0.1,1.2"]
        obs1, fu1 = write_files(tmp_path, rows, ["s1,10.0", "s2,9.0"])
        ds1 = load_dataset(obs1, fu1, tau=10.0)
        sub2 = tmp_path / "shuffled"
        sub2.mkdir()
        obs2, fu2 = write_files(sub2, rows[::-1], ["s2,9.0", "s1,10.0"])
        ds2 = load_dataset(obs2, fu2, tau=10.0)
        assert [s.subject_id for s in ds1.subjects] == \
            [s.subject_id for s in ds2.subjects]
        for a, b in zip(ds1.subjects, ds2.subjects):
            np.testing.assert_array_equal(a.times, b.times)
            np.testing.assert_array_equal(a.outcomes, b.outcomes)
            np.testing.assert_array_equal(a.covariates, b.covariates)


class TestRoundTrip:
    def test_write_then_load_is_identity(self, tmp_path):
        rng = np.random.default_rng(7)
        subjects = []
        for i in range(5):
            m = rng.integers(0, 6)
            times = np.sort(rng.uniform(0, 9, m))
            covs = np.hstack([np.ones((m, 1)), rng.normal(0, 3, (m, 2))])
            subjects.append(SubjectTrajectory(
                f"id{i}", 9.0 + i * 0.1, times, rng.normal(0, 5, m), covs))
        ds = LongitudinalDataset(tuple(subjects), d=3, tau=10.0)
        obs, fu = tmp_path / "o.csv", tmp_path / "f.csv"
        write_dataset(ds, obs, fu)
        back = load_dataset(obs, fu, tau=10.0)
        assert back.n_subjects == ds.n_subjects
        for a, b in zip(ds.subjects, back.subjects):
            assert a.subject_id == b.subject_id
            assert a.follow_up == b.follow_up
            np.testing.assert_array_equal(a.times, b.times)
            np.testing.assert_array_equal(a.outcomes, b.outcomes)
            np.testing.assert_array_equal(a.covariates, b.covariates)


class TestGapFilter:
    def test_drops_near_duplicates(self):
        ds = LongitudinalDataset(
            (make_subject("a", [0.0, 0.02, 1.0]),), d=1, tau=10.0)
        out = apply_gap_filter(ds, 1.0 / 12.0)
        np.testing.assert_array_equal(out.subjects[0].times, [0.0, 1.0])

    def test_drops_sparse_subject(self):
        ds = LongitudinalDataset(
            (make_subject("a", [0.0, 0.5]), make_subject("b", [0.0, 5.0])),
            d=1, tau=10.0)
        out = apply_gap_filter(ds, 1.0)
        assert [s.subject_id for s in out.subjects] == ["b"]

    def test_zero_gap_is_identity(self):
        ds = LongitudinalDataset(
            (make_subject("a", [0.0, 0.5, 1.0]), make_subject("b", [2.0, 3.0])),
            d=1, tau=10.0)
        out = apply_gap_filter(ds, 0.0)
        assert out.n_observations == ds.n_observations
        for a, b in zip(ds.subjects, out.subjects):
            np.testing.assert_array_equal(a.times, b.times)

    def test_idempotent(self):
        rng = np.random.default_rng(3)
        subjects = tuple(
            make_subject(f"s{i}", np.sort(rng.uniform(0, 10, 12)))
            for i in range(6))
        ds = LongitudinalDataset(subjects, d=1, tau=10.0)
        once = apply_gap_filter(ds, 0.7)
        twice = apply_gap_filter(once, 0.7)
        assert once.n_observations == twice.n_observations
        for a, b in zip(once.subjects, twice.subjects):
            np.testing.assert_array_equal(a.times, b.times)

    def test_keep_sparse_subjects_flag(self):
        ds = LongitudinalDataset(
            (make_subject("a", [0.0, 0.5]),), d=1, tau=10.0)
        out = apply_gap_filter(ds, 1.0, min_subject_observations=0)
        assert out.n_subjects == 1
        assert out.subjects[0].n_observations == 1


class TestInvariants:
    def test_intercept_column_enforced(self):
        with pytest.raises(MalformedInput):
            SubjectTrajectory("a", 10.0, np.array([1.0]), np.array([0.0]),
                              np.array([[2.0]]))

    def test_strictly_increasing_times(self):
        with pytest.raises(DuplicateTime):
            SubjectTrajectory("a", 10.0, np.array([1.0, 1.0]),
                              np.zeros(2), np.ones((2, 1)))

    def test_followup_above_tau_rejected(self):
        with pytest.raises(TimeOutOfRange):
            LongitudinalDataset((make_subject("a", [1.0], follow_up=11.0),),
                                d=1, tau=10.0)

    def test_duplicate_subject_ids_rejected(self):
        with pytest.raises(MalformedInput):
            LongitudinalDataset(
                (make_subject("a", [1.0]), make_subject("a", [2.0])),
                d=1, tau=10.0)
