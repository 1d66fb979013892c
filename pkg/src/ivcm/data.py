"""Core data types for irregular longitudinal data plus CSV ingestion.

Data live in long format: one observation CSV (subject_id, time, outcome,
x1, ..., x{d-1}) and a follow-up sidecar CSV (subject_id, followup). The
intercept column is implicit in the files and prepended at load time, so
every covariate vector starts with an exact 1.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DuplicateTime,
    MalformedInput,
    MissingFollowUp,
    NonFiniteValue,
    TimeOutOfRange,
)

OBS_HEADER_PREFIX = ("subject_id", "time", "outcome")
FOLLOWUP_HEADER = ("subject_id", "followup")

# 17 significant digits round-trip any float64 exactly.
FLOAT_FMT = "%.17g"


@dataclass(frozen=True)
class ObservationRecord:
    """A single (time, outcome, covariates) measurement of one subject."""

    subject_id: str
    time: float
    outcome: float
    covariates: np.ndarray  # length d, covariates[0] == 1


@dataclass(frozen=True)
class SubjectTrajectory:
    """All observations of one subject, time-ordered, plus the follow-up time.

    Arrays are the primary storage; `records()` yields per-observation views.
    """

    subject_id: str
    follow_up: float
    times: np.ndarray       # (m,), strictly increasing, all <= follow_up
    outcomes: np.ndarray    # (m,)
    covariates: np.ndarray  # (m, d), first column identically 1

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        outcomes = np.asarray(self.outcomes, dtype=float)
        covariates = np.atleast_2d(np.asarray(self.covariates, dtype=float))
        if covariates.shape[0] != times.shape[0]:
            covariates = covariates.reshape(times.shape[0], -1)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "outcomes", outcomes)
        object.__setattr__(self, "covariates", covariates)
        for arr in (times, outcomes, covariates):
            arr.setflags(write=False)
        if not (np.isfinite(self.follow_up) and self.follow_up > 0):
            raise TimeOutOfRange(
                f"subject {self.subject_id!r}: follow-up must be finite and > 0, "
                f"got {self.follow_up}"
            )
        if times.size:
            if not (np.all(np.isfinite(times))
                    and np.all(np.isfinite(outcomes))
                    and np.all(np.isfinite(covariates))):
                raise NonFiniteValue(f"subject {self.subject_id!r} has non-finite values")
            if np.any(np.diff(times) <= 0):
                raise DuplicateTime(
                    f"subject {self.subject_id!r}: observation times must be strictly increasing"
                )
            if times[0] < 0 or times[-1] > self.follow_up:
                raise TimeOutOfRange(
                    f"subject {self.subject_id!r}: observation times must lie in "
                    f"[0, follow_up={self.follow_up}]"
                )
            if not np.all(covariates[:, 0] == 1.0):
                raise MalformedInput(
                    f"subject {self.subject_id!r}: first covariate column must be exactly 1"
                )

    @property
    def n_observations(self):
        return int(self.times.shape[0])

    def records(self):
        """Iterate observations as ObservationRecord objects."""
        for j in range(self.n_observations):
            yield ObservationRecord(
                self.subject_id,
                float(self.times[j]),
                float(self.outcomes[j]),
                self.covariates[j],
            )


@dataclass(frozen=True)
class LongitudinalDataset:
    """A collection of subject trajectories sharing covariate dimension d.

    Subjects are kept in sorted-by-id order so that datasets built from the
    same rows in any order compare equal. Immutable after construction.
    """

    subjects: tuple
    d: int
    tau: float
    covariate_names: tuple = field(default=())

    def __post_init__(self):
        subjects = tuple(self.subjects)
        object.__setattr__(self, "subjects", subjects)
        names = tuple(self.covariate_names) or tuple(
            ["intercept"] + [f"x{k}" for k in range(1, self.d)]
        )
        object.__setattr__(self, "covariate_names", names)
        if len(names) != self.d:
            raise MalformedInput(
                f"{len(names)} covariate names for d={self.d} covariates"
            )
        if not (np.isfinite(self.tau) and self.tau > 0):
            raise TimeOutOfRange(f"tau must be finite and > 0, got {self.tau}")
        seen = set()
        for s in subjects:
            if s.subject_id in seen:
                raise MalformedInput(f"duplicate subject id {s.subject_id!r}")
            seen.add(s.subject_id)
            if s.follow_up > self.tau:
                raise TimeOutOfRange(
                    f"subject {s.subject_id!r}: follow-up {s.follow_up} exceeds tau={self.tau}"
                )
            if s.n_observations and s.covariates.shape[1] != self.d:
                raise MalformedInput(
                    f"subject {s.subject_id!r}: covariate dimension "
                    f"{s.covariates.shape[1]} != d={self.d}"
                )

    @property
    def n_subjects(self):
        return len(self.subjects)

    @property
    def n_observations(self):
        """Total observation count N across subjects."""
        return sum(s.n_observations for s in self.subjects)

    def fitting_subjects(self):
        """Subjects contributing at least one observation."""
        return [s for s in self.subjects if s.n_observations > 0]

    def stacked(self):
        """Flatten to arrays in canonical layout (subject order, then time).

        Returns (times, outcomes, covariates, subject_index) where
        subject_index[r] is the position of row r's subject in `subjects`.
        Memoized; the returned arrays must not be modified.
        """
        cached = self.__dict__.get("_stacked")
        if cached is not None:
            return cached
        times, outcomes, covs, idx = [], [], [], []
        for i, s in enumerate(self.subjects):
            if s.n_observations == 0:
                continue
            times.append(s.times)
            outcomes.append(s.outcomes)
            covs.append(s.covariates)
            idx.append(np.full(s.n_observations, i, dtype=np.intp))
        if not times:
            cached = (np.empty(0), np.empty(0), np.empty((0, self.d)),
                      np.empty(0, dtype=np.intp))
        else:
            cached = (np.concatenate(times), np.concatenate(outcomes),
                      np.vstack(covs), np.concatenate(idx))
        object.__setattr__(self, "_stacked", cached)
        return cached


def _parse_float(text, where):
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise MalformedInput(f"{where}: cannot parse {text!r} as a number") from None
    if not math.isfinite(value):
        raise NonFiniteValue(f"{where}: non-finite value {text!r}")
    return value


def load_dataset(obs_path, followup_path, tau, covariate_names=None):
    """Load a dataset from an observation CSV and a follow-up CSV.

    Rows may appear in any order; the result is grouped by subject and
    sorted by time. Duplicate (subject, time) pairs, times outside
    [0, followup], non-finite values, and subjects with observations but no
    follow-up row are rejected.

    Parameters
    ----------
    obs_path : path
        CSV with header ``subject_id,time,outcome,x1,...`` (the intercept
        column is implicit and prepended).
    followup_path : path
        CSV with header ``subject_id,followup``; may list subjects without
        observations.
    tau : float
        Study horizon; all follow-up times must be in (0, tau].
    covariate_names : sequence of str, optional
        Overrides the names inferred from the header.

    Returns
    -------
    LongitudinalDataset
    """
    followups = {}
    with open(followup_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != FOLLOWUP_HEADER:
            raise MalformedInput(
                f"{followup_path}: expected header {','.join(FOLLOWUP_HEADER)}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise MalformedInput(f"{followup_path}:{lineno}: expected 2 fields")
            sid = row[0].strip()
            if sid in followups:
                raise MalformedInput(f"{followup_path}:{lineno}: duplicate subject {sid!r}")
            followups[sid] = _parse_float(row[1], f"{followup_path}:{lineno} followup")

    by_subject = {}
    with open(obs_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise MalformedInput(f"{obs_path}: empty file")
        header = tuple(h.strip() for h in header)
        if header[:3] != OBS_HEADER_PREFIX:
            raise MalformedInput(
                f"{obs_path}: header must start with {','.join(OBS_HEADER_PREFIX)}"
            )
        x_names = list(header[3:])
        d = 1 + len(x_names)
        n_fields = len(header)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n_fields or any(f.strip() == "" for f in row):
                raise MalformedInput(
                    f"{obs_path}:{lineno}: expected {n_fields} non-empty fields"
                )
            where = f"{obs_path}:{lineno}"
            sid = row[0].strip()
            time = _parse_float(row[1], f"{where} time")
            outcome = _parse_float(row[2], f"{where} outcome")
            xs = [_parse_float(v, f"{where} {x_names[k]}") for k, v in enumerate(row[3:])]
            by_subject.setdefault(sid, []).append((time, outcome, xs))

    subjects = []
    for sid in sorted(set(by_subject) | set(followups)):
        rows = by_subject.get(sid, [])
        if rows and sid not in followups:
            raise MissingFollowUp(f"subject {sid!r} has observations but no follow-up row")
        follow_up = followups[sid]
        rows.sort(key=lambda r: r[0])
        times = np.array([r[0] for r in rows], dtype=float)
        if np.any(times < 0) or np.any(times > follow_up):
            raise TimeOutOfRange(
                f"subject {sid!r}: observation time outside [0, followup={follow_up}]"
            )
        if times.size > 1 and np.any(np.diff(times) == 0):
            raise DuplicateTime(f"subject {sid!r} has duplicate observation times")
        outcomes = np.array([r[1] for r in rows], dtype=float)
        covs = np.hstack([
            np.ones((len(rows), 1)),
            np.array([r[2] for r in rows], dtype=float).reshape(len(rows), d - 1),
        ]) if rows else np.empty((0, d))
        subjects.append(SubjectTrajectory(sid, follow_up, times, outcomes, covs))

    names = tuple(covariate_names) if covariate_names else tuple(["intercept"] + x_names)
    return LongitudinalDataset(tuple(subjects), d=d, tau=float(tau),
                               covariate_names=names)


def write_dataset(ds, obs_path, followup_path):
    """Write a dataset back to the two-file CSV format.

    Numeric text uses 17 significant digits, so load_dataset(write_dataset(ds))
    reproduces ds exactly.
    """
    with open(obs_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(OBS_HEADER_PREFIX) + list(ds.covariate_names[1:]))
        for s in ds.subjects:
            for j in range(s.n_observations):
                writer.writerow(
                    [s.subject_id, FLOAT_FMT % s.times[j], FLOAT_FMT % s.outcomes[j]]
                    + [FLOAT_FMT % v for v in s.covariates[j, 1:]]
                )
    with open(followup_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(FOLLOWUP_HEADER))
        for s in ds.subjects:
            writer.writerow([s.subject_id, FLOAT_FMT % s.follow_up])


def apply_gap_filter(ds, min_gap, min_subject_observations=2):
    """Drop near-duplicate visits and sparsely observed subjects.

    Scanning each subject in time order, an observation is dropped when its
    gap from the previously retained observation is < min_gap. Subjects left
    with fewer than `min_subject_observations` observations are removed from
    the dataset entirely (set it to 0 to keep them, e.g. so they still
    contribute intensity-model risk sets).
    """
    if min_gap < 0:
        raise ValueError("min_gap must be >= 0")
    kept_subjects = []
    for s in ds.subjects:
        if s.n_observations == 0:
            keep_mask = np.zeros(0, dtype=bool)
        else:
            keep = []
            last = None
            for j, t in enumerate(s.times):
                if last is None or t - last >= min_gap:
                    keep.append(j)
                    last = t
            keep_mask = np.zeros(s.n_observations, dtype=bool)
            keep_mask[keep] = True
        kept = int(keep_mask.sum())
        if kept < min_subject_observations:
            continue
        if kept == s.n_observations:
            kept_subjects.append(s)
        else:
            kept_subjects.append(SubjectTrajectory(
                s.subject_id, s.follow_up,
                s.times[keep_mask], s.outcomes[keep_mask], s.covariates[keep_mask],
            ))
    return LongitudinalDataset(tuple(kept_subjects), d=ds.d, tau=ds.tau,
                               covariate_names=ds.covariate_names)


def dataset_from_arrays(subject_ids, follow_ups, times, outcomes, covariates,
                        tau, covariate_names=None):
    """Build a dataset from per-subject arrays (helper for simulation/tests).

    Each entry of `covariates` must be shaped (m_i, d), including m_i == 0.
    """
    subjects = []
    for sid, cu, t, y, x in zip(subject_ids, follow_ups, times, outcomes, covariates):
        subjects.append(SubjectTrajectory(str(sid), float(cu), t, y, x))
    subjects.sort(key=lambda s: s.subject_id)
    d = subjects[0].covariates.shape[1] if subjects else 1
    return LongitudinalDataset(tuple(subjects), d=d, tau=float(tau),
                               covariate_names=tuple(covariate_names or ()))
