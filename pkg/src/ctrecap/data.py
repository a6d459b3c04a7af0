"""Encounter histories, capture-occasion grids, and survey effort.

File formats (comma-separated UTF-8 with a header row, delimiter overridable):

* ``effort.csv``: columns ``time,area_1,...,area_M`` with binary effort
  flags.  Times are days since study start and must include day 0.
* ``histories.csv``: columns ``id,time,obs`` with one row per sighting (rows
  with obs = 0 are accepted and redundant); unlisted occasions are filled
  with obs = 0.  Any extra columns are read as time-constant individual
  covariates (e.g. ``sex``).
"""

from __future__ import annotations

import csv
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import IO, Mapping

import numpy as np


class FormatError(ValueError):
    """Malformed tabular input (bad header, bad value, unordered times)."""


class ValidationError(ValueError):
    """Well-formed input that violates an encounter-data invariant."""


def _diagnose(message: str) -> None:
    print(message, file=sys.stderr)


@dataclass(frozen=True, eq=False)
class OccasionGrid:
    """Global capture-occasion times with per-area survey effort.

    `times` has length T+1 with times[0] = 0; `effort` is (T+1, M) binary,
    effort[u, m-1] = 1 iff area m was surveyed at occasion u.  Occasions
    with no surveyed area carry no information and are rejected unless
    `allow_unsurveyed` is set (the likelihood treats them as identity
    updates; only simulations and tests construct them).
    """

    times: np.ndarray
    effort: np.ndarray
    allow_unsurveyed: bool = field(default=False, repr=False, compare=False)

    def __post_init__(self):
        times = np.array(self.times, dtype=float).ravel()
        effort = np.atleast_2d(np.array(self.effort, dtype=np.int8))
        if times.size == 0:
            raise ValidationError("occasion grid is empty")
        if not np.all(np.isfinite(times)):
            raise ValidationError("occasion times must be finite")
        if times[0] != 0.0:
            raise ValidationError(f"first occasion must be at day 0, got {times[0]}")
        if np.any(np.diff(times) <= 0):
            raise ValidationError("occasion times must be strictly increasing")
        if effort.shape[0] != times.size:
            raise ValidationError(
                f"effort has {effort.shape[0]} rows for {times.size} occasions"
            )
        if not np.isin(effort, (0, 1)).all():
            raise ValidationError("effort flags must be 0 or 1")
        if not self.allow_unsurveyed:
            dead_rows = np.flatnonzero(effort[1:].sum(axis=1) == 0) + 1
            if dead_rows.size:
                raise ValidationError(
                    f"occasion at day {times[dead_rows[0]]} has no surveyed area"
                )
        times.setflags(write=False)
        effort.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "effort", effort)

    @property
    def n_occasions(self) -> int:
        """T+1, the number of capture occasions including t_0."""
        return self.times.size

    @property
    def n_areas(self) -> int:
        return self.effort.shape[1]

    @property
    def span(self) -> float:
        return float(self.times[-1])


@dataclass(frozen=True, eq=False)
class EncounterHistory:
    """One individual's observation sequence aligned with an OccasionGrid.

    observations[u] is 0 (not seen) or the 1-based alive state in which the
    individual was seen; first_capture is the index g of the first sighting.
    """

    individual_id: str
    observations: np.ndarray
    first_capture: int
    covariates: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        obs = np.array(self.observations, dtype=np.int64).ravel()
        if obs.size == 0:
            raise ValidationError(f"{self.individual_id}: empty observation vector")
        if np.any(obs < 0):
            raise ValidationError(f"{self.individual_id}: negative observation code")
        nonzero = np.flatnonzero(obs)
        if nonzero.size == 0:
            raise ValidationError(f"{self.individual_id}: no sightings at all")
        g = int(self.first_capture)
        if g != nonzero[0]:
            raise ValidationError(
                f"{self.individual_id}: first_capture={g} but first sighting is at index {nonzero[0]}"
            )
        obs.setflags(write=False)
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "first_capture", g)
        object.__setattr__(self, "covariates", dict(self.covariates))

    @property
    def n_sightings(self) -> int:
        return int(np.count_nonzero(self.observations))


@dataclass(frozen=True, eq=False)
class EncounterData:
    """All encounter histories aligned to one occasion grid."""

    grid: OccasionGrid
    histories: tuple[EncounterHistory, ...]
    n_states: int

    def __post_init__(self):
        if self.n_states < 1:
            raise ValidationError("need at least one alive state")
        if self.grid.n_areas != self.n_states:
            raise ValidationError(
                f"effort has {self.grid.n_areas} areas for {self.n_states} states"
            )
        histories = tuple(self.histories)
        seen_ids = set()
        for h in histories:
            if h.individual_id in seen_ids:
                raise ValidationError(f"duplicate individual id {h.individual_id!r}")
            seen_ids.add(h.individual_id)
            if h.observations.size != self.grid.n_occasions:
                raise ValidationError(
                    f"{h.individual_id}: {h.observations.size} observations for "
                    f"{self.grid.n_occasions} occasions"
                )
            if np.any(h.observations > self.n_states):
                raise ValidationError(
                    f"{h.individual_id}: observation code exceeds {self.n_states}"
                )
            seen = np.flatnonzero(h.observations)
            unsurveyed = seen[
                self.grid.effort[seen, h.observations[seen] - 1] == 0
            ]
            if unsurveyed.size:
                u = int(unsurveyed[0])
                raise ValidationError(
                    f"{h.individual_id}: observed in area {h.observations[u]} at day "
                    f"{self.grid.times[u]} but that area was not surveyed"
                )
        object.__setattr__(self, "histories", histories)

    @property
    def n_individuals(self) -> int:
        return len(self.histories)


@dataclass(frozen=True)
class DataSummary:
    n_individuals: int
    n_occasions: int
    per_area_occasions: tuple[int, ...]
    sightings_min: int
    sightings_median: float
    sightings_max: int


def summarize(data: EncounterData) -> DataSummary:
    """Counts of individuals, occasions, per-area surveys and sightings."""
    counts = [h.n_sightings for h in data.histories]
    return DataSummary(
        n_individuals=data.n_individuals,
        n_occasions=data.grid.n_occasions,
        per_area_occasions=tuple(int(c) for c in data.grid.effort.sum(axis=0)),
        sightings_min=int(min(counts)) if counts else 0,
        sightings_median=float(np.median(counts)) if counts else 0.0,
        sightings_max=int(max(counts)) if counts else 0,
    )


# -- parsing -------------------------------------------------------------------


def _open_source(source) -> tuple[IO[str], bool]:
    if isinstance(source, (str, Path)):
        return open(source, "r", encoding="utf-8", newline=""), True
    return source, False


def _read_rows(source, expected_prefix: list[str], label: str, delimiter: str):
    stream, owned = _open_source(source)
    try:
        reader = csv.reader(stream, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{label}: empty stream") from None
        header = [h.strip() for h in header]
        if header[: len(expected_prefix)] != expected_prefix:
            raise FormatError(
                f"{label}: header must start with {','.join(expected_prefix)}, got {','.join(header)}"
            )
        rows = [row for row in reader if row and any(cell.strip() for cell in row)]
    finally:
        if owned:
            stream.close()
    return header, rows


def _parse_float(cell: str, label: str) -> float:
    try:
        return float(cell)
    except ValueError:
        raise FormatError(f"{label}: not a number: {cell!r}") from None


def parse_effort(source, delimiter: str = ",") -> OccasionGrid:
    """Read an effort table into an OccasionGrid."""
    header, rows = _read_rows(source, ["time"], "effort", delimiter)
    areas = header[1:]
    if not areas:
        raise FormatError("effort: no area columns")
    times, flags = [], []
    for row in rows:
        if len(row) != len(header):
            raise FormatError(f"effort: row has {len(row)} cells, expected {len(header)}")
        times.append(_parse_float(row[0], "effort"))
        row_flags = []
        for cell in row[1:]:
            value = _parse_float(cell, "effort")
            if value not in (0.0, 1.0):
                raise FormatError(f"effort: flags must be 0 or 1, got {cell!r}")
            row_flags.append(int(value))
        flags.append(row_flags)
    t = np.asarray(times, dtype=float)
    if np.any(np.diff(t) <= 0):
        bad = int(np.flatnonzero(np.diff(t) <= 0)[0]) + 1
        raise FormatError(f"effort: times not strictly increasing at row {bad + 1}")
    try:
        return OccasionGrid(t, np.asarray(flags, dtype=np.int8))
    except ValidationError as err:
        _diagnose(f"effort: {err}")
        raise


def parse_encounter_data(
    histories_source,
    effort_source,
    delimiter: str = ",",
) -> EncounterData:
    """Ingest histories and effort tables into validated EncounterData.

    The occasion grid is the union of times in the effort stream; each
    individual's unlisted occasions are filled with obs = 0 and
    first_capture is the first sighting.  Violations are reported on stderr
    and raised.
    """
    grid = parse_effort(effort_source, delimiter)
    M = grid.n_areas
    header, rows = _read_rows(histories_source, ["id", "time", "obs"], "histories", delimiter)
    covariate_names = header[3:]

    time_index = {t: u for u, t in enumerate(grid.times)}
    order: list[str] = []
    obs_by_id: dict[str, np.ndarray] = {}
    covs_by_id: dict[str, dict[str, float]] = {}
    for row in rows:
        if len(row) != len(header):
            raise FormatError(f"histories: row has {len(row)} cells, expected {len(header)}")
        ind = row[0].strip()
        t = _parse_float(row[1], "histories")
        obs_value = _parse_float(row[2], "histories")
        if obs_value != int(obs_value) or not 0 <= obs_value <= M:
            raise FormatError(
                f"histories: obs must be an integer in 0..{M}, got {row[2]!r}"
            )
        obs_value = int(obs_value)
        u = time_index.get(t)
        if u is None:
            msg = f"{ind}: time {t} does not match any occasion in the effort table"
            _diagnose(f"histories: {msg}")
            raise ValidationError(msg)
        if ind not in obs_by_id:
            order.append(ind)
            obs_by_id[ind] = np.zeros(grid.n_occasions, dtype=np.int64)
            covs_by_id[ind] = {}
        stored = obs_by_id[ind][u]
        if stored and obs_value and stored != obs_value:
            raise FormatError(
                f"histories: conflicting observations for {ind} at time {t}"
            )
        if obs_value:
            obs_by_id[ind][u] = obs_value
        covs = {name: _parse_float(row[3 + i], "histories") for i, name in enumerate(covariate_names)}
        if covs_by_id[ind] and covs != covs_by_id[ind]:
            raise ValidationError(
                f"{ind}: covariates change over time; only time-constant covariates are supported"
            )
        covs_by_id[ind] = covs

    histories = []
    for ind in order:
        obs = obs_by_id[ind]
        nonzero = np.flatnonzero(obs)
        try:
            if nonzero.size == 0:
                raise ValidationError(f"{ind}: no sightings at all")
            histories.append(
                EncounterHistory(
                    individual_id=ind,
                    observations=obs,
                    first_capture=int(nonzero[0]),
                    covariates=covs_by_id[ind],
                )
            )
        except ValidationError as err:
            _diagnose(f"histories: {err}")
            raise
    try:
        return EncounterData(grid=grid, histories=tuple(histories), n_states=M)
    except ValidationError as err:
        _diagnose(f"histories: {err}")
        raise


# -- serialisation --------------------------------------------------------------


def write_effort(grid: OccasionGrid, target, delimiter: str = ",") -> None:
    stream, owned = _open_target(target)
    try:
        writer = csv.writer(stream, delimiter=delimiter, lineterminator="\n")
        writer.writerow(["time"] + [f"area_{m}" for m in range(1, grid.n_areas + 1)])
        for t, flags in zip(grid.times, grid.effort):
            writer.writerow([repr(float(t))] + [int(f) for f in flags])
    finally:
        if owned:
            stream.close()


def write_histories(data: EncounterData, target, delimiter: str = ",") -> None:
    """One row per sighting; covariates appended as extra columns."""
    covariate_names = sorted({k for h in data.histories for k in h.covariates})
    stream, owned = _open_target(target)
    try:
        writer = csv.writer(stream, delimiter=delimiter, lineterminator="\n")
        writer.writerow(["id", "time", "obs"] + covariate_names)
        for h in data.histories:
            extras = [repr(float(h.covariates[k])) for k in covariate_names]
            for u in np.flatnonzero(h.observations):
                writer.writerow(
                    [h.individual_id, repr(float(data.grid.times[u])), int(h.observations[u])]
                    + extras
                )
    finally:
        if owned:
            stream.close()


def write_encounter_data(
    data: EncounterData,
    histories_target,
    effort_target,
    delimiter: str = ",",
) -> None:
    write_histories(data, histories_target, delimiter)
    write_effort(data.grid, effort_target, delimiter)


def _open_target(target) -> tuple[IO[str], bool]:
    if isinstance(target, (str, Path)):
        return open(target, "w", encoding="utf-8", newline=""), True
    return target, False
