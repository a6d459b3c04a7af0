"""Synthetic encounter data: trajectories, survey occasions, detections.

The state process is simulated exactly under intensities held constant over
each calendar day (rates use the day-of-year of floor(t)).  Holding times
are exponential within each day-constant segment; sampling inverts the
piecewise-linear cumulative hazard, which by memorylessness is equivalent to
re-drawing the exponential clock at every day boundary.  Occasion times per
area are cumulative sums of Poisson-distributed day gaps; the area streams
merge into one grid with per-area effort flags, collapsing coincident times.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from .data import EncounterData, EncounterHistory, OccasionGrid
from .model import ModelSpec, ParamVector, params_from_natural

ENTRY_RULES = ("start", "uniform")


@dataclass(frozen=True)
class SimConfig:
    """Generating model and survey design for one synthetic dataset.

    transition_coefs holds natural-scale coefficients named like the model
    parameters (q12_intercept, q12_sin, q12_cos, ...); death_log_rate is the
    shared, time-constant log death rate.  occasion_gap_means are the Poisson
    means of the day gaps between survey occasions, one per area.
    """

    n_individuals: int
    span_days: float
    n_states: int
    transition_coefs: Mapping[str, float]
    death_log_rate: float
    detection: tuple[float, ...]
    occasion_gap_means: tuple[float, ...]
    seed: int
    entry: str = "start"
    period: int = 365
    seasonal: bool = True

    def __post_init__(self):
        if self.n_individuals < 1:
            raise ValueError("n_individuals must be at least 1")
        if not self.span_days > 0:
            raise ValueError("span_days must be positive")
        if self.n_states < 1:
            raise ValueError("need at least one alive state")
        object.__setattr__(self, "detection", tuple(float(p) for p in self.detection))
        object.__setattr__(
            self, "occasion_gap_means", tuple(float(x) for x in self.occasion_gap_means)
        )
        object.__setattr__(self, "transition_coefs", dict(self.transition_coefs))
        if len(self.detection) != self.n_states:
            raise ValueError("need one detection probability per alive state")
        # closed interval: p = 0 and p = 1 are meaningful for simulation even
        # though fitted models keep detection strictly inside (0, 1)
        if any(not 0.0 <= p <= 1.0 for p in self.detection):
            raise ValueError("detection probabilities must lie in [0, 1]")
        if len(self.occasion_gap_means) != self.n_states:
            raise ValueError("need one occasion-gap mean per area")
        if any(lam <= 0 for lam in self.occasion_gap_means):
            raise ValueError("occasion-gap means must be positive")
        if self.entry not in ENTRY_RULES:
            raise ValueError(f"entry must be one of {ENTRY_RULES}")
        if int(self.period) != self.period or self.period <= 0:
            raise ValueError("period must be a positive whole number of days")

    def model_spec(self, partition_length: float = 30.0) -> ModelSpec:
        return ModelSpec(
            n_states=self.n_states,
            study_span=float(self.span_days),
            partition_length=partition_length,
            period=float(self.period),
            seasonal=self.seasonal,
        )

    def true_params(self, spec: ModelSpec | None = None) -> ParamVector:
        spec = spec if spec is not None else self.model_spec()
        natural = dict(self.transition_coefs)
        natural["death_intercept"] = float(self.death_log_rate)
        for m, p in enumerate(self.detection, start=1):
            natural[f"p{m}"] = p
        return params_from_natural(spec, natural)

    @classmethod
    def from_dict(cls, d: Mapping, seed: int | None = None) -> "SimConfig":
        d = dict(d)
        if seed is not None:
            d["seed"] = seed
        if "seed" not in d:
            raise ValueError("a seed is required")
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Jump representation of one individual's state path on [entry, span]."""

    entry_time: float
    jump_times: np.ndarray  # transition times, strictly increasing
    states: np.ndarray      # visited states (1..M+1), one longer than jump_times

    def state_at(self, t) -> np.ndarray:
        """State occupied at time(s) t (a jump at exactly t counts)."""
        idx = np.searchsorted(self.jump_times, np.asarray(t, dtype=float), side="right")
        return self.states[idx]


class _DayRates:
    """Per-day-of-year rate tables for the generating model."""

    def __init__(self, config: SimConfig):
        M = config.n_states
        period = int(config.period)
        doy = np.arange(period, dtype=float)
        Q = np.zeros((period, M, M + 1))
        for j in range(1, M + 1):
            for k in range(1, M + 1):
                if j == k:
                    continue
                a0 = config.transition_coefs.get(f"q{j}{k}_intercept")
                if a0 is None:
                    raise ValueError(f"missing transition coefficient q{j}{k}_intercept")
                pred = np.full(period, float(a0))
                if config.seasonal:
                    ang = 2.0 * np.pi * doy / period
                    pred = (
                        pred
                        + config.transition_coefs.get(f"q{j}{k}_sin", 0.0) * np.sin(ang)
                        + config.transition_coefs.get(f"q{j}{k}_cos", 0.0) * np.cos(ang)
                    )
                Q[:, j - 1, k - 1] = np.exp(pred)
        Q[:, :, M] = np.exp(config.death_log_rate)
        self.period = period
        self.rates = Q                                # (period, M, M+1)
        self.total = Q.sum(axis=2)                    # (period, M)
        # doubled prefix sums of the daily hazard, per alive state
        self.prefix = np.concatenate(
            [np.zeros((1, M)), np.cumsum(np.tile(self.total, (2, 1)), axis=0)]
        )
        self.year_hazard = self.total.sum(axis=0)     # (M,)

    def doy(self, day: int) -> int:
        return int(day) % self.period

    def generator_for_day(self, day: int) -> np.ndarray:
        """Full (M+1)x(M+1) generator for the calendar day containing `day`."""
        M = self.rates.shape[1]
        doy = self.doy(day)
        Q = np.zeros((M + 1, M + 1))
        for j in range(M):
            Q[j, :M] = self.rates[doy, j, :M]
            Q[j, M] = self.rates[doy, j, M]
            Q[j, j] = -self.rates[doy, j].sum()
        return Q


def _next_transition(day_rates: _DayRates, state: int, t: float, rng) -> float:
    """First transition time after t for an individual in `state`, or inf.

    Draws one Exp(1) variate and inverts the piecewise-linear cumulative
    hazard of the day-constant total departure rate.
    """
    j = state - 1
    u = rng.exponential()
    day = int(np.floor(t))
    # partial current day
    rate = day_rates.total[day_rates.doy(day), j]
    frac = day + 1.0 - t
    if u < rate * frac:
        return t + u / rate
    u -= rate * frac
    day += 1
    year = day_rates.year_hazard[j]
    if year <= 0.0 or year * 1e15 < u:  # effectively absorbing while alive
        return np.inf
    skip = int(u // year)
    u -= skip * year
    day += skip * day_rates.period
    # walk the (at most one-year) remainder via the doubled prefix sums
    start = day_rates.doy(day)
    base = day_rates.prefix[start, j]
    k = int(np.searchsorted(day_rates.prefix[start:, j] - base, u, side="right")) - 1
    rate = day_rates.total[day_rates.doy(day + k), j]
    inside = (u - (day_rates.prefix[start + k, j] - base)) / rate
    return day + k + inside


def individual_rng(config: SimConfig, index: int) -> np.random.Generator:
    """Deterministic per-individual trajectory generator derived from the seed."""
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(config.seed, spawn_key=(1 + index,)))
    )


def _detection_rng(config: SimConfig, index: int) -> np.random.Generator:
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(config.seed, spawn_key=(1 + index, 1)))
    )


def _survey_rng(config: SimConfig) -> np.random.Generator:
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence(config.seed, spawn_key=(0,)))
    )


def simulate_trajectory(config: SimConfig, individual: int) -> Trajectory:
    """Exact state path for one individual under day-constant intensities."""
    day_rates = _DayRates(config)
    rng = individual_rng(config, individual)
    span = float(config.span_days)
    if config.entry == "uniform":
        entry = float(rng.uniform(0.0, span))
    else:
        entry = 0.0
    state = int(rng.integers(1, config.n_states + 1))
    t = entry
    jumps: list[float] = []
    states = [state]
    M = config.n_states
    while state <= M:
        t_next = _next_transition(day_rates, state, t, rng)
        if t_next >= span:
            break
        doy = day_rates.doy(int(np.floor(t_next)))
        rates = day_rates.rates[doy, state - 1]
        dest = int(np.searchsorted(np.cumsum(rates / rates.sum()), rng.random())) + 1
        jumps.append(t_next)
        states.append(dest)
        state = dest
        t = t_next
    return Trajectory(
        entry_time=entry,
        jump_times=np.asarray(jumps, dtype=float),
        states=np.asarray(states, dtype=np.int64),
    )


def simulate_survey(config: SimConfig) -> OccasionGrid:
    """Occasion grid merged from per-area streams of Poisson day gaps."""
    rng = _survey_rng(config)
    span = float(config.span_days)
    area_times = []
    for lam in config.occasion_gap_means:
        times = [0.0]
        t = 0.0
        while True:
            t += float(rng.poisson(lam))
            if t > span:
                break
            if t > times[-1]:
                times.append(t)
        area_times.append(np.asarray(times))
    merged = np.unique(np.concatenate(area_times))
    effort = np.zeros((merged.size, config.n_states), dtype=np.int8)
    for m, times in enumerate(area_times):
        effort[np.searchsorted(merged, times), m] = 1
    return OccasionGrid(merged, effort)


def simulate_detections(
    config: SimConfig,
    grid: OccasionGrid,
    trajectories: list[Trajectory],
) -> EncounterData:
    """Thin trajectories into observations; never-detected individuals drop.

    Each individual's detection draws come from its own generator, after its
    trajectory draws, so the full pipeline is reproducible from the seed.
    """
    detection = np.asarray(config.detection)
    histories = []
    width = len(str(max(len(trajectories), 1)))
    occ = np.arange(grid.times.size)
    for i, traj in enumerate(trajectories):
        rng = _detection_rng(config, i)
        states = traj.state_at(grid.times)
        alive = states <= config.n_states
        present = grid.times >= traj.entry_time
        uniforms = rng.random(grid.times.size)
        midx = np.where(alive, states - 1, 0)
        detectable = alive & present & (grid.effort[occ, midx] == 1)
        detected = detectable & (uniforms < detection[midx])
        obs = np.where(detected, states, 0).astype(np.int64)
        nonzero = np.flatnonzero(obs)
        if nonzero.size == 0:
            continue
        histories.append(
            EncounterHistory(
                individual_id=f"ind{i:0{width}d}",
                observations=obs,
                first_capture=int(nonzero[0]),
            )
        )
    return EncounterData(grid=grid, histories=tuple(histories), n_states=config.n_states)


@dataclass(frozen=True, eq=False)
class SimulationResult:
    config: SimConfig
    data: EncounterData
    trajectories: list[Trajectory]
    kept_indices: list[int]

    def truth_record(self) -> dict:
        """JSON-shaped record of the generating parameters and true paths."""
        kept = {
            h.individual_id: self.trajectories[i]
            for h, i in zip(self.data.histories, self.kept_indices)
        }
        return {
            "config": self.config.to_dict(),
            "realized_occasions": int(self.data.grid.n_occasions),
            "n_simulated": int(self.config.n_individuals),
            "n_detected": int(self.data.n_individuals),
            "true_parameters": self.config.true_params().as_dict(),
            "individuals": {
                ind: {
                    "entry_time": traj.entry_time,
                    "jump_times": [float(t) for t in traj.jump_times],
                    "states": [int(s) for s in traj.states],
                }
                for ind, traj in kept.items()
            },
        }


def simulate_dataset(config: SimConfig) -> SimulationResult:
    """Full pipeline: survey grid, trajectories, detection thinning."""
    grid = simulate_survey(config)
    trajectories = [simulate_trajectory(config, i) for i in range(config.n_individuals)]
    data = simulate_detections(config, grid, trajectories)
    kept = [int(h.individual_id[3:]) for h in data.histories]
    return SimulationResult(config=config, data=data, trajectories=trajectories, kept_indices=kept)
