"""Shared random-instance builders for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from ctrecap.data import EncounterHistory, OccasionGrid
from ctrecap.model import ModelSpec, params_from_natural


def random_intensity_entries(rng: np.random.Generator, dim: int, scale: float = 1.0) -> np.ndarray:
    """Valid generator with off-diagonal rates up to `scale`."""
    Q = rng.uniform(0.0, scale, size=(dim, dim))
    Q[-1] = 0.0
    np.fill_diagonal(Q, 0.0)
    np.fill_diagonal(Q, -Q.sum(axis=1))
    return Q


def random_model(
    rng: np.random.Generator,
    M: int,
    span: float,
    partition_length: float,
    seasonal: bool = True,
) -> tuple[ModelSpec, "ParamVector"]:
    """Random valid model with day-scale rates around 1/20 .. 1/2000."""
    spec = ModelSpec(
        n_states=M,
        study_span=span,
        partition_length=partition_length,
        seasonal=seasonal,
    )
    natural = {}
    for j, k in spec.alive_pairs():
        natural[f"q{j}{k}_intercept"] = rng.uniform(-7.0, -3.0)
        if seasonal:
            natural[f"q{j}{k}_sin"] = rng.uniform(-1.0, 1.0)
            natural[f"q{j}{k}_cos"] = rng.uniform(-1.0, 1.0)
    natural["death_intercept"] = rng.uniform(-9.0, -4.0)
    for m in range(1, M + 1):
        natural[f"p{m}"] = rng.uniform(0.1, 0.9)
    return spec, params_from_natural(spec, natural)


def random_grid(rng: np.random.Generator, M: int, n_occasions: int, span: float) -> OccasionGrid:
    """Strictly increasing times starting at 0, every occasion surveyed somewhere."""
    interior = np.sort(rng.uniform(0.5, span, size=n_occasions - 1))
    while np.any(np.diff(interior) <= 0):
        interior = np.sort(rng.uniform(0.5, span, size=n_occasions - 1))
    times = np.concatenate([[0.0], interior])
    effort = rng.integers(0, 2, size=(n_occasions, M))
    empty = effort.sum(axis=1) == 0
    effort[empty, rng.integers(0, M, size=int(empty.sum()))] = 1
    return OccasionGrid(times, effort)


def random_history(
    rng: np.random.Generator,
    grid: OccasionGrid,
    max_unknown: int,
    name: str = "ind",
) -> EncounterHistory:
    """Random valid history whose unknown-occasion count is at most max_unknown.

    Sightings land only in surveyed areas; any such pattern has positive
    probability under the model (death may follow the last sighting).
    """
    n_occ = grid.n_occasions
    g = int(rng.integers(0, n_occ))
    obs = np.zeros(n_occ, dtype=np.int64)
    obs[g] = int(rng.choice(np.flatnonzero(grid.effort[g]))) + 1
    unknown_left = max_unknown
    for u in range(g + 1, n_occ):
        if rng.random() < 0.5 and unknown_left > 0:
            unknown_left -= 1
            continue
        obs[u] = int(rng.choice(np.flatnonzero(grid.effort[u]))) + 1
    return EncounterHistory(name, obs, g)


def random_instance(
    rng: np.random.Generator,
    M: int,
    n_occasions: int,
    max_unknown: int,
    seasonal: bool = True,
):
    """A (spec, params, grid, history) quadruple for oracle comparisons."""
    span = float(rng.uniform(40.0, 250.0))
    # keep several partition intervals in play so Eq.-4 products engage
    partition = float(rng.uniform(5.0, span / 3.0))
    spec, params = random_model(rng, M, span, partition, seasonal)
    grid = random_grid(rng, M, n_occasions, span)
    history = random_history(rng, grid, max_unknown)
    return spec, params, grid, history


@pytest.fixture
def rng():
    return np.random.default_rng(20260808)
