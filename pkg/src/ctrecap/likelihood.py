"""Capture-history likelihood: HMM forward algorithm plus a brute-force oracle.

The forward value conditions on the first capture (time and state): the
recursion starts as the unit vector on the observed state at occasion g and
multiplies through transition and observation-probability factors for
occasions g+1..T.  The brute-force version enumerates every state sequence
compatible with the history and exists to cross-check the forward recursion
on small instances.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .data import EncounterData, EncounterHistory, OccasionGrid
from .linalg import expm_stack
from .model import (
    ModelSpec,
    ParamVector,
    check_params,
    covariate_signature,
    detection_probs,
    intensity_stack,
    transition_matrix_between,
)

MAX_UNKNOWN_OCCASIONS = 12
_ENUM_CHUNK = 200_000


class AlignmentError(ValueError):
    """History and occasion grid (or model span) do not line up."""


class EnumerationLimitError(ValueError):
    """Too many unknown-state occasions for brute-force enumeration."""


def observation_diagonal(x: int, effort_row: np.ndarray, detection: np.ndarray) -> np.ndarray:
    """Diagonal of the observation probability matrix P(x) for one occasion.

    Entry m-1 (alive state m) is p_m*a_m when x = m, 1 - p_m*a_m when x = 0
    and 0 otherwise; the death entry is 1 when x = 0 and 0 otherwise.
    """
    M = detection.size
    pa = detection * effort_row[:M]
    diag = np.zeros(M + 1)
    if x == 0:
        diag[:M] = 1.0 - pa
        diag[M] = 1.0
    else:
        diag[x - 1] = pa[x - 1]
    return diag


def occasion_step_matrices(
    spec: ModelSpec,
    params: ParamVector,
    grid: OccasionGrid,
    covariates: Mapping[str, float] | None = None,
) -> np.ndarray:
    """Transition matrices between consecutive occasions, shape (T, M+1, M+1).

    The span [0, t_T] is cut at occasion times and interior partition
    boundaries; each resulting piece lies in a single partition interval, so
    its exponential uses that interval's generator, and consecutive-occasion
    matrices are ordered products of their pieces.  Every per-interval
    exponential is computed exactly once per call (they are shared across
    individuals at the same covariate level).
    """
    times = grid.times
    if times[-1] > spec.study_span * (1 + 1e-12) + 1e-9:
        raise AlignmentError(
            f"last occasion at day {times[-1]} exceeds the model span {spec.study_span}"
        )
    T = times.size - 1
    d = spec.n_states + 1
    if T == 0:
        return np.empty((0, d, d))
    Qs = intensity_stack(spec, params, covariates)
    boundaries = spec.partition_length * np.arange(1, spec.n_intervals, dtype=float)
    boundaries = boundaries[(boundaries > times[0]) & (boundaries < times[-1])]
    cuts = np.unique(np.concatenate([times, boundaries]))
    mids = 0.5 * (cuts[:-1] + cuts[1:])
    ridx = np.minimum(mids // spec.partition_length, spec.n_intervals - 1).astype(int)
    pieces = expm_stack(Qs[ridx] * np.diff(cuts)[:, None, None])
    # pieces belong to the occasion gap their midpoint falls in
    gap_of_piece = np.searchsorted(times, mids) - 1
    starts = np.searchsorted(gap_of_piece, np.arange(T))
    stops = np.searchsorted(gap_of_piece, np.arange(T), side="right")
    gammas = np.empty((T, d, d))
    for u in range(T):
        out = pieces[starts[u]]
        for i in range(starts[u] + 1, stops[u]):
            out = out @ pieces[i]
        gammas[u] = out
    return gammas


def _observation_probs_batch(
    obs_column: np.ndarray, effort_row: np.ndarray, detection: np.ndarray
) -> np.ndarray:
    """Observation diagonals for one occasion across individuals, (n, M+1)."""
    n = obs_column.size
    M = detection.size
    pa = detection * effort_row[:M]
    P = np.zeros((n, M + 1))
    unseen = obs_column == 0
    P[unseen, :M] = 1.0 - pa
    P[unseen, M] = 1.0
    seen = np.flatnonzero(~unseen)
    P[seen, obs_column[seen] - 1] = pa[obs_column[seen] - 1]
    return P


def _observation_probs_all(
    obs: np.ndarray, effort: np.ndarray, detection: np.ndarray
) -> np.ndarray:
    """Observation diagonals for every occasion and individual, (T+1, n, M+1)."""
    n, n_occ = obs.shape
    M = detection.size
    pa = detection[None, :] * effort[:, :M]          # (T+1, M)
    obs_t = obs.T                                    # (T+1, n)
    unseen = obs_t == 0
    P = np.zeros((n_occ, n, M + 1))
    P[:, :, :M] = unseen[:, :, None] * (1.0 - pa)[:, None, :]
    P[:, :, M] = unseen
    t_idx, i_idx = np.nonzero(~unseen)
    m_idx = obs_t[t_idx, i_idx] - 1
    P[t_idx, i_idx, m_idx] = pa[t_idx, m_idx]
    return P


def _forward_logliks(
    gammas: np.ndarray,
    obs: np.ndarray,
    effort: np.ndarray,
    detection: np.ndarray,
    first_capture: np.ndarray,
) -> np.ndarray:
    """Scaled forward recursion for a batch of individuals sharing `gammas`.

    obs is (n, T+1); returns per-individual log-likelihoods.  The forward
    vector is renormalised at every step and log normalisers accumulate, so
    histories of any length stay inside double range.
    """
    n, n_occ = obs.shape
    M = detection.size
    pdiags = _observation_probs_all(obs, effort, detection)
    alpha = np.zeros((n, M + 1))
    loglik = np.zeros(n)
    entered = first_capture == 0
    alpha[entered, obs[entered, 0] - 1] = 1.0
    for u in range(1, n_occ):
        alpha = alpha @ gammas[u - 1]
        alpha *= pdiags[u]
        active = first_capture < u
        norms = alpha.sum(axis=1)
        dead_end = active & (norms <= 0.0)
        ok = active & (norms > 0.0)
        loglik[ok] += np.log(norms[ok])
        loglik[dead_end] = -np.inf
        alpha[ok] /= norms[ok, None]
        alpha[~ok] = 0.0
        starting = first_capture == u
        alpha[starting, obs[starting, u] - 1] = 1.0
    return loglik


def individual_loglik_forward(
    spec: ModelSpec,
    params: ParamVector,
    grid: OccasionGrid,
    history: EncounterHistory,
) -> float:
    """Log-likelihood of one capture history via the forward algorithm."""
    check_params(spec, params)
    if history.observations.size != grid.n_occasions:
        raise AlignmentError(
            f"{history.individual_id}: history has {history.observations.size} "
            f"occasions, grid has {grid.n_occasions}"
        )
    gammas = occasion_step_matrices(spec, params, grid, history.covariates)
    return float(
        _forward_logliks(
            gammas,
            history.observations[None, :],
            grid.effort,
            detection_probs(spec, params),
            np.array([history.first_capture]),
        )[0]
    )


def total_loglik(spec: ModelSpec, params: ParamVector, data: EncounterData) -> float:
    """Joint log-likelihood over individuals (sum of individual values).

    Individuals are grouped by covariate level so the per-occasion transition
    matrices are built once per level; the final reduction sums in history
    order, so the value is deterministic.
    """
    check_params(spec, params)
    if data.n_individuals == 0:
        raise ValueError("no encounter histories")
    groups: dict[tuple, list[int]] = {}
    for i, h in enumerate(data.histories):
        if h.observations.size != data.grid.n_occasions:
            raise AlignmentError(f"{h.individual_id}: history not aligned with grid")
        try:
            key = covariate_signature(spec, h.covariates)
        except ValueError as err:
            raise AlignmentError(f"{h.individual_id}: {err}") from err
        groups.setdefault(key, []).append(i)
    detection = detection_probs(spec, params)
    logliks = np.empty(data.n_individuals)
    for key, members in groups.items():
        covs = data.histories[members[0]].covariates
        gammas = occasion_step_matrices(spec, params, data.grid, covs)
        obs = np.stack([data.histories[i].observations for i in members])
        first = np.array([data.histories[i].first_capture for i in members])
        logliks[members] = _forward_logliks(gammas, obs, data.grid.effort, detection, first)
    return float(np.sum(logliks))


def individual_loglik_bruteforce(
    spec: ModelSpec,
    params: ParamVector,
    grid: OccasionGrid,
    history: EncounterHistory,
    max_unknown: int = MAX_UNKNOWN_OCCASIONS,
) -> float:
    """Log-likelihood by exhaustive enumeration of compatible state sequences.

    Cost grows as (M+1)^K in the number K of unknown-state occasions after
    first capture, so K is capped at `max_unknown`.  Transition matrices are
    built pair-by-pair with transition_matrix_between, independently of the
    batched machinery the forward algorithm uses.
    """
    check_params(spec, params)
    if history.observations.size != grid.n_occasions:
        raise AlignmentError(f"{history.individual_id}: history not aligned with grid")
    times = grid.times
    obs = history.observations
    g = history.first_capture
    T = times.size - 1
    steps = T - g
    if steps == 0:
        return 0.0
    unknown = [u for u in range(g + 1, T + 1) if obs[u] == 0]
    K = len(unknown)
    if K > max_unknown:
        raise EnumerationLimitError(
            f"{K} unknown-state occasions exceed the enumeration bound of {max_unknown}"
        )
    M = spec.n_states
    detection = detection_probs(spec, params)
    gammas = [
        transition_matrix_between(spec, params, times[u - 1], times[u], history.covariates).entries
        for u in range(g + 1, T + 1)
    ]
    # observation factors, computed inline from the model definition
    pdiags = []
    for u in range(g + 1, T + 1):
        pa = detection * grid.effort[u, :M]
        diag = np.zeros(M + 1)
        if obs[u] == 0:
            diag[:M] = 1.0 - pa
            diag[M] = 1.0
        else:
            diag[obs[u] - 1] = pa[obs[u] - 1]
        pdiags.append(diag)

    template = np.empty(steps + 1, dtype=np.int64)
    template[0] = obs[g] - 1
    for offset, u in enumerate(range(g + 1, T + 1)):
        if obs[u] > 0:
            template[offset + 1] = obs[u] - 1
    unknown_pos = np.array([u - g for u in unknown], dtype=np.int64)

    n_seq = (M + 1) ** K
    total = 0.0
    for lo in range(0, n_seq, _ENUM_CHUNK):
        hi = min(lo + _ENUM_CHUNK, n_seq)
        seq = np.tile(template, (hi - lo, 1))
        if K:
            codes = np.arange(lo, hi, dtype=np.int64)
            for pos in range(K - 1, -1, -1):
                codes, digit = np.divmod(codes, M + 1)
                seq[:, unknown_pos[pos]] = digit
        probs = np.ones(hi - lo)
        for step in range(steps):
            probs *= gammas[step][seq[:, step], seq[:, step + 1]]
            probs *= pdiags[step][seq[:, step + 1]]
        total += float(probs.sum())
    return float(np.log(total)) if total > 0.0 else -np.inf
