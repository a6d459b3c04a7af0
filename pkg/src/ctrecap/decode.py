"""State decoding: most likely sequences and per-occasion state probabilities.

Both decoders condition on the first capture, run over occasions g..T only,
and work in log space (Viterbi) or with per-step scaling (forward-backward),
so they are invariant to likelihood scaling constants.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import EncounterHistory, OccasionGrid
from .likelihood import AlignmentError, _observation_probs_batch, occasion_step_matrices
from .model import ModelSpec, ParamVector, check_params, detection_probs

POSTERIOR_ROW_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class DecodedPath:
    """Viterbi states and smoothing probabilities for occasions g..T.

    states[i] is the decoded state (1..M+1, M+1 = dead) at occasion g+i;
    posterior[i, k-1] is Pr(state k at occasion g+i | all observations).
    """

    individual_id: str
    first_capture: int
    states: np.ndarray
    posterior: np.ndarray


def _prepare(spec, params, grid, history):
    check_params(spec, params)
    if history.observations.size != grid.n_occasions:
        raise AlignmentError(f"{history.individual_id}: history not aligned with grid")
    gammas = occasion_step_matrices(spec, params, grid, history.covariates)
    detection = detection_probs(spec, params)
    g = history.first_capture
    T = grid.n_occasions - 1
    pdiags = [
        _observation_probs_batch(
            history.observations[u : u + 1], grid.effort[u], detection
        )[0]
        for u in range(g + 1, T + 1)
    ]
    return gammas, pdiags, g, T


def viterbi(
    spec: ModelSpec,
    params: ParamVector,
    grid: OccasionGrid,
    history: EncounterHistory,
) -> np.ndarray:
    """Most probable state sequence given the history, as states 1..M+1.

    Log-space dynamic programme; ties break towards the lowest state index.
    """
    gammas, pdiags, g, T = _prepare(spec, params, grid, history)
    d = spec.n_states + 1
    steps = T - g
    states = np.empty(steps + 1, dtype=np.int64)
    states[0] = history.observations[g]
    if steps == 0:
        return states
    with np.errstate(divide="ignore"):
        log_gammas = [np.log(gammas[u - 1]) for u in range(g + 1, T + 1)]
        log_pdiags = [np.log(p) for p in pdiags]
    score = np.full(d, -np.inf)
    score[history.observations[g] - 1] = 0.0
    back = np.empty((steps, d), dtype=np.int64)
    for i in range(steps):
        cand = score[:, None] + log_gammas[i] + log_pdiags[i][None, :]
        back[i] = np.argmax(cand, axis=0)
        score = cand[back[i], np.arange(d)]
    if np.all(np.isneginf(score)):
        raise ValueError(f"{history.individual_id}: history has zero probability")
    last = int(np.argmax(score))
    states[steps] = last + 1
    for i in range(steps - 1, -1, -1):
        last = int(back[i, last])
        states[i] = last + 1
    return states


def state_probabilities(
    spec: ModelSpec,
    params: ParamVector,
    grid: OccasionGrid,
    history: EncounterHistory,
) -> np.ndarray:
    """Smoothing probabilities Pr(state at occasion u | all observations)
    for u = g..T, shape (T-g+1, M+1); rows sum to one."""
    gammas, pdiags, g, T = _prepare(spec, params, grid, history)
    d = spec.n_states + 1
    steps = T - g
    alpha = np.zeros((steps + 1, d))
    alpha[0, history.observations[g] - 1] = 1.0
    for i in range(steps):
        a = (alpha[i] @ gammas[g + i]) * pdiags[i]
        norm = a.sum()
        if norm <= 0.0:
            raise ValueError(f"{history.individual_id}: history has zero probability")
        alpha[i + 1] = a / norm
    beta = np.ones(d)
    posterior = np.empty((steps + 1, d))
    posterior[steps] = alpha[steps] * beta
    for i in range(steps - 1, -1, -1):
        beta = gammas[g + i] @ (pdiags[i] * beta)
        bnorm = beta.max()
        if bnorm > 0:
            beta = beta / bnorm
        posterior[i] = alpha[i] * beta
    posterior /= posterior.sum(axis=1, keepdims=True)
    return posterior


def decode(
    spec: ModelSpec,
    params: ParamVector,
    grid: OccasionGrid,
    history: EncounterHistory,
) -> DecodedPath:
    return DecodedPath(
        individual_id=history.individual_id,
        first_capture=history.first_capture,
        states=viterbi(spec, params, grid, history),
        posterior=state_probabilities(spec, params, grid, history),
    )


def decode_by_enumeration(
    spec: ModelSpec,
    params: ParamVector,
    grid: OccasionGrid,
    history: EncounterHistory,
    max_unknown: int = 12,
) -> DecodedPath:
    """Decoding by exhaustive enumeration of compatible sequences.

    Exponential in the number of unknown-state occasions (capped at
    `max_unknown`), so only usable on small instances; exposed as a
    cross-check for the dynamic-programming decoders.
    """
    from itertools import product

    from .model import transition_matrix_between

    gammas, pdiags, g, T = _prepare(spec, params, grid, history)
    del gammas  # rebuilt pair-by-pair below, independently of the batch path
    obs = history.observations
    steps = T - g
    d = spec.n_states + 1
    unknown = [i for i in range(1, steps + 1) if obs[g + i] == 0]
    if len(unknown) > max_unknown:
        raise ValueError(
            f"{len(unknown)} unknown-state occasions exceed the enumeration bound"
        )
    pair_gammas = [
        transition_matrix_between(
            spec, params, grid.times[u - 1], grid.times[u], history.covariates
        ).entries
        for u in range(g + 1, T + 1)
    ]
    template = np.empty(steps + 1, dtype=np.int64)
    template[0] = obs[g] - 1
    for i in range(1, steps + 1):
        if obs[g + i] > 0:
            template[i] = obs[g + i] - 1
    best_prob, best_seq = -1.0, None
    marginal = np.zeros((steps + 1, d))
    for assignment in product(range(d), repeat=len(unknown)):
        seq = template.copy()
        for pos, state in zip(unknown, assignment):
            seq[pos] = state
        prob = 1.0
        for i in range(steps):
            prob *= pair_gammas[i][seq[i], seq[i + 1]] * pdiags[i][seq[i + 1]]
            if prob == 0.0:
                break
        if prob > best_prob:
            best_prob, best_seq = prob, seq
        if prob > 0.0:
            marginal[np.arange(steps + 1), seq] += prob
    if best_seq is None or best_prob <= 0.0:
        raise ValueError(f"{history.individual_id}: history has zero probability")
    marginal /= marginal.sum(axis=1, keepdims=True)
    return DecodedPath(
        individual_id=history.individual_id,
        first_capture=g,
        states=(best_seq + 1).astype(np.int64),
        posterior=marginal,
    )
