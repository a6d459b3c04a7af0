import numpy as np
from hypothesis import given, settings, strategies as st

from conftest import random_instance
from ctrecap.data import EncounterHistory, OccasionGrid
from ctrecap.decode import decode, decode_by_enumeration, state_probabilities, viterbi
from ctrecap.model import ModelSpec, params_from_natural
from oracles import enumerate_sequence_probs, enumeration_marginals, enumeration_viterbi


def toy():
    spec = ModelSpec(n_states=2, study_span=60.0, partition_length=15.0)
    params = params_from_natural(spec, {
        "q12_intercept": -3.0, "q12_sin": -0.4, "q12_cos": 0.3,
        "q21_intercept": -3.5, "q21_sin": 0.5, "q21_cos": -0.2,
        "death_intercept": -4.0, "p1": 0.45, "p2": 0.3,
    })
    grid = OccasionGrid(
        np.array([0.0, 9.0, 21.0, 33.0, 47.0, 60.0]),
        np.ones((6, 2), dtype=int),
    )
    return spec, params, grid


class TestViterbi:
    def test_fully_observed_path_is_verbatim(self):
        spec, params, grid = toy()
        h = EncounterHistory("x", [1, 1, 2, 2, 1, 1], 0)
        np.testing.assert_array_equal(viterbi(spec, params, grid, h), [1, 1, 2, 2, 1, 1])

    def test_first_entry_is_first_capture_state(self):
        spec, params, grid = toy()
        h = EncounterHistory("x", [0, 2, 0, 0, 0, 0], 1)
        path = viterbi(spec, params, grid, h)
        assert path[0] == 2
        assert path.size == 5

    def test_long_unseen_tail_with_high_death_rate_decodes_dead(self):
        spec, params, grid = toy()
        deadly = params.updated(death_intercept=-1.5)  # ~4.5-day mean survival
        h = EncounterHistory("x", [1, 1, 0, 0, 0, 0], 0)
        path = viterbi(spec, deadly, grid, h)
        assert path[-1] == 3
        # absorbing: once dead, stays dead
        dead = np.flatnonzero(path == 3)
        assert dead.size and np.all(path[dead[0]:] == 3)

    def test_matches_enumeration_argmax(self):
        spec, params, grid = toy()
        h = EncounterHistory("x", [0, 1, 0, 0, 2, 0], 1)
        np.testing.assert_array_equal(
            viterbi(spec, params, grid, h),
            enumeration_viterbi(spec, params, grid, h),
        )


class TestStateProbabilities:
    def test_observed_occasions_are_certain(self):
        spec, params, grid = toy()
        h = EncounterHistory("x", [0, 1, 0, 2, 0, 0], 1)
        post = state_probabilities(spec, params, grid, h)
        np.testing.assert_allclose(post[0], [1, 0, 0], atol=1e-14)
        np.testing.assert_allclose(post[2], [0, 1, 0], atol=1e-14)

    def test_rows_sum_to_one(self):
        spec, params, grid = toy()
        h = EncounterHistory("x", [1, 0, 0, 0, 0, 2], 0)
        post = state_probabilities(spec, params, grid, h)
        np.testing.assert_allclose(post.sum(axis=1), 1.0, atol=1e-10)

    def test_matches_enumeration_marginals(self):
        spec, params, grid = toy()
        h = EncounterHistory("x", [0, 1, 0, 0, 2, 0], 1)
        np.testing.assert_allclose(
            state_probabilities(spec, params, grid, h),
            enumeration_marginals(spec, params, grid, h),
            atol=1e-10,
        )

    def test_death_probability_nondecreasing_after_last_sighting(self):
        spec, params, grid = toy()
        h = EncounterHistory("x", [1, 2, 0, 0, 0, 0], 0)
        post = state_probabilities(spec, params, grid, h)
        dead = post[1:, -1]  # after the last sighting at occasion 1
        assert np.all(np.diff(dead) >= -1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), M=st.integers(1, 3))
def test_decoding_matches_enumeration(seed, M):
    rng = np.random.default_rng(seed)
    spec, params, grid, history = random_instance(rng, M, int(rng.integers(3, 8)), max_unknown=6)
    np.testing.assert_array_equal(
        viterbi(spec, params, grid, history),
        enumeration_viterbi(spec, params, grid, history),
    )
    np.testing.assert_allclose(
        state_probabilities(spec, params, grid, history),
        enumeration_marginals(spec, params, grid, history),
        atol=1e-10,
    )


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_viterbi_beats_random_compatible_paths(seed):
    rng = np.random.default_rng(seed)
    spec, params, grid, history = random_instance(rng, 2, 6, max_unknown=5)
    sequences, probs = enumerate_sequence_probs(spec, params, grid, history)
    best = viterbi(spec, params, grid, history)
    match = np.flatnonzero((sequences == best).all(axis=1))
    assert match.size == 1
    sampled = rng.integers(0, sequences.shape[0], size=1000)
    assert np.all(probs[match[0]] >= probs[sampled])


def test_decode_combines_both_and_respects_invariants(rng):
    spec, params, grid, history = random_instance(rng, 2, 8, max_unknown=6)
    path = decode(spec, params, grid, history)
    g = history.first_capture
    assert path.states[0] == history.observations[g]
    seen = np.flatnonzero(history.observations[g:])
    np.testing.assert_array_equal(path.states[seen], history.observations[g:][seen])
    # zero posterior mass on states contradicted by sightings
    for i in seen:
        expected = np.zeros(3)
        expected[history.observations[g + i] - 1] = 1.0
        np.testing.assert_allclose(path.posterior[i], expected, atol=1e-12)
    dead = np.flatnonzero(path.states == 3)
    if dead.size:
        assert np.all(path.states[dead[0]:] == 3)


def test_enumeration_decoder_agrees_with_dp(rng):
    for _ in range(5):
        spec, params, grid, history = random_instance(rng, 2, 6, max_unknown=5)
        by_enum = decode_by_enumeration(spec, params, grid, history)
        np.testing.assert_array_equal(
            by_enum.states, viterbi(spec, params, grid, history)
        )
        np.testing.assert_allclose(
            by_enum.posterior,
            state_probabilities(spec, params, grid, history),
            atol=1e-10,
        )


def test_posterior_invariant_to_uninformative_occasion():
    # an occasion with no effort and obs = 0 adds no information, so the
    # smoothing probabilities at the original occasions must not move
    spec, params, grid = toy()
    h = EncounterHistory("x", [1, 0, 0, 2, 0, 0], 0)
    base = state_probabilities(spec, params, grid, h)
    times2 = np.insert(grid.times, 3, 27.0)
    effort2 = np.insert(grid.effort, 3, [0, 0], axis=0)
    grid2 = OccasionGrid(times2, effort2, allow_unsurveyed=True)
    h2 = EncounterHistory("x", np.insert(h.observations, 3, 0), 0)
    padded = state_probabilities(spec, params, grid2, h2)
    keep = [0, 1, 2, 4, 5, 6]
    np.testing.assert_allclose(padded[keep], base, atol=1e-12)
