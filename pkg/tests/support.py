"""Shared helpers for building recorded histories in tests."""

import numpy as np

from terralearn.baseline import BaselineConfig, baseline_action
from terralearn.estimation import NoiseModel, StateEstimator
from terralearn.harness import initial_state
from terralearn.learner import HistoryBuffer, Plant, policy_features
from terralearn.track import reference_states, stadium
from terralearn.vehicle import PSI, X, Y, step

TRACK = stadium()
PLANT = Plant()
LOOK = BaselineConfig().look_distance


def drive(n_steps, *, noise=None, estimate=True, seed=0, offset=0.3):
    """Drive the truth model under the baseline controller.

    Returns ``(times, observed_states, actions, true_states)`` where the
    observed states are estimator outputs (or the truth if ``estimate`` is
    false) and ``actions[k]`` was applied after observing ``observed[k]``.
    """
    rng = np.random.default_rng(seed)
    noise = noise or NoiseModel(0.0, 0.0)
    estimator = StateEstimator()
    state = initial_state(TRACK, 0.0, offset)
    times, observed, actions, truth = [], [], [], []
    for k in range(n_steps):
        t = k * PLANT.dt
        meas = noise.corrupt(t, state[[X, Y, PSI]], rng)
        est = estimator.update(meas) if estimate else state.copy()
        act = baseline_action(est, TRACK, BaselineConfig(), PLANT.params)
        times.append(t)
        observed.append(est)
        actions.append(np.array(act))
        truth.append(state)
        state = step(state, act, PLANT.dt, PLANT.params, PLANT.terrain)
    return np.array(times), np.array(observed), np.array(actions), np.array(truth)


def fill_history(times, states, actions, capacity=None):
    history = HistoryBuffer(capacity or len(times) + 1)
    slope = PLANT.terrain.slope
    for t, s, a in zip(times, states, actions):
        feats = policy_features(s, TRACK, LOOK, slope)[0]
        ref = reference_states(TRACK, s[[X, Y, PSI]], 1, PLANT.dt)[0]
        history.push(t, s, ref, feats)
        history.set_last_action(a)
    return history
