"""Online co-evolution of a friction model and a linear tracking policy.

Two populations evolve side by side, one generation per control step:

* dynamics chromosomes ``[mu_s, mu_w]`` scored by how well the physics
  model, run with those coefficients, reproduces the latest measured state
  from an earlier one under the actions that were actually applied;
* control chromosomes ``[k1 .. k6]`` (a row-major 2x3 gain matrix mapping
  ``[alpha, dV, slope]`` to ``[phi, omega_w]``) scored by closed-loop
  rollouts through the currently fittest dynamics model.

Each generation keeps the elites, breeds children by rank-biased selection,
uniform crossover and gaussian mutation, and injects fresh members: a random
dynamics chromosome and a least-squares fit of recent actions to features.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import NonFinite
from .track import Track, reference_states
from .vehicle import (PSI, PSI_DOT, STATE_SIZE, VX, VY, X, Y, Action, TerrainParams,
                      VehicleParams, DT_SIM, step_batch, wrap_angle)

log = logging.getLogger(__name__)

N_DYN_GENES = 2
N_CTRL_GENES = 6


@dataclass(frozen=True)
class GAConfig:
    prediction_lookback: int = 1
    tracking_horizon: int = 2
    crossover_rate: float = 0.67
    dyn_size: int = 8
    ctrl_size: int = 8
    n_elite: int = 3
    n_inject: int = 1
    w_s: tuple = (1e3, 1e3, 0.0, 0.0, 180.0 / math.pi, 0.0)
    w_r: tuple = (1.0, 1.0, 0.01, 0.0, 0.0, 0.0)
    w_k: tuple = (0.0, 1e-7, 0.0, 0.0, 0.0, 1e-7)
    dyn_bounds: tuple = ((0.0, 20.0), (0.0, 20.0))
    gain_bounds: tuple = (-50.0, 50.0)
    mutation_fraction: float = 0.02
    injection_horizon: int = 10
    ridge: float = 1e-6
    q_threshold: float = 0.05
    c_threshold: float = 0.1
    gate_window: int = 25
    # number of most recent transitions whose prediction errors are summed into Q
    prediction_window: int = 20

    def __post_init__(self):
        if not 0 <= self.crossover_rate <= 1:
            raise ValueError("crossover_rate must lie in [0, 1]")
        for size in (self.dyn_size, self.ctrl_size):
            if self.n_elite + self.n_inject > size or size < 1:
                raise ValueError("n_elite + n_inject must not exceed the population size")
        if min(self.prediction_lookback, self.tracking_horizon, self.injection_horizon,
               self.prediction_window, self.gate_window) < 1:
            raise ValueError("horizons and windows must be >= 1")
        for w, n in ((self.w_s, 6), (self.w_r, 6), (self.w_k, 6)):
            if len(w) != n or min(w) < 0:
                raise ValueError("weight vectors need six non-negative entries")
        if len(self.dyn_bounds) != N_DYN_GENES or any(lo < 0 or hi <= lo for lo, hi in self.dyn_bounds):
            raise ValueError("dyn_bounds must be two non-negative (lo, hi) pairs")
        if not self.gain_bounds[1] > self.gain_bounds[0]:
            raise ValueError("gain_bounds must be (lo, hi) with lo < hi")

    @property
    def dyn_lower(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.dyn_bounds])

    @property
    def dyn_upper(self) -> np.ndarray:
        return np.array([hi for _, hi in self.dyn_bounds])

    @property
    def ctrl_lower(self) -> np.ndarray:
        return np.full(N_CTRL_GENES, float(self.gain_bounds[0]))

    @property
    def ctrl_upper(self) -> np.ndarray:
        return np.full(N_CTRL_GENES, float(self.gain_bounds[1]))

    @property
    def dyn_scales(self) -> np.ndarray:
        return self.mutation_fraction * (self.dyn_upper - self.dyn_lower)

    @property
    def ctrl_scales(self) -> np.ndarray:
        return self.mutation_fraction * (self.ctrl_upper - self.ctrl_lower)


@dataclass(frozen=True)
class Plant:
    """Physics model shared by the simulator and the learner's candidates."""

    params: VehicleParams = field(default_factory=VehicleParams)
    terrain: TerrainParams = field(default_factory=TerrainParams)
    dt: float = 0.2
    dt_sim: float = DT_SIM

    def step_batch(self, states, actions, mus):
        return step_batch(states, actions, mus, self.dt, self.params, self.terrain, self.dt_sim)


class HistoryBuffer:
    """Rolling log of ``(t, state, reference, features, action)`` per control step.

    The newest entry is pushed when a state is measured; its action is filled
    in once the controller has decided.
    """

    def __init__(self, capacity: int):
        if capacity < 2:
            raise ValueError("capacity must be >= 2")
        self.capacity = capacity
        self._rows: deque = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._rows)

    def push(self, t: float, state, reference, features) -> None:
        if self._rows and t <= self._rows[-1][0]:
            raise ValueError("history must stay chronologically ordered")
        self._rows.append([float(t), np.array(state, dtype=float), np.array(reference, dtype=float),
                           np.array(features, dtype=float), None])

    def set_last_action(self, action) -> None:
        self._rows[-1][4] = np.array(action, dtype=float)

    def times(self, n: int | None = None) -> np.ndarray:
        return np.array([r[0] for r in self._tail(n)])

    def states(self, n: int | None = None) -> np.ndarray:
        return np.array([r[1] for r in self._tail(n)]).reshape(-1, STATE_SIZE)

    def references(self, n: int | None = None) -> np.ndarray:
        return np.array([r[2] for r in self._tail(n)]).reshape(-1, STATE_SIZE)

    def features(self, n: int | None = None) -> np.ndarray:
        return np.array([r[3] for r in self._tail(n)]).reshape(-1, 3)

    def actions(self, n: int | None = None) -> np.ndarray:
        """Actions of the last ``n`` entries; NaN where not yet decided."""
        return np.array([r[4] if r[4] is not None else (np.nan, np.nan)
                         for r in self._tail(n)]).reshape(-1, 2)

    def completed(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Features and actions of the last ``n`` entries that have an action."""
        rows = [r for r in self._rows if r[4] is not None][-n:]
        return (np.array([r[3] for r in rows]).reshape(-1, 3),
                np.array([r[4] for r in rows]).reshape(-1, 2))

    def _tail(self, n):
        rows = list(self._rows)
        return rows if n is None else rows[max(0, len(rows) - n):]


class FitnessRecord(NamedTuple):
    q: np.ndarray
    c: np.ndarray


# --------------------------------------------------------------------------
# fitness
# --------------------------------------------------------------------------

def state_error(a, b) -> np.ndarray:
    """``a - b`` with the heading component wrapped into (-pi, pi]."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    d[..., PSI] = wrap_angle(d[..., PSI])
    return d


def prediction_fitness(predicted, measured, w_s) -> np.ndarray:
    """Weighted squared prediction error, summed over the state components."""
    d = state_error(measured, predicted)
    return np.sum(np.asarray(w_s) * d * d, axis=-1)


def propagate(starts, action_seqs, mus, plant: Plant) -> tuple[np.ndarray, np.ndarray]:
    """Run ``(N, 6)`` start states through ``(N, L, 2)`` action sequences.

    Row ``i`` uses friction coefficients ``mus[i]``. Returns the final states
    and a finite mask.
    """
    cur = np.asarray(starts, dtype=float).reshape(-1, STATE_SIZE)
    seqs = np.asarray(action_seqs, dtype=float).reshape(len(cur), -1, 2)
    finite = np.ones(len(cur), dtype=bool)
    for i in range(seqs.shape[1]):
        cur, ok = plant.step_batch(cur, seqs[:, i], mus)
        finite &= ok
    return cur, finite


def _transitions(history: HistoryBuffer, lookback: int, window: int):
    need = lookback + window
    if len(history) < need:
        raise ValueError(f"history holds {len(history)} entries, need {need}")
    states = history.states(need)
    actions = history.actions(need)
    seqs = np.stack([actions[j:j + lookback] for j in range(window)])
    return states[:window], seqs, states[lookback:], history.times(need)[lookback:]


def predict_states(dyn_pop, history: HistoryBuffer, lookback: int, plant: Plant,
                   window: int = 1) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Propagate each candidate model over the last ``window`` transitions.

    Transition ``j`` starts from the state ``lookback`` entries before it and
    replays the actions that were executed. Returns ``(predicted, measured,
    finite)`` shaped ``(P, window, 6)``, ``(window, 6)`` and ``(P, window)``.
    """
    dyn_pop = np.atleast_2d(np.asarray(dyn_pop, dtype=float))
    starts, seqs, measured, _ = _transitions(history, lookback, window)
    p = len(dyn_pop)
    pred, finite = propagate(np.tile(starts, (p, 1)), np.tile(seqs, (p, 1, 1)),
                             np.repeat(dyn_pop, window, axis=0), plant)
    return pred.reshape(p, window, STATE_SIZE), measured, finite.reshape(p, window)


def predict_state(theta_d, history: HistoryBuffer, lookback: int, plant: Plant) -> np.ndarray:
    """Single-candidate prediction of the newest state from ``lookback`` steps back."""
    pred, _, finite = predict_states(theta_d, history, lookback, plant)
    if not finite.all():
        raise NonFinite("prediction diverged")
    return pred[0, 0]


def dynamics_fitness(dyn_pop, history: HistoryBuffer, cfg: GAConfig, plant: Plant) -> np.ndarray:
    window = min(cfg.prediction_window, len(history) - cfg.prediction_lookback)
    pred, meas, finite = predict_states(dyn_pop, history, cfg.prediction_lookback, plant, window)
    with np.errstate(invalid="ignore", over="ignore"):
        q = prediction_fitness(pred, meas[None], cfg.w_s).sum(axis=1)
    q[~finite.all(axis=1) | ~np.isfinite(q)] = np.inf
    return q


def policy_actions(ctrl_pop, features, params: VehicleParams) -> np.ndarray:
    """``K @ [alpha, dV, slope]`` per member, clamped to actuator limits."""
    k = np.asarray(ctrl_pop, dtype=float).reshape(-1, 2, 3)
    f = np.asarray(features, dtype=float).reshape(-1, 3)
    if len(f) == 1 and len(k) > 1:
        f = np.repeat(f, len(k), axis=0)
    a = np.einsum("pij,pj->pi", k, f)
    a[:, 0] = np.clip(a[:, 0], -params.steering_limit, params.steering_limit)
    a[:, 1] = np.clip(a[:, 1], -params.wheel_speed_limit, params.wheel_speed_limit)
    return a


def policy_action(theta_k, features, params: VehicleParams) -> Action:
    phi, omega = policy_actions(theta_k, features, params)[0]
    return Action(float(phi), float(omega))


def policy_features(states, track: Track, look_distance: float, slope: float) -> np.ndarray:
    """``[alpha, dV, slope]`` rows for ``(P, 6)`` states.

    ``alpha`` is the angle from the heading to the look-ahead point,
    ``dV`` the desired speed minus the forward body speed.
    """
    s = np.asarray(states, dtype=float).reshape(-1, STATE_SIZE)
    _, _, _, arc = track.project(s[:, :2])
    target = track.point_at(arc + look_distance)
    alpha = wrap_angle(np.arctan2(target[:, 1] - s[:, Y], target[:, 0] - s[:, X]) - s[:, PSI])
    v_fwd = s[:, VX] * np.cos(s[:, PSI]) + s[:, VY] * np.sin(s[:, PSI])
    return np.column_stack([alpha, track.desired_speed - v_fwd, np.full(len(s), slope)])


def rollout_tracking(ctrl_pop, theta_d, state, track: Track, horizon: int, plant: Plant,
                     look_distance: float, slope: float) -> tuple[np.ndarray, np.ndarray]:
    """Closed-loop rollouts of every control candidate through one dynamics model.

    Returns ``(traces, finite)`` with traces shaped ``(P, horizon, 6)``.
    """
    ctrl_pop = np.atleast_2d(np.asarray(ctrl_pop, dtype=float))
    p = len(ctrl_pop)
    cur = np.repeat(np.asarray(state, dtype=float)[None], p, axis=0)
    mus = np.repeat(np.asarray(theta_d, dtype=float).reshape(1, 2), p, axis=0)
    traces = np.empty((p, horizon, STATE_SIZE))
    finite = np.ones(p, dtype=bool)
    for j in range(horizon):
        safe = np.where(np.isfinite(cur), cur, 0.0)
        acts = policy_actions(ctrl_pop, policy_features(safe, track, look_distance, slope), plant.params)
        cur, ok = plant.step_batch(cur, acts, mus)
        finite &= ok
        traces[:, j] = cur
    return traces, finite


def control_fitness(traces, references, ctrl_pop, w_r, w_k) -> np.ndarray:
    """Weighted squared tracking error over the horizon plus a one-off gain penalty."""
    traces = np.asarray(traces, dtype=float)
    if traces.ndim == 2:
        traces = traces[None]
    d = state_error(np.asarray(references)[None], traces)
    with np.errstate(invalid="ignore", over="ignore"):
        err = np.sum(np.asarray(w_r) * d * d, axis=(1, 2))
    k = np.atleast_2d(np.asarray(ctrl_pop, dtype=float))
    c = err + np.sum(np.asarray(w_k) * k * k, axis=1)
    c[~np.isfinite(c)] = np.inf
    return c


# --------------------------------------------------------------------------
# genetic operators
# --------------------------------------------------------------------------

def rank_index(size: int, rng: np.random.Generator) -> int:
    """Half-normal rank sampler: ``floor(|N(0,1)| * size / 3)`` clamped to the last rank."""
    return min(int(abs(rng.standard_normal()) * size / 3.0), size - 1)


def select_parents(ranked_population, rng: np.random.Generator):
    """Two independent rank-biased draws from a fittest-first population."""
    pop = np.asarray(ranked_population)
    i = rank_index(len(pop), rng)
    j = rank_index(len(pop), rng)
    return pop[i], pop[j]


def crossover(parent_a, parent_b, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform crossover: each gene comes from ``parent_b`` with probability ``rate``."""
    a = np.asarray(parent_a, dtype=float)
    b = np.asarray(parent_b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("parents must have equal chromosome lengths")
    return np.where(rng.random(a.shape) < rate, b, a)


def mutate(child, scales, rng: np.random.Generator, lower=None, upper=None) -> np.ndarray:
    """Add per-gene gaussian noise, then clip into ``[lower, upper]`` when given."""
    out = np.asarray(child, dtype=float) + rng.normal(0.0, 1.0, np.shape(child)) * np.asarray(scales)
    if lower is not None or upper is not None:
        out = np.clip(out, lower, upper)
    return out


def evolve_generation(population, fitness, n_elite: int, n_inject: int, crossover_rate: float,
                      scales, rng: np.random.Generator, injected: Callable[[int], np.ndarray],
                      lower=None, upper=None) -> np.ndarray:
    """Build the next generation: elites, mutated children, then injected members.

    ``injected(k)`` must return a ``(k, genes)`` array. Ties in fitness keep
    the original population order.
    """
    pop = np.asarray(population, dtype=float)
    size = len(pop)
    order = np.argsort(np.asarray(fitness, dtype=float), kind="stable")
    ranked = pop[order]
    children = []
    for _ in range(size - n_elite - n_inject):
        a, b = select_parents(ranked, rng)
        children.append(mutate(crossover(a, b, crossover_rate, rng), scales, rng, lower, upper))
    parts = [ranked[:n_elite]]
    if children:
        parts.append(np.array(children))
    if n_inject:
        parts.append(np.asarray(injected(n_inject), dtype=float).reshape(n_inject, -1))
    return np.concatenate(parts, axis=0)


def least_squares_gains(features, actions, ridge: float = 1e-6) -> tuple[np.ndarray, bool]:
    """Fit ``actions ~ K @ features`` in the least-squares sense.

    Returns the gains in chromosome order (``K`` row-major) and whether the
    feature matrix was rank deficient, in which case a ridge-regularised
    solve replaces the pseudo-inverse.
    """
    e = np.asarray(features, dtype=float)
    a = np.asarray(actions, dtype=float)
    deficient = len(e) < e.shape[1] or np.linalg.matrix_rank(e) < e.shape[1]
    if deficient:
        theta = np.linalg.solve(e.T @ e + ridge * np.eye(e.shape[1]), e.T @ a)
    else:
        theta = np.linalg.pinv(e) @ a
    return theta.T.reshape(-1), deficient


def inject_inverse_model(history: HistoryBuffer, horizon: int, ridge: float = 1e-6,
                         lower=None, upper=None) -> np.ndarray:
    """Local linear inverse model from the last ``horizon`` feature/action pairs."""
    feats, acts = history.completed(horizon)
    if len(feats) == 0:
        raise ValueError("history holds no completed steps")
    genes, deficient = least_squares_gains(feats, acts, ridge)
    if deficient:
        log.debug("rank-deficient feature history; used ridge solve")
    if lower is not None or upper is not None:
        genes = np.clip(genes, lower, upper)
    return genes


class Gate:
    """Latching switch from the baseline controller to the learned policy.

    The learned policy takes over after ``window`` consecutive updates with
    both fitness values under their thresholds, starting from the next step.
    """

    def __init__(self, q_threshold: float, c_threshold: float, window: int):
        self.q_threshold = q_threshold
        self.c_threshold = c_threshold
        self.window = window
        self.streak = 0
        self.active = False

    def update(self, best_q: float, best_c: float) -> bool:
        if not self.active:
            if best_q < self.q_threshold and best_c < self.c_threshold:
                self.streak += 1
            else:
                self.streak = 0
            self.active = self.streak >= self.window
        return self.active


# --------------------------------------------------------------------------
# the learner
# --------------------------------------------------------------------------

class LearnerStep(NamedTuple):
    action: Action
    learned: bool
    best_q: float
    best_c: float
    best_dyn: np.ndarray
    best_ctrl: np.ndarray


class Learner:
    """One learner instance per run; call :meth:`step` once per control period."""

    def __init__(self, cfg: GAConfig, plant: Plant, track: Track, look_distance: float,
                 rng: np.random.Generator):
        self.cfg = cfg
        self.plant = plant
        self.track = track
        self.look_distance = look_distance
        self.rng = rng
        self.dyn_pop = rng.uniform(cfg.dyn_lower, cfg.dyn_upper, (cfg.dyn_size, N_DYN_GENES))
        self.ctrl_pop = rng.uniform(cfg.ctrl_lower, cfg.ctrl_upper, (cfg.ctrl_size, N_CTRL_GENES))
        capacity = max(cfg.prediction_lookback + cfg.prediction_window, cfg.injection_horizon) + 2
        self.history = HistoryBuffer(capacity)
        self.gate = Gate(cfg.q_threshold, cfg.c_threshold, cfg.gate_window)
        self.generation = 0
        self.q = np.full(cfg.dyn_size, np.inf)
        self.c = np.full(cfg.ctrl_size, np.inf)
        self._q_cache: dict = {}

    def features(self, state, slope: float) -> np.ndarray:
        return policy_features(state, self.track, self.look_distance, slope)[0]

    def evaluate(self, state, slope: float) -> FitnessRecord:
        cfg = self.cfg
        if len(self.history) > cfg.prediction_lookback:
            self.q = self._cached_dynamics_fitness()
        else:
            self.q = np.full(cfg.dyn_size, np.inf)
        best_dyn = self.dyn_pop[int(np.argmin(self.q))]
        refs = reference_states(self.track, state[[X, Y, PSI]], cfg.tracking_horizon, self.plant.dt)
        traces, finite = rollout_tracking(self.ctrl_pop, best_dyn, state, self.track,
                                          cfg.tracking_horizon, self.plant, self.look_distance, slope)
        self.c = control_fitness(traces, refs, self.ctrl_pop, cfg.w_r, cfg.w_k)
        self.c[~finite] = np.inf
        return FitnessRecord(self.q.copy(), self.c.copy())

    def _cached_dynamics_fitness(self) -> np.ndarray:
        # Same chromosome on the same transition always gives the same error,
        # so elites carried over between generations are not re-simulated.
        cfg = self.cfg
        window = min(cfg.prediction_window, len(self.history) - cfg.prediction_lookback)
        starts, seqs, measured, times = _transitions(self.history, cfg.prediction_lookback, window)
        keys = [(m.tobytes(), t) for m in self.dyn_pop for t in times]
        missing = [i for i, key in enumerate(keys) if key not in self._q_cache]
        if missing:
            idx = np.array(missing)
            member, trans = idx // window, idx % window
            pred, finite = propagate(starts[trans], seqs[trans], self.dyn_pop[member], self.plant)
            with np.errstate(invalid="ignore", over="ignore"):
                q = prediction_fitness(pred, measured[trans], cfg.w_s)
            q[~finite | ~np.isfinite(q)] = np.inf
            for i, value in zip(missing, q):
                self._q_cache[keys[i]] = float(value)
        total = np.array([self._q_cache[key] for key in keys]).reshape(len(self.dyn_pop), window).sum(axis=1)
        oldest = times[0]
        self._q_cache = {k: v for k, v in self._q_cache.items() if k[1] >= oldest}
        return total

    def step(self, t: float, state, slope: float, fallback: Action) -> LearnerStep:
        """Record the state, score both populations, act, then breed."""
        state = np.asarray(state, dtype=float)
        feats = self.features(state, slope)
        ref = reference_states(self.track, state[[X, Y, PSI]], 1, self.plant.dt)[0]
        self.history.push(t, state, ref, feats)
        self.evaluate(state, slope)
        i_d, i_c = int(np.argmin(self.q)), int(np.argmin(self.c))
        best_dyn, best_ctrl = self.dyn_pop[i_d].copy(), self.ctrl_pop[i_c].copy()
        best_q, best_c = float(self.q[i_d]), float(self.c[i_c])
        learned = self.gate.active
        action = policy_action(best_ctrl, feats, self.plant.params) if learned else fallback
        self.history.set_last_action(action)
        self.gate.update(best_q, best_c)
        self.evolve()
        return LearnerStep(action, learned, best_q, best_c, best_dyn, best_ctrl)

    def evolve(self) -> None:
        cfg, rng = self.cfg, self.rng
        if np.isfinite(self.q).any():
            self.dyn_pop = evolve_generation(
                self.dyn_pop, self.q, cfg.n_elite, cfg.n_inject, cfg.crossover_rate,
                cfg.dyn_scales, rng, lambda k: rng.uniform(cfg.dyn_lower, cfg.dyn_upper, (k, N_DYN_GENES)),
                cfg.dyn_lower, cfg.dyn_upper)
        self.ctrl_pop = evolve_generation(
            self.ctrl_pop, self.c, cfg.n_elite, cfg.n_inject, cfg.crossover_rate,
            cfg.ctrl_scales, rng, self._ctrl_injection, cfg.ctrl_lower, cfg.ctrl_upper)
        self.generation += 1

    def _ctrl_injection(self, k: int) -> np.ndarray:
        cfg = self.cfg
        feats, _ = self.history.completed(cfg.injection_horizon)
        if len(feats) >= cfg.injection_horizon and np.ptp(feats, axis=0)[:2].any():
            genes = inject_inverse_model(self.history, cfg.injection_horizon, cfg.ridge,
                                         cfg.ctrl_lower, cfg.ctrl_upper)
            return np.repeat(genes[None], k, axis=0)
        return self.rng.uniform(cfg.ctrl_lower, cfg.ctrl_upper, (k, N_CTRL_GENES))
