"""Closed-loop experiments, tracking cost, convergence detection and reports."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .baseline import baseline_action, forward_speed
from .config import ExperimentConfig
from .errors import EmptyWindow, NonFinite
from .estimation import NoiseModel, StateEstimator, slope_estimate
from .learner import Learner, Plant
from .track import Track
from .vehicle import PSI, X, Y, make_state, step, warmup

log = logging.getLogger(__name__)

STEP_COLUMNS = ("t", "x", "y", "vx", "vy", "psi", "psi_dot",
                "x_est", "y_est", "vx_est", "vy_est", "psi_est", "psi_dot_est",
                "phi", "omega_w", "cross_track", "v_err", "mode", "comp_ms",
                "best_Q", "mu_s_hat", "mu_w_hat", "best_C")
GENERATION_COLUMNS = ("generation", "t", "mode", "best_Q", "mu_s_hat", "mu_w_hat", "best_C",
                      "k1", "k2", "k3", "k4", "k5", "k6")


@dataclass
class RunSummary:
    controller: str
    seed: int
    J_r: float
    J_V: float
    J_tot: float
    T_c: float | None
    T_f: float
    converged: bool
    takeover_time: float | None
    window_start: float
    laps_completed: float
    steps: int
    comp_ms_mean: float | None
    comp_ms_std: float | None
    final_mu_s: float | None
    final_mu_w: float | None
    final_gains: list | None
    dyn_band_entry_time: float | None
    track_length: float


@dataclass
class RunResult:
    summary: RunSummary
    steps: list = field(repr=False)
    generations: list = field(repr=False)

    def column(self, name: str) -> np.ndarray:
        i = STEP_COLUMNS.index(name)
        return np.array([row[i] for row in self.steps], dtype=float)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def _integrate(t, y, t0: float, t1: float) -> float:
    """Exact integral of the piecewise-linear interpolant of ``y`` over ``[t0, t1]``."""
    inner = (t > t0) & (t < t1)
    ts = np.concatenate([[t0], t[inner], [t1]])
    ys = np.concatenate([[np.interp(t0, t, y)], y[inner], [np.interp(t1, t, y)]])
    return float(np.sum(0.5 * (ys[1:] + ys[:-1]) * np.diff(ts)))


def tracking_cost(times, cross_track, v_err, t_start: float, t_end: float) -> tuple[float, float, float]:
    """Trapezoidal ``(J_r, J_V, J_tot)`` of ``|cross_track|`` and ``|v_err|`` over a window.

    The velocity term integrates the magnitude of the error so overspeed and
    underspeed do not cancel.
    """
    if not t_start < t_end:
        raise EmptyWindow(f"empty cost window [{t_start}, {t_end}]")
    t = np.asarray(times, dtype=float)
    j_r = _integrate(t, np.abs(np.asarray(cross_track, dtype=float)), t_start, t_end)
    j_v = _integrate(t, np.abs(np.asarray(v_err, dtype=float)), t_start, t_end)
    return j_r, j_v, j_r + j_v


def detect_convergence(times, cross_track, window: float, eps: float, start: float | None = None):
    """Earliest ``t`` whose following ``window`` seconds have RMS cross-track below ``eps``.

    Only windows starting at or after ``start`` are considered. Returns None
    when no window qualifies.
    """
    t = np.asarray(times, dtype=float)
    ct = np.asarray(cross_track, dtype=float)
    if len(t) == 0:
        raise ValueError("empty log")
    first = 0 if start is None else int(np.searchsorted(t, start - 1e-9))
    cumsq = np.concatenate([[0.0], np.cumsum(ct * ct)])
    ends = np.searchsorted(t, t + window - 1e-9)  # first index with t >= t_i + window
    for i in range(first, len(t)):
        j = ends[i]
        if j >= len(t):
            break
        if _window_rms(cumsq, i, j) < eps:
            return float(t[i])
    return None


def _window_rms(cumsq, i: int, j: int) -> float:
    return math.sqrt(max(cumsq[j + 1] - cumsq[i], 0.0) / (j + 1 - i))


def band_entry_time(times, values, target, rel_tol: float = 0.2):
    """First time after which every row of ``values`` stays within ``rel_tol`` of ``target``."""
    v = np.asarray(values, dtype=float)
    ok = np.all(np.abs(v - np.asarray(target)) <= rel_tol * np.abs(np.asarray(target)), axis=1)
    if len(ok) == 0 or not ok[-1]:
        return None
    bad = np.flatnonzero(~ok)
    return float(times[0] if len(bad) == 0 else times[bad[-1] + 1])


# --------------------------------------------------------------------------
# the control loop
# --------------------------------------------------------------------------

def initial_state(track: Track, arc: float, offset: float) -> np.ndarray:
    """Car at rest, ``offset`` metres left of the track (negative: right), heading along it."""
    p = track.point_at(arc)
    tx, ty = track.tangent_at(arc)
    return make_state(p[0] - offset * ty, p[1] + offset * tx, psi=math.atan2(ty, tx))


def run(cfg: ExperimentConfig, out_dir=None) -> RunResult:
    """Run one closed-loop experiment and optionally write its logs to ``out_dir``.

    The run ends once ``laps`` laps have been driven after convergence (or
    at ``max_time``). The learner only counts as converged while the learned
    policy is in charge.
    """
    run_cfg = cfg.experiment
    warmup()
    track = cfg.track.build()
    params, terrain = cfg.vehicle, cfg.terrain
    dt = run_cfg.dt_control
    seeds = np.random.SeedSequence(run_cfg.seed).spawn(3)
    noise_rng, ga_rng, slope_rng = (np.random.default_rng(s) for s in seeds)

    noise = NoiseModel(cfg.noise.sigma_pos, cfg.noise.sigma_rot)
    estimator = StateEstimator(cfg.noise.beta, cfg.noise.pose_alpha)
    learner = None
    if run_cfg.controller == "ga":
        plant = Plant(params, terrain, dt, run_cfg.dt_sim)
        learner = Learner(cfg.ga, plant, track, cfg.baseline.look_distance, ga_rng)

    window = run_cfg.convergence_window
    if window is None:
        window = track.length / track.desired_speed if track.desired_speed > 0 else 60.0
    n_window = max(1, int(round(window / dt)))
    truth_mu = np.array([terrain.mu_s, terrain.mu_w])

    state = initial_state(track, run_cfg.initial_arc, run_cfg.initial_offset)
    arc_prev = track.nearest(state[:2]).arc_position
    progress = [0.0]
    cumsq = [0.0]
    times, steps, generations, comp, dyn_hist = [], [], [], [], []
    takeover = 0 if learner is None else None
    t_c_index = None
    max_steps = int(math.floor(run_cfg.max_time / dt + 1e-9)) + 1

    for k in range(max_steps):
        t = k * dt
        meas = noise.corrupt(t, state[[X, Y, PSI]], noise_rng)
        tic = time.perf_counter()
        est = estimator.update(meas)
        slope = slope_estimate(terrain.slope, slope_rng, cfg.noise.sigma_slope)
        action = baseline_action(est, track, cfg.baseline, params)
        mode = "baseline"
        best = (math.nan,) * 4
        if learner is not None:
            res = learner.step(t, est, slope, action)
            action = res.action
            mode = "learned" if res.learned else "baseline"
            best = (res.best_q, res.best_dyn[0], res.best_dyn[1], res.best_c)
            if res.learned and takeover is None:
                takeover = k
            dyn_hist.append(res.best_dyn)
            generations.append((learner.generation - 1, t, mode, res.best_q, *res.best_dyn,
                                res.best_c, *res.best_ctrl))
        elapsed = (time.perf_counter() - tic) * 1e3
        comp.append(elapsed)

        q = track.nearest(state[:2])
        v_err = track.desired_speed - forward_speed(state)
        steps.append((t, *state, *est, action[0], action[1], q.cross_track, v_err, mode,
                       elapsed if run_cfg.timing else math.nan, *best))
        times.append(t)
        if k > 0:
            progress.append(progress[-1] + track.arc_delta(arc_prev, q.arc_position))
        arc_prev = q.arc_position
        cumsq.append(cumsq[-1] + q.cross_track * q.cross_track)

        # online convergence: window [k - n_window, k] fully observed
        i = k - n_window
        if t_c_index is None and takeover is not None and i >= takeover:
            if _window_rms(cumsq, i, k) < run_cfg.convergence_eps:
                t_c_index = i
        if t_c_index is not None:
            if progress[-1] - progress[t_c_index] >= run_cfg.laps * track.length:
                break

        try:
            state = step(state, action, dt, params, terrain, run_cfg.dt_sim)
        except NonFinite as exc:
            raise NonFinite("truth simulation diverged", row=k) from exc

    t_arr = np.array(times)
    ct = np.array([row[STEP_COLUMNS.index("cross_track")] for row in steps])
    ve = np.array([row[STEP_COLUMNS.index("v_err")] for row in steps])
    t_f = float(t_arr[-1])
    converged = t_c_index is not None
    if converged:
        start_idx = t_c_index
    else:
        start_idx = takeover if takeover is not None else 0
    t_start = float(t_arr[start_idx])
    if t_start < t_f:
        j_r, j_v, j_tot = tracking_cost(t_arr, ct, ve, t_start, t_f)
    else:
        j_r = j_v = j_tot = math.nan
    timed = np.array(comp) if run_cfg.timing else None
    final_dyn = dyn_hist[-1] if dyn_hist else None
    summary = RunSummary(
        controller=run_cfg.controller,
        seed=run_cfg.seed,
        J_r=j_r, J_V=j_v, J_tot=j_tot,
        T_c=float(t_arr[t_c_index]) if converged else None,
        T_f=t_f,
        converged=converged,
        takeover_time=float(t_arr[takeover]) if takeover is not None else None,
        window_start=t_start,
        laps_completed=(progress[-1] - progress[start_idx]) / track.length,
        steps=len(steps),
        comp_ms_mean=float(timed.mean()) if timed is not None else None,
        comp_ms_std=float(timed.std()) if timed is not None else None,
        final_mu_s=float(final_dyn[0]) if final_dyn is not None else None,
        final_mu_w=float(final_dyn[1]) if final_dyn is not None else None,
        final_gains=[float(g) for g in generations[-1][-6:]] if generations else None,
        dyn_band_entry_time=band_entry_time(t_arr, dyn_hist, truth_mu) if dyn_hist else None,
        track_length=track.length,
    )
    result = RunResult(summary, steps, generations)
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


# --------------------------------------------------------------------------
# output
# --------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return "" if math.isnan(v) else repr(v)


def _json_safe(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def write_outputs(result: RunResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "steps.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(STEP_COLUMNS)
        w.writerows([_fmt(v) for v in row] for row in result.steps)
    with open(out / "generations.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GENERATION_COLUMNS)
        w.writerows([_fmt(v) for v in row] for row in result.generations)
    (out / "summary.json").write_text(json.dumps(_json_safe(asdict(result.summary)), indent=2) + "\n")
    return out


def read_steps(path) -> dict[str, np.ndarray]:
    """Load a ``steps.csv`` back into column arrays (``mode`` stays a string array)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    cols = {}
    for name in STEP_COLUMNS:
        vals = [r[name] for r in rows]
        cols[name] = np.array(vals) if name == "mode" else np.array(
            [float(v) if v != "" else math.nan for v in vals])
    return cols


# --------------------------------------------------------------------------
# comparison
# --------------------------------------------------------------------------

_REPORT_FIELDS = ("J_r", "J_V", "J_tot", "T_c", "T_f", "comp_ms_mean", "comp_ms_std")


def compare(cfg_a: ExperimentConfig, cfg_b: ExperimentConfig, seeds=None, out_dir=None,
            labels=None) -> dict:
    """Run two configurations over the same seeds and tabulate the results.

    Returns a dict with per-seed rows, mean/std aggregates and ``b / a``
    ratios of the aggregate means; writes ``comparison.json`` and
    ``comparison.txt`` when ``out_dir`` is given.
    """
    if cfg_a.track != cfg_b.track or cfg_a.experiment.laps != cfg_b.experiment.laps:
        raise ValueError("compared configurations must share the track and lap count")
    seeds = [cfg_a.experiment.seed] if seeds is None else list(seeds)
    labels = labels or (cfg_a.experiment.controller, cfg_b.experiment.controller)
    if labels[0] == labels[1]:
        labels = (labels[0] + "_a", labels[1] + "_b")
    rows = []
    for seed in seeds:
        for label, cfg in zip(labels, (cfg_a, cfg_b)):
            c = cfg.replace(experiment={"seed": seed})
            sub = None if out_dir is None else Path(out_dir) / f"{label}_seed{seed}"
            s = run(c, sub).summary
            rows.append({"label": label, "seed": seed, **{f: getattr(s, f) for f in _REPORT_FIELDS}})
    aggregate = {}
    for label in labels:
        agg = {}
        for f in _REPORT_FIELDS:
            vals = np.array([r[f] for r in rows if r["label"] == label and r[f] is not None], dtype=float)
            agg[f] = {"mean": float(vals.mean()) if len(vals) else None,
                      "std": float(vals.std()) if len(vals) else None}
        aggregate[label] = agg
    ratio = {}
    for f in _REPORT_FIELDS:
        a, b = aggregate[labels[0]][f]["mean"], aggregate[labels[1]][f]["mean"]
        ratio[f] = b / a if a not in (None, 0) and b is not None else None
    delta = {f: (aggregate[labels[1]][f]["mean"] - aggregate[labels[0]][f]["mean"])
             if None not in (aggregate[labels[0]][f]["mean"], aggregate[labels[1]][f]["mean"]) else None
             for f in _REPORT_FIELDS}
    report = {"labels": list(labels), "seeds": seeds, "rows": rows,
              "aggregate": aggregate, "ratio": ratio, "delta": delta}
    report["text"] = format_report(report)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.json").write_text(json.dumps(_json_safe(report), indent=2) + "\n")
        (out / "comparison.txt").write_text(report["text"])
    return report


def format_report(report: dict) -> str:
    def cell(v):
        return "-" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.3f}"

    head = f"{'run':<14}{'seed':>6}" + "".join(f"{f:>14}" for f in _REPORT_FIELDS)
    lines = [head, "-" * len(head)]
    for r in report["rows"]:
        lines.append(f"{r['label']:<14}{r['seed']:>6}" + "".join(f"{cell(r[f]):>14}" for f in _REPORT_FIELDS))
    lines.append("-" * len(head))
    for label in report["labels"]:
        agg = report["aggregate"][label]
        lines.append(f"{label + ' mean':<20}" + "".join(f"{cell(agg[f]['mean']):>14}" for f in _REPORT_FIELDS))
        lines.append(f"{label + ' std':<20}" + "".join(f"{cell(agg[f]['std']):>14}" for f in _REPORT_FIELDS))
    lines.append(f"{'ratio b/a':<20}" + "".join(f"{cell(report['ratio'][f]):>14}" for f in _REPORT_FIELDS))
    return "\n".join(lines) + "\n"
