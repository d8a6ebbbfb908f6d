"""Monte-Carlo wavefunction sampling of photoclick records.

Between jumps the unnormalised state obeys ``d psi/dt = -i Hc psi``.  The
no-jump probability is ``||psi(t)||^2``; a jump happens when it falls below
a uniform draw.  Only detected-channel jumps enter the record; every other
jump updates the state silently.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from .errors import (
    InvalidRecordError,
    NoJumpPossibleError,
    NumericsError,
    SimulationTimeout,
    TruncationError,
    UnsupportedModelError,
)
from .quantum import DETECTED, ModelSpec, conditional_hamiltonian
from .rng import STREAM_DARK, make_rng

log = logging.getLogger(__name__)

DARK_LABEL = "dark"
MAX_STEPS = 10**7
MAX_TIME = 1e6
RK_RTOL = 1e-8
RK_ATOL = 1e-10
JUMP_TIME_RTOL = 1e-9
COLLISION_OFFSET = 1e-12


@dataclass(frozen=True, eq=False)
class PhotoclickRecord:
    """Ordered waiting times between consecutive detected clicks.

    ``total_time`` defaults to the sum of the waiting times; a larger value
    adds a trailing window in which nothing was detected.
    """

    waiting_times: np.ndarray
    channel_labels: tuple = ()
    total_time: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        w = np.array(self.waiting_times, dtype=float).ravel()
        w.setflags(write=False)
        if np.any(~(w > 0)):
            raise InvalidRecordError("waiting times must be strictly positive")
        labels = tuple(self.channel_labels) if len(self.channel_labels) else ("",) * len(w)
        if len(labels) != len(w):
            raise InvalidRecordError("one channel label per waiting time is required")
        total = float(np.sum(w)) if self.total_time is None else float(self.total_time)
        if total < float(np.sum(w)) * (1 - 1e-12):
            raise InvalidRecordError("total_time is shorter than the sum of waiting times")
        object.__setattr__(self, "waiting_times", w)
        object.__setattr__(self, "channel_labels", labels)
        object.__setattr__(self, "total_time", total)

    def __len__(self):
        return len(self.waiting_times)

    @property
    def click_times(self) -> np.ndarray:
        return np.cumsum(self.waiting_times)

    def permuted(self, rng) -> "PhotoclickRecord":
        order = make_rng(rng).permutation(len(self))
        return PhotoclickRecord(
            self.waiting_times[order],
            tuple(self.channel_labels[i] for i in order),
            meta={**self.meta, "permuted": True},
        )

    def relabeled(self, label: str) -> "PhotoclickRecord":
        """Copy with every click attributed to ``label`` (hides dark-count tags)."""
        return PhotoclickRecord(self.waiting_times, (label,) * len(self), self.total_time, dict(self.meta))

    def truncated(self, n_clicks: int) -> "PhotoclickRecord":
        if n_clicks > len(self):
            raise InvalidRecordError(f"record has only {len(self)} clicks")
        return PhotoclickRecord(
            self.waiting_times[:n_clicks], self.channel_labels[:n_clicks], meta=dict(self.meta)
        )


@dataclass(frozen=True)
class JumpEvent:
    time: float
    channel_index: int
    kind: str


@dataclass(frozen=True)
class DarkCountConfig:
    rate: float = 0.0

    def __post_init__(self):
        if not self.rate >= 0:
            raise ValueError("dark-count rate must be non-negative")


class NoJumpPropagator:
    """Exact between-jump evolution from the eigendecomposition of Hc.

    ``psi(t) = W diag(exp(-i lam t)) W^-1 psi0``; the norm at any time costs
    one small matrix-vector product, which makes first-passage root finding
    cheap.  Falls back to adaptive Runge-Kutta when W is ill conditioned.
    """

    COND_LIMIT = 1e10

    def __init__(self, model: ModelSpec):
        self.model = model
        self.hc = conditional_hamiltonian(model)
        lam, w = np.linalg.eig(self.hc)
        self.lam = lam
        self.w = w
        self.cond = np.linalg.cond(w)
        self.spectral = bool(np.isfinite(self.cond) and self.cond < self.COND_LIMIT)
        if self.spectral:
            self.w_inv = np.linalg.inv(w)
            self.gram = w.conj().T @ w
        decay = -2.0 * np.min(lam.imag) if len(lam) else 1.0
        self.base_step = 0.25 / max(decay, 1e-3)
        if not self.spectral:
            log.warning("Hc eigenbasis ill conditioned (cond=%.2e); using Runge-Kutta", self.cond)

    def coefficients(self, psi: np.ndarray) -> np.ndarray:
        return self.w_inv @ psi

    def norm2(self, coef: np.ndarray, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        x = coef[:, None] * np.exp(-1j * self.lam[:, None] * t[None, :])
        return np.sum(x.conj() * (self.gram @ x), axis=0).real

    def state(self, coef: np.ndarray, t: float) -> np.ndarray:
        return self.w @ (coef * np.exp(-1j * self.lam * t))

    def evolve(self, psi: np.ndarray, t: float) -> np.ndarray:
        if t == 0:
            return np.array(psi, dtype=complex)
        if self.spectral:
            return self.state(self.coefficients(psi), t)
        return _rk_evolve(self.hc, psi, t)

    def first_passage(self, psi, r, t_budget, monitor=None):
        """Time at which ``||psi(t)||^2`` first drops to ``r * ||psi||^2``.

        Returns ``(t, n_evals)``; ``t`` is None if the budget is exhausted.
        """
        if not self.spectral:
            return _rk_first_passage(self.hc, psi, r, t_budget)
        coef = self.coefficients(psi)
        target = r * float(np.vdot(psi, psi).real)
        step = self.base_step
        t0, n0 = 0.0, float(np.vdot(psi, psi).real)
        evals = 0
        while t0 < t_budget:
            grid = t0 + step * np.arange(1, 65)
            n = self.norm2(coef, grid)
            evals += len(grid)
            prev = np.concatenate(([n0], n[:-1]))
            if np.any(n > prev * (1 + 1e-12) + 1e-300):
                raise NumericsError("state norm increased along a no-jump segment")
            if monitor is not None:
                monitor(self.w @ (coef[:, None] * np.exp(-1j * self.lam[:, None] * grid[None, :])), n)
            hit = np.nonzero(n <= target)[0]
            if hit.size:
                k = hit[0]
                lo = grid[k - 1] if k else t0
                hi = grid[k]
                f = lambda t: self.norm2(coef, t)[0] - target
                t_jump = brentq(f, lo, hi, xtol=1e-14, rtol=JUMP_TIME_RTOL * 0.1, maxiter=200)
                return t_jump, evals + 40
            t0, n0 = grid[-1], n[-1]
            step *= 2.0
        return None, evals


def _rk_evolve(hc, psi, t):
    sol = solve_ivp(
        lambda _, y: -1j * (hc @ y), (0.0, t), np.asarray(psi, dtype=complex),
        method="RK45", rtol=RK_RTOL, atol=RK_ATOL,
    )
    if not sol.success:
        raise NumericsError(f"Runge-Kutta integration failed: {sol.message} (nfev={sol.nfev})")
    norms = np.sum(np.abs(sol.y) ** 2, axis=0)
    if np.any(np.diff(norms) > 1e-9 * norms[:-1]):
        raise NumericsError("state norm increased along a no-jump segment")
    return sol.y[:, -1]


def _rk_first_passage(hc, psi, r, t_budget):
    target = r * float(np.vdot(psi, psi).real)

    def event(_, y):
        return float(np.vdot(y, y).real) - target

    event.terminal = True
    event.direction = -1
    sol = solve_ivp(
        lambda _, y: -1j * (hc @ y), (0.0, t_budget), np.asarray(psi, dtype=complex),
        method="RK45", rtol=RK_RTOL, atol=RK_ATOL, events=event, dense_output=True,
    )
    if not sol.success:
        raise NumericsError(f"Runge-Kutta integration failed: {sol.message}")
    if len(sol.t_events[0]) == 0:
        return None, sol.nfev
    # tighten the event location by bisection on the dense interpolant
    t_ev = sol.t_events[0][0]
    lo, hi = max(t_ev - 1e-3, 0.0), t_ev + 1e-3
    f = lambda t: event(t, sol.sol(t))
    if f(lo) > 0 > f(hi):
        t_ev = brentq(f, lo, hi, xtol=1e-14, rtol=JUMP_TIME_RTOL * 0.1)
    return t_ev, sol.nfev


def no_jump_evolve(psi, model: ModelSpec, t: float, method: str = "spectral") -> np.ndarray:
    """Unnormalised state after time ``t`` with no jump of any kind."""
    psi = np.asarray(psi, dtype=complex)
    if np.linalg.norm(psi) > 1 + 1e-9:
        raise ValueError("input state norm exceeds 1")
    if t < 0:
        raise ValueError("t must be non-negative")
    if method == "rk":
        return psi.copy() if t == 0 else _rk_evolve(conditional_hamiltonian(model), psi, t)
    return NoJumpPropagator(model).evolve(psi, t)


def jump_weights(psi, model: ModelSpec) -> np.ndarray:
    return np.array([ch.rate * np.vdot(ch.operator @ psi, ch.operator @ psi).real for ch in model.channels])


def jump_select(psi, model: ModelSpec, u: float) -> tuple[int, np.ndarray]:
    """Pick the channel that fired and return ``(index, normalised post-jump state)``."""
    weights = jump_weights(psi, model)
    total = weights.sum()
    if not total > 0:
        raise NoJumpPossibleError("every channel has zero jump weight for this state")
    cdf = np.cumsum(weights) / total
    j = int(np.searchsorted(cdf, u, side="right"))
    j = min(j, len(weights) - 1)
    while weights[j] == 0:  # guard against u landing on a flat cdf segment edge
        j -= 1
    new = model.channels[j].operator @ psi
    return j, new / np.linalg.norm(new)


def sample_trajectory(
    model: ModelSpec,
    n_clicks: int,
    rng_seed=(0, 0),
    *,
    max_steps: int = MAX_STEPS,
    max_time: float = MAX_TIME,
    propagator: NoJumpPropagator | None = None,
    monitor: Callable | None = None,
    events: list | None = None,
) -> PhotoclickRecord:
    """Simulate until ``n_clicks`` detected clicks have been registered.

    Waiting times run between consecutive detected clicks; lost-photon and
    phonon jumps act on the state but leave no trace in the record.  Pass a
    list as ``events`` to collect every :class:`JumpEvent`.
    """
    if not model.detected:
        raise UnsupportedModelError("model has no detected channel")
    if n_clicks < 1:
        raise ValueError("n_clicks must be >= 1")
    rng = make_rng(rng_seed)
    prop = propagator or NoJumpPropagator(model)
    psi = np.array(model.initial_state, dtype=complex)
    waits, labels = [], []
    t_now = t_last_click = 0.0
    steps = n_undetected = 0
    while len(waits) < n_clicks:
        r = 1.0 - rng.random()
        tau, n_eval = prop.first_passage(psi, r, max_time - t_now, monitor)
        steps += n_eval
        if tau is None or steps > max_steps:
            raise SimulationTimeout(
                f"no jump within budget (t={t_now:.3g}, steps={steps}) at theta={model.theta.as_dict()}",
                theta=model.theta,
            )
        psi = prop.evolve(psi, tau)
        t_now += tau
        j, psi = jump_select(psi, model, rng.random())
        ch = model.channels[j]
        if events is not None:
            events.append(JumpEvent(t_now, j, ch.kind))
        if ch.kind == DETECTED:
            waits.append(t_now - t_last_click)
            labels.append(ch.label)
            t_last_click = t_now
        else:
            n_undetected += 1
    seed = rng_seed if isinstance(rng_seed, (tuple, list)) else None
    return PhotoclickRecord(
        np.array(waits),
        tuple(labels),
        meta={"seed": list(seed) if seed else None, "theta": model.theta.as_dict(), "n_undetected": n_undetected},
    )


def inject_dark_counts(record: PhotoclickRecord, cfg: DarkCountConfig, rng_seed=(0, 0)) -> PhotoclickRecord:
    """Merge a homogeneous Poisson stream of dark clicks into ``record``.

    Dark clicks are labelled :data:`DARK_LABEL`; callers must strip labels
    (``record.relabeled``) before handing the record to an estimator.
    """
    if cfg.rate == 0 or len(record) == 0:
        return record
    rng = make_rng(rng_seed, stream=STREAM_DARK) if isinstance(rng_seed, (tuple, list, int)) else make_rng(rng_seed)
    total = record.total_time
    n_dark = rng.poisson(cfg.rate * total)
    if n_dark == 0:
        return PhotoclickRecord(record.waiting_times, record.channel_labels, total, {**record.meta, "n_dark": 0})
    real_t = record.click_times
    dark_t = np.sort(rng.random(n_dark) * total)
    times = np.concatenate([real_t, dark_t])
    is_dark = np.concatenate([np.zeros(len(real_t), bool), np.ones(n_dark, bool)])
    order = np.argsort(times, kind="stable")
    times, is_dark = times[order], is_dark[order]
    real_labels = iter(record.channel_labels)
    labels = [DARK_LABEL if d else next(real_labels) for d in is_dark]
    # deterministic jitter for (measure-zero) coincident times
    eps = COLLISION_OFFSET * max(total, 1.0)
    for i in range(len(times)):
        prev = times[i - 1] if i else 0.0
        if times[i] <= prev:
            if not is_dark[i]:
                raise NumericsError("dark-count jitter collided with a real click")
            times[i] = prev + eps
    for i in range(len(times) - 2, -1, -1):  # a dark click pushed past a real one
        if times[i] >= times[i + 1]:
            times[i] = times[i + 1] - eps
    waits = np.diff(np.concatenate(([0.0], times)))
    return PhotoclickRecord(waits, tuple(labels), total, {**record.meta, "n_dark": int(n_dark)})


@dataclass
class TruncationReport:
    dims: tuple
    max_top_population: tuple
    likelihood_rel_change: tuple = ()
    threshold: float = 1e-4
    likelihood_threshold: float = 1e-3

    @property
    def passed(self) -> bool:
        ok = all(p < self.threshold for p in self.max_top_population)
        return ok and all(c < self.likelihood_threshold for c in self.likelihood_rel_change)

    def as_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "max_top_population": list(self.max_top_population),
            "likelihood_rel_change": list(self.likelihood_rel_change),
            "passed": self.passed,
        }


def top_level_populations(states: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """Population of the highest Fock level of each subsystem, per state column."""
    states = states.reshape(*dims, -1)
    p = np.abs(states) ** 2
    total = p.sum(axis=tuple(range(len(dims))))
    out = []
    for ax, d in enumerate(dims):
        top = np.take(p, d - 1, axis=ax).sum(axis=tuple(range(len(dims) - 1)))
        out.append(top / np.maximum(total, 1e-300))
    return np.array(out)


def truncation_check(
    model: ModelSpec,
    n_clicks: int,
    n_probe: int = 5,
    seed: int = 0,
    *,
    probe_clicks: int = 0,
    raise_on_fail: bool = False,
) -> TruncationReport:
    """Probe Fock-space leakage of the optomechanical model.

    Runs ``n_probe`` trajectories and tracks the largest population reached
    in the top level of each mode.  With ``probe_clicks > 0`` the likelihood
    of a fixed probe record is also compared against models with every
    dimension enlarged by 2 and by 4.
    """
    if model.family != "optomech":
        raise UnsupportedModelError("truncation_check applies to the optomechanical model")
    dims = model.space.subsystem_dims
    worst = np.zeros(len(dims))

    def monitor(states, _norms):
        np.maximum(worst, top_level_populations(states, dims).max(axis=1), out=worst)

    prop = NoJumpPropagator(model)
    probe = None
    for i in range(n_probe):
        try:
            rec = sample_trajectory(model, n_clicks, (seed, i), propagator=prop, monitor=monitor)
        except SimulationTimeout:
            continue  # dark configuration: population never leaves the vacuum
        probe = probe or rec
    changes = []
    if probe_clicks and probe is not None:
        from .posterior import record_likelihood
        from .quantum import build_optomech_model

        short = probe.truncated(min(probe_clicks, len(probe)))
        base = record_likelihood(model, short)
        for extra in (2, 4):
            bigger = build_optomech_model(model.params, dims[0] + extra, dims[1] + extra)
            changes.append(abs(record_likelihood(bigger, short) - base) / max(abs(base), 1e-300))
    report = TruncationReport(tuple(dims), tuple(float(x) for x in worst), tuple(float(c) for c in changes))
    if raise_on_fail and not report.passed:
        raise TruncationError(f"Fock truncation insufficient: {report.as_dict()}", leakage=report.max_top_population)
    return report
