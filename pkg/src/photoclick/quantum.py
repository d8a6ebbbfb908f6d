"""Dense operators and the two photon-emitting models.

Units: hbar = 1 and every rate/frequency is measured in units of the cavity
(or atomic) decay rate kappa.  Operators are plain ``complex128`` arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    InconsistentEfficiencyError,
    InvalidDimensionError,
    InvalidRateError,
    NonUniqueSteadyStateError,
    NumericsError,
    UnsupportedModelError,
)

DETECTED = "detected"
LOST = "lost"
DISSIPATIVE = "dissipative"
CHANNEL_KINDS = (DETECTED, LOST, DISSIPATIVE)


@dataclass
class NumericsConfig:
    hermitian_tol: float = 1e-12
    positivity_tol: float = 1e-9
    norm_tol: float = 1e-12


NUMERICS = NumericsConfig()

OMEGA_M = 4.0 * math.sqrt(2.0)

# Optomechanical parameters in units of kappa.
TABLE1 = {
    "kappa": 1.0,
    "kappa_d": 0.9,
    "omega_m": OMEGA_M,
    "gamma": 1e-3 * OMEGA_M,
    "g": 4.0,
    "m_bar": 1.0,
    "omega": 0.3 * OMEGA_M,
    "delta": -2.0 * math.sqrt(2.0),
}
DELTA_RANGE = (-10.0, 0.0)
DARK_COUNT_RATE = 1e-2


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=complex)
    a.setflags(write=False)
    return a


def is_hermitian(a: np.ndarray, tol: float | None = None) -> bool:
    tol = NUMERICS.hermitian_tol if tol is None else tol
    return bool(np.max(np.abs(a - a.conj().T), initial=0.0) < tol)


@dataclass(frozen=True)
class HilbertSpace:
    subsystem_dims: tuple

    def __post_init__(self):
        dims = tuple(int(d) for d in self.subsystem_dims)
        if not dims or any(d < 1 for d in dims):
            raise InvalidDimensionError(f"bad subsystem dims {dims}")
        if math.prod(dims) < 2:
            raise InvalidDimensionError("total dimension must be at least 2")
        object.__setattr__(self, "subsystem_dims", dims)

    @property
    def total_dim(self) -> int:
        return math.prod(self.subsystem_dims)

    def basis_index(self, *levels: int) -> int:
        return int(np.ravel_multi_index(levels, self.subsystem_dims))


@dataclass(frozen=True)
class ParameterPoint:
    """Named estimated parameters (units of kappa)."""

    names: tuple
    values: tuple

    def __post_init__(self):
        names = tuple(str(n) for n in self.names)
        values = tuple(float(v) for v in np.ravel(self.values))
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate parameter names {names}")
        if len(names) != len(values):
            raise ValueError("names and values differ in length")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "values", values)

    def __getitem__(self, name: str) -> float:
        return self.values[self.names.index(name)]

    def __len__(self):
        return len(self.names)

    def as_array(self) -> np.ndarray:
        return np.array(self.values)

    def as_dict(self) -> dict:
        return dict(zip(self.names, self.values))


@dataclass(frozen=True, eq=False)
class JumpChannel:
    rate: float
    operator: np.ndarray
    kind: str
    label: str

    def __post_init__(self):
        if not self.rate >= 0:
            raise InvalidRateError(f"channel {self.label!r} has negative rate {self.rate}")
        if self.kind not in CHANNEL_KINDS:
            raise ValueError(f"unknown channel kind {self.kind!r}")
        object.__setattr__(self, "rate", float(self.rate))
        object.__setattr__(self, "operator", _frozen(self.operator))


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """A parametrised open quantum system with tagged jump channels.

    ``family`` and ``params`` record how the model was built, so that the
    same model can be rebuilt from its config (see :func:`model_from_config`).
    """

    space: HilbertSpace
    hamiltonian: np.ndarray
    channels: tuple
    initial_state: np.ndarray
    theta: ParameterPoint
    control: Mapping[str, float] = field(default_factory=dict)
    family: str = "custom"
    params: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        n = self.space.total_dim
        h = _frozen(self.hamiltonian)
        psi = _frozen(self.initial_state)
        if h.shape != (n, n):
            raise InvalidDimensionError(f"Hamiltonian shape {h.shape} != ({n}, {n})")
        if not is_hermitian(h):
            raise NumericsError("Hamiltonian is not Hermitian")
        if psi.shape != (n,):
            raise InvalidDimensionError("initial state has the wrong dimension")
        if abs(np.linalg.norm(psi) - 1.0) > NUMERICS.norm_tol:
            raise NumericsError("initial state is not normalised")
        for ch in self.channels:
            if ch.operator.shape != (n, n):
                raise InvalidDimensionError(f"channel {ch.label!r} has wrong shape")
        object.__setattr__(self, "hamiltonian", h)
        object.__setattr__(self, "initial_state", psi)
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "control", dict(self.control))
        object.__setattr__(self, "params", dict(self.params))

    @property
    def dim(self) -> int:
        return self.space.total_dim

    @property
    def detected(self) -> list[int]:
        return [i for i, ch in enumerate(self.channels) if ch.kind == DETECTED]

    @property
    def undetected(self) -> list[int]:
        return [i for i, ch in enumerate(self.channels) if ch.kind != DETECTED]

    def channel_index(self, label: str) -> int:
        for i, ch in enumerate(self.channels):
            if ch.label == label:
                return i
        raise KeyError(label)

    def to_config(self) -> dict:
        return {
            "family": self.family,
            "params": dict(self.params),
            "dims": list(self.space.subsystem_dims),
            "theta": self.theta.as_dict(),
            "channels": [
                {"label": ch.label, "kind": ch.kind, "rate": ch.rate}
                for ch in self.channels
            ],
        }


def ladder_operator(dim: int) -> np.ndarray:
    """Truncated bosonic annihilation operator, ``a[n-1, n] = sqrt(n)``."""
    if dim < 2:
        raise InvalidDimensionError(f"ladder operator needs dim >= 2, got {dim}")
    return np.diag(np.sqrt(np.arange(1, dim)), k=1).astype(complex)


def build_tls_model(delta: float, omega: float, kappa: float = 1.0) -> ModelSpec:
    """Laser-driven two-level atom in the basis (|g>, |e>)."""
    if not kappa > 0:
        raise InvalidRateError(f"kappa must be positive, got {kappa}")
    if omega < 0:
        raise InvalidRateError(f"omega must be non-negative, got {omega}")
    sigma_minus = ladder_operator(2)
    h = np.array([[0.0, omega / 2.0], [omega / 2.0, -delta]], dtype=complex)
    return ModelSpec(
        space=HilbertSpace((2,)),
        hamiltonian=h,
        channels=(JumpChannel(kappa, sigma_minus, DETECTED, "emission"),),
        initial_state=np.array([1.0, 0.0]),
        theta=ParameterPoint(("delta", "omega"), (delta, omega)),
        control={"kappa": float(kappa)},
        family="tls",
        params={"delta": float(delta), "omega": float(omega), "kappa": float(kappa)},
    )


def optomech_params(**overrides) -> dict:
    """Default optomechanical parameters (TABLE1) with selected entries replaced."""
    unknown = set(overrides) - set(TABLE1)
    if unknown:
        raise KeyError(f"unknown optomechanical parameters {sorted(unknown)}")
    params = dict(TABLE1)
    params.update({k: float(v) for k, v in overrides.items()})
    return params


def optomech_operators(cavity_dim: int, mech_dim: int) -> tuple[np.ndarray, np.ndarray]:
    a = np.kron(ladder_operator(cavity_dim), np.eye(mech_dim))
    b = np.kron(np.eye(cavity_dim), ladder_operator(mech_dim))
    return a, b


def build_optomech_model(
    params: Mapping[str, float] | None = None, cavity_dim: int = 6, mech_dim: int = 12
) -> ModelSpec:
    """Driven optomechanical cavity; the detuning is the estimated parameter.

    Missing entries of ``params`` fall back to :data:`TABLE1`.
    """
    p = optomech_params(**dict(params or {}))
    if p["kappa_d"] > p["kappa"]:
        raise InconsistentEfficiencyError(
            f"kappa_d={p['kappa_d']} exceeds kappa={p['kappa']}"
        )
    for key in ("kappa", "kappa_d", "gamma", "m_bar"):
        if p[key] < 0:
            raise InvalidRateError(f"{key} must be non-negative")
    a, b = optomech_operators(cavity_dim, mech_dim)
    ad, bd = a.conj().T, b.conj().T
    n_a = ad @ a
    h = (
        -p["delta"] * n_a
        + p["omega_m"] * (bd @ b)
        + 0.5 * p["omega"] * (a + ad)
        + p["g"] * n_a @ (b + bd)
    )
    channels = (
        JumpChannel(p["kappa_d"], a, DETECTED, "cavity"),
        JumpChannel(p["kappa"] - p["kappa_d"], a, LOST, "cavity_lost"),
        JumpChannel(p["gamma"] * (p["m_bar"] + 1.0), b, DISSIPATIVE, "phonon_out"),
        JumpChannel(p["gamma"] * p["m_bar"], bd, DISSIPATIVE, "phonon_in"),
    )
    psi0 = np.zeros(cavity_dim * mech_dim)
    psi0[0] = 1.0
    return ModelSpec(
        space=HilbertSpace((cavity_dim, mech_dim)),
        hamiltonian=h,
        channels=channels,
        initial_state=psi0,
        theta=ParameterPoint(("delta",), (p["delta"],)),
        control={"omega": p["omega"]},
        family="optomech",
        params=p,
    )


def model_from_config(cfg: Mapping) -> ModelSpec:
    family = cfg["family"]
    params = dict(cfg.get("params", {}))
    params.update(cfg.get("theta", {}))
    if family == "tls":
        return build_tls_model(params["delta"], params["omega"], params.get("kappa", 1.0))
    if family == "optomech":
        dims = cfg.get("dims", [6, 12])
        return build_optomech_model(params, dims[0], dims[1])
    raise UnsupportedModelError(f"cannot rebuild model family {family!r}")


def with_theta(model: ModelSpec, theta: Mapping[str, float] | Sequence[float]) -> ModelSpec:
    """Rebuild ``model`` with new values of its estimated parameters."""
    if not isinstance(theta, Mapping):
        theta = dict(zip(model.theta.names, np.ravel(theta)))
    cfg = model.to_config()
    cfg["theta"] = {**cfg["theta"], **{k: float(v) for k, v in theta.items()}}
    return model_from_config(cfg)


def conditional_hamiltonian(model: ModelSpec) -> np.ndarray:
    """H - (i/2) sum_k rate_k O_k^dag O_k over every channel."""
    h = model.hamiltonian.copy()
    for ch in model.channels:
        o = ch.operator
        h = h - 0.5j * ch.rate * (o.conj().T @ o)
    return h


def manifold_energy(model: ModelSpec, n_cav: int, n_mech: int) -> float:
    if model.family != "optomech":
        raise UnsupportedModelError("manifold energies exist only for the optomechanical model")
    p = model.params
    return -p["delta"] * n_cav + p["omega_m"] * n_mech - p["g"] ** 2 / p["omega_m"] * n_cav**2


def resonance_detunings(model_or_params, n_max: int = 3) -> list[float]:
    """Detunings -n g^2 / omega_m, n = 1..n_max, where the n-photon manifold is resonant."""
    if isinstance(model_or_params, ModelSpec):
        if model_or_params.family != "optomech":
            raise UnsupportedModelError("resonances exist only for the optomechanical model")
        p = model_or_params.params
    else:
        p = optomech_params(**dict(model_or_params))
    if n_max < 1:
        raise ValueError("n_max must be >= 1")
    shift = p["g"] ** 2 / p["omega_m"]
    return [-n * shift for n in range(1, n_max + 1)]


# --- superoperators (column-stacking vectorisation: vec(A X B) = (B^T kron A) vec X)


def _sandwich(o: np.ndarray) -> np.ndarray:
    return np.kron(o.conj(), o)


def liouvillian(model: ModelSpec, which: str = "all") -> np.ndarray:
    """Superoperator matrix of the GKSL generator.

    ``which="all"`` gives the full master equation.  ``which="undetected"``
    gives the no-click generator: ``-i(Hc rho - rho Hc^dag)`` plus recycling
    only through lost and dissipative channels.
    """
    n = model.dim
    eye = np.eye(n)
    hc = conditional_hamiltonian(model)
    sup = -1j * (np.kron(eye, hc) - np.kron(hc.conj(), eye))
    for ch in model.channels:
        if which == "undetected" and ch.kind == DETECTED:
            continue
        if ch.rate:
            sup = sup + ch.rate * _sandwich(ch.operator)
    return sup


def gksl_rhs(model: ModelSpec, rho: np.ndarray) -> np.ndarray:
    h = model.hamiltonian
    out = -1j * (h @ rho - rho @ h)
    for ch in model.channels:
        o = ch.operator
        od = o.conj().T
        out = out + ch.rate * (o @ rho @ od - 0.5 * (od @ o @ rho + rho @ od @ o))
    return out


def unravelled_mean_rhs(model: ModelSpec, rho: np.ndarray) -> np.ndarray:
    """Drift of the full unravelling averaged over the jump increments.

    Uses ``<dN_k> = rate_k Tr(O_k^dag O_k rho) dt`` for every channel.
    """
    hc = conditional_hamiltonian(model)
    out = -1j * (hc @ rho - rho @ hc.conj().T)
    for ch in model.channels:
        if not ch.rate:
            continue
        o = ch.operator
        od = o.conj().T
        p = np.trace(od @ o @ rho)
        out = out + ch.rate * p * rho  # deterministic part of the jump superoperator
        if abs(p) > 0:
            out = out + ch.rate * p * (o @ rho @ od / p - rho)
    return out


def steady_state(model: ModelSpec) -> np.ndarray:
    """Unique fixed point of the master equation (dense SVD null-space solve)."""
    n = model.dim
    sup = liouvillian(model, "all")
    _, s, vh = np.linalg.svd(sup)
    scale = max(s[0], 1.0)
    if s[-2] < 1e-10 * scale:
        raise NonUniqueSteadyStateError(
            f"generator has a degenerate null space (singular values {s[-2]:.3e}, {s[-1]:.3e})"
        )
    rho = vh[-1].conj().reshape(n, n, order="F")
    rho = rho / np.trace(rho)
    rho = 0.5 * (rho + rho.conj().T)
    if np.linalg.eigvalsh(rho).min() < -NUMERICS.positivity_tol:
        raise NumericsError("steady state is not positive semidefinite")
    return rho

