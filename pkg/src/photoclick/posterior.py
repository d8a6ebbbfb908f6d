"""Exact click-record likelihoods and grid posteriors.

The unnormalised conditional state ``rho`` evolves between detected clicks
with the no-click generator (lost and dissipative jumps are recycled, the
detected one is not) and is hit by ``rate * c rho c^dag`` at every click.
``Tr rho`` at the end is the probability density of the record.

Two backends share one representation: Hermitian matrices are expanded in an
orthonormal Hermitian basis, in which the generator is a real matrix.

* ``"eig"`` diagonalises that real generator once per model and pushes a
  whole batch of records through in parallel.  Cost is dominated by the
  eigendecomposition, so it pays off for many records per parameter value.
* ``"expm"`` applies sparse ``expm_multiply`` record by record.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import expm_multiply

from .errors import (
    DegeneratePosteriorError,
    GridMismatchError,
    InvalidRecordError,
    NumericsError,
    ShapeError,
)
from .quantum import DETECTED, NUMERICS, ModelSpec, ParameterPoint, conditional_hamiltonian, with_theta
from .trajectories import PhotoclickRecord

log = logging.getLogger(__name__)

RENORM_FLOOR = 1e-50
EIG_COND_LIMIT = 1e8


class PosteriorGrid:
    """Probability mass on a rectangular parameter grid.

    Parameters
    ----------
    axes : sequence of (name, values)
        Strictly increasing grid values per parameter.
    weights : array, optional
        Non-negative masses with shape ``(len(values_0), len(values_1), ...)``.
        Defaults to uniform.
    """

    def __init__(self, axes, weights=None):
        self.axes = [(str(name), np.asarray(vals, dtype=float)) for name, vals in axes]
        for name, vals in self.axes:
            if vals.ndim != 1 or len(vals) == 0:
                raise ShapeError(f"axis {name!r} must be a non-empty 1-d array")
            if np.any(np.diff(vals) <= 0):
                raise GridMismatchError(f"axis {name!r} is not strictly increasing")
        shape = self.shape
        if weights is None:
            w = np.full(shape, 1.0 / np.prod(shape))
        else:
            w = np.asarray(weights, dtype=float).reshape(shape)
            if np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ValueError("weights must be finite and non-negative")
            total = w.sum()
            if not total > 0:
                raise DegeneratePosteriorError("grid weights sum to zero")
            w = w / total
        self.weights = w

    @classmethod
    def uniform(cls, axes) -> "PosteriorGrid":
        return cls(axes)

    @classmethod
    def from_log_weights(cls, axes, log_w) -> "PosteriorGrid":
        log_w = np.asarray(log_w, dtype=float)
        top = np.max(log_w)
        if not np.isfinite(top):
            raise DegeneratePosteriorError(f"every grid cell has zero likelihood (max log-likelihood {top})")
        return cls(axes, np.exp(log_w - top))

    @property
    def names(self) -> tuple:
        return tuple(n for n, _ in self.axes)

    @property
    def shape(self) -> tuple:
        return tuple(len(v) for _, v in self.axes)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def points(self) -> np.ndarray:
        """Cell coordinates, shape ``(size, n_params)``, in C order of the weights."""
        mesh = np.meshgrid(*[v for _, v in self.axes], indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def same_axes(self, other: "PosteriorGrid") -> bool:
        return self.names == other.names and all(
            len(a) == len(b) and np.allclose(a, b, rtol=0, atol=1e-12)
            for (_, a), (_, b) in zip(self.axes, other.axes)
        )

    def with_weights(self, weights) -> "PosteriorGrid":
        return PosteriorGrid(self.axes, weights)

    def mean(self) -> ParameterPoint:
        return ParameterPoint(self.names, self.weights.ravel() @ self.points())

    def mode(self) -> ParameterPoint:
        # np.argmax returns the first maximum, i.e. the lowest flat index
        return ParameterPoint(self.names, self.points()[int(np.argmax(self.weights.ravel()))])

    def std(self) -> np.ndarray:
        pts = self.points()
        w = self.weights.ravel()
        mu = w @ pts
        return np.sqrt(np.maximum(w @ (pts - mu) ** 2, 0.0))

    def marginal(self, name: str) -> np.ndarray:
        k = self.names.index(name)
        other = tuple(i for i in range(len(self.axes)) if i != k)
        return self.weights.sum(axis=other)

    def to_dict(self) -> dict:
        return {
            "axes": [{"name": n, "values": v.tolist()} for n, v in self.axes],
            "weights": self.weights.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "PosteriorGrid":
        return cls([(a["name"], a["values"]) for a in d["axes"]], d["weights"])

    def __repr__(self):
        return f"PosteriorGrid(names={self.names}, shape={self.shape})"


def posterior_mean(grid: PosteriorGrid) -> ParameterPoint:
    return grid.mean()


def posterior_mode(grid: PosteriorGrid) -> ParameterPoint:
    return grid.mode()


def bhattacharyya(p: PosteriorGrid | np.ndarray, q: PosteriorGrid | np.ndarray) -> float:
    """Overlap ``sum sqrt(p_i q_i)`` of two distributions on the same grid."""
    if isinstance(p, PosteriorGrid) and isinstance(q, PosteriorGrid) and not p.same_axes(q):
        raise GridMismatchError("posteriors live on different grids")
    pw = p.weights if isinstance(p, PosteriorGrid) else np.asarray(p, dtype=float)
    qw = q.weights if isinstance(q, PosteriorGrid) else np.asarray(q, dtype=float)
    if pw.size != qw.size:
        raise GridMismatchError("posteriors have different sizes")
    return float(np.sum(np.sqrt(pw.ravel() * qw.ravel())))


# --- superoperators in a real Hermitian basis


def hermitian_basis(n: int) -> sp.csr_matrix:
    """Unitary ``U`` whose columns are vec'd orthonormal Hermitian matrices.

    For Hermitian ``rho`` the coordinates ``U^dag vec(rho)`` are real.
    """
    rows, cols, vals = [], [], []
    for j in range(n):
        rows.append(j + j * n)
        cols.append(j)
        vals.append(1.0)
    k = n
    s = 1.0 / np.sqrt(2.0)
    for j in range(n):
        for l in range(j + 1, n):
            rows += [j + l * n, l + j * n, j + l * n, l + j * n]
            cols += [k, k, k + 1, k + 1]
            vals += [s, s, 1j * s, -1j * s]
            k += 2
    return sp.csr_matrix((np.array(vals, dtype=complex), (rows, cols)), shape=(n * n, n * n))


def _sparse_sandwich(o) -> sp.csr_matrix:
    o = sp.csr_matrix(o)
    return sp.kron(o.conj(), o, format="csr")


@dataclass
class RealSuperoperators:
    """No-click generator, click maps and trace functional in real coordinates."""

    generator: sp.csr_matrix
    jumps: dict
    trace: np.ndarray
    rho0: np.ndarray
    dim: int


def real_superoperators(model: ModelSpec) -> RealSuperoperators:
    n = model.dim
    eye = sp.identity(n, format="csr", dtype=complex)
    hc = sp.csr_matrix(conditional_hamiltonian(model))
    gen = -1j * (sp.kron(eye, hc) - sp.kron(hc.conj(), eye))
    jumps = {}
    for ch in model.channels:
        if not ch.rate:
            continue
        if ch.kind == DETECTED:
            jumps[ch.label] = ch.rate * _sparse_sandwich(ch.operator)
        else:
            gen = gen + ch.rate * _sparse_sandwich(ch.operator)
    u = hermitian_basis(n)
    uh = u.conj().T.tocsr()

    def to_real(s):
        r = (uh @ s @ u).tocsr()
        if r.nnz and np.abs(r.data.imag).max() > 1e-10 * max(1.0, np.abs(r.data).max()):
            raise NumericsError("superoperator is not Hermiticity preserving")
        r = sp.csr_matrix(r.real)
        r.eliminate_zeros()
        return r

    psi = model.initial_state
    rho0 = np.outer(psi, psi.conj()).ravel(order="F")
    vec_eye = np.eye(n).ravel(order="F")
    return RealSuperoperators(
        generator=to_real(gen),
        jumps={k: to_real(v) for k, v in jumps.items()},
        trace=(uh @ vec_eye).real,
        rho0=(uh @ rho0).real,
        dim=n,
    )


def real_to_density(model: ModelSpec, x: np.ndarray) -> np.ndarray:
    n = model.dim
    return (hermitian_basis(n) @ x).reshape(n, n, order="F")


def _check_labels(model: ModelSpec, record: PhotoclickRecord, jumps: Mapping) -> list:
    det = [model.channels[i].label for i in model.detected]
    labels = []
    for lab in record.channel_labels:
        if lab == "" and len(det) == 1:
            lab = det[0]
        if lab not in jumps:
            raise InvalidRecordError(f"click label {lab!r} is not a detected channel of the model ({det})")
        labels.append(lab)
    return labels


def _tail(record: PhotoclickRecord) -> float:
    return max(record.total_time - float(np.sum(record.waiting_times)), 0.0)


class ExpmLikelihood:
    """Record-by-record propagation with sparse Krylov exponentials."""

    def __init__(self, model: ModelSpec, check_positivity: bool = False):
        self.model = model
        self.ops = real_superoperators(model)
        self.check_positivity = check_positivity

    def __call__(self, record: PhotoclickRecord) -> float:
        ops = self.ops
        labels = _check_labels(self.model, record, ops.jumps)
        x = ops.rho0.copy()
        logp = 0.0
        for tau, lab in zip(record.waiting_times, labels):
            x = expm_multiply(ops.generator * tau, x)
            x = ops.jumps[lab] @ x
            tr = ops.trace @ x
            if not tr > 0:
                return -np.inf
            logp += np.log(tr)
            x /= tr
            if self.check_positivity:
                self._check(x)
        tail = _tail(record)
        if tail > 0:
            x = expm_multiply(ops.generator * tail, x)
            tr = ops.trace @ x
            logp += np.log(tr) if tr > 0 else -np.inf
        return float(logp)

    def _check(self, x):
        rho = real_to_density(self.model, x)
        if np.linalg.eigvalsh(0.5 * (rho + rho.conj().T)).min() < -NUMERICS.positivity_tol:
            raise NumericsError("conditional state lost positivity")


class EigLikelihood:
    """Batched propagation in the eigenbasis of the real no-click generator.

    The generator ``G`` is real, so its eigenvectors come in conjugate pairs;
    using ``Re v`` and ``Im v`` as basis columns keeps every product real.
    """

    def __init__(self, model: ModelSpec):
        self.model = model
        ops = real_superoperators(model)
        self.ops = ops
        gen = ops.generator.toarray()
        lam, vec = sla.eig(gen, overwrite_a=True, check_finite=False)
        real = np.abs(lam.imag) <= 1e-12 * max(1.0, np.abs(lam).max())
        lam = np.where(real, lam.real, lam)
        # keep one member (Im > 0) of each conjugate pair
        keep_pair = (~real) & (lam.imag > 0)
        order_r = np.nonzero(real)[0]
        order_p = np.nonzero(keep_pair)[0]
        if len(order_r) + 2 * len(order_p) != len(lam):
            raise NumericsError("generator spectrum is not closed under conjugation")
        cols = [vec[:, order_r].real]
        pv = vec[:, order_p]
        cols += [pv.real, pv.imag]
        vr = np.concatenate(cols, axis=1)
        self.n_real = len(order_r)
        self.lam_real = lam[order_r].real
        self.lam_pair = lam[order_p]
        lu = sla.lu_factor(vr, check_finite=False)
        self.cond = 1.0 / max(sla.lapack.dgecon(lu[0], sla.norm(vr, 1), norm="1")[0], 1e-300)
        if self.cond > EIG_COND_LIMIT:
            log.warning("eigenvector basis ill conditioned (cond=%.2e)", self.cond)
        self.jumps = {k: sla.lu_solve(lu, np.asarray(j @ vr), check_finite=False) for k, j in ops.jumps.items()}
        self.trace = vr.T @ ops.trace
        self.z0 = sla.lu_solve(lu, ops.rho0, check_finite=False)

    def _propagate(self, z: np.ndarray, t: np.ndarray) -> np.ndarray:
        """Apply ``exp(G t)`` column-wise; ``t`` has one entry per column."""
        nr, npair = self.n_real, len(self.lam_pair)
        out = np.empty_like(z)
        out[:nr] = z[:nr] * np.exp(np.outer(self.lam_real, t))
        # (p, q) coordinates of a pair evolve as w = p - i q -> exp(lam t) w
        w = (z[nr:nr + npair] - 1j * z[nr + npair:]) * np.exp(np.outer(self.lam_pair, t))
        out[nr:nr + npair] = w.real
        out[nr + npair:] = -w.imag
        return out

    def __call__(self, records: Sequence[PhotoclickRecord]) -> np.ndarray:
        records = list(records)
        if not records:
            return np.zeros(0)
        labels = [_check_labels(self.model, r, self.jumps) for r in records]
        n_max = max(len(r) for r in records)
        z = np.repeat(self.z0[:, None], len(records), axis=1)
        logp = np.zeros(len(records))
        alive = np.ones(len(records), dtype=bool)
        for i in range(n_max):
            active = np.array([len(r) > i for r in records]) & alive
            if not active.any():
                break
            idx = np.nonzero(active)[0]
            t = np.array([records[k].waiting_times[i] for k in idx])
            zi = self._propagate(z[:, idx], t)
            groups = {}
            for pos, k in enumerate(idx):
                groups.setdefault(labels[k][i], []).append(pos)
            for lab, pos in groups.items():
                zi[:, pos] = self.jumps[lab] @ zi[:, pos]
            tr = self.trace @ zi
            bad = ~(tr > 0)
            if bad.any():
                logp[idx[bad]] = -np.inf
                alive[idx[bad]] = False
                tr = np.where(bad, 1.0, tr)
            logp[idx] += np.log(tr)
            z[:, idx] = zi / tr
        tails = np.array([_tail(r) for r in records])
        if np.any(tails > 0):
            idx = np.nonzero((tails > 0) & alive)[0]
            tr = self.trace @ self._propagate(z[:, idx], tails[idx])
            logp[idx] += np.where(tr > 0, np.log(np.maximum(tr, 1e-300)), -np.inf)
        return logp


def record_likelihood(model: ModelSpec, record: PhotoclickRecord, method: str = "auto") -> float:
    """Log probability density of one click record under ``model``."""
    return float(record_log_likelihoods(model, [record], method)[0])


def _pick_method(model: ModelSpec, n_records: int, n_clicks: int) -> str:
    n2 = model.dim**2
    if n2 <= 1024:
        return "eig"
    return "eig" if n_records * max(n_clicks, 1) >= 2000 else "expm"


def record_log_likelihoods(model: ModelSpec, records: Sequence[PhotoclickRecord], method: str = "auto") -> np.ndarray:
    """Log-likelihoods of many records at one parameter value."""
    records = list(records)
    n_clicks = max((len(r) for r in records), default=0)
    if method == "auto":
        method = _pick_method(model, len(records), n_clicks)
    if method == "eig":
        return EigLikelihood(model)(records)
    if method == "expm":
        f = ExpmLikelihood(model)
        return np.array([f(r) for r in records])
    raise ValueError(f"unknown likelihood method {method!r}")


def model_family(base: ModelSpec) -> Callable[[Mapping[str, float]], ModelSpec]:
    """``theta -> ModelSpec`` sharing every fixed parameter with ``base``."""
    return lambda theta: with_theta(base, theta)


def _records_key(records: Sequence[PhotoclickRecord], extra: Mapping) -> str:
    h = hashlib.sha256(json.dumps(extra, sort_keys=True, default=str).encode())
    for r in records:
        h.update(np.ascontiguousarray(r.waiting_times).tobytes())
        h.update("|".join(r.channel_labels).encode())
        h.update(np.float64(r.total_time).tobytes())
    return h.hexdigest()[:16]


def loglik_matrix(
    family: Callable[[Mapping[str, float]], ModelSpec],
    records: Sequence[PhotoclickRecord],
    grid: PosteriorGrid,
    method: str = "auto",
    cache_dir: str | Path | None = None,
    progress: Callable[[int, int], None] | None = None,
) -> np.ndarray:
    """Log-likelihood of every record at every grid cell, shape ``(cells, records)``.

    With ``cache_dir`` each grid cell is stored as it finishes, so an
    interrupted run resumes where it stopped.
    """
    records = list(records)
    pts = grid.points()
    out = np.empty((len(pts), len(records)))
    cache = None
    if cache_dir is not None:
        probe = family(dict(zip(grid.names, pts[0])))
        key = _records_key(records, {"model": probe.to_config(), "method": method})
        cache = Path(cache_dir) / f"loglik-{key}"
        cache.mkdir(parents=True, exist_ok=True)
    for c, p in enumerate(pts):
        path = cache / f"{c:05d}_{grid.size}.npy" if cache else None
        if path is not None and path.exists():
            out[c] = np.load(path)
        else:
            model = family(dict(zip(grid.names, p)))
            out[c] = record_log_likelihoods(model, records, method)
            if path is not None:
                np.save(path, out[c])
        if progress:
            progress(c + 1, len(pts))
    return out


def posteriors_from_loglik(loglik: np.ndarray, grid: PosteriorGrid, prior: PosteriorGrid | None = None) -> list:
    prior = prior or PosteriorGrid.uniform(grid.axes)
    if not prior.same_axes(grid):
        raise GridMismatchError("prior and evaluation grid differ")
    with np.errstate(divide="ignore"):
        log_prior = np.log(prior.weights.ravel())
    return [PosteriorGrid.from_log_weights(grid.axes, (log_prior + loglik[:, k]).reshape(grid.shape)) for k in range(loglik.shape[1])]


def posterior_on_grid(
    family: Callable[[Mapping[str, float]], ModelSpec],
    record: PhotoclickRecord | Iterable[PhotoclickRecord],
    grid: PosteriorGrid,
    prior: PosteriorGrid | None = None,
    method: str = "auto",
    cache_dir=None,
):
    """Bayes posterior on ``grid``; one grid per record when given several."""
    single = isinstance(record, PhotoclickRecord)
    records = [record] if single else list(record)
    ll = loglik_matrix(family, records, grid, method, cache_dir)
    posts = posteriors_from_loglik(ll, grid, prior)
    return posts[0] if single else posts


def delta_grid(lo: float = -10.0, hi: float = 0.0, n: int = 101) -> PosteriorGrid:
    """Uniform one-parameter detuning grid, endpoints included."""
    return PosteriorGrid.uniform([("delta", np.linspace(lo, hi, n))])
