import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from photoclick.errors import DegeneratePosteriorError, GridMismatchError, InvalidRecordError
from photoclick.posterior import (
    EigLikelihood,
    ExpmLikelihood,
    PosteriorGrid,
    bhattacharyya,
    delta_grid,
    hermitian_basis,
    loglik_matrix,
    model_family,
    posterior_mean,
    posterior_mode,
    posterior_on_grid,
    record_log_likelihoods,
)
from photoclick.quantum import (
    DETECTED,
    LOST,
    HilbertSpace,
    JumpChannel,
    ModelSpec,
    ParameterPoint,
    build_optomech_model,
    build_tls_model,
)
from photoclick.tls import exact_log_likelihood_tls
from photoclick.trajectories import PhotoclickRecord, sample_trajectory


def toy_model():
    """Three levels, one detected and one lost decay."""
    h = np.array([[0.0, 0.6, 0.2j], [0.6, -0.4, 0.3], [-0.2j, 0.3, 0.9]])
    down2 = np.zeros((3, 3)); down2[0, 2] = 1.0
    down1 = np.zeros((3, 3)); down1[0, 1] = 1.0
    return ModelSpec(
        space=HilbertSpace((3,)),
        hamiltonian=h,
        channels=(JumpChannel(1.0, down2, DETECTED, "det"), JumpChannel(0.5, down1, LOST, "lost")),
        initial_state=np.array([1.0, 0.0, 0.0]),
        theta=ParameterPoint((), ()),
    )


def test_hermitian_basis_is_orthonormal():
    b = hermitian_basis(4).toarray()
    assert np.allclose(b.conj().T @ b, np.eye(16), atol=1e-14)
    for k in range(16):
        m = b[:, k].reshape(4, 4, order="F")
        assert np.allclose(m, m.conj().T)


def test_uniform_grid_mean_and_mode():
    g = PosteriorGrid.uniform([("delta", np.linspace(0, 10, 101))])
    assert posterior_mean(g)["delta"] == pytest.approx(5.0, abs=1e-12)
    # ties resolve to the lowest index
    assert posterior_mode(g)["delta"] == 0.0


def test_symmetric_bimodal_mean_is_midpoint():
    x = np.linspace(-1, 1, 21)
    w = np.exp(-((x - 0.6) ** 2) / 0.01) + np.exp(-((x + 0.6) ** 2) / 0.01)
    g = PosteriorGrid([("x", x)], w)
    assert g.mean()["x"] == pytest.approx(0.0, abs=1e-12)


def test_single_cell_mass():
    x = np.linspace(0, 1, 11)
    g = PosteriorGrid([("x", x)], np.eye(11)[7])
    assert g.mean()["x"] == g.mode()["x"] == pytest.approx(0.7)
    assert g.std()[0] == pytest.approx(0.0, abs=1e-12)


def test_grid_validation():
    with pytest.raises(GridMismatchError):
        PosteriorGrid([("x", [0.0, 0.0, 1.0])])
    with pytest.raises(DegeneratePosteriorError):
        PosteriorGrid.from_log_weights([("x", [0.0, 1.0])], [-np.inf, -np.inf])


def test_grid_json_round_trip():
    g = PosteriorGrid([("a", [0.0, 1.0]), ("b", [0.0, 0.5, 1.0])], np.arange(1, 7))
    back = PosteriorGrid.from_dict(json.loads(json.dumps(g.to_dict())))
    assert back.same_axes(g)
    assert np.allclose(back.weights, g.weights, rtol=1e-15, atol=0)
    assert np.allclose(back.marginal("a"), [6 / 21, 15 / 21])


def test_bhattacharyya_examples():
    p = np.full(4, 0.25)
    assert bhattacharyya(p, p) == pytest.approx(1.0)
    assert bhattacharyya([1, 0, 0, 0], [0, 1, 0, 0]) == 0.0
    assert bhattacharyya(p, [1, 0, 0, 0]) == pytest.approx(0.5)
    with pytest.raises(GridMismatchError):
        bhattacharyya(delta_grid(n=11), delta_grid(n=12))


@pytest.mark.parametrize("theta", [(0.0, 1.0), (1.3, 0.4), (2.0, 2.0)])
def test_generic_likelihood_matches_tls_closed_form(theta):
    m = build_tls_model(*theta)
    recs = [sample_trajectory(build_tls_model(0.7, 1.2), 25, (4, k)) for k in range(5)]
    want = [exact_log_likelihood_tls(r, *theta) for r in recs]
    assert np.allclose(record_log_likelihoods(m, recs, "eig"), want, rtol=1e-10, atol=1e-9)
    assert np.allclose(record_log_likelihoods(m, recs, "expm"), want, rtol=1e-8, atol=1e-7)


def test_eig_and_expm_agree_on_optomech():
    m = build_optomech_model(cavity_dim=3, mech_dim=4)
    recs = [sample_trajectory(m, 8, (1, k)) for k in range(3)]
    a = record_log_likelihoods(m, recs, "eig")
    b = record_log_likelihoods(m, recs, "expm")
    assert np.allclose(a, b, rtol=1e-9, atol=1e-8)


def test_probability_is_conserved():
    # density of the first click on [0, T] plus the survival beyond T is one
    m = toy_model()
    f = ExpmLikelihood(m)
    T = 12.0
    mass = quad(lambda t: np.exp(f(PhotoclickRecord([t]))), 0, T, limit=200, epsabs=1e-12)[0]
    survive = np.exp(f(PhotoclickRecord([], total_time=T)))
    assert mass + survive == pytest.approx(1.0, abs=1e-9)


def test_survival_is_non_increasing():
    f = EigLikelihood(toy_model())
    ll = f([PhotoclickRecord([], total_time=t) for t in np.linspace(0.0, 20.0, 41)])
    assert ll[0] == 0.0
    assert np.all(np.diff(ll) <= 1e-14)


def test_positivity_monitor_passes_on_physical_model():
    m = toy_model()
    rec = sample_trajectory(m, 15, (2, 0))
    assert np.isfinite(ExpmLikelihood(m, check_positivity=True)(rec))


def test_unknown_label_rejected():
    with pytest.raises(InvalidRecordError):
        record_log_likelihoods(toy_model(), [PhotoclickRecord([1.0], ["lost"])], "eig")


def test_loglik_matrix_cache_round_trip(tmp_path):
    base = build_tls_model(1.0, 1.0)
    grid = PosteriorGrid.uniform([("delta", np.linspace(0, 2, 5))])
    recs = [sample_trajectory(base, 10, (0, k)) for k in range(3)]
    first = loglik_matrix(model_family(base), recs, grid, cache_dir=tmp_path)
    assert len(list(tmp_path.glob("loglik-*/*.npy"))) == 5
    again = loglik_matrix(model_family(base), recs, grid, cache_dir=tmp_path)
    assert np.array_equal(first, again)


def test_posterior_on_grid_concentrates():
    base = build_tls_model(1.5, 1.0)
    rec = sample_trajectory(base, 150, (8, 0))
    post = posterior_on_grid(model_family(base), rec, PosteriorGrid.uniform([("delta", np.linspace(0, 3, 31))]))
    assert abs(post.mean()["delta"] - 1.5) < 3 * post.std()[0] + 0.1


weights = st.lists(st.floats(0.0, 1e3), min_size=5, max_size=5).filter(lambda w: sum(w) > 1e-6)


@settings(max_examples=100, deadline=None)
@given(weights, weights)
def test_bhattacharyya_is_symmetric_and_bounded(a, b):
    p = PosteriorGrid([("x", np.arange(5.0))], a)
    q = PosteriorGrid([("x", np.arange(5.0))], b)
    bc = bhattacharyya(p, q)
    assert -1e-12 <= bc <= 1 + 1e-12
    assert bc == pytest.approx(bhattacharyya(q, p), abs=1e-15)
    assert bhattacharyya(p, p) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(weights)
def test_mean_lies_between_extreme_cells(w):
    g = PosteriorGrid([("x", np.linspace(-1, 3, 5))], w)
    nz = np.linspace(-1, 3, 5)[np.asarray(w) > 0]
    assert nz.min() - 1e-12 <= g.mean()["x"] <= nz.max() + 1e-12
    assert g.weights.sum() == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.05, 20.0), min_size=1, max_size=8), st.randoms())
def test_tls_likelihood_ignores_order(waits, rnd):
    # every click resets the atom, so order cannot matter
    shuffled = list(waits)
    rnd.shuffle(shuffled)
    m = build_tls_model(0.6, 1.3)
    a, b = record_log_likelihoods(m, [PhotoclickRecord(waits), PhotoclickRecord(shuffled)], "eig")
    assert a == pytest.approx(b, rel=1e-10, abs=1e-10)
