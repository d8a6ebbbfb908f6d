import numpy as np
import pytest

import photoclick.experiments as experiments
from photoclick.abc import SummarySpec
from photoclick.errors import CompatibilityError, UsageError
from photoclick.library import TrajectoryLibrary, generate_library, records_with_labels_hidden
from photoclick.quantum import build_optomech_model, build_tls_model

PRIOR = {"delta": [0.0, 2.0]}


def tls_lib(n=20, seed=4, **kw):
    return generate_library(build_tls_model(1.0, 1.0), PRIOR, n, 12, seed, fixed={"omega": 1.0}, **kw)


def test_round_trip(tmp_path):
    lib = tls_lib()
    back = TrajectoryLibrary.load(lib.save(tmp_path / "a.pclb"))
    assert np.array_equal(back.thetas, lib.thetas)
    assert np.array_equal(back.waits, lib.waits)
    assert back.metadata == lib.metadata
    assert back.record(3).channel_labels == ("emission",) * 12
    for a, b in zip(back.summaries(), lib.summaries()):
        assert np.array_equal(a, b)


def test_same_seed_gives_identical_bytes(tmp_path):
    a = tls_lib().save(tmp_path / "a.pclb").read_bytes()
    b = tls_lib().save(tmp_path / "b.pclb").read_bytes()
    c = tls_lib(seed=5).save(tmp_path / "c.pclb").read_bytes()
    assert a == b
    assert a != c


def test_worker_count_does_not_change_output():
    assert tls_lib(n=8, workers=2).fingerprint() == tls_lib(n=8, workers=1).fingerprint()


def test_existing_file_not_overwritten(tmp_path):
    lib = tls_lib(n=3)
    p = lib.save(tmp_path / "a.pclb")
    with pytest.raises(UsageError):
        lib.save(p)
    lib.save(p, overwrite=True)


def test_corrupt_files_rejected(tmp_path):
    p = tls_lib(n=3).save(tmp_path / "a.pclb")
    (tmp_path / "short.pclb").write_bytes(p.read_bytes()[:-5])
    with pytest.raises(CompatibilityError):
        TrajectoryLibrary.load(tmp_path / "short.pclb")
    (tmp_path / "junk.pclb").write_bytes(b"nope" + bytes(40))
    with pytest.raises(CompatibilityError):
        TrajectoryLibrary.load(tmp_path / "junk.pclb")


def test_summary_cache_matches_fresh_computation():
    lib = tls_lib()
    spec = SummarySpec("histogram", (0.0, 1.0, 3.0))
    first = lib.summaries([spec])[0]
    fresh = TrajectoryLibrary(lib.thetas, lib.waits, lib.labels, lib.metadata).summaries([spec])[0]
    assert np.array_equal(first, fresh)
    assert lib.summaries([spec])[0] is first


def test_prior_draws_are_uniform_and_in_range():
    lib = tls_lib(n=200, seed=1)
    assert np.all((lib.thetas >= 0) & (lib.thetas <= 2))
    assert 0.8 < lib.thetas.mean() < 1.2


def test_split_and_overlap_detection():
    lib = tls_lib()
    train, test = lib.split(15)
    assert len(train) == 15 and len(test) == 5
    assert not train.shares_entries(test.records())
    assert lib.shares_entries(test.records())


def test_dark_labels_can_be_hidden():
    lib = generate_library(build_tls_model(1.0, 1.0), PRIOR, 10, 12, 0, fixed={"omega": 1.0}, dark_rate=0.3)
    assert "dark" in lib.metadata["labels"]
    assert np.all(lib.waits.shape == (10, 12))
    hidden = records_with_labels_hidden(lib, "emission")
    assert set(hidden.record(0).channel_labels) == {"emission"}


def test_optomech_library_records_truncation_probe():
    lib = generate_library(build_optomech_model(cavity_dim=4, mech_dim=6), {"delta": [-4.0, -2.0]}, 2, 5, 0)
    assert "truncation" in lib.metadata
    assert lib.model().dim == 24


def test_chunked_cache_equals_single_shot(tmp_path, monkeypatch):
    monkeypatch.setenv("PHOTOCLICK_CACHE", str(tmp_path))
    monkeypatch.setattr(experiments, "CHUNK", 7)
    chunked = experiments.cached_library("t", build_tls_model(1.0, 1.0), PRIOR, 20, 12, 4, fixed={"omega": 1.0})
    assert len(list((tmp_path / "libraries" / "t").glob("*.pclb"))) == 3
    assert np.array_equal(chunked.waits, tls_lib().waits)
    assert np.array_equal(chunked.thetas, tls_lib().thetas)
    again = experiments.cached_library("t", None, PRIOR, 20, 12, 4)
    assert again.fingerprint() == chunked.fingerprint()
