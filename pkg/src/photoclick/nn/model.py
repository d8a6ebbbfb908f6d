"""Network container, feature frontends and the model file format.

Model file layout (little endian)::

    b"PCNM" | uint32 version | uint64 n | n bytes JSON header | float64[n_params] weights
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..abc import MEAN_WAITING_TIME, SummarySpec, summary_matrix
from ..errors import CompatibilityError, ShapeError
from ..posterior import PosteriorGrid
from ..quantum import ParameterPoint
from .layers import MGU, Dense, LeakyReLU, build_layer
from .losses import gaussian_unpack, head_size, softmax

MAGIC = b"PCNM"
VERSION = 1

HISTOGRAM_FRONTEND = "histogram"
SEQUENCE_FRONTEND = "sequence"


class NeuralModel:
    """Feature frontend, a stack of layers and an output head.

    Parameters
    ----------
    frontend : {"histogram", "sequence"}
    layers : list of Layer
    head : {"point", "gaussian", "categorical"}
    meta : dict
        Normalisation constants and output description: ``wait_scale``,
        ``n_clicks``, ``param_names``, ``theta_center``, ``theta_scale``,
        ``hist_spec`` (histogram frontend), ``bins`` (categorical head),
        ``loss``.
    """

    def __init__(self, frontend: str, layers, head: str, meta: dict):
        self.frontend = frontend
        self.layers = list(layers)
        self.head = head
        self.meta = dict(meta)
        self.n_params = sum(layer.n_params for layer in self.layers)
        self.weights = np.zeros(self.n_params)
        self.grad = np.zeros(self.n_params)
        k = 0
        for layer in self.layers:
            layer.bind(self.weights[k:k + layer.n_params], self.grad[k:k + layer.n_params])
            k += layer.n_params

    # --- construction

    @classmethod
    def build(cls, frontend: str, head: str, meta: dict, hidden: int = 40, widths=(64, 16), seed: int = 0):
        d = len(meta["param_names"])
        n_out = head_size(head, d, len(meta.get("bins", [])) or 101)
        layers = []
        if frontend == SEQUENCE_FRONTEND:
            layers.append(MGU(1, hidden))
            n_in = hidden
        elif frontend == HISTOGRAM_FRONTEND:
            n_in = len(meta["hist_spec"]["bin_edges"]) + 1
        else:
            raise ValueError(f"unknown frontend {frontend!r}")
        for w in widths:
            layers += [Dense(n_in, w), LeakyReLU()]
            n_in = w
        layers.append(Dense(n_in, n_out))
        model = cls(frontend, layers, head, meta)
        model.init(seed)
        return model

    def init(self, seed: int = 0):
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            layer.init(rng)
        last = self.layers[-1]
        last.w[:] *= 0.1  # small initial outputs keep the first NLL/CE steps tame

    # --- features

    def features(self, waits: np.ndarray) -> np.ndarray:
        waits = np.atleast_2d(np.asarray(waits, dtype=float))
        if waits.shape[1] != self.meta["n_clicks"]:
            raise ShapeError(f"model expects {self.meta['n_clicks']} clicks, got {waits.shape[1]}")
        scale = self.meta["wait_scale"]
        if self.frontend == SEQUENCE_FRONTEND:
            return (waits / scale)[:, :, None]
        spec = SummarySpec.from_dict(self.meta["hist_spec"])
        counts = summary_matrix(waits, spec) / waits.shape[1]
        mean = summary_matrix(waits, SummarySpec(MEAN_WAITING_TIME)) / scale
        return np.concatenate([counts, mean], axis=1)

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, g: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def zero_grad(self):
        self.grad[:] = 0.0

    # --- parameter scaling

    def normalise_theta(self, theta: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(theta) - np.asarray(self.meta["theta_center"])) / np.asarray(self.meta["theta_scale"])

    def denormalise_theta(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z) * np.asarray(self.meta["theta_scale"]) + np.asarray(self.meta["theta_center"])

    def grid(self) -> PosteriorGrid:
        return PosteriorGrid.uniform([(self.meta["param_names"][0], self.meta["bins"])])

    def describe(self) -> dict:
        return {
            "frontend": self.frontend,
            "head": self.head,
            "layers": [layer.describe() for layer in self.layers],
            "meta": self.meta,
            "n_params": self.n_params,
        }

    # --- persistence

    def save(self, path) -> Path:
        path = Path(path)
        header = json.dumps(self.describe(), sort_keys=True).encode()
        with open(path, "wb") as f:
            f.write(MAGIC + struct.pack("<IQ", VERSION, len(header)) + header)
            f.write(self.weights.astype("<f8").tobytes())
        return path

    @classmethod
    def load(cls, path) -> "NeuralModel":
        buf = Path(path).read_bytes()
        if buf[:4] != MAGIC:
            raise CompatibilityError(f"{path} is not a model file")
        version, n = struct.unpack_from("<IQ", buf, 4)
        if version != VERSION:
            raise CompatibilityError(f"unsupported model version {version}")
        desc = json.loads(buf[16:16 + n].decode())
        model = cls(desc["frontend"], [build_layer(d) for d in desc["layers"]], desc["head"], desc["meta"])
        w = np.frombuffer(buf, dtype="<f8", offset=16 + n)
        if w.size != model.n_params:
            raise CompatibilityError("weight count does not match the architecture")
        model.weights[:] = w
        return model


def _waits(records) -> np.ndarray:
    if isinstance(records, np.ndarray):
        return np.atleast_2d(records)
    return np.stack([np.asarray(r.waiting_times) for r in records])


def predict_raw(model: NeuralModel, records, batch: int = 4096) -> np.ndarray:
    w = _waits(records)
    return np.concatenate([model.forward(model.features(w[i:i + batch])) for i in range(0, len(w), batch)])


def predict_point(model: NeuralModel, records, estimator: str = "mean") -> np.ndarray:
    """Point estimates in parameter units, shape (n_records, n_params)."""
    out = predict_raw(model, records)
    if model.head == "point":
        return model.denormalise_theta(out)
    if model.head == "gaussian":
        d = len(model.meta["param_names"])
        return model.denormalise_theta(out[:, :d])
    probs = softmax(out)
    bins = np.asarray(model.meta["bins"])
    if estimator == "mode":
        return bins[np.argmax(probs, axis=1)][:, None]
    return (probs @ bins)[:, None]


def predict_gaussian(model: NeuralModel, records):
    """Means and covariances ``A A^T`` in parameter units."""
    if model.head != "gaussian":
        raise CompatibilityError("model has no Gaussian head")
    d = len(model.meta["param_names"])
    mu, chol = gaussian_unpack(predict_raw(model, records), d)
    scale = np.asarray(model.meta["theta_scale"])
    cov = chol @ np.swapaxes(chol, 1, 2) * np.outer(scale, scale)[None]
    return model.denormalise_theta(mu), cov


def predict_posterior(model: NeuralModel, records) -> list:
    if model.head != "categorical":
        raise CompatibilityError("model has no categorical head")
    probs = softmax(predict_raw(model, records))
    grid = model.grid()
    return [grid.with_weights(p) for p in probs]


def point_as_parameters(model: NeuralModel, est: np.ndarray) -> list:
    return [ParameterPoint(model.meta["param_names"], row) for row in np.atleast_2d(est)]
