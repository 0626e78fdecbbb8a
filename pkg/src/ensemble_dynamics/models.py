"""Linear, feed-forward and recurrent predictors of loudness from basis matrices.

All three map a piece matrix (rows in onset order) to one prediction per row:

* linear:      ``y = X w``
* feedforward: ``y_n = v . tanh(U x_n + b) + c``
* recurrent:   ``h_n = tanh(U x_n + W h_{n-1} + b)``, ``y_n = v . h_n + c``, ``h_0 = 0``

Training minimises ``0.5 * sum((y_hat - y)**2) / N`` by full-batch gradient
descent with gradient-norm clipping and early stopping on validation
pieces.  The recurrent state is reset at every piece boundary.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg

LOGGER = logging.getLogger(__name__)

VARIANTS = ("linear", "feedforward", "recurrent")
SHORT_NAMES = {"lin": "linear", "ff": "feedforward", "rnn": "recurrent",
               "linear": "linear", "feedforward": "feedforward", "recurrent": "recurrent"}
MODEL_FORMAT = "ensemble-dynamics-model"
MODEL_VERSION = 1


class ShapeError(ValueError):
    pass


class TrainingDivergence(RuntimeError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace or []


class LinearSolveError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    max_epochs: int = 2000
    patience: int = 20
    clip_norm: float = 5.0
    ridge: float = 1e-2
    validation_pieces: int = 2
    hidden: int = 20
    linear_solver: str = "closed"   # "closed" (ridge normal equations) or "gd"

    def __post_init__(self):
        if self.learning_rate <= 0 or self.clip_norm <= 0 or self.max_epochs <= 0:
            raise ValueError("learning rate, clip norm and max epochs must be positive")
        if self.patience < 0 or self.patience >= self.max_epochs:
            raise ValueError("patience must be in [0, max_epochs)")
        if self.ridge < 0:
            raise ValueError("ridge penalty must be non-negative")
        if self.hidden <= 0:
            raise ValueError("hidden size must be positive")
        if self.linear_solver not in ("closed", "gd"):
            raise ValueError(f"unknown linear solver {self.linear_solver!r}")


@dataclass
class ModelParams:
    variant: str
    weights: dict
    n_features: int
    hidden: int = 0
    seed: int = 0
    fingerprint: str = ""
    config: dict = field(default_factory=dict)

    def copy(self):
        return ModelParams(self.variant, {k: v.copy() for k, v in self.weights.items()},
                           self.n_features, self.hidden, self.seed, self.fingerprint, dict(self.config))

    def to_dict(self):
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "variant": self.variant,
            "n_features": self.n_features,
            "hidden": self.hidden,
            "seed": self.seed,
            "fingerprint": self.fingerprint,
            "config": self.config,
            "weights": {k: {"shape": list(np.shape(v)), "data": np.ravel(v).tolist()}
                        for k, v in sorted(self.weights.items())},
        }

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, doc):
        if doc.get("format") != MODEL_FORMAT or doc.get("version") != MODEL_VERSION:
            raise ValueError("not a supported model document")
        weights = {k: np.array(w["data"], dtype=float).reshape(w["shape"])
                   for k, w in doc["weights"].items()}
        p = cls(doc["variant"], weights, doc["n_features"], doc["hidden"], doc["seed"],
                doc.get("fingerprint", ""), doc.get("config", {}))
        _check_params(p)
        return p

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def _shapes(variant, k, h):
    if variant == "linear":
        return {"w": (k,)}
    shapes = {"U": (h, k), "b": (h,), "v": (h,), "c": ()}
    if variant == "recurrent":
        shapes["W"] = (h, h)
    return shapes


def _check_params(params):
    if params.variant not in VARIANTS:
        raise ShapeError(f"unknown variant {params.variant!r}")
    expected = _shapes(params.variant, params.n_features, params.hidden)
    if set(expected) != set(params.weights):
        raise ShapeError(f"weights {sorted(params.weights)} do not match {params.variant}")
    for k, shape in expected.items():
        if np.shape(params.weights[k]) != shape:
            raise ShapeError(f"weight {k} has shape {np.shape(params.weights[k])}, expected {shape}")
        if not np.all(np.isfinite(params.weights[k])):
            raise ShapeError(f"weight {k} is not finite")


def init_params(variant, n_features, hidden=20, seed=0) -> ModelParams:
    """Uniform(-r, r) weights with r = 1/sqrt(fan-in); zeros for the linear model."""
    variant = SHORT_NAMES.get(variant, variant)
    rng = np.random.default_rng(seed)
    if variant == "linear":
        return ModelParams(variant, {"w": np.zeros(n_features)}, n_features, 0, seed)
    r_in = 1.0 / np.sqrt(max(n_features, 1))
    r_h = 1.0 / np.sqrt(hidden)
    weights = {
        "U": rng.uniform(-r_in, r_in, (hidden, n_features)),
        "b": np.zeros(hidden),
        "v": rng.uniform(-r_h, r_h, hidden),
        "c": np.array(0.0),
    }
    if variant == "recurrent":
        weights["W"] = rng.uniform(-r_h, r_h, (hidden, hidden))
    return ModelParams(variant, weights, n_features, hidden, seed)


def zero_params(variant, n_features, hidden=20, output_bias=0.0) -> ModelParams:
    variant = SHORT_NAMES.get(variant, variant)
    weights = {k: np.zeros(s) for k, s in _shapes(variant, n_features, hidden).items()}
    if "c" in weights:
        weights["c"] = np.array(float(output_bias))
    return ModelParams(variant, weights, n_features, hidden if variant != "linear" else 0)


# ---------------------------------------------------------------------------
# forward / backward


def _as_sequences(X, y=None):
    if isinstance(X, np.ndarray) or hasattr(X, "toarray"):
        X = [X]
        y = None if y is None else [y]
    X = [np.asarray(x.toarray() if hasattr(x, "toarray") else x, dtype=float) for x in X]
    if y is not None:
        y = [np.asarray(t, dtype=float) for t in y]
    return X, y


def _pad(seqs, width):
    lengths = np.array([len(s) for s in seqs])
    T = int(lengths.max()) if len(seqs) else 0
    out = np.zeros((len(seqs), T) + width)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    mask = np.arange(T)[None, :] < lengths[:, None]
    return out, mask, lengths


def _rnn_forward(weights, X_pad):
    U, W, b = weights["U"], weights["W"], weights["b"]
    B, T, _ = X_pad.shape
    H = U.shape[0]
    proj = X_pad @ U.T + b
    hs = np.zeros((B, T + 1, H))
    for t in range(T):
        hs[:, t + 1] = np.tanh(proj[:, t] + hs[:, t] @ W.T)
    return hs


def predict(params: ModelParams, X) -> np.ndarray:
    """Predictions for one piece matrix (rows in onset order)."""
    X = np.asarray(X.toarray() if hasattr(X, "toarray") else X, dtype=float)
    if X.ndim != 2 or X.shape[1] != params.n_features:
        raise ShapeError(f"matrix has {X.shape[-1] if X.ndim else 0} columns, model expects "
                         f"{params.n_features}")
    w = params.weights
    if params.variant == "linear":
        return X @ w["w"]
    if params.variant == "feedforward":
        return np.tanh(X @ w["U"].T + w["b"]) @ w["v"] + w["c"]
    hs = _rnn_forward(w, X[None])
    return hs[0, 1:] @ w["v"] + w["c"]


def loss_and_gradients(params: ModelParams, X, y):
    """``0.5 * sum((y_hat - y)**2) / N`` and its gradient for each weight.

    ``X``/``y`` are one piece or lists of pieces; ``N`` counts all rows.
    """
    Xs, ys = _as_sequences(X, y)
    for x in Xs:
        if x.shape[1] != params.n_features:
            raise ShapeError(f"matrix has {x.shape[1]} columns, model expects {params.n_features}")
    n_total = sum(len(t) for t in ys)
    w = params.weights
    if params.variant in ("linear", "feedforward"):
        Xc = np.vstack(Xs)
        yc = np.concatenate(ys)
        if params.variant == "linear":
            r = Xc @ w["w"] - yc
            loss = 0.5 * float(r @ r) / n_total
            return loss, {"w": Xc.T @ r / n_total}
        h = np.tanh(Xc @ w["U"].T + w["b"])
        r = h @ w["v"] + w["c"] - yc
        e = r / n_total
        da = np.outer(e, w["v"]) * (1.0 - h * h)
        grads = {"v": h.T @ e, "c": np.array(e.sum()), "U": da.T @ Xc, "b": da.sum(axis=0)}
        return 0.5 * float(r @ r) / n_total, grads

    X_pad, mask, _ = _pad(Xs, (params.n_features,))
    y_pad, _, _ = _pad(ys, ())
    hs = _rnn_forward(w, X_pad)
    out = hs[:, 1:] @ w["v"] + w["c"]
    r = np.where(mask, out - y_pad, 0.0)
    e = r / n_total
    B, T = mask.shape
    H = params.hidden
    da = np.zeros((B, T, H))
    carry = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        h = hs[:, t + 1]
        dh = e[:, t, None] * w["v"] + carry
        da[:, t] = dh * (1.0 - h * h)
        carry = da[:, t] @ w["W"]
    grads = {
        "v": np.einsum("bt,bth->h", e, hs[:, 1:]),
        "c": np.array(e.sum()),
        "U": np.einsum("bth,btk->hk", da, X_pad),
        "W": np.einsum("bth,btg->hg", da, hs[:, :-1]),
        "b": da.sum(axis=(0, 1)),
    }
    return 0.5 * float(np.sum(r * r)) / n_total, grads


def gradients(params, X, y):
    return loss_and_gradients(params, X, y)[1]


# ---------------------------------------------------------------------------
# fitting


def fit_linear(X, y, ridge=0.0) -> np.ndarray:
    """Minimise ``||X w - y||^2 + ridge ||w||^2``.

    Uses a Cholesky solve of the normal equations when ``ridge > 0`` and a
    minimum-norm least-squares solve otherwise.
    """
    X = np.asarray(X.toarray() if hasattr(X, "toarray") else X, dtype=float)
    y = np.asarray(y, dtype=float)
    if ridge < 0:
        raise ValueError("ridge must be non-negative")
    try:
        if ridge > 0:
            A = X.T @ X
            A[np.diag_indices_from(A)] += ridge
            c = scipy.linalg.cho_factor(A, lower=True, check_finite=True)
            w = scipy.linalg.cho_solve(c, X.T @ y)
        else:
            w = np.linalg.lstsq(X, y, rcond=None)[0]
    except (np.linalg.LinAlgError, ValueError) as exc:
        norms = np.linalg.norm(X, axis=0)
        cond = np.linalg.cond(X) if X.size else np.inf
        raise LinearSolveError(
            f"linear solve failed ({exc}); condition number {cond:.3g}, "
            f"{int(np.sum(norms == 0))} all-zero columns, column norm range "
            f"[{norms.min() if norms.size else 0:.3g}, {norms.max() if norms.size else 0:.3g}]") from exc
    if not np.all(np.isfinite(w)):
        raise LinearSolveError("linear solve produced non-finite weights")
    return w


def _mse(params, seqs):
    if not seqs:
        return np.nan
    num = 0.0
    count = 0
    for X, y in seqs:
        r = predict(params, X) - y
        num += float(r @ r)
        count += len(y)
    return num / count


@dataclass
class TraceEntry:
    epoch: int
    train_mse: float
    validation_mse: float


def train(variant, train_seqs, val_seqs=(), config: TrainConfig = None, seed=0, n_features=None):
    """Fit a model on ``train_seqs`` (list of ``(X, y)`` per piece).

    Returns ``(params, trace)``.  ``trace`` holds per-epoch train and
    validation MSE; epoch 0 is the initialisation.  The returned parameters
    are those of the epoch with the lowest validation MSE (training MSE
    when there are no validation pieces).
    """
    config = config or TrainConfig()
    variant = SHORT_NAMES.get(variant, variant)
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    train_seqs = [(_dense(X), np.asarray(y, dtype=float)) for X, y in train_seqs]
    val_seqs = [(_dense(X), np.asarray(y, dtype=float)) for X, y in val_seqs]
    if not train_seqs:
        raise ValueError("no training pieces")
    k = n_features or train_seqs[0][0].shape[1]
    echo = asdict(config)

    if variant == "linear" and config.linear_solver == "closed":
        X = np.vstack([x for x, _ in train_seqs])
        y = np.concatenate([t for _, t in train_seqs])
        params = ModelParams("linear", {"w": fit_linear(X, y, config.ridge)}, k, 0, seed, config=echo)
        trace = [TraceEntry(0, _mse(params, train_seqs), _mse(params, val_seqs))]
        return params, trace

    params = init_params(variant, k, config.hidden, seed)
    params.config = echo
    Xs = [x for x, _ in train_seqs]
    ys = [t for _, t in train_seqs]
    monitor = val_seqs or train_seqs
    best, best_val, wait = params.copy(), np.inf, 0
    trace = []
    for epoch in range(config.max_epochs + 1):
        loss, grads = loss_and_gradients(params, Xs, ys)
        val = _mse(params, monitor)
        trace.append(TraceEntry(epoch, 2.0 * loss, val if val_seqs else np.nan))
        if not (np.isfinite(loss) and np.isfinite(val)):
            raise TrainingDivergence(f"{variant} training diverged at epoch {epoch}", trace)
        if val < best_val:
            best, best_val, wait = params.copy(), val, 0
        else:
            wait += 1
        if wait >= config.patience or epoch == config.max_epochs:
            break
        with np.errstate(over="ignore", invalid="ignore"):
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
        if not np.isfinite(norm):
            raise TrainingDivergence(f"{variant} gradient is not finite at epoch {epoch}", trace)
        scale = config.learning_rate * (config.clip_norm / norm if norm > config.clip_norm else 1.0)
        for name, g in grads.items():
            params.weights[name] = params.weights[name] - scale * g
    LOGGER.debug("%s: stopped after %d epochs, best validation mse %.4f", variant, epoch, best_val)
    return best, trace


def _dense(X):
    return np.asarray(X.toarray() if hasattr(X, "toarray") else X, dtype=float)
