"""Dense feed-forward networks in float64 numpy with hand-written backprop.

Weights follow the ``z = W @ u + b`` convention, so ``W`` has shape
(out, in). Every model carries a fixed input normalization
``u = (x - input_shift) / input_scale`` applied before the first layer;
:func:`renormalize` changes it without changing the function computed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import TransferDataset, prune_data
from .errors import DegenerateDataError, EmptyInputError, FormatError, NumericError, ShapeError

HIDDEN_ACTIVATIONS = ("relu", "tanh")
OUTPUT_ACTIVATIONS = ("identity", "tanh", "sigmoid")
MODEL_FORMAT = "polsteal-mlp"
MODEL_VERSION = 1


@dataclass
class MlpModel:
    layer_dims: tuple[int, ...]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    hidden_activation: str = "relu"
    output_activation: str = "identity"
    input_shift: np.ndarray | None = None
    input_scale: np.ndarray | None = None

    def __post_init__(self):
        self.layer_dims = tuple(int(d) for d in self.layer_dims)
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise ShapeError(f"bad layer dims {self.layer_dims}")
        if self.hidden_activation not in HIDDEN_ACTIVATIONS:
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ShapeError("number of weight matrices does not match layer dims")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expect = (self.layer_dims[i + 1], self.layer_dims[i])
            if w.shape != expect or b.shape != (expect[0],):
                raise ShapeError(f"layer {i}: weight {w.shape}, bias {b.shape}, expected {expect}")
        n = self.layer_dims[0]
        if self.input_shift is None:
            self.input_shift = np.zeros(n)
        if self.input_scale is None:
            self.input_scale = np.ones(n)
        self.input_shift = np.asarray(self.input_shift, dtype=np.float64)
        self.input_scale = np.asarray(self.input_scale, dtype=np.float64)
        if self.input_shift.shape != (n,) or self.input_scale.shape != (n,):
            raise ShapeError("input normalization must match the input dimension")

    @property
    def input_dim(self):
        return self.layer_dims[0]

    @property
    def output_dim(self):
        return self.layer_dims[-1]

    def copy(self) -> MlpModel:
        return replace(
            self,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            input_shift=self.input_shift.copy(),
            input_scale=self.input_scale.copy(),
        )

    def params(self):
        """Flat view order used by optimizers: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out


def init_mlp(layer_dims, rng, hidden_activation="relu", output_activation="identity") -> MlpModel:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization for weights and biases."""
    dims = tuple(int(d) for d in layer_dims)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpModel(dims, weights, biases, hidden_activation, output_activation)


def renormalize(model: MlpModel, shift, scale) -> MlpModel:
    """Return an equivalent model whose input normalization is (shift, scale)."""
    shift = np.asarray(shift, dtype=np.float64)
    scale = np.asarray(scale, dtype=np.float64)
    if shift.shape != (model.input_dim,) or scale.shape != (model.input_dim,):
        raise ShapeError("normalization vectors must match the input dimension")
    if np.any(scale <= 0) or not np.all(np.isfinite(scale)):
        raise ValueError("normalization scale must be positive and finite")
    out = model.copy()
    w0 = model.weights[0]
    out.biases[0] = model.biases[0] + w0 @ ((shift - model.input_shift) / model.input_scale)
    out.weights[0] = w0 * (scale / model.input_scale)[None, :]
    out.input_shift = shift.copy()
    out.input_scale = scale.copy()
    return out


def _hidden(z, kind):
    return np.maximum(z, 0.0) if kind == "relu" else np.tanh(z)


def _hidden_grad(z, h, kind):
    return (z > 0.0).astype(np.float64) if kind == "relu" else 1.0 - h * h


def _output(z, kind):
    if kind == "identity":
        return z
    if kind == "tanh":
        return np.tanh(z)
    return _sigmoid(z)


def _sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _as_batch(model: MlpModel, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f"expected input of width {model.input_dim}, got shape {x.shape}")
    return x, single


def _forward(model: MlpModel, x):
    """Batched forward returning (pre-output logits, output, cache)."""
    u = (x - model.input_shift) / model.input_scale
    acts = [u]
    pres = []
    h = u
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w.T + b
        pres.append(z)
        if i < last:
            h = _hidden(z, model.hidden_activation)
            acts.append(h)
    z_out = pres[-1]
    return z_out, _output(z_out, model.output_activation), (acts, pres)


def _backward(model: MlpModel, cache, dz_out):
    """Gradients of a loss w.r.t. parameters, given dL/d(output logits)."""
    acts, pres = cache
    grads_w = [None] * len(model.weights)
    grads_b = [None] * len(model.weights)
    dz = dz_out
    for i in range(len(model.weights) - 1, -1, -1):
        grads_w[i] = dz.T @ acts[i]
        grads_b[i] = dz.sum(axis=0)
        if i > 0:
            dh = dz @ model.weights[i]
            dz = dh * _hidden_grad(pres[i - 1], acts[i], model.hidden_activation)
    out = []
    for gw, gb in zip(grads_w, grads_b):
        out.extend((gw, gb))
    return out


def mlp_forward(model: MlpModel, x) -> np.ndarray:
    """Evaluate the network on one input vector or a batch of rows."""
    xb, single = _as_batch(model, x)
    _, y, _ = _forward(model, xb)
    return y[0] if single else y


def huber_loss(pred, target):
    """Mean Huber loss (threshold 1) and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"pred {pred.shape} vs target {target.shape}")
    d = pred - target
    ad = np.abs(d)
    small = ad < 1.0
    per = np.where(small, 0.5 * d * d, ad - 0.5)
    count = max(d.size, 1)
    grad = np.where(small, d, np.sign(d)) / count
    return float(per.sum() / count), grad


def _output_grad(model, y, dy):
    if model.output_activation == "tanh":
        return dy * (1.0 - y * y)
    if model.output_activation == "sigmoid":
        return dy * y * (1.0 - y)
    return dy


def huber_loss_and_grads(model: MlpModel, x, target):
    """Mean Huber loss of ``model(x)`` against ``target`` with parameter gradients."""
    xb, _ = _as_batch(model, x)
    target = np.asarray(target, dtype=np.float64).reshape(xb.shape[0], model.output_dim)
    _, y, cache = _forward(model, xb)
    loss, dy = huber_loss(y, target)
    return loss, _backward(model, cache, _output_grad(model, y, dy))


def _softplus(z):
    return np.logaddexp(0.0, z)


def reward_loss_and_grads(reward: MlpModel, x_attacker, x_victim):
    """Discriminator loss E_a[-log R] + E_v[-log(1 - R)] and parameter gradients.

    Rows of ``x_*`` are concatenated (state, action) vectors. The loss is
    evaluated on the pre-sigmoid logit so it stays finite for any weights.
    """
    if reward.output_activation != "sigmoid" or reward.output_dim != 1:
        raise ShapeError("reward model needs a single sigmoid output")
    xa, _ = _as_batch(reward, x_attacker)
    xv, _ = _as_batch(reward, x_victim)
    if len(xa) == 0 or len(xv) == 0:
        raise EmptyInputError("both pair sets must be non-empty")
    za, ya, ca = _forward(reward, xa)
    zv, yv, cv = _forward(reward, xv)
    loss = float(_softplus(-za).mean() + _softplus(zv).mean())
    ga = _backward(reward, ca, (ya - 1.0) / len(xa))
    gv = _backward(reward, cv, yv / len(xv))
    return loss, [a + b for a, b in zip(ga, gv)]


def reward_forward(reward: MlpModel, state, action) -> np.ndarray:
    """Discriminator probability for (state, action) rows; scalar for single vectors."""
    s = np.asarray(state, dtype=np.float64)
    a = np.asarray(action, dtype=np.float64)
    single = s.ndim == 1
    s2 = np.atleast_2d(s)
    a2 = np.atleast_2d(a)
    if s2.shape[0] != a2.shape[0] or s2.shape[1] + a2.shape[1] != reward.input_dim:
        raise ShapeError(
            f"state {s.shape} + action {a.shape} does not fit reward input {reward.input_dim}"
        )
    out = mlp_forward(reward, np.hstack([s2, a2]))[:, 0]
    return out[0] if single else out


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, model: MlpModel) -> AdamState:
        return cls([np.zeros_like(p) for p in model.params()], [np.zeros_like(p) for p in model.params()])


def adam_step(model: MlpModel, grads, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place on ``model`` and ``state``."""
    params = model.params()
    if len(grads) != len(params):
        raise ShapeError("gradient list does not match parameters")
    for g, p in zip(grads, params):
        if g.shape != p.shape:
            raise ShapeError(f"gradient {g.shape} vs parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return model, state


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 1024
    epochs: int = 1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    early_stop_patience: int | None = None
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.early_stop_patience is not None and self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be positive")


@dataclass
class FitResult:
    model: MlpModel
    val_loss: float
    history: list[float] = field(default_factory=list)
    epochs_run: int = 0
    best_epoch: int = 0


def validation_loss(model: MlpModel, valset: TransferDataset, chunk=65536) -> float:
    """Mean Huber loss of the model's predictions on a dataset."""
    m = len(valset)
    if m == 0:
        raise EmptyInputError("empty validation set")
    total = 0.0
    for lo in range(0, m, chunk):
        pred = mlp_forward(model, valset.states[lo : lo + chunk])
        loss, _ = huber_loss(pred, valset.actions[lo : lo + chunk])
        total += loss * pred.size
    return total / (m * model.output_dim)


def train_split(train: TransferDataset, val: TransferDataset, model: MlpModel, cfg: TrainConfig, rng) -> FitResult:
    """Minibatch Huber descent on a given (train, val) split.

    Reshuffles every epoch. With ``early_stop_patience`` set, validation loss
    is tracked per epoch and the best weights are restored at the end.
    """
    if len(train) == 0 or len(val) == 0:
        raise EmptyInputError("train and validation splits must be non-empty")
    model = model.copy()
    if train.state_dim != model.input_dim or train.action_dim != model.output_dim:
        raise ShapeError("dataset does not match model dimensions")
    state = AdamState.zeros_like(model)
    patience = cfg.early_stop_patience
    history = []
    best_loss, best_model, best_epoch, since_best = math.inf, model, 0, 0
    m, bs = len(train), cfg.batch_size
    epoch = 0
    for epoch in range(1, cfg.epochs + 1):
        perm = rng.permutation(m)
        for lo in range(0, m, bs):
            idx = perm[lo : lo + bs]
            _, grads = huber_loss_and_grads(model, train.states[idx], train.actions[idx])
            adam_step(model, grads, state, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon)
        if patience is not None:
            loss = validation_loss(model, val)
            history.append(loss)
            if loss < best_loss:
                best_loss, best_model, best_epoch, since_best = loss, model.copy(), epoch, 0
            else:
                since_best += 1
                if since_best >= patience:
                    break
    if patience is not None and best_epoch > 0:
        return FitResult(best_model, best_loss, history, epoch, best_epoch)
    return FitResult(model, validation_loss(model, val), history, epoch, epoch)


def fit(dataset: TransferDataset, model: MlpModel, demand: int, cfg: TrainConfig, rng=None) -> FitResult:
    """Sample ``demand`` pairs, split them and train; see :func:`behavioral_cloning`."""
    if len(dataset) == 0:
        raise EmptyInputError("empty dataset")
    demand = int(demand)
    if demand > len(dataset):
        raise ValueError(f"demand {demand} exceeds dataset size {len(dataset)}")
    if demand * cfg.val_fraction < 1:
        raise ValueError("demand too small for a non-empty validation split")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    data = dataset if demand == len(dataset) else dataset.sample(demand, rng)
    train, val = data.split(cfg.val_fraction, rng)
    return train_split(train, val, model, cfg, rng)


def behavioral_cloning(dataset: TransferDataset, model: MlpModel, demand: int, cfg: TrainConfig, rng=None) -> MlpModel:
    """Train ``model`` for ``cfg.epochs`` epochs on ``demand`` pairs sampled from ``dataset``.

    Returns a new model; the input model is left untouched.
    """
    return fit(dataset, model, demand, cfg, rng).model


def train_reward(
    d_a: TransferDataset,
    d_v: TransferDataset,
    reward: MlpModel,
    demand: int,
    steps: int,
    lr=1e-3,
    batch_size=1024,
    rng=None,
    prune=True,
    val_fraction=0.1,
) -> MlpModel:
    """Fit the pair discriminator: attacker pairs toward 1, victim pairs toward 0.

    ``demand`` victim pairs are sampled, the training part of their split is
    pruned of saturated actions, then ``steps`` Adam steps are taken on
    random batches from both sets.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    if len(d_a) == 0 or len(d_v) == 0:
        raise EmptyInputError("both datasets must be non-empty")
    reward = reward.copy()
    if steps == 0:
        return reward
    sub = d_v.sample(min(int(demand), len(d_v)), rng)
    vt = sub.split(val_fraction, rng)[0] if len(sub) >= 2 else sub
    if prune:
        vt = prune_data(vt)
    if len(vt) == 0:
        raise DegenerateDataError("pruning left no victim pairs to train the discriminator")
    xa = np.hstack([d_a.states, d_a.actions])
    xv = np.hstack([vt.states, vt.actions])
    state = AdamState.zeros_like(reward)
    for _ in range(int(steps)):
        ia = rng.integers(0, len(xa), size=min(batch_size, len(xa)))
        iv = rng.integers(0, len(xv), size=min(batch_size, len(xv)))
        _, grads = reward_loss_and_grads(reward, xa[ia], xv[iv])
        adam_step(reward, grads, state, lr)
    return reward


def save_model(model: MlpModel, path) -> None:
    """Write a JSON model file; floats use repr so the round trip is exact."""
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "layer_dims": list(model.layer_dims),
        "hidden_activation": model.hidden_activation,
        "output_activation": model.output_activation,
        "input_shift": model.input_shift.tolist(),
        "input_scale": model.input_scale.tolist(),
        # per layer: W row-major (out x in) followed by b
        "weights": [np.concatenate([w.ravel(), b]).tolist() for w, b in zip(model.weights, model.biases)],
    }
    Path(path).write_text(json.dumps(doc))


def load_model(path) -> MlpModel:
    try:
        doc = json.loads(Path(path).read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: not a model file ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise FormatError(f"{path}: missing format tag")
    if doc.get("version") != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported version {doc.get('version')!r}")
    try:
        dims = [int(d) for d in doc["layer_dims"]]
        flat = doc["weights"]
        if len(flat) != len(dims) - 1:
            raise FormatError(f"{path}: {len(flat)} layers for dims {dims}")
        weights, biases = [], []
        for i, vals in enumerate(flat):
            fan_in, fan_out = dims[i], dims[i + 1]
            if len(vals) != fan_out * fan_in + fan_out:
                raise FormatError(f"{path}: layer {i} holds {len(vals)} numbers, expected {fan_out * (fan_in + 1)}")
            arr = np.asarray(vals, dtype=np.float64)
            weights.append(arr[: fan_out * fan_in].reshape(fan_out, fan_in))
            biases.append(arr[fan_out * fan_in :])
        return MlpModel(
            tuple(dims),
            weights,
            biases,
            doc["hidden_activation"],
            doc["output_activation"],
            np.asarray(doc["input_shift"], dtype=np.float64),
            np.asarray(doc["input_scale"], dtype=np.float64),
        )
    except (KeyError, TypeError, ShapeError) as exc:
        raise FormatError(f"{path}: malformed model file ({exc})") from exc
