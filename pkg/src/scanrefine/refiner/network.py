"""Per-point MLP with batch norm, softmax head and hand-written backprop.

Every non-final layer is ``Linear -> BatchNorm -> ReLU``; the final layer is
``Linear -> softmax``. Rows are processed independently except through the
batch statistics used in train mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DegenerateBatchError, InvalidConfigError, ShapeError
from ..fusion import feature_width

DEFAULT_HIDDEN = (128, 1024, 512, 256, 128)
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
INFER_CHUNK = 16384


@dataclass(eq=False)
class MlpModel:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    gamma: list[np.ndarray]
    beta: list[np.ndarray]
    running_mean: list[np.ndarray]
    running_var: list[np.ndarray]
    q: int
    k: int = 0
    epochs_trained: int = 0
    seed: int | None = None

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[1],) + tuple(w.shape[0] for w in self.weights)

    @property
    def dtype(self):
        return self.weights[0].dtype

    @property
    def n_hidden(self) -> int:
        return len(self.weights) - 1

    def parameters(self) -> list[np.ndarray]:
        """Trainable arrays in a fixed order: per layer W, b, then gamma, beta if hidden."""
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out += [w, b]
            if i < self.n_hidden:
                out += [self.gamma[i], self.beta[i]]
        return out

    def parameter_names(self) -> list[str]:
        names = []
        for i in range(len(self.weights)):
            names += [f"W{i}", f"b{i}"]
            if i < self.n_hidden:
                names += [f"gamma{i}", f"beta{i}"]
        return names

    def buffers(self) -> list[np.ndarray]:
        return self.running_mean + self.running_var

    def copy(self) -> "MlpModel":
        c = lambda xs: [x.copy() for x in xs]  # noqa: E731
        return MlpModel(c(self.weights), c(self.biases), c(self.gamma), c(self.beta),
                        c(self.running_mean), c(self.running_var), self.q, self.k,
                        self.epochs_trained, self.seed)

    def astype(self, dtype) -> "MlpModel":
        m = self.copy()
        for group in (m.weights, m.biases, m.gamma, m.beta, m.running_mean, m.running_var):
            group[:] = [x.astype(dtype) for x in group]
        return m

    def check(self) -> None:
        """Raise if the layer chain, statistics or values are inconsistent."""
        sizes = self.sizes
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (sizes[i + 1], sizes[i]) or b.shape != (sizes[i + 1],):
                raise ShapeError(f"layer {i} has inconsistent shapes")
        if sizes[-1] != self.q:
            raise ShapeError(f"output width {sizes[-1]} != q={self.q}")
        if self.k and sizes[0] != feature_width(self.q, self.k):
            raise ShapeError(f"input width {sizes[0]} != (q+5)K+q+1 for q={self.q}, K={self.k}")
        if any((v <= 0).any() for v in self.running_var):
            raise ShapeError("running variances must be positive")
        if not all(np.isfinite(p).all() for p in self.parameters() + self.buffers()):
            raise ShapeError("model has non-finite parameters")


def build_model(sizes, seed: int | None = 0, dtype=np.float32, q: int | None = None,
                k: int = 0) -> MlpModel:
    """He-initialised model with an explicit layer-size chain."""
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) < 2 or min(sizes) < 1:
        raise InvalidConfigError(f"invalid layer sizes {sizes}")
    q = sizes[-1] if q is None else q
    if q < 2:
        raise InvalidConfigError("q must be >= 2")
    rng = np.random.default_rng(seed)
    weights, biases, gamma, beta, rmean, rvar = [], [], [], [], [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in)
        weights.append(w.astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    for width in sizes[1:-1]:
        gamma.append(np.ones(width, dtype=dtype))
        beta.append(np.zeros(width, dtype=dtype))
        rmean.append(np.zeros(width, dtype=dtype))
        rvar.append(np.ones(width, dtype=dtype))
    model = MlpModel(weights, biases, gamma, beta, rmean, rvar, q, k, 0, seed)
    model.check()
    return model


def init_model(q: int, k: int = 2, seed: int | None = 0, hidden=DEFAULT_HIDDEN,
               dtype=np.float32) -> MlpModel:
    if q < 2:
        raise InvalidConfigError("q must be >= 2")
    if k < 1:
        raise InvalidConfigError("K must be >= 1")
    return build_model((feature_width(q, k), *hidden, q), seed, dtype, q, k)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _as_input(model: MlpModel, features) -> np.ndarray:
    x = getattr(features, "features", features)
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != model.sizes[0]:
        raise ShapeError(f"feature width {x.shape[-1]} != model input {model.sizes[0]}")
    return x.astype(model.dtype, copy=False)


def forward(model: MlpModel, features, mode: str = "infer", update_running: bool = True):
    """Run the network; returns ``(probabilities, cache)``.

    In ``train`` mode batch statistics normalise each hidden layer and, unless
    ``update_running`` is false, the running statistics move towards them
    with momentum 0.1 (variance uses the unbiased estimate).
    """
    if mode not in ("train", "infer"):
        raise InvalidConfigError(f"unknown mode {mode!r}")
    h = _as_input(model, features)
    n = h.shape[0]
    if mode == "train" and n < 2:
        raise DegenerateBatchError("train mode needs at least two rows for batch statistics")
    cache = {"mode": mode, "inputs": [], "xhat": [], "inv_std": [], "active": []}
    for i in range(model.n_hidden):
        z = h @ model.weights[i].T + model.biases[i]
        if mode == "train":
            mu = z.mean(axis=0)
            var = z.var(axis=0)
            if update_running:
                m = BN_MOMENTUM
                model.running_mean[i] *= 1 - m
                model.running_mean[i] += m * mu
                model.running_var[i] *= 1 - m
                model.running_var[i] += m * var * (n / (n - 1))
        else:
            mu = model.running_mean[i]
            var = model.running_var[i]
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (z - mu) * inv_std
        y = model.gamma[i] * xhat + model.beta[i]
        active = y > 0
        cache["inputs"].append(h)
        cache["xhat"].append(xhat)
        cache["inv_std"].append(inv_std)
        cache["active"].append(active)
        h = np.maximum(y, 0)
    cache["inputs"].append(h)
    logits = h @ model.weights[-1].T + model.biases[-1]
    cache["logits"] = logits
    return softmax(logits), cache


def backward(model: MlpModel, cache, dlogits: np.ndarray) -> list[np.ndarray]:
    """Gradients for ``model.parameters()`` given d(loss)/d(logits)."""
    train = cache["mode"] == "train"
    h_last = cache["inputs"][-1]
    grads_rev = [dlogits.sum(axis=0), dlogits.T @ h_last]  # b, W of the output layer
    dh = dlogits @ model.weights[-1]
    for i in reversed(range(model.n_hidden)):
        dy = dh * cache["active"][i]
        xhat = cache["xhat"][i]
        inv_std = cache["inv_std"][i]
        dgamma = (dy * xhat).sum(axis=0)
        dbeta = dy.sum(axis=0)
        dxhat = dy * model.gamma[i]
        if train:
            n = dy.shape[0]
            dz = (inv_std / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dz = dxhat * inv_std
        grads_rev += [dbeta, dgamma, dz.sum(axis=0), dz.T @ cache["inputs"][i]]
        if i > 0:
            dh = dz @ model.weights[i]
    return grads_rev[::-1]


def _labels_array(labels) -> np.ndarray:
    return np.asarray(getattr(labels, "labels", labels), dtype=np.int64)


def loss_and_grad(model: MlpModel, features, labels, ignore_classes=(0,), mode: str = "train",
                  update_running: bool = True):
    """Masked mean cross-entropy and its gradient for every parameter.

    Points whose label is in ``ignore_classes`` add nothing to the loss and
    get a zero upstream gradient (they still enter train-mode batch
    statistics).
    """
    y = _labels_array(labels)
    x = _as_input(model, features)
    if y.shape != (x.shape[0],):
        raise ShapeError(f"{len(y)} labels for {x.shape[0]} feature rows")
    if y.size and (y.min() < 0 or y.max() >= model.q):
        raise ShapeError(f"labels must lie in [0, {model.q})")
    valid = ~np.isin(y, np.asarray(list(ignore_classes), dtype=np.int64))
    m = int(valid.sum())
    if m == 0:
        raise DegenerateBatchError("every point in the batch is ignored")
    probs, cache = forward(model, x, mode, update_running)
    logits = cache["logits"].astype(np.float64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.flatnonzero(valid)
    loss = float(-logp[rows, y[rows]].sum() / m)
    dlogits = probs.copy()
    dlogits[rows, y[rows]] -= 1
    dlogits[~valid] = 0
    dlogits /= m
    return loss, backward(model, cache, dlogits)


def predict(model: MlpModel, features, chunk: int = INFER_CHUNK) -> np.ndarray:
    """Infer-mode probabilities, evaluated in row chunks to bound memory."""
    x = _as_input(model, features)
    out = np.empty((x.shape[0], model.q), dtype=model.dtype)
    for s in range(0, x.shape[0], chunk):
        h = x[s:s + chunk]
        for i in range(model.n_hidden):
            z = h @ model.weights[i].T + model.biases[i]
            inv_std = 1.0 / np.sqrt(model.running_var[i] + BN_EPS)
            y = model.gamma[i] * ((z - model.running_mean[i]) * inv_std) + model.beta[i]
            h = np.maximum(y, 0)
        out[s:s + chunk] = softmax(h @ model.weights[-1].T + model.biases[-1])
    return out


def refine(model: MlpModel, fused):
    """Refined scores and argmax labels (ties go to the lowest class id)."""
    q = getattr(fused, "q", None)
    if q is not None and q != model.q:
        raise ShapeError(f"features carry q={q}, model expects q={model.q}")
    probs = predict(model, fused)
    return probs, np.argmax(probs, axis=1)
