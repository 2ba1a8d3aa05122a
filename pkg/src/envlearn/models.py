"""Linear regressor and ReLU MLP with explicit forward/backward passes,
full-batch Adam, and checkpoint I/O.

Models expose their parameters as a flat list of arrays; `backward` is a
vector-Jacobian product against the outputs, which lets callers differentiate
arbitrary per-sample objectives (weighted risks, penalty terms) without an
autograd framework.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .core import Dataset, rng_from
from .errors import DimensionMismatch, NonFiniteLoss


class LinearModel:
    """y = X w (+ b). Scalar output: regression prediction or binary logit."""

    kind = "linear"

    def __init__(self, weights: np.ndarray, bias: float | None = None):
        self.weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        self.bias = None if bias is None else float(bias)

    @classmethod
    def init(cls, d: int, bias: bool = True, seed: int = 0) -> "LinearModel":
        rng = rng_from(seed, "linear-init")
        w = rng.normal(0.0, 1.0 / np.sqrt(d), size=d)
        return cls(w, 0.0 if bias else None)

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    @property
    def n_outputs(self) -> int:
        return 1

    def params(self) -> list[np.ndarray]:
        out = [self.weights]
        if self.bias is not None:
            out.append(np.array([self.bias]))
        return out

    def set_params(self, params: list[np.ndarray]) -> None:
        self.weights = np.asarray(params[0], dtype=np.float64).reshape(-1)
        if self.bias is not None:
            self.bias = float(params[1][0])

    def penalized_mask(self) -> list[bool]:
        # L2 applies to weights, never to the bias
        return [True] + ([False] if self.bias is not None else [])

    def forward(self, X: np.ndarray) -> np.ndarray:
        X = _check_features(X, self.dim)
        out = X @ self.weights
        if self.bias is not None:
            out = out + self.bias
        return out

    def forward_cache(self, X: np.ndarray):
        X = _check_features(X, self.dim)
        return self.forward(X), X

    def backward(self, cache, dout: np.ndarray) -> list[np.ndarray]:
        X = cache
        dout = np.asarray(dout, dtype=np.float64).reshape(-1)
        grads = [X.T @ dout]
        if self.bias is not None:
            grads.append(np.array([dout.sum()]))
        return grads

    def arch(self) -> dict:
        return {"kind": self.kind, "d": self.dim, "bias": self.bias is not None}


class MlpModel:
    """ReLU MLP emitting K logits; zero hidden layers gives a linear softmax
    (or logistic, K = 1) classifier.

    Forward/backward reuse per-instance scratch buffers (fresh multi-MB
    temporaries per step dominate runtime otherwise), so an instance is not
    safe to share across threads — each training run owns its model.
    """

    kind = "mlp"

    def __init__(self, layers: list[tuple[np.ndarray, np.ndarray]]):
        self.layers = [(np.asarray(W, dtype=np.float64), np.asarray(b, dtype=np.float64)) for W, b in layers]
        for (W, b), (W2, _) in zip(self.layers, self.layers[1:]):
            if W.shape[1] != W2.shape[0]:
                raise DimensionMismatch("consecutive layer dimensions do not chain")
        self._scratch: dict = {}

    @classmethod
    def init(cls, dims: list[int], seed: int = 0) -> "MlpModel":
        # dims = [input, hidden..., outputs]; weights ~ N(0, 1/fan_in)
        rng = rng_from(seed, "mlp-init")
        layers = []
        for fan_in, fan_out in zip(dims, dims[1:]):
            W = rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))
            layers.append((W, np.zeros(fan_out)))
        return cls(layers)

    @property
    def dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def n_outputs(self) -> int:
        return self.layers[-1][0].shape[1]

    def params(self) -> list[np.ndarray]:
        out = []
        for W, b in self.layers:
            out.extend([W, b])
        return out

    def set_params(self, params: list[np.ndarray]) -> None:
        self.layers = [(params[2 * i], params[2 * i + 1]) for i in range(len(self.layers))]

    def penalized_mask(self) -> list[bool]:
        return [True, False] * len(self.layers)

    def _buffers(self, n: int):
        widths = tuple(W.shape[1] for W, _ in self.layers)
        key = (n, widths)
        if self._scratch.get("key") != key:
            self._scratch = {
                "key": key,
                "acts": [np.empty((n, w)) for w in widths],
                "deltas": [np.empty((n, w)) for w in widths[:-1]],
            }
        return self._scratch

    def forward(self, X: np.ndarray) -> np.ndarray:
        return self.forward_cache(X)[0]

    def forward_cache(self, X: np.ndarray):
        X = _check_features(X, self.dim)
        if X.dtype != np.float64:  # scratch path needs f64 BLAS buffers
            acts = [X]
            h = X
            for i, (W, b) in enumerate(self.layers):
                h = h @ W + b
                if i < len(self.layers) - 1:
                    h = np.maximum(h, 0.0)
                acts.append(h)
            return h, acts
        bufs = self._buffers(X.shape[0])["acts"]
        acts = [X]
        h = X
        for i, (W, b) in enumerate(self.layers):
            out = bufs[i]
            np.dot(h, W, out=out)
            out += b
            if i < len(self.layers) - 1:
                np.maximum(out, 0.0, out=out)
            acts.append(out)
            h = out
        return h, acts

    def backward(self, cache, dout: np.ndarray) -> list[np.ndarray]:
        acts = cache
        delta = np.asarray(dout, dtype=np.float64)
        if delta.ndim == 1:
            delta = delta[:, None]
        dbufs = None
        if acts[0].dtype == np.float64:
            dbufs = self._buffers(delta.shape[0])["deltas"]
        grads: list[np.ndarray] = []
        for i in range(len(self.layers) - 1, -1, -1):
            a_in = acts[i]
            grads.insert(0, a_in.T @ delta)
            grads.insert(1, delta.sum(axis=0))
            if i > 0:
                if dbufs is not None:
                    nxt = dbufs[i - 1]
                    np.dot(delta, self.layers[i][0].T, out=nxt)
                    nxt *= acts[i] > 0  # ReLU gate
                    delta = nxt
                else:
                    delta = (delta @ self.layers[i][0].T) * (acts[i] > 0)
        return grads

    def arch(self) -> dict:
        return {"kind": self.kind, "dims": [self.dim] + [W.shape[1] for W, _ in self.layers]}


Model = LinearModel | MlpModel


def _check_features(X: np.ndarray, dim: int) -> np.ndarray:
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] != dim:
        raise DimensionMismatch(f"expected (n, {dim}) features, got {X.shape}")
    return X


def forward(model: Model, X: np.ndarray) -> np.ndarray:
    return model.forward(X)


@dataclass
class AdamState:
    """Full-batch Adam. Moment buffers are shaped like the parameter list."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    kind: str = "full-batch Adam"

    def ensure(self, params: list[np.ndarray]) -> None:
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        self.ensure(params)
        self.t += 1
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1 ** self.t)
            v_hat = self.v[i] / (1 - self.beta2 ** self.t)
            out.append(p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))
        return out


def _loss_and_dout(outputs, labels, task):
    """Per-sample losses and d(loss)/d(outputs) for the three tasks."""
    if task == "regression":
        yhat = outputs.reshape(-1)
        r = yhat - labels
        return r * r, (2.0 * r).reshape(np.shape(outputs))
    if task == "binary":
        z = outputs.reshape(-1)
        y = labels.astype(np.float64)
        losses = np.logaddexp(0.0, z) - y * z
        sig = _sigmoid(z)
        return losses, (sig - y).reshape(np.shape(outputs))
    # multiclass cross-entropy on logits
    z = outputs
    if z.ndim != 2:
        raise DimensionMismatch("multiclass outputs must be (n, K)")
    zmax = z.max(axis=1, keepdims=True)
    logsum = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    idx = np.arange(z.shape[0])
    losses = logsum - z[idx, labels]
    p = np.exp(z - logsum[:, None])
    dout = p.copy()
    dout[idx, labels] -= 1.0
    return losses, dout


def _sigmoid(z):
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def grad(model: Model, data: Dataset, sample_weights: np.ndarray, l2: float = 0.0):
    """Gradient of (sum_i w_i l_i)/(sum_i w_i) + l2 * ||weights||^2.

    Biases are excluded from the L2 term. Returns (param grads, weighted mean
    loss) with the loss value excluding the L2 term.
    """
    w = np.asarray(sample_weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != data.n:
        raise DimensionMismatch(f"{w.shape[0]} weights for {data.n} rows")
    if (w < 0).any() or not w.any():
        raise ValueError("sample weights must be nonnegative and not all zero")
    outputs, cache = model.forward_cache(data.features)
    losses, dout = _loss_and_dout(outputs, data.labels, data.task)
    wsum = w.sum()
    mean_loss = float((w * losses).sum() / wsum)
    scale = w / wsum
    dout = dout * (scale[:, None] if dout.ndim == 2 else scale)
    grads = model.backward(cache, dout)
    if l2:
        for g, p, pen in zip(grads, model.params(), model.penalized_mask()):
            if pen:
                g += 2.0 * l2 * p
    return grads, mean_loss


def train(model: Model, data: Dataset, sample_weights: np.ndarray, opt: AdamState,
          steps: int, l2: float = 0.0, extra_loss=None):
    """Full-batch training for `steps` iterations, mutating `model` in place.

    extra_loss, when given, is a callable model -> (value, param grads) added
    to the risk each step (used for invariance penalties). Raises
    NonFiniteLoss if the objective stops being finite.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    trace = np.empty(steps)
    for step in range(steps):
        grads, loss = grad(model, data, sample_weights, l2=l2)
        if extra_loss is not None:
            extra_val, extra_grads = extra_loss(model)
            loss += extra_val
            grads = [g + eg for g, eg in zip(grads, extra_grads)]
        if not np.isfinite(loss):
            raise NonFiniteLoss(f"loss {loss} at step {step}")
        model.set_params(opt.step(model.params(), grads))
        trace[step] = loss
    return model, trace


def uniform_weights(data: Dataset) -> np.ndarray:
    return np.ones(data.n)


# Checkpoints: one JSON architecture line, then the parameter arrays
# concatenated as little-endian f64.

def model_to_bytes(model: Model) -> bytes:
    header = json.dumps(model.arch(), sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in model.params())
    return header + b"\n" + payload


def model_from_bytes(buf: bytes) -> Model:
    nl = buf.find(b"\n")
    arch = json.loads(buf[:nl].decode("utf-8"))
    flat = np.frombuffer(buf, dtype="<f8", offset=nl + 1)
    if arch["kind"] == "linear":
        d = arch["d"]
        w = flat[:d].copy()
        return LinearModel(w, float(flat[d]) if arch["bias"] else None)
    dims = arch["dims"]
    layers = []
    off = 0
    for fan_in, fan_out in zip(dims, dims[1:]):
        W = flat[off:off + fan_in * fan_out].reshape(fan_in, fan_out).copy()
        off += fan_in * fan_out
        b = flat[off:off + fan_out].copy()
        off += fan_out
        layers.append((W, b))
    return MlpModel(layers)


def save_model(model: Model, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
