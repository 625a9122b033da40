"""Small float64 network engine: layers with hand-written backward passes,
binary cross-entropy, Adam and finite-difference gradient checking.

Tensors are numpy arrays in (batch, channels, height, width) layout. Every
layer caches what it needs during ``forward`` and accumulates parameter
gradients into the shared :class:`ParameterStore` during ``backward``.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BCE_CLAMP = 1e-7

CHECKPOINT_MAGIC = b"EGRD0001"


class ShapeError(ValueError):
    """Raised when a layer receives an input of the wrong shape."""


class StateError(RuntimeError):
    """Raised when backward is requested without a cached forward pass."""


def make_rng(seed, *stream):
    """Package PRNG: numpy's PCG64 seeded through SeedSequence.

    Extra integers select an independent stream for the same seed.
    """
    entropy = [int(seed), *map(int, stream)] if stream else int(seed)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


class ParameterStore:
    """Named float64 parameters with gradient buffers and trainable flags."""

    def __init__(self):
        self.params = OrderedDict()
        self.grads = OrderedDict()
        self.trainable = OrderedDict()

    def add(self, name, value, trainable=True):
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.ascontiguousarray(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.trainable[name] = bool(trainable)
        return value

    def names(self):
        return list(self.params)

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def freeze(self, names):
        unknown = set(names) - set(self.params)
        if unknown:
            raise KeyError(f"unknown parameter names: {sorted(unknown)}")
        for name in self.params:
            self.trainable[name] = name not in names

    def frozen(self):
        return {n for n, t in self.trainable.items() if not t}

    def n_params(self, trainable_only=False):
        return int(
            sum(
                p.size
                for n, p in self.params.items()
                if self.trainable[n] or not trainable_only
            )
        )

    def flat(self):
        return np.concatenate([p.ravel() for p in self.params.values()])

    def copy_values(self):
        return OrderedDict((n, p.copy()) for n, p in self.params.items())

    def load_values(self, values):
        for name, value in values.items():
            if name not in self.params:
                raise KeyError(f"unknown parameter {name!r}")
            if self.params[name].shape != np.shape(value):
                raise ShapeError(
                    f"{name}: expected shape {self.params[name].shape}, "
                    f"got {np.shape(value)}"
                )
            self.params[name][...] = value


def glorot_uniform(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# layers


class Layer:
    """Base layer. Spatial layers take channel-major ``(C, N, H, W)`` arrays."""

    name = "layer"

    def __init__(self):
        self._cache = None

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    def _need_cache(self):
        if self._cache is None:
            raise StateError(f"{self.name}: backward called before forward")
        return self._cache

    def spec(self):
        return {"type": self.name}


def _im2col(x):
    # (C, N, H, W) -> (C*9, N*H*W) zero-padded 3x3 neighbourhoods, rows (c, i, j)
    c, n, h, w = x.shape
    xp = np.zeros((c, n, h + 2, w + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    cols = np.empty((c, 3, 3, n, h, w), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, i, j] = xp[:, :, i : i + h, j : j + w]
    return cols.reshape(c * 9, n * h * w)


def _col2im(dcols, shape):
    c, n, h, w = shape
    dcols = dcols.reshape(c, 3, 3, n, h, w)
    dxp = np.zeros((c, n, h + 2, w + 2), dtype=dcols.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, :, i : i + h, j : j + w] += dcols[:, i, j]
    return dxp[:, :, 1:-1, 1:-1]


class Conv3x3(Layer):
    """3x3 convolution (cross-correlation), zero padding 1, stride 1.

    Weights have shape (out, in, 3, 3). ``input_grad=False`` skips the
    gradient w.r.t. the input, which the first layer never needs.
    """

    name = "conv3x3"

    def __init__(self, store, name, in_channels, out_channels, rng=None, input_grad=True):
        super().__init__()
        self.name = name
        self.store = store
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.input_grad = input_grad
        shape = (out_channels, in_channels, 3, 3)
        if rng is None:
            w = np.zeros(shape)
        else:
            w = glorot_uniform(rng, shape, in_channels * 9, out_channels * 9)
        store.add(f"{name}.weight", w)
        store.add(f"{name}.bias", np.zeros(out_channels))

    def spec(self):
        return {
            "type": "conv3x3",
            "name": self.name,
            "in": self.in_channels,
            "out": self.out_channels,
        }

    def forward(self, x):
        if x.ndim != 4 or x.shape[0] != self.in_channels or min(x.shape[2:]) < 1:
            raise ShapeError(
                f"{self.name}: expected {self.in_channels} input channels, "
                f"got array of shape {x.shape}"
            )
        c, n, h, w = x.shape
        cols = _im2col(x)
        wmat = self.store.params[f"{self.name}.weight"].reshape(self.out_channels, -1)
        out = wmat @ cols
        out += self.store.params[f"{self.name}.bias"][:, None]
        self._cache = (x.shape, cols)
        return out.reshape(self.out_channels, n, h, w)

    def backward(self, dout):
        shape, cols = self._need_cache()
        c = shape[0]
        f = self.out_channels
        d = dout.reshape(f, -1)
        wname, bname = f"{self.name}.weight", f"{self.name}.bias"
        if self.store.trainable[wname]:
            self.store.grads[wname] += (d @ cols.T).reshape(f, c, 3, 3)
        if self.store.trainable[bname]:
            self.store.grads[bname] += d.sum(axis=1)
        if not self.input_grad:
            return None
        wmat = self.store.params[wname].reshape(f, -1)
        return _col2im(wmat.T @ d, shape)


class ReLU(Layer):
    name = "relu"

    def forward(self, x):
        self._cache = x > 0
        return np.maximum(x, 0.0)

    def backward(self, dout):
        return dout * self._need_cache()


class MaxPool2(Layer):
    """2x2 max pooling, stride 2. Ties send the gradient to the first maximum
    in (top-left, top-right, bottom-left, bottom-right) order."""

    name = "maxpool2"

    def forward(self, x):
        if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
            raise ShapeError(
                f"{self.name}: expected even height and width, got array of shape {x.shape}"
            )
        quads = (x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2], x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2])
        out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
        self._cache = (x, out)
        return out

    def backward(self, dout):
        x, out = self._need_cache()
        dx = np.zeros_like(x)
        taken = np.zeros(out.shape, dtype=bool)
        for di, dj in ((0, 0), (0, 1), (1, 0), (1, 1)):
            hit = (x[:, :, di::2, dj::2] == out) & ~taken
            dx[:, :, di::2, dj::2] = dout * hit
            taken |= hit
        return dx


class GlobalAvgPool(Layer):
    """Spatial mean; maps (C, N, H, W) to batch-major (N, C)."""

    name = "global_avg_pool"

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"{self.name}: expected a 4-d array, got shape {x.shape}")
        self._cache = x.shape
        return x.mean(axis=(2, 3)).T

    def backward(self, dout):
        c, n, h, w = self._need_cache()
        return np.broadcast_to(dout.T[:, :, None, None] / (h * w), (c, n, h, w)).copy()


class Linear(Layer):
    """Affine map on (N, in) arrays; weight shape (out, in)."""

    name = "linear"

    def __init__(self, store, name, in_features, out_features, rng=None):
        super().__init__()
        self.name = name
        self.store = store
        self.in_features = in_features
        self.out_features = out_features
        shape = (out_features, in_features)
        if rng is None:
            w = np.zeros(shape)
        else:
            w = glorot_uniform(rng, shape, in_features, out_features)
        store.add(f"{name}.weight", w)
        store.add(f"{name}.bias", np.zeros(out_features))

    def spec(self):
        return {
            "type": "linear",
            "name": self.name,
            "in": self.in_features,
            "out": self.out_features,
        }

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(
                f"{self.name}: expected (N, {self.in_features}), got {x.shape}"
            )
        self._cache = x
        w = self.store.params[f"{self.name}.weight"]
        return x @ w.T + self.store.params[f"{self.name}.bias"]

    def backward(self, dout):
        x = self._need_cache()
        wname, bname = f"{self.name}.weight", f"{self.name}.bias"
        if self.store.trainable[wname]:
            self.store.grads[wname] += dout.T @ x
        if self.store.trainable[bname]:
            self.store.grads[bname] += dout.sum(axis=0)
        return dout @ self.store.params[wname]


def sigmoid(z):
    z = np.asarray(z)
    if not np.issubdtype(z.dtype, np.floating):
        z = z.astype(np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class Sigmoid(Layer):
    """Elementwise logistic function; output in (0, 1)."""

    name = "sigmoid"

    def forward(self, x):
        s = sigmoid(x)
        self._cache = s
        return s

    def backward(self, dout):
        s = self._need_cache()
        return dout * s * (1.0 - s)


# ---------------------------------------------------------------------------
# loss


def bce_loss(yhat, y):
    """Mean binary cross-entropy with scores clamped to [1e-7, 1 - 1e-7].

    Scalars give the per-sample loss; arrays are averaged.
    """
    p = np.clip(np.asarray(yhat, dtype=np.float64), BCE_CLAMP, 1.0 - BCE_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    losses = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    return float(np.mean(losses))


def bce_grad(yhat, y):
    """Gradient of the mean clamped BCE w.r.t. the scores ``yhat``."""
    yhat = np.asarray(yhat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(yhat.shape)
    inside = (yhat > BCE_CLAMP) & (yhat < 1.0 - BCE_CLAMP)
    p = np.clip(yhat, BCE_CLAMP, 1.0 - BCE_CLAMP)
    g = (-(y / p) + (1.0 - y) / (1.0 - p)) / yhat.shape[0]
    return np.where(inside, g, 0.0)


# ---------------------------------------------------------------------------
# network


class Network:
    """A layer stack ending in a sigmoid score, sharing one ParameterStore."""

    def __init__(self, layers, store):
        self.layers = list(layers)
        self.store = store
        self._forwarded = False

    def forward(self, x):
        """Score a (N, C, H, W) batch; returns (N, 1)."""
        out = np.asarray(x, dtype=np.float64)
        if out.ndim != 4:
            raise ShapeError(f"network input must be (N, C, H, W), got {out.shape}")
        out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))
        for layer in self.layers:
            out = layer.forward(out)
        self._forwarded = True
        self._last_out = out
        return out

    def backward_from(self, dout):
        """Backpropagate ``dout`` (gradient w.r.t. the network output)."""
        if not self._forwarded:
            raise StateError("backward called before forward")
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
            if dout is None:
                break
        return dout

    def loss_and_backward(self, x, y, weight=1.0):
        """Forward ``x``, accumulate ``weight * d(mean BCE)/d(theta)``.

        Gradients are added to the store's buffers; call ``zero_grad`` first
        for a fresh gradient. Returns the unweighted mean BCE.
        """
        scores = self.forward(x)
        y = np.asarray(y, dtype=np.float64).reshape(scores.shape)
        loss = bce_loss(scores, y)
        self.backward_from(weight * bce_grad(scores, y))
        return loss

    def predict_scores(self, x, batch_size=256):
        x = np.asarray(x, dtype=np.float64)
        out = [self.forward(x[i : i + batch_size])[:, 0] for i in range(0, len(x), batch_size)]
        self._forwarded = False
        return np.concatenate(out) if out else np.zeros(0)

    def architecture(self):
        return [layer.spec() for layer in self.layers]


def backward(model, batch, labels):
    """Gradients of the mean BCE of ``model`` on ``batch`` into its store.

    ``model`` must have run ``forward`` on this batch; frozen parameters keep
    a zero gradient.
    """
    if not model._forwarded:
        raise StateError("backward called before forward")
    scores = model._last_out
    model.store.zero_grad()
    model.backward_from(bce_grad(scores, labels))
    return model.store.grads


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias-corrected moments; frozen parameters are skipped."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, store):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in store.params.items():
            if not store.trainable[name]:
                continue
            g = store.grads[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_step(store, state):
    state.step(store)
    return store, state


# ---------------------------------------------------------------------------
# gradient checking


def relative_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1e-12, np.abs(analytic) + np.abs(numeric))
    return np.abs(analytic - numeric) / denom


def numeric_grad(f, x, eps):
    """Central-difference gradient of scalar ``f()`` w.r.t. array ``x``.

    ``x`` is perturbed in place and restored entry by entry.
    """
    grad = np.zeros(x.shape, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * eps)
    return grad


def _bce_exact(scores, y):
    p = np.clip(scores, BCE_CLAMP, 1 - BCE_CLAMP)
    return np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p)))


def _reference_conv(x, w, b):
    # direct 3x3 correlation: out[n,f,y,x] = b[f] + sum w[f,c,i,j] * xpad[n,c,y+i,x+j]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])) + b
    return out.transpose(0, 3, 1, 2)


def _pool_windows(x):
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return win.reshape(n, c, h // 2, w // 2, 4)


def _routing(layer, x):
    if isinstance(layer, ReLU):
        return x > 0
    if isinstance(layer, MaxPool2):
        return _pool_windows(x).argmax(axis=-1)
    return None


def _reference_apply(layer, x, route, params):
    if isinstance(layer, Conv3x3):
        return _reference_conv(x, params[f"{layer.name}.weight"], params[f"{layer.name}.bias"])
    if isinstance(layer, Linear):
        return x @ params[f"{layer.name}.weight"].T + params[f"{layer.name}.bias"]
    if isinstance(layer, ReLU):
        return np.where(route, x, 0)
    if isinstance(layer, MaxPool2):
        return np.take_along_axis(_pool_windows(x), route[..., None], axis=-1)[..., 0]
    if isinstance(layer, GlobalAvgPool):
        return x.mean(axis=(2, 3))
    if isinstance(layer, Sigmoid):
        return sigmoid(x)
    raise TypeError(f"no reference forward for {type(layer).__name__}")


def grad_check(model, batch, labels, eps=1e-4, routing="frozen", dtype=np.longdouble):
    """Max relative error between backprop and central differences.

    Every trainable parameter entry is perturbed by +/- ``eps`` and the mean
    BCE re-evaluated by a separate shift-and-sum forward pass, recomputing
    only what the entry feeds (one output channel for a convolution, then
    every later layer).

    With ``routing="frozen"`` the ReLU masks and max-pool winners of the
    unperturbed pass are held fixed, so the difference quotient measures the
    derivative of the linear piece the analytic gradient belongs to rather
    than straddling a kink; ``routing="live"`` recomputes them. Differences
    are taken in ``dtype``: extended precision keeps rounding noise well
    under 1e-5 relative for gradients near 1e-8.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if routing not in ("frozen", "live"):
        raise ValueError(f"routing must be 'frozen' or 'live', got {routing!r}")
    store = model.store
    x64 = np.asarray(batch, dtype=np.float64)
    y64 = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    model.forward(x64)
    backward(model, x64, y64)
    model._forwarded = False
    analytic = {n: g.copy() for n, g in store.grads.items()}

    params = OrderedDict((n, p.astype(dtype)) for n, p in store.params.items())
    y = y64.astype(dtype)
    eps = dtype(eps)
    layers = model.layers
    inputs, outputs, routes = [], [], []
    h = x64.astype(dtype)
    for layer in layers:
        inputs.append(h)
        routes.append(_routing(layer, h))
        h = _reference_apply(layer, h, routes[-1], params)
        outputs.append(h)

    def loss_from(k, h):
        for j in range(k + 1, len(layers)):
            route = routes[j] if routing == "frozen" else _routing(layers[j], h)
            h = _reference_apply(layers[j], h, route, params)
        return _bce_exact(h, y)

    worst = 0.0
    for k, layer in enumerate(layers):
        if not isinstance(layer, (Conv3x3, Linear)):
            continue
        wname, bname = f"{layer.name}.weight", f"{layer.name}.bias"
        for name in (wname, bname):
            if not store.trainable[name]:
                continue
            flat = params[name].reshape(-1)
            per_channel = flat.size // params[name].shape[0]
            num = np.zeros(flat.size)
            for i in range(flat.size):
                f = i // per_channel
                old = flat[i]
                vals = []
                for delta in (eps, -eps):
                    flat[i] = old + delta
                    if isinstance(layer, Conv3x3):
                        out = outputs[k].copy()
                        out[:, f : f + 1] = _reference_conv(
                            inputs[k], params[wname][f : f + 1], params[bname][f : f + 1]
                        )
                    else:
                        out = _reference_apply(layer, inputs[k], None, params)
                    vals.append(loss_from(k, out))
                flat[i] = old
                num[i] = (vals[0] - vals[1]) / (2 * eps)
            err = relative_error(analytic[name].reshape(-1), num)
            worst = max(worst, float(err.max()))
    return worst


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, store, header):
    """Write ``store`` to ``path`` in the EGRD0001 format.

    ``header`` is extended with parameter names and shapes; parameters are
    written as float64 little-endian in header order.
    """
    header = dict(header)
    header["params"] = [
        {"name": n, "shape": list(p.shape)} for n, p in store.params.items()
    ]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in store.params.values():
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def read_checkpoint(path):
    """Return ``(header, OrderedDict name -> array)`` from a checkpoint file."""
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an EGRD0001 checkpoint")
    (size,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12 : 12 + size].decode("utf-8"))
    offset = 12 + size
    values = OrderedDict()
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
        values[entry["name"]] = arr.reshape(shape).astype(np.float64)
        offset += 8 * count
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes")
    return header, values
