"""Parameterized scoring functions built as differentiable graphs.

A scoring model maps an input batch to K class scores. Parameters live in
one flat float64 vector with a manifest describing how layers slice it, so
whole-model gradients come back as a single flat array.

Conventions (chosen, since only filter counts and sizes are forced by the
architecture): 3x3 convolutions, stride-1 convs pad by 1 (shape preserved),
stride-2 convs use no padding (out = (n - 3) // 2 + 1). Weights are
He-scaled Gaussians, biases zero, from a seeded generator.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .graph import DiffGraph
from .tensor import GraphError, Tensor, concat, no_grad, swish, unfold2d

__all__ = [
    "LayerSpec",
    "ScoringModel",
    "QuadraticModel",
    "build_conv_net",
    "build_mlp",
    "linear_binary_model",
    "load_model",
]

KERNEL = 3  # all convolutions are 3x3

_KIND_CODES = {"dense": 0, "conv2d": 1, "swish": 2, "flatten": 3}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


@dataclass(frozen=True)
class LayerSpec:
    """One layer: ``dense`` (units), ``conv2d`` (out_channels, stride),
    ``swish`` or ``flatten`` (no parameters)."""

    kind: str
    units: int = 0
    out_channels: int = 0
    stride: int = 1

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "dense" and self.units <= 0:
            raise ValueError("dense layer needs units > 0")
        if self.kind == "conv2d":
            if self.stride not in (1, 2):
                raise ValueError(f"conv stride must be 1 or 2, got {self.stride}")
            if self.out_channels <= 0:
                raise ValueError("conv layer needs out_channels > 0")


def _conv_out_hw(h, w, stride):
    if stride == 1:  # pad 1 keeps the shape
        return h, w
    if h < KERNEL or w < KERNEL:
        raise GraphError(
            f"conv2d stride 2 needs spatial dims >= {KERNEL}, got {h}x{w}"
        )
    return (h - KERNEL) // 2 + 1, (w - KERNEL) // 2 + 1


class ScoringModel:
    """A layered scoring function with a flat parameter vector.

    ``manifest`` lists (name, offset, shape) triples that partition
    ``theta`` exactly; the invariant is checked at construction.
    """

    constant_hessian = False

    def __init__(self, layers, input_shape, K, theta=None, seed=0):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.K = int(K)
        self.manifest = self._build_manifest()
        n = self.n_params
        if theta is None:
            self.theta = self._init_theta(np.random.default_rng(seed))
        else:
            theta = np.asarray(theta, dtype=np.float64).ravel()
            if theta.size != n:
                raise ValueError(f"theta has {theta.size} entries, model needs {n}")
            self.theta = theta.copy()

    # ------------------------------------------------------------------
    # parameter bookkeeping

    def _build_manifest(self):
        manifest = []
        offset = 0
        shape = self.input_shape
        for idx, layer in enumerate(self.layers):
            if layer.kind == "conv2d":
                if len(shape) != 3:
                    raise GraphError(
                        f"layer {idx}: conv2d needs HWC input, current shape {shape}"
                    )
                h, w, c = shape
                oh, ow = _conv_out_hw(h, w, layer.stride)
                wshape = (KERNEL * KERNEL * c, layer.out_channels)
                manifest.append((f"conv{idx}.w", offset, wshape))
                offset += wshape[0] * wshape[1]
                manifest.append((f"conv{idx}.b", offset, (layer.out_channels,)))
                offset += layer.out_channels
                shape = (oh, ow, layer.out_channels)
            elif layer.kind == "dense":
                fan_in = int(np.prod(shape))
                manifest.append((f"dense{idx}.w", offset, (fan_in, layer.units)))
                offset += fan_in * layer.units
                manifest.append((f"dense{idx}.b", offset, (layer.units,)))
                offset += layer.units
                shape = (layer.units,)
            elif layer.kind == "flatten":
                shape = (int(np.prod(shape)),)
            # swish leaves the shape alone
        if shape != (self.K,):
            raise GraphError(
                f"model output shape {shape} does not match K={self.K}"
            )
        return manifest

    @property
    def n_params(self):
        if not self.manifest:
            return 0
        name, offset, shape = self.manifest[-1]
        return offset + int(np.prod(shape))

    def _init_theta(self, rng):
        theta = np.zeros(self.n_params)
        for name, offset, shape in self.manifest:
            size = int(np.prod(shape))
            if name.endswith(".w"):
                fan_in = shape[0]
                theta[offset : offset + size] = rng.normal(
                    0.0, np.sqrt(2.0 / fan_in), size=size
                )
        return theta

    def param(self, name):
        for n, offset, shape in self.manifest:
            if n == name:
                return self.theta[offset : offset + int(np.prod(shape))].reshape(shape)
        raise KeyError(name)

    def clone(self):
        return ScoringModel(self.layers, self.input_shape, self.K, theta=self.theta)

    @property
    def weighted_layers(self):
        return [l for l in self.layers if l.kind in ("dense", "conv2d")]

    # ------------------------------------------------------------------
    # forward graph

    def apply(self, theta_t, x_t):
        """Logits Tensor for a batch Tensor ``x_t`` of shape (B, *input_shape),
        parameterized by the flat Tensor ``theta_t``."""
        b = x_t.shape[0]
        out = x_t
        shape = self.input_shape
        slot = 0
        for idx, layer in enumerate(self.layers):
            if layer.kind == "conv2d":
                h, w, c = shape
                oh, ow = _conv_out_hw(h, w, layer.stride)
                _, off, wshape = self.manifest[slot]
                wt = theta_t[off : off + wshape[0] * wshape[1]].reshape(wshape)
                _, boff, bshape = self.manifest[slot + 1]
                bt = theta_t[boff : boff + bshape[0]]
                slot += 2
                pad = 1 if layer.stride == 1 else 0
                cols = unfold2d(out, KERNEL, KERNEL, layer.stride, pad)
                flat = cols.reshape((b * oh * ow, wshape[0])).matmul(wt)
                out = flat.reshape((b, oh, ow, layer.out_channels)) + bt
                shape = (oh, ow, layer.out_channels)
            elif layer.kind == "dense":
                fan_in = int(np.prod(shape))
                if len(shape) > 1:
                    out = out.reshape((b, fan_in))
                _, off, wshape = self.manifest[slot]
                wt = theta_t[off : off + wshape[0] * wshape[1]].reshape(wshape)
                _, boff, bshape = self.manifest[slot + 1]
                bt = theta_t[boff : boff + bshape[0]]
                slot += 2
                out = out.matmul(wt) + bt
                shape = (layer.units,)
            elif layer.kind == "flatten":
                shape = (int(np.prod(shape)),)
                out = out.reshape((b,) + shape)
            elif layer.kind == "swish":
                out = swish(out)
        return out

    def score_graph(self, x_t, theta_t=None):
        """Logits for a live input Tensor (used by attacks on x + delta)."""
        if theta_t is None:
            theta_t = Tensor(self.theta)
        return self.apply(theta_t, x_t)

    def score(self, x):
        """Logits as a numpy array; accepts one input or a batch."""
        x = np.asarray(x, dtype=np.float64)
        single = x.shape == self.input_shape
        if single:
            x = x[None]
        if x.shape[1:] != self.input_shape:
            raise GraphError(
                f"score expects input shape {self.input_shape}, got {x.shape[1:]}"
            )
        with no_grad():
            logits = self.apply(Tensor(self.theta), Tensor(x)).data
        return logits[0] if single else logits

    def predict(self, x):
        logits = self.score(x)
        return int(np.argmax(logits)) if logits.ndim == 1 else np.argmax(logits, axis=1)

    # ------------------------------------------------------------------
    # margin graphs

    def _graph(self, builder, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape == self.input_shape:
            x = x[None]
        return DiffGraph(
            builder,
            {"x": (None,) + self.input_shape, "theta": (self.n_params,)},
            bindings={"x": x, "theta": self.theta},
        )

    def margin_graph(self, x, t, j):
        """Scalar graph for the score margin (class t minus class j), summed
        over the batch rows of the ``x`` leaf. Differentiable in both the
        input leaf and the parameter leaf."""
        t, j = int(t), int(j)
        if t == j:
            raise ValueError("margin needs two distinct classes")
        if not (0 <= t < self.K and 0 <= j < self.K):
            raise ValueError(f"classes must lie in [0, {self.K})")
        mask = np.zeros(self.K)
        mask[t], mask[j] = 1.0, -1.0
        mask_t = Tensor(mask)

        def builder(leaves):
            logits = self.apply(leaves["theta"], leaves["x"])
            return (logits * mask_t).sum()

        return self._graph(builder, x)

    def margin_batch_graph(self, x, t_idx, j_idx):
        """Scalar graph summing per-row margins f_t[i] - f_j[i]; the batch
        size is fixed by the index vectors."""
        t_idx = np.asarray(t_idx, dtype=int)
        j_idx = np.asarray(j_idx, dtype=int)
        if np.any(t_idx == j_idx):
            raise ValueError("margin needs distinct classes in every row")
        b = t_idx.size
        mask = np.zeros((b, self.K))
        mask[np.arange(b), t_idx] = 1.0
        mask[np.arange(b), j_idx] = -1.0
        mask_t = Tensor(mask)

        def builder(leaves):
            logits = self.apply(leaves["theta"], leaves["x"])
            return (logits * mask_t).sum()

        g = self._graph(builder, np.zeros((b,) + self.input_shape))
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] != b:
            raise GraphError(f"margin batch needs {b} rows, got {x.shape[0]}")
        return g.bind(x=x)

    # ------------------------------------------------------------------
    # serialization (versioned binary, little-endian)

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(b"HNET")
            fh.write(struct.pack("<II", 1, self.K))
            fh.write(struct.pack("<B", len(self.input_shape)))
            fh.write(struct.pack(f"<{len(self.input_shape)}I", *self.input_shape))
            fh.write(struct.pack("<I", len(self.layers)))
            for layer in self.layers:
                p1 = layer.units if layer.kind == "dense" else layer.out_channels
                fh.write(struct.pack("<Bii", _KIND_CODES[layer.kind], p1, layer.stride))
            fh.write(struct.pack("<Q", self.theta.size))
            fh.write(self.theta.astype("<f8").tobytes())


def load_model(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != b"HNET":
        raise GraphError(f"{path}: not a model file (bad magic {blob[:4]!r})")
    pos = 4
    version, k = struct.unpack_from("<II", blob, pos)
    pos += 8
    if version != 1:
        raise GraphError(f"{path}: unsupported model version {version}")
    (ndim,) = struct.unpack_from("<B", blob, pos)
    pos += 1
    input_shape = struct.unpack_from(f"<{ndim}I", blob, pos)
    pos += 4 * ndim
    (n_layers,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    layers = []
    for _ in range(n_layers):
        code, p1, stride = struct.unpack_from("<Bii", blob, pos)
        pos += 9
        kind = _KIND_NAMES[code]
        if kind == "dense":
            layers.append(LayerSpec("dense", units=p1))
        elif kind == "conv2d":
            layers.append(LayerSpec("conv2d", out_channels=p1, stride=stride))
        else:
            layers.append(LayerSpec(kind))
    (n_theta,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    theta = np.frombuffer(blob, dtype="<f8", count=n_theta, offset=pos).copy()
    if pos + 8 * n_theta != len(blob):
        raise GraphError(f"{path}: truncated or oversized parameter block")
    return ScoringModel(layers, input_shape, k, theta=theta)


# ----------------------------------------------------------------------
# architectures


def build_conv_net(input_shape, K, seed=0):
    """The twice-differentiable CNN: 3x3 convs with maps (32, 32, 64, 64),
    every second one strided instead of pooling, then dense 200, dense 200,
    and the logits layer; SWISH after every weighted layer except logits."""
    if len(input_shape) == 2:
        input_shape = tuple(input_shape) + (1,)
    if len(input_shape) != 3:
        raise GraphError(f"conv net needs an HxWxC input, got {input_shape}")
    layers = [
        LayerSpec("conv2d", out_channels=32, stride=1),
        LayerSpec("swish"),
        LayerSpec("conv2d", out_channels=32, stride=2),
        LayerSpec("swish"),
        LayerSpec("conv2d", out_channels=64, stride=1),
        LayerSpec("swish"),
        LayerSpec("conv2d", out_channels=64, stride=2),
        LayerSpec("swish"),
        LayerSpec("flatten"),
        LayerSpec("dense", units=200),
        LayerSpec("swish"),
        LayerSpec("dense", units=200),
        LayerSpec("swish"),
        LayerSpec("dense", units=K),
    ]
    return ScoringModel(layers, input_shape, K, seed=seed)


def build_mlp(d, K, hidden=(64, 64), seed=0):
    """Desk-scale companion: a SWISH MLP on flat inputs."""
    layers = []
    for width in hidden:
        layers.append(LayerSpec("dense", units=width))
        layers.append(LayerSpec("swish"))
    layers.append(LayerSpec("dense", units=K))
    return ScoringModel(layers, (int(d),), K, seed=seed)


# ----------------------------------------------------------------------
# closed-form models for oracles and certificates


class QuadraticModel:
    """Scores f_i(x) = c_i + w_i.x + 0.5 x.A_i x with symmetric A_i.

    Margins have constant Hessians (A_t - A_j), which makes exact operator
    norms, boundary distances, and certificate checks computable in closed
    form. Implements the same scoring protocol as ScoringModel.
    """

    constant_hessian = True

    def __init__(self, W, c, A=None):
        self.W = np.asarray(W, dtype=np.float64)
        self.c = np.asarray(c, dtype=np.float64)
        k, d = self.W.shape
        if A is None:
            A = np.zeros((k, d, d))
        self.A = np.asarray(A, dtype=np.float64)
        for i in range(k):
            if not np.allclose(self.A[i], self.A[i].T):
                raise ValueError(f"A[{i}] must be symmetric")
        self.K = k
        self.input_shape = (d,)
        self.theta = np.zeros(0)  # closed-form scores, nothing trainable

    n_params = 0

    @property
    def d(self):
        return self.input_shape[0]

    def apply(self, theta_t, x_t):
        return self.score_graph(x_t)

    def score_graph(self, x_t, theta_t=None):
        cols = []
        lin = x_t.matmul(Tensor(self.W.T)) + Tensor(self.c)
        for i in range(self.K):
            ax = x_t.matmul(Tensor(self.A[i].T))
            quad = (ax * x_t).sum(axis=1, keepdims=True) * 0.5
            cols.append(quad)
        return lin + concat(cols, axis=1)

    def score(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        xb = x[None] if single else x
        quad = 0.5 * np.einsum("bi,kij,bj->bk", xb, self.A, xb)
        logits = xb @ self.W.T + self.c + quad
        return logits[0] if single else logits

    def predict(self, x):
        logits = self.score(x)
        return int(np.argmax(logits)) if logits.ndim == 1 else np.argmax(logits, axis=1)

    def margin_hessian(self, t, j):
        return self.A[t] - self.A[j]

    def margin_graph(self, x, t, j):
        t, j = int(t), int(j)
        if t == j:
            raise ValueError("margin needs two distinct classes")
        dw = Tensor(self.W[t] - self.W[j])
        da = Tensor(self.A[t] - self.A[j])
        dc = float(self.c[t] - self.c[j])

        def builder(leaves):
            x_t = leaves["x"]
            lin = (x_t * dw).sum()
            quad = 0.5 * (x_t.matmul(da.transpose()) * x_t).sum()
            return lin + quad + dc * x_t.shape[0]

        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None]
        return DiffGraph(builder, {"x": (None, self.d)}, bindings={"x": x})

    def margin_batch_graph(self, x, t_idx, j_idx):
        t_idx = np.asarray(t_idx, dtype=int)
        j_idx = np.asarray(j_idx, dtype=int)
        mask = np.zeros((t_idx.size, self.K))
        mask[np.arange(t_idx.size), t_idx] = 1.0
        mask[np.arange(t_idx.size), j_idx] = -1.0
        mask_t = Tensor(mask)

        def builder(leaves):
            return (self.score_graph(leaves["x"]) * mask_t).sum()

        return DiffGraph(
            builder, {"x": (None, self.d)}, bindings={"x": np.asarray(x, dtype=np.float64)}
        )


def linear_binary_model(w, b):
    """Binary scorer with margin f_0 - f_1 = w.x + b (zero second class)."""
    w = np.asarray(w, dtype=np.float64)
    return QuadraticModel(W=np.stack([w, np.zeros_like(w)]), c=np.array([float(b), 0.0]))
