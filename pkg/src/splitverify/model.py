"""Feed-forward networks as sequences of layer operators.

Every layer works on flat float64 vectors. A vector may carry a trailing
batch axis, so ``v`` has shape ``(n,)`` or ``(n, B)``. Image-like tensors are
stored channels-first and flattened in row-major order.

Linear layers (everything except :class:`ReLU`) expose ``matvec``,
``rmatvec`` (the adjoint) and ``offset`` (the additive constant, or None),
which is all the bound propagation and the graph projections need.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import prod
from typing import Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "GeometryError",
    "Layer",
    "LinearLayer",
    "Affine",
    "CircularConv",
    "Pad",
    "Selection",
    "Crop",
    "Downsample",
    "Bias",
    "PostProcess",
    "ReLU",
    "Network",
    "ConvSpec",
    "forward",
    "decompose_conv",
]


class ShapeError(ValueError):
    """Inconsistent tensor or layer shapes."""


class GeometryError(ValueError):
    """Convolution geometry that cannot be realised."""


def _frozen(a, dtype=np.float64) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


def _shape(s) -> tuple[int, ...]:
    s = tuple(int(d) for d in s)
    if not s or any(d <= 0 for d in s):
        raise ShapeError(f"invalid shape {s}")
    return s


def _batch_tail(v: np.ndarray) -> tuple[int, ...]:
    return v.shape[1:]


class Layer:
    """Base class: a map from ``shape_in`` to ``shape_out``."""

    kind: str = ""
    linear: bool = False

    def __init__(self, shape_in, shape_out):
        self.shape_in = _shape(shape_in)
        self.shape_out = _shape(shape_out)

    @property
    def n_in(self) -> int:
        return prod(self.shape_in)

    @property
    def n_out(self) -> int:
        return prod(self.shape_out)

    def forward(self, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _check_in(self, v: np.ndarray) -> None:
        if v.shape[0] != self.n_in or v.ndim > 2:
            raise ShapeError(
                f"{self.kind}: expected {self.n_in} input rows, got shape {v.shape}"
            )

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.shape_in} -> {self.shape_out})"


class LinearLayer(Layer):
    linear = True
    offset: np.ndarray | None = None

    def matvec(self, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def rmatvec(self, v: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def forward(self, v: np.ndarray) -> np.ndarray:
        self._check_in(v)
        out = self.matvec(v)
        if self.offset is not None:
            out = out + (self.offset if v.ndim == 1 else self.offset[:, None])
        return out

    def dense(self) -> np.ndarray:
        """Materialise the linear part as an ``n_out x n_in`` matrix."""
        return self.matvec(np.eye(self.n_in))


class Affine(LinearLayer):
    """Fully connected layer ``W v + b``; ``shape_in`` may be an image shape."""

    kind = "affine"

    def __init__(self, W, b=None, shape_in=None, shape_out=None):
        W = _frozen(W)
        if W.ndim != 2:
            raise ShapeError("Affine weight must be a matrix")
        b = np.zeros(W.shape[0]) if b is None else b
        b = _frozen(b).reshape(-1)
        if b.shape[0] != W.shape[0]:
            raise ShapeError(f"bias length {b.shape[0]} != rows of W {W.shape[0]}")
        super().__init__(shape_in or (W.shape[1],), shape_out or (W.shape[0],))
        if self.n_in != W.shape[1] or self.n_out != W.shape[0]:
            raise ShapeError("Affine shapes disagree with W")
        self.W = W
        self.b = b
        self.offset = b

    def matvec(self, v):
        return self.W @ v

    def rmatvec(self, v):
        return self.W.T @ v

    def dense(self):
        return np.array(self.W)


class CircularConv(LinearLayer):
    """Multi-channel circular cross-correlation without bias.

    ``out[j, p] = sum_i sum_a K[j, i, a] * x[i, (p + a) mod S]`` with
    kernels of shape ``(m, n, *k)`` and input ``(n, *S)``; one or two
    spatial axes are supported.
    """

    kind = "circ_conv"

    def __init__(self, kernels, shape_in):
        kernels = _frozen(kernels)
        shape_in = _shape(shape_in)
        if kernels.ndim != len(shape_in) + 1 or kernels.ndim not in (3, 4):
            raise ShapeError("kernels must be (m, n, *k) matching the input rank")
        m, n = kernels.shape[:2]
        spatial = shape_in[1:]
        if n != shape_in[0]:
            raise ShapeError(f"kernel expects {n} input channels, input has {shape_in[0]}")
        if any(k > s for k, s in zip(kernels.shape[2:], spatial)):
            raise GeometryError(
                f"kernel {kernels.shape[2:]} larger than spatial extent {spatial}"
            )
        super().__init__(shape_in, (m, *spatial))
        self.kernels = kernels
        self.spatial = spatial
        self._axes = tuple(range(1, 1 + len(spatial)))
        emb = np.zeros((m, n, *spatial))
        emb[(slice(None), slice(None)) + tuple(slice(0, k) for k in kernels.shape[2:])] = kernels
        # correlation with K is multiplication by conj(FFT(K)); a delta at the origin gives 1
        spec = np.conj(np.fft.fftn(emb, axes=tuple(a + 1 for a in self._axes)))
        spec.setflags(write=False)
        self.spectrum = spec  # (m, n, *S)

    @property
    def channels(self) -> tuple[int, int]:
        return self.kernels.shape[0], self.kernels.shape[1]

    def _reshape(self, v, c):
        return v.reshape((c, *self.spatial) + _batch_tail(v))

    def _mix(self, v, D, c_in, c_out):
        tail = _batch_tail(v)
        x = self._reshape(v, c_in)
        X = np.fft.fftn(x, axes=self._axes)
        # D[o, i, *S] * X[i, *S, *B] summed over i
        D_ = D.reshape(D.shape + (1,) * len(tail))
        Y = (D_ * X[None]).sum(axis=1)
        y = np.fft.ifftn(Y, axes=self._axes).real
        return y.reshape((c_out * prod(self.spatial),) + tail)

    def matvec(self, v):
        m, n = self.channels
        return self._mix(v, self.spectrum, n, m)

    def rmatvec(self, v):
        m, n = self.channels
        return self._mix(v, np.conj(self.spectrum).swapaxes(0, 1), m, n)


class Pad(LinearLayer):
    """Zero padding of the spatial axes; ``margins`` holds (before, after) per axis."""

    kind = "pad"

    def __init__(self, shape_in, margins):
        shape_in = _shape(shape_in)
        margins = tuple((int(a), int(b)) for a, b in margins)
        if len(margins) != len(shape_in) - 1 or any(a < 0 or b < 0 for a, b in margins):
            raise ShapeError(f"bad margins {margins} for input {shape_in}")
        out = (shape_in[0],) + tuple(s + a + b for s, (a, b) in zip(shape_in[1:], margins))
        super().__init__(shape_in, out)
        self.margins = margins
        grid = np.arange(self.n_out).reshape(out)
        sl = (slice(None),) + tuple(slice(a, a + s) for s, (a, _) in zip(shape_in[1:], margins))
        self.indices = _frozen(grid[sl].reshape(-1), dtype=np.int64)

    @property
    def is_identity(self) -> bool:
        return all(a == 0 and b == 0 for a, b in self.margins)

    def matvec(self, v):
        out = np.zeros((self.n_out,) + _batch_tail(v))
        out[self.indices] = v
        return out

    def rmatvec(self, v):
        return v[self.indices]


class Selection(LinearLayer):
    """``out = v[indices] + bias`` with distinct indices (a gather)."""

    kind = "post"

    def __init__(self, shape_in, shape_out, indices, bias=None):
        super().__init__(shape_in, shape_out)
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        if idx.shape[0] != self.n_out:
            raise ShapeError(f"{idx.shape[0]} indices for output size {self.n_out}")
        if idx.size and (idx.min() < 0 or idx.max() >= self.n_in):
            raise ShapeError("selection index out of range")
        if np.unique(idx).size != idx.size:
            raise ShapeError("selection indices must be distinct")
        self.indices = _frozen(idx, dtype=np.int64)
        if bias is not None:
            bias = _frozen(bias).reshape(-1)
            if bias.shape[0] != self.n_out:
                raise ShapeError("bias length must match the output size")
        self.offset = bias

    @property
    def is_identity(self) -> bool:
        return (
            self.n_in == self.n_out
            and np.array_equal(self.indices, np.arange(self.n_in))
            and (self.offset is None or not self.offset.any())
        )

    def matvec(self, v):
        return v[self.indices]

    def rmatvec(self, v):
        out = np.zeros((self.n_in,) + _batch_tail(v))
        out[self.indices] = v
        return out


class PostProcess(Selection):
    kind = "post"


class Crop(Selection):
    """Keep the window ``[start, stop)`` along each spatial axis."""

    kind = "crop"

    def __init__(self, shape_in, window):
        shape_in = _shape(shape_in)
        window = tuple((int(a), int(b)) for a, b in window)
        if len(window) != len(shape_in) - 1 or any(
            not 0 <= a < b <= s for (a, b), s in zip(window, shape_in[1:])
        ):
            raise ShapeError(f"bad crop window {window} for {shape_in}")
        grid = np.arange(prod(shape_in)).reshape(shape_in)
        sel = grid[(slice(None),) + tuple(slice(a, b) for a, b in window)]
        super().__init__(shape_in, sel.shape, sel.reshape(-1))
        self.window = window


class Downsample(Selection):
    kind = "downsample"

    def __init__(self, shape_in, stride):
        shape_in = _shape(shape_in)
        stride = tuple(int(s) for s in stride)
        if len(stride) != len(shape_in) - 1 or any(s < 1 for s in stride):
            raise ShapeError(f"bad stride {stride} for {shape_in}")
        grid = np.arange(prod(shape_in)).reshape(shape_in)
        sel = grid[(slice(None),) + tuple(slice(None, None, s) for s in stride)]
        super().__init__(shape_in, sel.shape, sel.reshape(-1))
        self.stride = stride


class Bias(Selection):
    kind = "bias"

    def __init__(self, b, shape=None):
        b = np.asarray(b, dtype=np.float64)
        shape = _shape(shape or b.shape)
        super().__init__(shape, shape, np.arange(prod(shape)), b.reshape(-1))
        self.b = self.offset


class ReLU(Layer):
    kind = "relu"

    def __init__(self, shape):
        super().__init__(shape, shape)

    def forward(self, v):
        self._check_in(v)
        return np.maximum(v, 0.0)


@dataclass(frozen=True)
class Network:
    """An ordered, validated chain of layers."""

    layers: tuple[Layer, ...]
    input_shape: tuple[int, ...]

    def __init__(self, layers: Sequence[Layer], input_shape=None):
        layers = tuple(layers)
        if not layers:
            raise ShapeError("a network needs at least one layer")
        input_shape = _shape(input_shape or layers[0].shape_in)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "input_shape", input_shape)
        self.validate()

    def validate(self) -> None:
        prev = self.input_shape
        for k, layer in enumerate(self.layers):
            if prod(layer.shape_in) != prod(prev) or (
                layer.shape_in != prev and len(layer.shape_in) > 1 and len(prev) > 1
            ):
                raise ShapeError(
                    f"layer {k} ({layer.kind}) expects {layer.shape_in}, receives {prev}"
                )
            prev = layer.shape_out

    @property
    def layer_dims(self) -> list[int]:
        return [prod(self.input_shape)] + [layer.n_out for layer in self.layers]

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [self.input_shape] + [layer.shape_out for layer in self.layers]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].n_out

    def __len__(self) -> int:
        return len(self.layers)

    def truncate(self, k: int) -> "Network":
        """The first ``k`` layers as a network (its output is ``x_k``)."""
        return Network(self.layers[:k], self.input_shape)

    def propagate(self, v: np.ndarray) -> list[np.ndarray]:
        """Flat forward pass; ``v`` is ``(n_0,)`` or ``(n_0, B)``."""
        v = np.asarray(v, dtype=np.float64)
        acts = [v]
        for layer in self.layers:
            v = layer.forward(v)
            acts.append(v)
        return acts

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)[-1]


def forward(net: Network, x0) -> list[np.ndarray]:
    """All activations ``x_0 .. x_l``, each reshaped to its layer shape."""
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != net.input_shape and x0.shape != (prod(net.input_shape),):
        raise ShapeError(f"input shape {x0.shape} != {net.input_shape}")
    acts = net.propagate(x0.reshape(-1))
    return [a.reshape(s) for a, s in zip(acts, net.shapes)]


@dataclass(frozen=True)
class ConvSpec:
    """A standard strided, zero-padded convolution (cross-correlation)."""

    weight: np.ndarray  # (m, n, *k)
    input_shape: tuple[int, ...]  # (n, *S)
    stride: tuple[int, ...] = (1, 1)
    padding: tuple[int, ...] = (0, 0)
    bias: np.ndarray | None = None

    def output_shape(self) -> tuple[int, ...]:
        return _conv_geometry(self)[1]


def _conv_geometry(spec: ConvSpec):
    w = np.asarray(spec.weight, dtype=np.float64)
    shape_in = _shape(spec.input_shape)
    r = len(shape_in) - 1
    stride = tuple(int(s) for s in spec.stride)
    padding = tuple(int(p) for p in spec.padding)
    if w.ndim != r + 2 or len(stride) != r or len(padding) != r:
        raise GeometryError("weight, stride and padding ranks disagree with the input")
    if w.shape[1] != shape_in[0]:
        raise GeometryError(f"weight expects {w.shape[1]} channels, input has {shape_in[0]}")
    if any(s < 1 for s in stride) or any(p < 0 for p in padding):
        raise GeometryError("stride must be >= 1 and padding >= 0")
    padded = tuple(s + 2 * p for s, p in zip(shape_in[1:], padding))
    if any(st > ps for st, ps in zip(stride, padded)):
        raise GeometryError(f"stride {stride} exceeds padded size {padded}")
    if any(k > ps for k, ps in zip(w.shape[2:], padded)):
        raise GeometryError(f"kernel {w.shape[2:]} exceeds padded size {padded}")
    out_sp = tuple((ps - k) // st + 1 for ps, k, st in zip(padded, w.shape[2:], stride))
    return padded, (w.shape[0], *out_sp)


def decompose_conv(spec: ConvSpec) -> list[Layer]:
    """Rewrite a standard convolution as ``[Pad, CircularConv, PostProcess]``.

    The post-processing layer fuses crop, stride downsampling and bias into
    one gather-plus-offset.
    """
    padded, out_shape = _conv_geometry(spec)
    w = np.asarray(spec.weight, dtype=np.float64)
    m = w.shape[0]
    shape_in = _shape(spec.input_shape)
    pad = Pad(shape_in, [(p, p) for p in spec.padding])
    circ = CircularConv(w, pad.shape_out)
    grid = np.arange(prod(circ.shape_out)).reshape(circ.shape_out)
    sel = grid[(slice(None),) + tuple(
        slice(0, st * (o - 1) + 1, st) for st, o in zip(spec.stride, out_shape[1:])
    )]
    bias = None
    if spec.bias is not None:
        b = np.asarray(spec.bias, dtype=np.float64).reshape(m)
        bias = np.repeat(b, prod(out_shape[1:]))
    post = PostProcess(circ.shape_out, out_shape, sel.reshape(-1), bias)
    return [pad, circ, post]
