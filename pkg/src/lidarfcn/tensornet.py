"""Minimal dense tensor engine for the detection network.

Layers: strided 2D convolution (cross-correlation), transposed convolution,
rectifier, channel concatenation, 2-channel softmax. Forward, manual
reverse-mode backward, SGD with momentum, and a binary checkpoint format.

Tensors are (channels, rows, cols) numpy arrays; float32 for training,
float64 for gradient checking. Convolution and its transpose share one
im2col/col2im pair, which makes deconv2d_forward the exact adjoint of
conv2d_forward with the same kernel, stride and padding.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .pointmap import NET_STRIDE_H, NET_STRIDE_V

# When set, every layer output is checked for non-finite values.
NAN_CHECKS = False


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    """One node of the network graph.

    kind: "conv", "deconv" or "concat". Conv/deconv carry kernel geometry
    and parameters; concat stacks its two inputs along the channel axis.
    """

    name: str
    kind: str
    inputs: tuple[str, ...]
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (1, 1)
    stride: tuple[int, int] = (1, 1)
    pad: tuple[int, int] = (0, 0)
    relu: bool = False

    def __post_init__(self):
        if self.kind not in ("conv", "deconv", "concat"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "concat" and len(self.inputs) != 2:
            raise ValueError(f"{self.name}: concat takes exactly two inputs")
        if self.kind == "deconv":
            if self.kernel[0] < self.stride[0] or self.kernel[1] < self.stride[1]:
                raise ValueError(
                    f"{self.name}: deconv kernel {self.kernel} smaller than "
                    f"stride {self.stride} leaves uncovered outputs"
                )

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv", "deconv")

    def weight_shape(self) -> tuple[int, ...]:
        kh, kw = self.kernel
        if self.kind == "conv":
            return (self.out_channels, self.in_channels, kh, kw)
        # Deconv kernels are stored as the matching conv's (out, in) layout,
        # i.e. (deconv in, deconv out, kh, kw).
        return (self.in_channels, self.out_channels, kh, kw)


@dataclass(frozen=True)
class NetworkSpec:
    """Ordered layer graph; "input" names the point map tensor."""

    layers: tuple[LayerSpec, ...]
    objectness_head: str = "deconv6a"
    box_head: str = "deconv6b"

    def __iter__(self):
        return iter(self.layers)

    def layer(self, name: str) -> LayerSpec:
        for spec in self.layers:
            if spec.name == name:
                return spec
        raise KeyError(name)

    def param_layers(self) -> list[LayerSpec]:
        return [s for s in self.layers if s.has_params]


def make_network(in_channels: int = 2, c1: int = 16, c2: int = 32,
                 c3: int = 64, d4: int = 32, d5: int = 16) -> NetworkSpec:
    """The two-branch topology.

    Trunk downsamples by (2, 4) then twice by (2, 2); deconv4 upsamples back
    to conv2's size and is concatenated with it; the trunk then splits into
    the objectness branch (deconv5a/6a) and box branch (deconv5b/6b), each
    concatenated with conv1 before the final (2, 4) upsample. Heads emit 2
    and 24 channels at the input's full H x W.
    """
    layers = (
        LayerSpec("conv1", "conv", ("input",), in_channels, c1,
                  kernel=(5, 9), stride=(2, 4), pad=(2, 4), relu=True),
        LayerSpec("conv2", "conv", ("conv1",), c1, c2,
                  kernel=(3, 3), stride=(2, 2), pad=(1, 1), relu=True),
        LayerSpec("conv3", "conv", ("conv2",), c2, c3,
                  kernel=(3, 3), stride=(2, 2), pad=(1, 1), relu=True),
        LayerSpec("deconv4", "deconv", ("conv3",), c3, d4,
                  kernel=(4, 4), stride=(2, 2), pad=(1, 1), relu=True),
        LayerSpec("cat4", "concat", ("conv2", "deconv4"), c2 + d4, c2 + d4),
        LayerSpec("deconv5a", "deconv", ("cat4",), c2 + d4, d5,
                  kernel=(4, 4), stride=(2, 2), pad=(1, 1), relu=True),
        LayerSpec("deconv5b", "deconv", ("cat4",), c2 + d4, d5,
                  kernel=(4, 4), stride=(2, 2), pad=(1, 1), relu=True),
        LayerSpec("cat5a", "concat", ("conv1", "deconv5a"), c1 + d5, c1 + d5),
        LayerSpec("cat5b", "concat", ("conv1", "deconv5b"), c1 + d5, c1 + d5),
        LayerSpec("deconv6a", "deconv", ("cat5a",), c1 + d5, 2,
                  kernel=(4, 8), stride=(2, 4), pad=(1, 2)),
        LayerSpec("deconv6b", "deconv", ("cat5b",), c1 + d5, 24,
                  kernel=(4, 8), stride=(2, 4), pad=(1, 2)),
    )
    return NetworkSpec(layers)


# ---------------------------------------------------------------------------
# im2col / col2im and the four conv primitives


def conv_output_size(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def deconv_output_size(size: int, k: int, s: int, p: int) -> int:
    return (size - 1) * s - 2 * p + k


def _im2col(x, kernel, stride, pad, out_shape):
    c, h, w = x.shape
    (kh, kw), (sv, sh), (ph, pw) = kernel, stride, pad
    oh, ow = out_shape
    xp = np.zeros((c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    xp[:, ph:ph + h, pw:pw + w] = x
    col = np.empty((c, kh, kw, oh, ow), dtype=x.dtype)
    for u in range(kh):
        for v in range(kw):
            col[:, u, v] = xp[:, u:u + sv * oh:sv, v:v + sh * ow:sh]
    return col.reshape(c * kh * kw, oh * ow)


def _col2im(col, in_shape, kernel, stride, pad, out_shape):
    c, h, w = in_shape
    (kh, kw), (sv, sh), (ph, pw) = kernel, stride, pad
    oh, ow = out_shape
    col = col.reshape(c, kh, kw, oh, ow)
    xp = np.zeros((c, h + 2 * ph, w + 2 * pw), dtype=col.dtype)
    for u in range(kh):
        for v in range(kw):
            xp[:, u:u + sv * oh:sv, v:v + sh * ow:sh] += col[:, u, v]
    return xp[:, ph:ph + h, pw:pw + w]


def conv2d_forward(x, w, b, stride, pad):
    """y[o,i,j] = b[o] + sum_{c,u,v} x[c, i*sv+u-ph, j*sh+v-pw] w[o,c,u,v]."""
    o, c, kh, kw = w.shape
    if x.shape[0] != c:
        raise ValueError(f"conv input has {x.shape[0]} channels, kernel wants {c}")
    oh = conv_output_size(x.shape[1], kh, stride[0], pad[0])
    ow = conv_output_size(x.shape[2], kw, stride[1], pad[1])
    if oh <= 0 or ow <= 0:
        raise ValueError(f"conv output would be {oh}x{ow} for input {x.shape}")
    col = _im2col(x, (kh, kw), stride, pad, (oh, ow))
    y = w.reshape(o, -1) @ col + b[:, None]
    return y.reshape(o, oh, ow), col


def conv2d_backward(dy, x_shape, col, w, stride, pad):
    o = w.shape[0]
    dy_mat = dy.reshape(o, -1)
    dw = (dy_mat @ col.T).reshape(w.shape)
    db = dy_mat.sum(axis=1)
    dx = _col2im(w.reshape(o, -1).T @ dy_mat, x_shape,
                 w.shape[2:], stride, pad, dy.shape[1:])
    return dx, dw, db


def deconv2d_forward(x, w, b, stride, pad):
    """Transposed convolution: the adjoint of conv2d_forward with (w, stride, pad)."""
    q, r, kh, kw = w.shape
    if x.shape[0] != q:
        raise ValueError(f"deconv input has {x.shape[0]} channels, kernel wants {q}")
    oh = deconv_output_size(x.shape[1], kh, stride[0], pad[0])
    ow = deconv_output_size(x.shape[2], kw, stride[1], pad[1])
    if oh <= 0 or ow <= 0:
        raise ValueError(f"deconv output would be {oh}x{ow} for input {x.shape}")
    x_mat = x.reshape(q, -1)
    y = _col2im(w.reshape(q, -1).T @ x_mat, (r, oh, ow),
                (kh, kw), stride, pad, x.shape[1:])
    return y + b[:, None, None]


def deconv2d_backward(dy, x, w, stride, pad):
    q, r, kh, kw = w.shape
    dcol = _im2col(dy, (kh, kw), stride, pad, x.shape[1:])
    dx = (w.reshape(q, -1) @ dcol).reshape(x.shape)
    dw = (x.reshape(q, -1) @ dcol.T).reshape(w.shape)
    db = dy.sum(axis=(1, 2))
    return dx, dw, db


def softmax2(logits: np.ndarray) -> np.ndarray:
    """Channel softmax of a (2, H, W) logit map; channels sum to one."""
    shifted = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


# ---------------------------------------------------------------------------
# Parameters


def init_params(spec: NetworkSpec, rng: np.random.Generator,
                dtype=np.float32) -> dict:
    """Uniform kernels scaled by 1/sqrt(fan-in); zero biases."""
    params = {}
    for layer in spec.param_layers():
        kh, kw = layer.kernel
        fan_in = layer.in_channels * kh * kw
        if layer.kind == "deconv":
            # Each output cell sees roughly kernel/stride of the input.
            fan_in = max(1, fan_in // (layer.stride[0] * layer.stride[1]))
        scale = 1.0 / np.sqrt(fan_in)
        w = rng.uniform(-scale, scale, size=layer.weight_shape())
        params[layer.name] = {
            "w": w.astype(dtype),
            "b": np.zeros(layer.out_channels, dtype=dtype),
        }
    return params


def _check_finite(name, arr):
    if NAN_CHECKS and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in output of {name}")


def forward(spec: NetworkSpec, params: dict, pointmap: np.ndarray,
            want_cache: bool = False):
    """Run the graph; returns (objectness, boxes) or (objectness, boxes, cache)."""
    c, h, w = pointmap.shape
    if h % NET_STRIDE_V or w % NET_STRIDE_H:
        raise ValueError(
            f"input {h}x{w} not divisible by network stride "
            f"({NET_STRIDE_V}, {NET_STRIDE_H})"
        )
    values = {"input": pointmap}
    cache = {}
    for layer in spec:
        try:
            if layer.kind == "concat":
                a, b = (values[n] for n in layer.inputs)
                if a.shape[1:] != b.shape[1:]:
                    raise ValueError(f"concat inputs {a.shape} vs {b.shape}")
                y = np.concatenate([a, b], axis=0)
                cache[layer.name] = a.shape[0]
            else:
                x = values[layer.inputs[0]]
                p = params[layer.name]
                if layer.kind == "conv":
                    y, col = conv2d_forward(x, p["w"], p["b"],
                                            layer.stride, layer.pad)
                    cache[layer.name] = (x.shape, col)
                else:
                    y = deconv2d_forward(x, p["w"], p["b"],
                                         layer.stride, layer.pad)
                    cache[layer.name] = x
                if layer.relu:
                    mask = y > 0
                    y = y * mask
                    cache[layer.name] = (cache[layer.name], mask)
        except ValueError as err:
            raise ValueError(f"{layer.name}: {err}") from None
        _check_finite(layer.name, y)
        values[layer.name] = y
    heads = values[spec.objectness_head], values[spec.box_head]
    if want_cache:
        return (*heads, {"values": values, "layers": cache})
    return heads


def backward(spec: NetworkSpec, params: dict, cache: dict,
             d_objectness: np.ndarray, d_boxes: np.ndarray) -> dict:
    """Gradients of sum(objectness * d_objectness + boxes * d_boxes) w.r.t. params."""
    if not cache:
        raise ValueError("backward requires the forward cache")
    layer_cache = cache["layers"]
    d_values = {
        spec.objectness_head: d_objectness.copy(),
        spec.box_head: d_boxes.copy(),
    }
    grads = {}
    for layer in reversed(spec.layers):
        dy = d_values.pop(layer.name, None)
        if dy is None:
            continue
        if layer.kind == "concat":
            split = layer_cache[layer.name]
            parts = (dy[:split], dy[split:])
            for name, part in zip(layer.inputs, parts):
                _accumulate(d_values, name, part)
            continue
        stored = layer_cache[layer.name]
        if layer.relu:
            stored, mask = stored
            dy = dy * mask
        p = params[layer.name]
        if layer.kind == "conv":
            x_shape, col = stored
            dx, dw, db = conv2d_backward(dy, x_shape, col, p["w"],
                                         layer.stride, layer.pad)
        else:
            dx, dw, db = deconv2d_backward(dy, stored, p["w"],
                                           layer.stride, layer.pad)
        grads[layer.name] = {"w": dw, "b": db}
        _accumulate(d_values, layer.inputs[0], dx)
    return grads


def _accumulate(store, name, grad):
    if name in store:
        store[name] = store[name] + grad
    else:
        store[name] = grad


def sgd_step(params: dict, grads: dict, velocity: dict,
             lr: float, momentum: float) -> None:
    """In-place update: v <- momentum v - lr g; theta <- theta + v."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    for name, p in params.items():
        g = grads[name]
        for key in ("w", "b"):
            if not np.all(np.isfinite(g[key])):
                raise FloatingPointError(
                    f"non-finite gradient for {name}.{key}; step aborted"
                )
        v = velocity.setdefault(
            name, {k: np.zeros_like(p[k]) for k in ("w", "b")})
        for key in ("w", "b"):
            v[key] *= momentum
            v[key] -= lr * g[key].astype(p[key].dtype)
            p[key] += v[key]


# ---------------------------------------------------------------------------
# Checkpoints
#
# Layout (all integers little-endian): magic "LFCN", version u32, layer
# count u32, then per parameterized layer: name length u16 + utf-8 bytes,
# kernel dim count u8, dims u32 each, then raw float32 kernel data followed
# by float32 bias data (bias length = the layer's output channel count).

_MAGIC = b"LFCN"
_VERSION = 1


def checkpoint_save(params: dict, spec: NetworkSpec, path) -> None:
    layers = spec.param_layers()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(layers)))
        for layer in layers:
            w = np.ascontiguousarray(params[layer.name]["w"], dtype="<f4")
            b = np.ascontiguousarray(params[layer.name]["b"], dtype="<f4")
            name = layer.name.encode()
            fh.write(struct.pack("<H", len(name)))
            fh.write(name)
            fh.write(struct.pack("<B", w.ndim))
            fh.write(struct.pack(f"<{w.ndim}I", *w.shape))
            fh.write(w.tobytes())
            fh.write(b.tobytes())


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def checkpoint_load(path, spec: NetworkSpec, dtype=np.float32) -> dict:
    """Load and validate parameters against spec; never partially succeeds."""
    params = {}
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != _MAGIC:
            raise CheckpointError(f"{path}: bad magic bytes")
        version, count = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != _VERSION:
            raise CheckpointError(f"{path}: unsupported version {version}")
        layers = spec.param_layers()
        if count != len(layers):
            raise CheckpointError(
                f"{path}: {count} layers stored, spec has {len(layers)}"
            )
        for layer in layers:
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
            name = _read_exact(fh, name_len, "layer name").decode()
            if name != layer.name:
                raise CheckpointError(
                    f"{path}: stored layer {name!r} does not match spec "
                    f"layer {layer.name!r}"
                )
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, "dim count"))
            dims = struct.unpack(f"<{ndim}I",
                                 _read_exact(fh, 4 * ndim, "dims"))
            if dims != layer.weight_shape():
                raise CheckpointError(
                    f"{path}: layer {name} kernel {dims} does not match "
                    f"spec shape {layer.weight_shape()}"
                )
            n_w = int(np.prod(dims))
            w = np.frombuffer(_read_exact(fh, 4 * n_w, f"{name} kernel"),
                              dtype="<f4").reshape(dims)
            b = np.frombuffer(
                _read_exact(fh, 4 * layer.out_channels, f"{name} bias"),
                dtype="<f4")
            params[layer.name] = {"w": w.astype(dtype), "b": b.astype(dtype)}
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after last layer")
    return params


def cast_params(params: dict, dtype) -> dict:
    return {name: {k: v.astype(dtype) for k, v in p.items()}
            for name, p in params.items()}
