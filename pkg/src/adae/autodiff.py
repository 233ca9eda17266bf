"""Reverse-mode tensors and layer math for the dual autoencoders.

Everything is plain numpy underneath. A :class:`Tensor` wraps an ndarray and,
when gradients are enabled, remembers how it was produced so that
``loss.backward()`` can push derivatives back to the parameters. The op set is
deliberately small: strided cross-correlation, its transpose, batch
normalization, three pointwise activations, and the two reduction norms the
losses and the anomaly score need. Scalar reductions always accumulate in
float64 even when the arrays are float32, so logged losses are stable enough
for exact-identity checks.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "DimensionError",
    "DegenerateBatchError",
    "Tensor",
    "no_grad",
    "add",
    "sub",
    "conv2d",
    "conv2d_transpose",
    "batch_norm",
    "relu",
    "leaky_relu",
    "tanh",
    "activation",
    "l1_mean",
    "l2_norm",
    "gradients",
]


class DimensionError(ValueError):
    """Raised when tensor shapes cannot be combined by an operation."""


class DegenerateBatchError(ValueError):
    """Raised when batch statistics are requested over fewer than two values."""


_grad_enabled = True


class no_grad:
    """Context manager that disables graph construction (scoring, plain eval)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """A dense n-d array plus an optional backward edge into the graph."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A view of the same values with no history (gradient barrier)."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar node, accumulating into ``.grad``."""
        if self.data.size != 1:
            raise DimensionError(f"backward() needs a scalar, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype)
    if t.grad is None:
        t.grad = g.copy() if g.base is not None or g is t.data else g
    else:
        t.grad = t.grad + g


def _node(data, parents, backward) -> Tensor:
    """Create a result node; drop the graph edges when grads are off."""
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


# ---------------------------------------------------------------------------
# elementwise arithmetic (only what loss composition needs)
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    out = _node(a.data + b.data, (a, b), None)
    if out.requires_grad:
        def backward(g):
            if a.requires_grad:
                _accumulate(a, g)
            if b.requires_grad:
                _accumulate(b, g)
        out._backward = backward
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")
    out = _node(a.data - b.data, (a, b), None)
    if out.requires_grad:
        def backward(g):
            if a.requires_grad:
                _accumulate(a, g)
            if b.requires_grad:
                _accumulate(b, -g)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# strided convolution and its transpose
# ---------------------------------------------------------------------------

def _window_view(padded: np.ndarray, kh: int, kw: int, stride: int,
                 out_h: int, out_w: int) -> np.ndarray:
    """Zero-copy (N, C, out_h, out_w, kh, kw) sliding-window view."""
    n, c = padded.shape[:2]
    sn, sc, sh, sw = padded.strides
    shape = (n, c, out_h, out_w, kh, kw)
    strides = (sn, sc, sh * stride, sw * stride, sh, sw)
    return np.lib.stride_tricks.as_strided(padded, shape, strides)


def _scatter_windows(windows: np.ndarray, canvas_shape: tuple[int, ...],
                     stride: int) -> np.ndarray:
    """Adjoint of :func:`_window_view`: sum windows back onto a canvas.

    ``windows`` is (N, C, H, W, kh, kw); window (h, w) lands with its top-left
    corner at (stride*h, stride*w).
    """
    out = np.zeros(canvas_shape, dtype=windows.dtype)
    _, _, h, w, kh, kw = windows.shape
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * h:stride, j:j + stride * w:stride] += windows[:, :, :, :, i, j]
    return out


def _check_conv_input(x: Tensor, kernel: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise DimensionError(f"{op}: input must be NCHW, got shape {x.data.shape}")
    if kernel.data.ndim != 4:
        raise DimensionError(f"{op}: kernel must be 4-d, got shape {kernel.data.shape}")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, *,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Strided cross-correlation of an NCHW batch with an (outC, inC, k, k) kernel.

    Output spatial size is floor((H + 2*padding - k)/stride) + 1.
    """
    _check_conv_input(x, kernel, "conv2d")
    if stride < 1:
        raise DimensionError(f"conv2d: stride must be positive, got {stride}")
    xd, kd = x.data, kernel.data
    n, cin, h, w = xd.shape
    cout, kin, kh, kw = kd.shape
    if cin != kin:
        raise DimensionError(
            f"conv2d: input shape {xd.shape} has {cin} channels but kernel shape "
            f"{kd.shape} expects {kin}")
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    if out_h <= 0 or out_w <= 0:
        raise DimensionError(
            f"conv2d: kernel shape {kd.shape} with stride {stride}, padding {padding} "
            f"does not fit input shape {xd.shape}")
    padded = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    win = _window_view(padded, kh, kw, stride, out_h, out_w)
    out = np.tensordot(win, kd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[:, None, None]
    parents = (x, kernel) if bias is None else (x, kernel, bias)
    result = _node(out, parents, None)
    if result.requires_grad:
        def backward(g):
            if kernel.requires_grad:
                _accumulate(kernel, np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])))
            if bias is not None and bias.requires_grad:
                _accumulate(bias, g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                # spread each output gradient over its receptive field
                gwin = np.tensordot(g, kd, axes=([1], [0]))        # n,oh,ow,cin,kh,kw
                gwin = gwin.transpose(0, 3, 1, 2, 4, 5)
                gpad = _scatter_windows(gwin, padded.shape, stride)
                if padding:
                    gpad = gpad[:, :, padding:padding + h, padding:padding + w]
                _accumulate(x, gpad)
        result._backward = backward
    return result


def conv2d_transpose(x: Tensor, kernel: Tensor, bias: Tensor | None = None, *,
                     stride: int = 1, padding: int = 0,
                     output_padding: int = 0) -> Tensor:
    """Fractionally-strided (upsampling) counterpart of :func:`conv2d`.

    The kernel is stored (inC, outC, k, k) so that a kernel used by ``conv2d``
    can be passed here unchanged to realize the exact adjoint map. Output
    spatial size is (H-1)*stride - 2*padding + k + output_padding.
    """
    _check_conv_input(x, kernel, "conv2d_transpose")
    if stride < 1:
        raise DimensionError(f"conv2d_transpose: stride must be positive, got {stride}")
    if not 0 <= output_padding < stride:
        raise DimensionError(
            f"conv2d_transpose: output_padding {output_padding} must be in [0, stride={stride})")
    xd, kd = x.data, kernel.data
    n, cin, h, w = xd.shape
    kin, cout, kh, kw = kd.shape
    if cin != kin:
        raise DimensionError(
            f"conv2d_transpose: input shape {xd.shape} has {cin} channels but kernel "
            f"shape {kd.shape} expects {kin}")
    out_h = (h - 1) * stride - 2 * padding + kh + output_padding
    out_w = (w - 1) * stride - 2 * padding + kw + output_padding
    if out_h <= 0 or out_w <= 0:
        raise DimensionError(
            f"conv2d_transpose: kernel shape {kd.shape} with stride {stride}, padding "
            f"{padding} does not fit input shape {xd.shape}")
    canvas_h = out_h + 2 * padding
    canvas_w = out_w + 2 * padding
    contrib = np.tensordot(xd, kd, axes=([1], [0]))                # n,h,w,cout,kh,kw
    contrib = contrib.transpose(0, 3, 1, 2, 4, 5)                  # n,cout,h,w,kh,kw
    canvas = _scatter_windows(contrib, (n, cout, canvas_h, canvas_w), stride)
    out = canvas[:, :, padding:padding + out_h, padding:padding + out_w]
    if bias is not None:
        out = out + bias.data[:, None, None]
    elif padding:
        out = out.copy()
    parents = (x, kernel) if bias is None else (x, kernel, bias)
    result = _node(out, parents, None)
    if result.requires_grad:
        def backward(g):
            gcanvas = np.zeros((n, cout, canvas_h, canvas_w), dtype=g.dtype)
            gcanvas[:, :, padding:padding + out_h, padding:padding + out_w] = g
            gwin = _window_view(gcanvas, kh, kw, stride, h, w)     # n,cout,h,w,kh,kw
            if kernel.requires_grad:
                _accumulate(kernel, np.tensordot(xd, gwin, axes=([0, 2, 3], [0, 2, 3])))
            if bias is not None and bias.requires_grad:
                _accumulate(bias, g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                gx = np.tensordot(gwin, kd, axes=([1, 4, 5], [1, 2, 3]))
                _accumulate(x, gx.transpose(0, 3, 1, 2))
        result._backward = backward
    return result


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray, *,
               mode: str = "train", momentum: float = 0.9,
               eps: float = 1e-5) -> Tensor:
    """Per-channel normalization over the (N, H, W) axes of an NCHW batch.

    In train mode the batch statistics normalize the batch and the running
    buffers are updated in place (decay ``momentum`` on the old value); in
    eval mode only the running buffers are read, so the output of one sample
    never depends on the rest of the batch.
    """
    if x.data.ndim != 4:
        raise DimensionError(f"batch_norm: input must be NCHW, got shape {x.data.shape}")
    if mode not in ("train", "eval"):
        raise ValueError(f"batch_norm: unknown mode {mode!r}")
    xd = x.data
    n, c, h, w = xd.shape
    if mode == "train":
        count = n * h * w
        if count < 2:
            raise DegenerateBatchError(
                f"batch_norm: train mode needs at least 2 values per channel, "
                f"got {count} (input shape {xd.shape})")
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var * (count / (count - 1))
    else:
        mean = running_mean.astype(xd.dtype, copy=False)
        var = running_var.astype(xd.dtype, copy=False)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean[:, None, None]) * inv_std[:, None, None]
    out = gamma.data[:, None, None] * xhat + beta.data[:, None, None]
    result = _node(out.astype(xd.dtype, copy=False), (x, gamma, beta), None)
    if result.requires_grad:
        def backward(g):
            if gamma.requires_grad:
                _accumulate(gamma, (g * xhat).sum(axis=(0, 2, 3)))
            if beta.requires_grad:
                _accumulate(beta, g.sum(axis=(0, 2, 3)))
            if x.requires_grad:
                scale = (gamma.data * inv_std)[:, None, None]
                if mode == "train":
                    m = n * h * w
                    g_sum = g.sum(axis=(0, 2, 3), keepdims=True).reshape(1, c, 1, 1)
                    gx_sum = (g * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                    _accumulate(x, scale * (g - g_sum / m - xhat * gx_sum / m))
                else:
                    _accumulate(x, scale * g)
        result._backward = backward
    return result


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    out = _node(np.maximum(x.data, 0), (x,), None)
    if out.requires_grad:
        def backward(g):
            _accumulate(x, g * (x.data > 0))
        out._backward = backward
    return out


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    out = _node(np.where(x.data > 0, x.data, slope * x.data), (x,), None)
    if out.requires_grad:
        def backward(g):
            _accumulate(x, g * np.where(x.data > 0, 1.0, slope))
        out._backward = backward
    return out


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    out = _node(t, (x,), None)
    if out.requires_grad:
        def backward(g):
            _accumulate(x, g * (1.0 - t * t))
        out._backward = backward
    return out


def activation(x: Tensor, kind: str, slope: float = 0.2) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "tanh":
        return tanh(x)
    raise ValueError(f"unknown activation kind {kind!r}")


# ---------------------------------------------------------------------------
# reduction norms
# ---------------------------------------------------------------------------

def l1_mean(a: Tensor, b: Tensor) -> Tensor:
    """Mean absolute difference over all elements, accumulated in float64."""
    _require_same_shape(a, b, "l1_mean")
    diff = a.data - b.data
    value = np.mean(np.abs(diff), dtype=np.float64)
    out = _node(np.float64(value), (a, b), None)
    if out.requires_grad:
        def backward(g):
            scale = float(g) / diff.size
            da = scale * np.sign(diff)
            if a.requires_grad:
                _accumulate(a, da)
            if b.requires_grad:
                _accumulate(b, -da)
        out._backward = backward
    return out


def l2_norm(a: Tensor, b: Tensor) -> Tensor:
    """Euclidean norm of the elementwise difference, accumulated in float64."""
    _require_same_shape(a, b, "l2_norm")
    diff = a.data - b.data
    value = float(np.sqrt(np.sum(np.square(diff), dtype=np.float64)))
    out = _node(np.float64(value), (a, b), None)
    if out.requires_grad:
        def backward(g):
            if value == 0.0:
                return  # subgradient at the origin: leave zero
            da = (float(g) / value) * diff
            if a.requires_grad:
                _accumulate(a, da)
            if b.requires_grad:
                _accumulate(b, -da)
        out._backward = backward
    return out


def gradients(loss: Tensor, params) -> dict:
    """Backward from a scalar loss; unreached parameters map to zero arrays."""
    params = list(params)
    for p in params:
        p.grad = None
    loss.backward()
    return {p: (p.grad if p.grad is not None else np.zeros_like(p.data)) for p in params}
