# src/autodiff.py
#
# Minimal dense tensor library with reverse-mode automatic differentiation. Every
# activation map, loss and parameter in the pipeline is a Tensor of float64 values in
# row-major NCHW layout.
#
# Key operations:
#   - Tensor: numpy float64 buffer + requires_grad flag + optional grad buffer
#   - Tape: ordered record of ops; backward walks it in reverse exactly once per node
#   - Ops: conv2d, deconv2d, pooling, softmax, gram, activations, concat, dense layers
#   - Adam optimizer and a central-difference grad_check
#
# Notes:
#   - Recording only happens inside an active `with Tape():` block. Active tapes are
#     thread-local, so separate threads can train separate models concurrently.
#   - No broadcasting except the bias add in conv2d/deconv2d/fully_connected; every other
#     binary op demands identical shapes and fails loudly otherwise.


import math
import threading
import numpy as np

_state = threading.local()


def _tape_stack():
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array with optional participation in a gradient tape."""

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None
        self._node = None

    @classmethod
    def _wrap(cls, array):
        out = cls.__new__(cls)
        out.data = np.asarray(array, dtype=np.float64)
        out.requires_grad = False
        out.grad = None
        out._tape = None
        out._node = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self):
        return self._node is None

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output, inputs, backward_fn):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """
    Ordered list of recorded ops. Nodes are appended as ops execute, so every node's
    inputs were produced earlier on the list (or are leaves).
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def record(self, output, inputs, backward_fn):
        output._tape = self
        output._node = len(self.nodes)
        output.requires_grad = True
        self.nodes.append(_Node(output, inputs, backward_fn))

    def backward(self, loss):
        """Accumulate d(loss)/d(leaf) into every requires_grad leaf reachable from loss."""
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not recorded on this tape")

        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes[: loss._node + 1]):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            input_grads = node.backward_fn(g)
            for inp, ig in zip(node.inputs, input_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if inp._tape is self:
                    key = id(inp)
                    grads[key] = ig if key not in grads else grads[key] + ig
                else:
                    # Leaf for this tape (parameter, input, or output of a closed tape)
                    inp.grad = np.array(ig, dtype=np.float64) if inp.grad is None else inp.grad + ig


def backward(loss):
    """Run reverse-mode differentiation for `loss` on the tape that recorded it."""
    if loss._tape is None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        if not loss.requires_grad:
            raise ValueError("loss does not depend on any tensor that requires grad")
        ones = np.ones_like(loss.data)
        loss.grad = ones if loss.grad is None else loss.grad + ones
        return
    loss._tape.backward(loss)


def _make(data, inputs, backward_fn):
    out = Tensor._wrap(data)
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(out, inputs, backward_fn)
    return out


def _check_same(a, b, op):
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def _check_ndim(x, ndim, op, layout):
    if x.data.ndim != ndim:
        raise ValueError(f"{op}: expected a {ndim}-d {layout} tensor, got shape {x.data.shape}")


# === Elementwise arithmetic ===
def add(a, b):
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a, b):
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b):
    _check_same(a, b, "mul")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a, factor):
    factor = float(factor)
    return _make(a.data * factor, (a,), lambda g: (g * factor,))


def affine(a, factor, shift):
    """factor * a + shift with constant factor and shift."""
    factor = float(factor)
    return _make(a.data * factor + float(shift), (a,), lambda g: (g * factor,))


def sum(a):  # noqa: A001 - mirrors numpy naming
    shape = a.data.shape
    return _make(np.sum(a.data), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a):
    shape, n = a.data.shape, a.data.size
    return _make(np.mean(a.data), (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),))


def l1_distance(a, b):
    """Mean absolute difference; the subgradient at a tie is 0."""
    _check_same(a, b, "l1_distance")
    diff = a.data - b.data
    n = diff.size
    sign = np.sign(diff)
    return _make(np.mean(np.abs(diff)), (a, b), lambda g: (g * sign / n, -g * sign / n))


# === Activations ===
def relu(a):
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a, slope=0.2):
    slope_map = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * slope_map, (a,), lambda g: (g * slope_map,))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a):
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),))


def softplus(a):
    """ln(1 + e^x), stable for large |x|."""
    x = a.data
    return _make(np.logaddexp(0.0, x), (a,), lambda g: (g * _sigmoid(x),))


def softmax(a):
    """Softmax along the last axis (max-subtracted)."""
    shifted = a.data - np.max(a.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / np.sum(e, axis=-1, keepdims=True)

    def backward_fn(g):
        return (y * (g - np.sum(g * y, axis=-1, keepdims=True)),)

    return _make(y, (a,), backward_fn)


# === Shape ops ===
def reshape(a, shape):
    original = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(original),))


def transpose(a):
    _check_ndim(a, 2, "transpose", "matrix")
    return _make(a.data.T, (a,), lambda g: (g.T,))


def detach(a):
    """Same values, cut off from every tape."""
    return Tensor._wrap(a.data.copy())


def channel_concat(tensors):
    """Depth-wise concatenation of NCHW tensors with equal N, H, W."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("channel_concat: nothing to concatenate")
    for t in tensors:
        _check_ndim(t, 4, "channel_concat", "NCHW")
    n, _, h, w = tensors[0].data.shape
    for t in tensors[1:]:
        tn, _, th, tw = t.data.shape
        if (tn, th, tw) != (n, h, w):
            raise ValueError(
                f"channel_concat: spatial/batch mismatch {tensors[0].data.shape} vs {t.data.shape}"
            )
    splits = np.cumsum([t.data.shape[1] for t in tensors])[:-1]
    data = np.concatenate([t.data for t in tensors], axis=1)
    return _make(data, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=1)))


def channel_scale(x, weights):
    """out[n, c] = weights[n, c] * x[n, c]; the attention multiply."""
    _check_ndim(x, 4, "channel_scale", "NCHW")
    _check_ndim(weights, 2, "channel_scale", "NC")
    if weights.data.shape != x.data.shape[:2]:
        raise ValueError(
            f"channel_scale: weights shape {weights.data.shape} does not match (N, C) = {x.data.shape[:2]}"
        )
    w4 = weights.data[:, :, None, None]

    def backward_fn(g):
        return g * w4, np.sum(g * x.data, axis=(2, 3))

    return _make(x.data * w4, (x, weights), backward_fn)


# === Dense layers ===
def matmul(a, b):
    _check_ndim(a, 2, "matmul", "matrix")
    _check_ndim(b, 2, "matmul", "matrix")
    if a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ {a.data.shape} @ {b.data.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def fully_connected(x, weight, bias=None):
    """x[N, D] @ weight[D, O] + bias[O]."""
    _check_ndim(x, 2, "fully_connected", "(N, D)")
    _check_ndim(weight, 2, "fully_connected", "(D, O)")
    if x.data.shape[1] != weight.data.shape[0]:
        raise ValueError(
            f"fully_connected: input has D={x.data.shape[1]} but weight expects {weight.data.shape[0]}"
        )
    out = x.data @ weight.data
    inputs = (x, weight)
    if bias is not None:
        if bias.data.shape != (weight.data.shape[1],):
            raise ValueError(f"fully_connected: bias shape {bias.data.shape} != ({weight.data.shape[1]},)")
        out = out + bias.data
        inputs = (x, weight, bias)

    def backward_fn(g):
        grads = (g @ weight.data.T, x.data.T @ g)
        return grads + (np.sum(g, axis=0),) if bias is not None else grads

    return _make(out, inputs, backward_fn)


# === Pooling / statistics ===
def global_avg_pool(x):
    """[N, C, H, W] -> [N, C] channel means."""
    _check_ndim(x, 4, "global_avg_pool", "NCHW")
    _, _, h, w = x.data.shape
    if h < 1 or w < 1:
        raise ValueError(f"global_avg_pool: empty spatial extent {x.data.shape}")
    return _make(
        np.mean(x.data, axis=(2, 3)),
        (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.data.shape).copy(),),
    )


def gram_matrix(features):
    """out[n, i, j] = sum_hw f[n,i,h,w] f[n,j,h,w] / (C H W)."""
    _check_ndim(features, 4, "gram_matrix", "NCHW")
    n, c, h, w = features.data.shape
    norm = float(c * h * w)
    flat = features.data.reshape(n, c, h * w)
    gram = flat @ flat.transpose(0, 2, 1) / norm

    def backward_fn(g):
        return (((g + g.transpose(0, 2, 1)) @ flat / norm).reshape(n, c, h, w),)

    return _make(gram, (features,), backward_fn)


# === Convolutions (im2col) ===
def _pad(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _im2col(xp, kh, kw, stride, ho, wo):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]
    return cols


def _col2im(cols, padded_shape, stride, padding):
    _, _, kh, kw, ho, wo = cols.shape
    xp = np.zeros(padded_shape)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += cols[:, :, i, j]
    if padding == 0:
        return xp
    return xp[:, :, padding:-padding, padding:-padding]


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """input[N, C, H, W] * weight[F, C, kh, kw] -> [N, F, H', W']."""
    _check_ndim(x, 4, "conv2d", "NCHW input")
    _check_ndim(weight, 4, "conv2d", "(F, C, kh, kw) weight")
    n, c, h, w = x.data.shape
    f, wc, kh, kw = weight.data.shape
    if c != wc:
        raise ValueError(f"conv2d: input has C={c} channels but weight expects C={wc} (weight shape {weight.data.shape})")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)

    xp = _pad(x.data, padding)
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    out = np.tensordot(cols, weight.data, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
    inputs = (x, weight)
    if bias is not None:
        if bias.data.shape != (f,):
            raise ValueError(f"conv2d: bias shape {bias.data.shape} != ({f},)")
        out = out + bias.data[None, :, None, None]
        inputs = (x, weight, bias)

    def backward_fn(g):
        dw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
        dcols = np.tensordot(g, weight.data, axes=([1], [0])).transpose(0, 3, 4, 5, 1, 2)
        dx = _col2im(dcols, xp.shape, stride, padding)
        grads = (dx, dw)
        return grads + (np.sum(g, axis=(0, 2, 3)),) if bias is not None else grads

    return _make(out, inputs, backward_fn)


def deconv_output_size(size, kernel, stride, padding):
    return (size - 1) * stride - 2 * padding + kernel


def deconv2d(x, weight, bias=None, stride=2, padding=1):
    """
    Transposed convolution: input[N, C, H, W], weight[C, F, kh, kw] -> [N, F, H', W'] with
    H' = (H - 1) * stride - 2 * padding + kh. With stride 2 the output must be exactly 2H x 2W.
    """
    _check_ndim(x, 4, "deconv2d", "NCHW input")
    _check_ndim(weight, 4, "deconv2d", "(C, F, kh, kw) weight")
    n, c, h, w = x.data.shape
    wc, f, kh, kw = weight.data.shape
    if c != wc:
        raise ValueError(f"deconv2d: input has C={c} channels but weight expects C={wc} (weight shape {weight.data.shape})")
    if stride < 1:
        raise ValueError(f"deconv2d: stride must be >= 1, got {stride}")
    ho = deconv_output_size(h, kh, stride, padding)
    wo = deconv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"deconv2d: configuration yields empty output {ho}x{wo}")
    if stride == 2 and (ho, wo) != (2 * h, 2 * w):
        raise ValueError(
            f"deconv2d: kernel {kh}x{kw}, padding {padding} gives {ho}x{wo} from {h}x{w}; stride 2 must double exactly"
        )

    padded_shape = (n, f, ho + 2 * padding, wo + 2 * padding)
    dcols = np.tensordot(x.data, weight.data, axes=([1], [0])).transpose(0, 3, 4, 5, 1, 2)
    out = _col2im(dcols, padded_shape, stride, padding)
    inputs = (x, weight)
    if bias is not None:
        if bias.data.shape != (f,):
            raise ValueError(f"deconv2d: bias shape {bias.data.shape} != ({f},)")
        out = out + bias.data[None, :, None, None]
        inputs = (x, weight, bias)

    def backward_fn(g):
        cols = _im2col(_pad(g, padding), kh, kw, stride, h, w)
        dx = np.tensordot(cols, weight.data, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
        dw = np.tensordot(x.data, cols, axes=([0, 2, 3], [0, 4, 5]))
        grads = (dx, dw)
        return grads + (np.sum(g, axis=(0, 2, 3)),) if bias is not None else grads

    return _make(out, inputs, backward_fn)


# === Optimisation ===
class Adam:
    """Adam over a list of leaf Tensors; skips parameters without a gradient."""

    def __init__(self, params, lr=0.0002, beta1=0.5, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def gaussian_parameter(rng, shape, std):
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


# === Finite-difference verification ===
def grad_check(f, point, h=1e-5):
    """
    Compare the tape gradient of scalar-valued `f` at `point` with central differences.
    Returns max over coordinates of |analytic - numeric| / max(1, |numeric|), or inf when
    either estimate contains NaN.
    """
    base = point.data if isinstance(point, Tensor) else np.asarray(point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    with Tape():
        y = f(x)
    if y.data.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {y.data.shape}")
    if y.requires_grad:
        backward(y)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)

    flat = x.data.reshape(-1)
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        f_plus = float(f(x).data)
        flat[i] = original - h
        f_minus = float(f(x).data)
        flat[i] = original
        numeric[i] = (f_plus - f_minus) / (2.0 * h)

    analytic = analytic.reshape(-1)
    if np.isnan(analytic).any() or np.isnan(numeric).any():
        return math.inf
    if flat.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))
