"""Minimal tensor/layer toolkit with explicit forward and backward passes.

Layers operate on float64 numpy arrays shaped (N, C, H, W) for spatial ops
and (N, F) for dense ops. Every layer exposes forward(x), backward(grad),
and `params` / `grads` lists of same-shaped arrays. No autodiff: gradients
are hand-derived and verified against central differences (see gradcheck).
"""

import struct

import numpy as np

from .errors import DegenerateBatchError, NumericError, ShapeError


def init_uniform(rng: np.random.Generator, shape, fan_in: int,
                 fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    """Base layer: stateless unless it carries parameters."""

    params: list
    grads: list

    def __init__(self):
        self.params = []
        self.grads = []

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def zero_grad(self):
        for g in self.grads:
            g[...] = 0.0


def _im2col(x: np.ndarray, k: int, stride: int):
    """(N, C, H, W) -> (N*oh*ow, C*k*k) patch matrix."""
    n, c, h, w = x.shape
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1
    s0, s1, s2, s3 = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x, shape=(n, c, oh, ow, k, k),
        strides=(s0, s1, s2 * stride, s3 * stride, s2, s3))
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * k * k)
    return np.ascontiguousarray(cols), oh, ow


class Conv2d(Layer):
    """2-D convolution (cross-correlation), square kernel, zero padding."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int,
                 stride: int = 1, padding: int = 0,
                 rng: np.random.Generator | None = None,
                 zero_init: bool = False):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.k = kernel_size
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        fan_out = out_channels * kernel_size * kernel_size
        if zero_init:
            self.weight = np.zeros((out_channels, in_channels, kernel_size,
                                    kernel_size))
        else:
            rng = rng or np.random.default_rng(0)
            self.weight = init_uniform(
                rng, (out_channels, in_channels, kernel_size, kernel_size),
                fan_in, fan_out)
        self.bias = np.zeros(out_channels)
        self.d_weight = np.zeros_like(self.weight)
        self.d_bias = np.zeros_like(self.bias)
        self.params = [self.weight, self.bias]
        self.grads = [self.d_weight, self.d_bias]
        self._x_padded = None
        self._in_shape = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(
                f"conv2d expected (N,{self.in_channels},H,W), got {x.shape}")
        n, _, h, w = x.shape
        p = self.padding
        if p > 0:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        self._x_padded = x
        self._in_shape = (n, h, w)
        cols, oh, ow = _im2col(x, self.k, self.stride)
        wmat = self.weight.reshape(self.out_channels, -1)
        out = cols @ wmat.T + self.bias
        return out.reshape(n, oh, ow, self.out_channels).transpose(0, 3, 1, 2)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        n, _, oh, ow = grad.shape
        gmat = grad.transpose(0, 2, 3, 1).reshape(n * oh * ow,
                                                  self.out_channels)
        cols, _, _ = _im2col(self._x_padded, self.k, self.stride)
        self.d_weight += (gmat.T @ cols).reshape(self.weight.shape)
        self.d_bias += gmat.sum(axis=0)
        if self.stride == 1:
            # dX = full correlation of grad with spatially-flipped kernels
            pad = self.k - 1
            gpad = np.pad(grad, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
            wflip = self.weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gcols, gh, gw = _im2col(gpad, self.k, 1)
            dxp = (gcols @ wflip.reshape(self.in_channels, -1).T)
            dxp = dxp.reshape(n, gh, gw, self.in_channels).transpose(0, 3, 1, 2)
        else:
            dxp = np.zeros_like(self._x_padded)
            dcols = gmat @ self.weight.reshape(self.out_channels, -1)
            hp, wp = self._x_padded.shape[2], self._x_padded.shape[3]
            idx = 0
            for b in range(n):
                for i in range(oh):
                    for j in range(ow):
                        patch = dcols[idx].reshape(self.in_channels, self.k,
                                                   self.k)
                        r, c = i * self.stride, j * self.stride
                        dxp[b, :, r:r + self.k, c:c + self.k] += patch
                        idx += 1
            del hp, wp
        p = self.padding
        if p > 0:
            dxp = dxp[:, :, p:-p, p:-p]
        _, h, w = self._in_shape
        return dxp[:, :, :h, :w]


class MaxPool2d(Layer):
    """Max pooling with kernel == stride; trailing rows/cols are dropped."""

    def __init__(self, kernel_size: int = 2):
        super().__init__()
        self.k = kernel_size
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        n, c, h, w = x.shape
        k = self.k
        oh, ow = h // k, w // k
        if oh < 1 or ow < 1:
            raise ShapeError(f"input {x.shape} too small for pool k={k}")
        xr = x[:, :, :oh * k, :ow * k].reshape(n, c, oh, k, ow, k)
        xr = xr.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, k * k)
        idx = xr.argmax(axis=-1)
        out = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
        self._cache = (x.shape, idx)
        return out

    def backward(self, grad: np.ndarray) -> np.ndarray:
        (n, c, h, w), idx = self._cache
        k = self.k
        oh, ow = h // k, w // k
        dxr = np.zeros((n, c, oh, ow, k * k))
        np.put_along_axis(dxr, idx[..., None], grad[..., None], axis=-1)
        dx = np.zeros((n, c, h, w))
        dx[:, :, :oh * k, :ow * k] = (
            dxr.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, oh * k, ow * k))
        return dx


class ReLU(Layer):
    def __init__(self):
        super().__init__()
        self._mask = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return grad * self._mask


class Sigmoid(Layer):
    def __init__(self):
        super().__init__()
        self._y = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        self._y = y
        return y

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return grad * self._y * (1.0 - self._y)


class Dense(Layer):
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = init_uniform(rng, (in_features, out_features),
                                   in_features, out_features)
        self.bias = np.zeros(out_features)
        self.d_weight = np.zeros_like(self.weight)
        self.d_bias = np.zeros_like(self.bias)
        self.params = [self.weight, self.bias]
        self.grads = [self.d_weight, self.d_bias]
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ShapeError(
                f"dense expected (N,{self.in_features}), got {x.shape}")
        self._x = x
        return x @ self.weight + self.bias

    def backward(self, grad: np.ndarray) -> np.ndarray:
        self.d_weight += self._x.T @ grad
        self.d_bias += grad.sum(axis=0)
        return grad @ self.weight.T


class Flatten(Layer):
    def __init__(self):
        super().__init__()
        self._shape = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return grad.reshape(self._shape)


class Softmax(Layer):
    """Row-wise softmax on (N, K)."""

    def __init__(self):
        super().__init__()
        self._p = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        self._p = p
        return p

    def backward(self, grad: np.ndarray) -> np.ndarray:
        p = self._p
        return p * (grad - (grad * p).sum(axis=1, keepdims=True))


class Upsample2x(Layer):
    """Nearest-neighbour 2x spatial upsampling."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        n, c, h, w = grad.shape
        return grad.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def concat_channels(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concat {a.shape} with {b.shape}")
    return np.concatenate([a, b], axis=1)


def split_channels(grad: np.ndarray, c_first: int):
    return grad[:, :c_first], grad[:, c_first:]


class Sequential(Layer):
    def __init__(self, layers: list):
        super().__init__()
        self.layers = layers

    @property
    def params(self):
        return [p for layer in self.layers for p in layer.params]

    @params.setter
    def params(self, value):  # base-class __init__ assigns []
        pass

    @property
    def grads(self):
        return [g for layer in self.layers for g in layer.grads]

    @grads.setter
    def grads(self, value):
        pass

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()


EPS_PROB = 1e-12


def cross_entropy(pred_probs: np.ndarray, one_hot: np.ndarray):
    """Mean NLL over rows. Returns (loss, grad wrt pred_probs)."""
    if pred_probs.shape != one_hot.shape:
        raise ShapeError("probability/target shape mismatch")
    n = pred_probs.shape[0]
    if n == 0:
        raise DegenerateBatchError("empty batch")
    p = np.clip(pred_probs, EPS_PROB, None)
    loss = -(one_hot * np.log(p)).sum() / n
    grad = -(one_hot / p) / n
    return loss, grad


def binary_cross_entropy(pred: np.ndarray, target: np.ndarray):
    """Elementwise BCE on probabilities, averaged over all elements."""
    mask = np.ones(pred.shape, dtype=bool)
    return masked_binary_cross_entropy(pred, target, mask)


def masked_binary_cross_entropy(pred: np.ndarray, target: np.ndarray,
                                mask: np.ndarray):
    """BCE averaged over mask==True elements; gradient is exactly 0 elsewhere.

    Target values at masked-out elements are never read.
    """
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise ShapeError("prediction/target/mask shape mismatch")
    n = int(mask.sum())
    if n == 0:
        raise DegenerateBatchError("no labeled elements contribute to the loss")
    p = np.clip(pred, EPS_PROB, 1.0 - EPS_PROB)
    t = np.where(mask, target, 0.0)
    per = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))
    loss = float((per * mask).sum() / n)
    grad = np.where(mask, (p - t) / (p * (1.0 - p)) / n, 0.0)
    return loss, grad


def masked_cross_entropy(pred_probs: np.ndarray, one_hot: np.ndarray,
                         labeled: np.ndarray):
    """Cross entropy over rows flagged labeled; unlabeled rows contribute 0."""
    if pred_probs.shape != one_hot.shape:
        raise ShapeError("probability/target shape mismatch")
    n = int(labeled.sum())
    if n == 0:
        raise DegenerateBatchError("no labeled rows")
    p = np.clip(pred_probs, EPS_PROB, None)
    t = np.where(labeled[:, None], one_hot, 0.0)
    loss = -(t * np.log(p)).sum() / n
    grad = -(t / p) / n
    return loss, grad


def sgd_step(params: list, grads: list, lr: float):
    """In-place w <- w - lr * g."""
    for w, g in zip(params, grads):
        if w.shape != g.shape:
            raise ShapeError("parameter/gradient shape mismatch")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")
        w -= lr * g


def gradcheck(model: Layer, x: np.ndarray, loss_fn, eps: float = 1e-4,
              max_coords: int = 25, rng: np.random.Generator | None = None,
              check_input: bool = True) -> float:
    """Compare analytic gradients with central differences.

    loss_fn maps the model output to (loss, grad_wrt_output). A random
    subset of coordinates per parameter tensor (and of the input) is
    perturbed. Returns the max relative error.
    """
    rng = rng or np.random.default_rng(0)
    model.zero_grad()
    out = model.forward(x)
    _, dout = loss_fn(out)
    dx = model.backward(dout)
    max_err = 0.0

    def rel_err(analytic, numeric):
        denom = max(abs(analytic), abs(numeric), 1e-6)
        return abs(analytic - numeric) / denom

    def eval_at(flat, c, value):
        orig = flat[c]
        flat[c] = value
        loss, _ = loss_fn(model.forward(x))
        flat[c] = orig
        return loss

    l0, _ = loss_fn(model.forward(x))
    # central differences cancel catastrophically: the estimate carries
    # absolute noise ~ eps_mach*|loss|/eps, so gradients below this cannot
    # be resolved to 1e-4 relative and carry no information either way
    noise_floor = 1e4 * np.finfo(float).eps * abs(l0) / eps
    tensors = list(zip(model.params, model.grads))
    if check_input:
        tensors.append((x, dx))
    for tensor, analytic in tensors:
        flat = tensor.reshape(-1)
        n = flat.size
        coords = rng.choice(n, size=min(max_coords, n), replace=False)
        aflat = analytic.reshape(-1)
        for c in coords:
            lp = eval_at(flat, c, flat[c] + eps)
            lm = eval_at(flat, c, flat[c] - eps)
            d_plus = (lp - l0) / eps
            d_minus = (l0 - lm) / eps
            # disagreeing one-sided slopes mean the interval straddles a
            # kink (relu corner, pool-argmax tie); the derivative is not
            # defined there and the comparison carries no information. The
            # tolerance must sit above the difference noise but below any
            # real slope change, so it scales with the noise floor rather
            # than a fixed constant
            if abs(d_plus - d_minus) > 10.0 * noise_floor + 1e-2 * max(
                    abs(d_plus), abs(d_minus)):
                continue
            numeric = (lp - lm) / (2.0 * eps)
            if max(abs(aflat[c]), abs(numeric)) < noise_floor:
                continue
            max_err = max(max_err, rel_err(aflat[c], numeric))
    return max_err


WEIGHTS_MAGIC = b"KOWT"
WEIGHTS_VERSION = 1


def save_weights(path, named_tensors: list[tuple[str, np.ndarray]]):
    """Binary weights file: magic, version, count, then per-tensor records."""
    with open(path, "wb") as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack("<II", WEIGHTS_VERSION, len(named_tensors)))
        for name, tensor in named_tensors:
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", tensor.ndim))
            f.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            f.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())


def load_weights(path) -> list[tuple[str, np.ndarray]]:
    with open(path, "rb") as f:
        if f.read(4) != WEIGHTS_MAGIC:
            raise ValueError("not a KOWT weights file")
        version, count = struct.unpack("<II", f.read(8))
        if version != WEIGHTS_VERSION:
            raise ValueError(f"unsupported weights version {version}")
        out = []
        for _ in range(count):
            (name_len,) = struct.unpack("<I", f.read(4))
            name = f.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
            n = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(shape)
            out.append((name, data.astype(np.float64)))
        return out
