"""Forward and backward passes for the network layers.

The two pooling-style layers share one representation of their argmax:
for every output unit the index of the winning candidate. For epitomic
convolution a candidate is an offset inside the epitome; for max-pooled
convolution it is a displacement inside the pooling window.

Gradients are written by hand. The functional API (``*_forward`` /
``*_backward``) is what the tests exercise; the ``Layer`` classes at the
bottom wrap it for :mod:`epinet.net`.
"""

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ConfigError, ContractError, DimensionError
from .tensor import check_dtype, col2im, im2col, matmul, output_extent, zero_pad


class OpCounter:
    """Counts filter/patch inner products and the multiplies inside them."""

    def __init__(self):
        self.reset()

    def reset(self):
        self.inner_products = 0
        self.multiplies = 0
        self.outputs = 0

    def add(self, inner_products, length, outputs):
        self.inner_products += int(inner_products)
        self.multiplies += int(inner_products) * int(length)
        self.outputs += int(outputs)

    def per_output(self):
        return self.inner_products / self.outputs if self.outputs else 0.0


COUNTER = OpCounter()


def _batched(x):
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise DimensionError(f"expected C x H x W or N x C x H x W input, got {x.shape}",
                             module="layers")
    return x, False


# ---------------------------------------------------------------- parameters

@dataclass
class EpitomicLayerParams:
    epitomes: np.ndarray
    biases: np.ndarray = None
    filter_size: int = 3
    input_stride: int = 1
    epitome_stride: int = 1
    normalized: bool = False
    lam: float = 0.01
    dilation: int = 1

    def __post_init__(self):
        if self.epitomes.ndim != 4 or self.epitomes.shape[2] != self.epitomes.shape[3]:
            raise DimensionError(f"epitomes must be K x C x V x V, got {self.epitomes.shape}",
                                 module="layers")
        if self.biases is None:
            self.biases = np.zeros(self.epitomes.shape[0], dtype=self.epitomes.dtype)
        if self.filter_size < 1 or self.epitome_size < self.filter_size:
            raise ConfigError(f"need 1 <= W <= V, got W={self.filter_size} V={self.epitome_size}",
                              module="layers")
        if min(self.input_stride, self.epitome_stride, self.dilation) < 1:
            raise ConfigError("strides and dilation must be >= 1", module="layers")
        if self.normalized and not self.lam > 0:
            raise ConfigError(f"normalized layer needs lambda > 0, got {self.lam}",
                              module="layers")

    @property
    def epitome_size(self):
        return self.epitomes.shape[2]

    @property
    def displacement(self):
        return self.epitome_size - self.filter_size + 1

    @property
    def offsets(self):
        return list(range(0, self.displacement, self.epitome_stride))

    @property
    def candidates(self):
        return list(itertools.product(self.offsets, self.offsets))


@dataclass
class MaxPoolConvParams:
    filters: np.ndarray
    biases: np.ndarray = None
    pool_size: int = 2
    pool_stride: int = None
    input_stride: int = 1
    dilation: int = 1
    pool_dilation: int = 1

    def __post_init__(self):
        if self.filters.ndim != 4:
            raise DimensionError(f"filters must be K x C x W x W, got {self.filters.shape}",
                                 module="layers")
        if self.biases is None:
            self.biases = np.zeros(self.filters.shape[0], dtype=self.filters.dtype)
        if self.pool_stride is None:
            self.pool_stride = self.pool_size
        if self.pool_size < 1:
            raise ConfigError("pool size must be >= 1", module="layers")
        if not np.all(np.isfinite(self.filters)):
            raise ConfigError("filters must be finite", module="layers")

    @property
    def filter_size(self):
        return self.filters.shape[2]

    @property
    def candidates(self):
        return list(itertools.product(range(self.pool_size), range(self.pool_size)))


@dataclass
class ArgmaxRecord:
    """Winning candidate index per output unit, shape N x K x Ho x Wo."""

    index: np.ndarray
    candidates: list
    input_shape: tuple
    kind: str
    unit: tuple = field(default=(1, 1))

    def offsets(self):
        """Winning (dy, dx) per unit: epitome offset or input-pixel displacement."""
        table = np.asarray(self.candidates, dtype=np.int64) * np.asarray(self.unit)
        return table[self.index]


def _check_record(record, grad_out, x, kind):
    if record.kind != kind:
        raise ContractError(f"argmax record is for {record.kind}, not {kind}", module="layers")
    if record.index.shape != grad_out.shape or tuple(record.input_shape) != tuple(x.shape):
        raise ContractError(
            f"stale argmax: record {record.index.shape}/{record.input_shape} vs "
            f"grad {grad_out.shape}/input {x.shape}", module="layers")


# ------------------------------------------------------- epitomic convolution

def candidate_filters(epitomes, filter_size, candidates):
    """Crop every candidate filter: returns (K*P) x (C*W*W), row k*P + p."""
    k, c = epitomes.shape[:2]
    w = filter_size
    crops = np.stack([epitomes[:, :, py:py + w, px:px + w] for py, px in candidates], axis=1)
    return np.ascontiguousarray(crops.reshape(k * len(candidates), c * w * w))


def _fold_into_epitomes(dfilt, shape, filter_size, candidates):
    k, c, v, _ = shape
    w = filter_size
    out = np.zeros(shape, dtype=dfilt.dtype)
    blocks = dfilt.reshape(k, len(candidates), c, w, w)
    for p, (py, px) in enumerate(candidates):
        out[:, :, py:py + w, px:px + w] += blocks[:, p]
    return out


def _normalize_filters(f, lam):
    centered = f - f.mean(axis=1, keepdims=True)
    norm = np.sqrt((centered * centered).sum(axis=1) + f.dtype.type(lam))
    return centered, norm


def _epitomic_forward(x, params, normalized, counter):
    xb, single = _batched(x)
    check_dtype(xb, params.epitomes)
    n, c = xb.shape[:2]
    k, ce = params.epitomes.shape[:2]
    if c != ce:
        raise DimensionError(f"input has {c} channels, epitomes expect {ce}", module="layers")
    cands = params.candidates
    if not cands:
        raise DimensionError("empty epitome candidate set", module="layers")
    w = params.filter_size
    cols, (ho, wo) = im2col(xb, w, params.input_stride, params.dilation)
    filt = candidate_filters(params.epitomes, w, cands)
    if normalized:
        centered, norm = _normalize_filters(filt, params.lam)
        resp = matmul(cols, centered.T) / norm
    else:
        resp = matmul(cols, filt.T)
    p = len(cands)
    resp = resp.reshape(-1, k, p)
    win = resp.argmax(axis=2)
    y = np.take_along_axis(resp, win[:, :, None], axis=2)[:, :, 0]
    if counter is not None:
        counter.add(resp.size, cols.shape[1], y.size)
    y = y.reshape(n, ho, wo, k).transpose(0, 3, 1, 2)
    win = win.reshape(n, ho, wo, k).transpose(0, 3, 1, 2)
    record = ArgmaxRecord(np.ascontiguousarray(win), cands, xb.shape,
                          "epitomic-norm" if normalized else "epitomic")
    y = np.ascontiguousarray(y)
    return (y[0] if single else y), record


def epitomic_conv_forward(x, params, counter=COUNTER):
    """Max response over all epitome crops for sparsely sampled input patches."""
    return _epitomic_forward(x, params, False, counter)


def normalized_epitomic_forward(x, params, counter=COUNTER):
    """Epitomic convolution with mean-removed, contrast-normalized filter crops."""
    if not params.lam > 0:
        raise ConfigError(f"lambda must be > 0, got {params.lam}", module="layers")
    return _epitomic_forward(x, params, True, counter)


def _epitomic_backward(grad_out, record, x, params, normalized):
    xb, single = _batched(x)
    gb = grad_out[None] if single else grad_out
    _check_record(record, gb, xb, "epitomic-norm" if normalized else "epitomic")
    check_dtype(xb, gb, params.epitomes)
    n, k, ho, wo = gb.shape
    w = params.filter_size
    cands = record.candidates
    p = len(cands)
    cols, _ = im2col(xb, w, params.input_stride, params.dilation)
    filt = candidate_filters(params.epitomes, w, cands)
    g2 = np.ascontiguousarray(gb.transpose(0, 2, 3, 1).reshape(-1, k))
    win = record.index.transpose(0, 2, 3, 1).reshape(-1, k)
    fidx = np.ascontiguousarray(np.arange(k)[None, :] * p + win)
    rows = np.ascontiguousarray(np.broadcast_to(np.arange(g2.shape[0])[:, None], g2.shape))
    dcols = np.zeros_like(cols)
    acc = np.zeros_like(filt)
    if normalized:
        centered, norm = _normalize_filters(filt, params.lam)
        unit = np.ascontiguousarray(centered / norm[:, None])
        _kernels.winner_scatter_kernel(cols, unit, rows, fidx, g2, dcols, acc)
        resp = np.empty(g2.shape, dtype=cols.dtype)
        _kernels.winner_dot_kernel(cols, unit, fidx, resp)
        gsum = np.zeros(filt.shape[0], dtype=filt.dtype)
        _kernels.winner_sum_kernel(g2, fidx, np.ascontiguousarray(resp), gsum)
        dfilt = ((acc - acc.mean(axis=1, keepdims=True)) / norm[:, None]
                 - gsum[:, None] * centered / (norm * norm)[:, None])
    else:
        _kernels.winner_scatter_kernel(cols, filt, rows, fidx, g2, dcols, acc)
        dfilt = acc
    depit = _fold_into_epitomes(dfilt, params.epitomes.shape, w, cands)
    dx = col2im(dcols, xb.shape, w, params.input_stride, params.dilation)
    return (dx[0] if single else dx), depit


def epitomic_conv_backward(grad_out, record, x, params):
    """Returns (grad_input, grad_epitomes); overlapping winning crops accumulate."""
    return _epitomic_backward(grad_out, record, x, params, False)


def normalized_epitomic_backward(grad_out, record, x, params):
    return _epitomic_backward(grad_out, record, x, params, True)


# --------------------------------------------------- max-pooled convolution

def _maxpool_geometry(h, w, params):
    kw = params.filter_size
    hc_full = output_extent(h, kw, params.input_stride, params.dilation)
    wc_full = output_extent(w, kw, params.input_stride, params.dilation)
    ho = output_extent(hc_full, params.pool_size, params.pool_stride, params.pool_dilation)
    wo = output_extent(wc_full, params.pool_size, params.pool_stride, params.pool_dilation)
    if ho == 0 or wo == 0:
        raise DimensionError(f"empty max-pooled output grid for input {h}x{w}", module="layers")
    pspan = (params.pool_size - 1) * params.pool_dilation + 1
    hc = (ho - 1) * params.pool_stride + pspan
    wc = (wo - 1) * params.pool_stride + pspan
    hin = (hc - 1) * params.input_stride + (kw - 1) * params.dilation + 1
    win = (wc - 1) * params.input_stride + (kw - 1) * params.dilation + 1
    return ho, wo, hc, wc, hin, win


def maxpool_conv_forward(x, params, counter=COUNTER):
    """Correlate with every filter, then take the max over D x D pooling windows.

    Only the convolution positions some pooling window uses are evaluated.
    """
    xb, single = _batched(x)
    check_dtype(xb, params.filters)
    n, c, h, w = xb.shape
    k = params.filters.shape[0]
    if c != params.filters.shape[1]:
        raise DimensionError(f"input has {c} channels, filters expect {params.filters.shape[1]}",
                             module="layers")
    ho, wo, hc, wc, hin, win_ = _maxpool_geometry(h, w, params)
    cols, _ = im2col(xb[:, :, :hin, :win_], params.filter_size, params.input_stride,
                     params.dilation)
    fm = np.ascontiguousarray(params.filters.reshape(k, -1))
    conv = matmul(cols, fm.T).reshape(n, hc, wc, k)
    ps, pd = params.pool_stride, params.pool_dilation
    stack = np.stack([conv[:, dy * pd: dy * pd + (ho - 1) * ps + 1: ps,
                           dx * pd: dx * pd + (wo - 1) * ps + 1: ps]
                      for dy, dx in params.candidates])
    best = stack.argmax(axis=0)
    z = np.take_along_axis(stack, best[None], axis=0)[0]
    if counter is not None:
        counter.add(conv.size, cols.shape[1], z.size)
    z = np.ascontiguousarray(z.transpose(0, 3, 1, 2))
    best = np.ascontiguousarray(best.transpose(0, 3, 1, 2))
    unit = (pd * params.input_stride, pd * params.input_stride)
    record = ArgmaxRecord(best, params.candidates, xb.shape, "maxpool", unit)
    return (z[0] if single else z), record


def maxpool_conv_backward(grad_out, record, x, params):
    """Route gradients through the winning convolution positions only."""
    xb, single = _batched(x)
    gb = grad_out[None] if single else grad_out
    _check_record(record, gb, xb, "maxpool")
    check_dtype(xb, gb, params.filters)
    n, c, h, w = xb.shape
    k = params.filters.shape[0]
    ho, wo, hc, wc, hin, win_ = _maxpool_geometry(h, w, params)
    xc = xb[:, :, :hin, :win_]
    cols, _ = im2col(xc, params.filter_size, params.input_stride, params.dilation)
    fm = np.ascontiguousarray(params.filters.reshape(k, -1))
    cand = np.asarray(params.candidates, dtype=np.int64)
    best = record.index.transpose(0, 2, 3, 1)
    ps, pd = params.pool_stride, params.pool_dilation
    oy = np.arange(ho)[None, :, None, None]
    ox = np.arange(wo)[None, None, :, None]
    cy = oy * ps + cand[best, 0] * pd
    cx = ox * ps + cand[best, 1] * pd
    rows = (np.arange(n)[:, None, None, None] * hc + cy) * wc + cx
    rows = np.ascontiguousarray(rows.reshape(-1, k))
    fidx = np.ascontiguousarray(np.broadcast_to(np.arange(k)[None, :], rows.shape))
    g2 = np.ascontiguousarray(gb.transpose(0, 2, 3, 1).reshape(-1, k))
    dcols = np.zeros_like(cols)
    dfm = np.zeros_like(fm)
    _kernels.winner_scatter_kernel(cols, fm, rows, fidx, g2, dcols, dfm)
    dxc = col2im(dcols, xc.shape, params.filter_size, params.input_stride, params.dilation)
    dx = np.zeros_like(xb)
    dx[:, :, :hin, :win_] = dxc
    return (dx[0] if single else dx), dfm.reshape(params.filters.shape)


def embed_as_epitome(params):
    """Express a max-pooled convolution as an epitomic one.

    Each filter is zero padded by (D-1)*s on every side; crops of size
    W + (D-1)*s taken at offsets {0, s, ..} replay every pooling displacement.
    With input stride s = 1 this is padding D-1, crop W+D-1, stride D.
    """
    if params.pool_stride != params.pool_size:
        raise ConfigError("embedding requires pool stride == pool size", module="layers")
    if params.dilation != 1 or params.pool_dilation != 1:
        raise ConfigError("embedding requires undilated layers", module="layers")
    d, s = params.pool_size, params.input_stride
    pad = (d - 1) * s
    return EpitomicLayerParams(
        epitomes=zero_pad(params.filters, pad),
        biases=params.biases.copy(),
        filter_size=params.filter_size + pad,
        input_stride=d * s,
        epitome_stride=s,
    )


# ------------------------------------------------------------ plain conv / FC

def conv_forward(x, weights, bias, stride=1, dilation=1, counter=COUNTER):
    check_dtype(x, weights)
    n = x.shape[0]
    k, c, kh, kw = weights.shape
    if x.shape[1] != c:
        raise DimensionError(f"input has {x.shape[1]} channels, kernel expects {c}",
                             module="layers")
    cols, (ho, wo) = im2col(x, (kh, kw), stride, dilation)
    out = matmul(cols, np.ascontiguousarray(weights.reshape(k, -1).T))
    if counter is not None:
        counter.add(out.size, cols.shape[1], out.size)
    if bias is not None:
        out += bias
    return np.ascontiguousarray(out.reshape(n, ho, wo, k).transpose(0, 3, 1, 2))


def conv_backward(grad_out, x, weights, stride=1, dilation=1):
    k, c, kh, kw = weights.shape
    cols, _ = im2col(x, (kh, kw), stride, dilation)
    g2 = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1).reshape(-1, k))
    dw = matmul(np.ascontiguousarray(g2.T), cols).reshape(weights.shape)
    dcols = matmul(g2, np.ascontiguousarray(weights.reshape(k, -1)))
    dx = col2im(dcols, x.shape, (kh, kw), stride, dilation)
    return dx, dw, g2.sum(axis=0)


def fully_connected(x, weights, bias, counter=COUNTER):
    """Affine map on flattened inputs; weights are out x in."""
    xf = x.reshape(x.shape[0], -1)
    if xf.shape[1] != weights.shape[1]:
        raise DimensionError(f"FC expects {weights.shape[1]} inputs, got {xf.shape[1]}",
                             module="layers")
    out = matmul(xf, np.ascontiguousarray(weights.T))
    if counter is not None:
        counter.add(out.size, xf.shape[1], out.size)
    return out + bias


def fully_connected_backward(grad_out, x, weights):
    xf = x.reshape(x.shape[0], -1)
    dw = matmul(np.ascontiguousarray(grad_out.T), np.ascontiguousarray(xf))
    dx = matmul(grad_out, weights).reshape(x.shape)
    return dx, dw, grad_out.sum(axis=0)


# ------------------------------------------------------- pointwise layers

def _channel_shape(x, n):
    shape = [1] * x.ndim
    shape[1 if x.ndim > 1 else 0] = n
    return shape


def relu_bias(x, beta):
    """y = max(x + beta_k, 0) per channel (axis 1, or axis 0 for 1-D input)."""
    ch = x.shape[1] if x.ndim > 1 else x.shape[0]
    beta = np.asarray(beta)
    if beta.shape != (ch,):
        raise DimensionError(f"bias length {beta.shape} != channels {ch}", module="layers")
    return np.maximum(x + beta.reshape(_channel_shape(x, ch)).astype(x.dtype), 0)


def relu_bias_backward(grad_out, y):
    """Gradient passes only where y > 0; returns (grad_input, grad_bias)."""
    g = np.where(y > 0, grad_out, 0).astype(grad_out.dtype)
    axes = tuple(i for i in range(g.ndim) if i != (1 if g.ndim > 1 else 0))
    return g, g.sum(axis=axes)


LRN_DEFAULTS = dict(size=5, alpha=1e-4, beta=0.75, kappa=2.0)


def _window_sum(a, size):
    half = size // 2
    c = a.shape[1]
    out = np.zeros_like(a)
    for off in range(-half, half + 1):
        lo, hi = max(0, -off), min(c, c - off)
        if lo < hi:
            out[:, lo:hi] += a[:, lo + off:hi + off]
    return out


def lrn_forward(x, size=5, alpha=1e-4, beta=0.75, kappa=2.0):
    """Across-channel response normalization.

    b_k = a_k / (kappa + alpha * sum_{j near k} a_j^2) ** beta, the window
    spanning ``size`` channels centered on k and clipped at the ends.
    """
    xb, single = (x[None], True) if x.ndim == 3 else (x, False)
    scale = kappa + alpha * _window_sum(xb * xb, size)
    y = xb * scale ** -beta
    return (y[0], scale[0]) if single else (y, scale)


def lrn_backward(grad_out, x, scale, size=5, alpha=1e-4, beta=0.75, kappa=2.0):
    t = grad_out * x * scale ** (-beta - 1)
    return grad_out * scale ** -beta - 2 * alpha * beta * x * _window_sum(t, size)


def dropout_mask(shape, rate, seed, layer_id, step):
    """Keep-mask as a pure function of (seed, layer id, step)."""
    rng = np.random.default_rng([int(seed), int(layer_id), int(step)])
    return rng.random(shape) >= rate


def dropout(x, rate, rng_seed=0, mode="train", layer_id=0, step=0):
    """Inverted dropout. Returns (output, mask); mask is None in eval mode."""
    if not 0 <= rate < 1:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}", module="layers")
    if mode not in ("train", "eval"):
        raise ConfigError(f"unknown dropout mode {mode!r}", module="layers")
    if mode == "eval" or rate == 0:
        return x, None
    mask = dropout_mask(x.shape, rate, rng_seed, layer_id, step)
    return x * mask.astype(x.dtype) / x.dtype.type(1 - rate), mask


def softmax(scores):
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(scores, label):
    """Mean cross-entropy over the batch and its gradient w.r.t. the scores.

    Accepts a single score vector with an int label, or N x C scores with N labels.
    """
    single = scores.ndim == 1
    s = scores[None] if single else scores
    labels = np.atleast_1d(np.asarray(label))
    ncls = s.shape[1]
    if labels.shape[0] != s.shape[0]:
        raise DimensionError(f"{labels.shape[0]} labels for {s.shape[0]} score rows",
                             module="layers")
    if np.any(labels < 0) or np.any(labels >= ncls):
        raise DimensionError(f"label out of range [0, {ncls})", module="layers", code="label")
    z = s - s.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    idx = np.arange(s.shape[0])
    loss = float(np.mean(logsum - z[idx, labels]))
    grad = softmax(s)
    grad[idx, labels] -= 1
    grad /= s.shape[0]
    return loss, (grad[0] if single else grad)


# ------------------------------------------------------------------ objects

def init_normal(rng, shape, dtype, std=0.01):
    return (rng.standard_normal(shape) * std).astype(dtype)


class Layer:
    kind = "layer"
    has_stride = False

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.decay_exempt = False

    def config(self):
        return {}

    def output_shape(self, shape):
        return shape

    def zero_grads(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def forward(self, x, train=False, step=0):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


class EpitomicConv(Layer):
    kind = "epitomic"
    has_stride = True

    def __init__(self, in_channels, out_channels, filter_size, epitome_size, input_stride=1,
                 epitome_stride=1, normalized=False, lam=0.01, dilation=1, rng=None,
                 dtype=np.float32):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.filter_size, self.epitome_size = filter_size, epitome_size
        self.input_stride, self.epitome_stride = input_stride, epitome_stride
        self.normalized, self.lam, self.dilation = normalized, lam, dilation
        self.decay_exempt = normalized
        rng = rng or np.random.default_rng(0)
        self.params["epitomes"] = init_normal(
            rng, (out_channels, in_channels, epitome_size, epitome_size), dtype)
        self.layer_params()

    @property
    def stride(self):
        return self.input_stride

    @stride.setter
    def stride(self, value):
        self.input_stride = value

    def layer_params(self):
        return EpitomicLayerParams(self.params["epitomes"], None, self.filter_size,
                                   self.input_stride, self.epitome_stride, self.normalized,
                                   self.lam, self.dilation)

    def config(self):
        return dict(in_channels=self.in_channels, out_channels=self.out_channels,
                    filter_size=self.filter_size, epitome_size=self.epitome_size,
                    input_stride=self.input_stride, epitome_stride=self.epitome_stride,
                    normalized=self.normalized, lam=self.lam, dilation=self.dilation)

    def output_shape(self, shape):
        c, h, w = shape
        return (self.out_channels,
                output_extent(h, self.filter_size, self.input_stride, self.dilation),
                output_extent(w, self.filter_size, self.input_stride, self.dilation))

    def forward(self, x, train=False, step=0):
        fwd = normalized_epitomic_forward if self.normalized else epitomic_conv_forward
        self._x = x
        y, self._rec = fwd(x, self.layer_params())
        return y

    def backward(self, grad):
        bwd = normalized_epitomic_backward if self.normalized else epitomic_conv_backward
        dx, de = bwd(grad, self._rec, self._x, self.layer_params())
        self.grads["epitomes"] = de
        return dx


class MaxPoolConv(Layer):
    kind = "maxpool_conv"
    has_stride = True

    def __init__(self, in_channels, out_channels, filter_size, pool_size, pool_stride=None,
                 input_stride=1, dilation=1, pool_dilation=1, rng=None, dtype=np.float32):
        super().__init__()
        self.in_channels, self.out_channels = in_channels, out_channels
        self.filter_size, self.pool_size = filter_size, pool_size
        self.pool_stride = pool_size if pool_stride is None else pool_stride
        self.input_stride, self.dilation, self.pool_dilation = input_stride, dilation, pool_dilation
        rng = rng or np.random.default_rng(0)
        self.params["filters"] = init_normal(
            rng, (out_channels, in_channels, filter_size, filter_size), dtype)

    @property
    def stride(self):
        return self.input_stride * self.pool_stride

    def layer_params(self):
        return MaxPoolConvParams(self.params["filters"], None, self.pool_size, self.pool_stride,
                                 self.input_stride, self.dilation, self.pool_dilation)

    def config(self):
        return dict(in_channels=self.in_channels, out_channels=self.out_channels,
                    filter_size=self.filter_size, pool_size=self.pool_size,
                    pool_stride=self.pool_stride, input_stride=self.input_stride,
                    dilation=self.dilation, pool_dilation=self.pool_dilation)

    def output_shape(self, shape):
        c, h, w = shape
        p = self.layer_params()
        ho, wo = _maxpool_geometry(h, w, p)[:2]
        return (self.out_channels, ho, wo)

    def forward(self, x, train=False, step=0):
        self._x = x
        y, self._rec = maxpool_conv_forward(x, self.layer_params())
        return y

    def backward(self, grad):
        dx, df = maxpool_conv_backward(grad, self._rec, self._x, self.layer_params())
        self.grads["filters"] = df
        return dx


class Conv(Layer):
    """Biased correlation; fully connected layers become this after conversion."""

    kind = "conv"

    def __init__(self, in_channels, out_channels, kernel=1, stride=1, dilation=1, rng=None,
                 dtype=np.float32, weights=None, bias=None):
        super().__init__()
        kh, kw = (kernel, kernel) if np.isscalar(kernel) else tuple(kernel)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel = (int(kh), int(kw))
        self.conv_stride, self.dilation = stride, dilation
        if weights is None:
            rng = rng or np.random.default_rng(0)
            weights = init_normal(rng, (out_channels, in_channels, kh, kw), dtype)
        self.params["weights"] = weights
        self.params["bias"] = np.zeros(out_channels, weights.dtype) if bias is None else bias

    @property
    def has_stride(self):
        return self.conv_stride > 1

    @property
    def stride(self):
        return self.conv_stride

    @stride.setter
    def stride(self, value):
        self.conv_stride = value

    def config(self):
        return dict(in_channels=self.in_channels, out_channels=self.out_channels,
                    kernel=list(self.kernel), stride=self.conv_stride, dilation=self.dilation)

    def output_shape(self, shape):
        c, h, w = shape
        return (self.out_channels,
                output_extent(h, self.kernel[0], self.conv_stride, self.dilation),
                output_extent(w, self.kernel[1], self.conv_stride, self.dilation))

    def forward(self, x, train=False, step=0):
        self._x = x
        return conv_forward(x, self.params["weights"], self.params["bias"], self.conv_stride,
                            self.dilation)

    def backward(self, grad):
        dx, dw, db = conv_backward(grad, self._x, self.params["weights"], self.conv_stride,
                                   self.dilation)
        self.grads["weights"], self.grads["bias"] = dw, db
        return dx


class ReLU(Layer):
    kind = "relu"

    def __init__(self, channels, bias=True, dtype=np.float32):
        super().__init__()
        self.channels, self.use_bias = channels, bias
        if bias:
            self.params["bias"] = np.zeros(channels, dtype)

    def config(self):
        return dict(channels=self.channels, bias=self.use_bias)

    def forward(self, x, train=False, step=0):
        beta = self.params.get("bias")
        if beta is None:
            beta = np.zeros(x.shape[1], x.dtype)
        self._y = relu_bias(x, beta)
        return self._y

    def backward(self, grad):
        g, gb = relu_bias_backward(grad, self._y)
        if self.use_bias:
            self.grads["bias"] = gb
        return g


class LRN(Layer):
    kind = "lrn"

    def __init__(self, size=5, alpha=1e-4, beta=0.75, kappa=2.0):
        super().__init__()
        self.size, self.alpha, self.beta, self.kappa = size, alpha, beta, kappa

    def config(self):
        return dict(size=self.size, alpha=self.alpha, beta=self.beta, kappa=self.kappa)

    def forward(self, x, train=False, step=0):
        self._x = x
        y, self._scale = lrn_forward(x, **self.config())
        return y

    def backward(self, grad):
        return lrn_backward(grad, self._x, self._scale, **self.config())


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, rate=0.5, layer_id=0, seed=0):
        super().__init__()
        if not 0 <= rate < 1:
            raise ConfigError(f"dropout rate must be in [0, 1), got {rate}", module="layers")
        self.rate, self.layer_id, self.seed = rate, layer_id, seed

    def config(self):
        return dict(rate=self.rate, layer_id=self.layer_id)

    def forward(self, x, train=False, step=0):
        y, self._mask = dropout(x, self.rate, self.seed, "train" if train else "eval",
                                self.layer_id, step)
        return y

    def backward(self, grad):
        if self._mask is None:
            return grad
        return grad * self._mask.astype(grad.dtype) / grad.dtype.type(1 - self.rate)


class FullyConnected(Layer):
    kind = "fc"

    def __init__(self, in_shape, out_features, rng=None, dtype=np.float32):
        super().__init__()
        self.in_shape = tuple(in_shape) if not np.isscalar(in_shape) else (int(in_shape),)
        self.out_features = out_features
        rng = rng or np.random.default_rng(0)
        fan_in = int(np.prod(self.in_shape))
        self.params["weights"] = init_normal(rng, (out_features, fan_in), dtype)
        self.params["bias"] = np.zeros(out_features, dtype)

    def config(self):
        return dict(in_shape=list(self.in_shape), out_features=self.out_features)

    def output_shape(self, shape):
        if int(np.prod(shape)) != int(np.prod(self.in_shape)):
            raise DimensionError(f"FC expects input {self.in_shape}, got {shape}",
                                 module="layers")
        return (self.out_features,)

    def forward(self, x, train=False, step=0):
        self._x = x
        return fully_connected(x, self.params["weights"], self.params["bias"])

    def backward(self, grad):
        dx, dw, db = fully_connected_backward(grad, self._x, self.params["weights"])
        self.grads["weights"], self.grads["bias"] = dw, db
        return dx


LAYER_KINDS = {cls.kind: cls for cls in
               (EpitomicConv, MaxPoolConv, Conv, ReLU, LRN, Dropout, FullyConnected)}


def layer_from_config(kind, cfg, dtype=np.float32):
    cls = LAYER_KINDS.get(kind)
    if cls is None:
        raise ConfigError(f"unknown layer kind {kind!r}", module="layers")
    cfg = dict(cfg)
    if cls in (EpitomicConv, MaxPoolConv, Conv, FullyConnected, ReLU):
        cfg["dtype"] = dtype
    if cls is Conv:
        cfg["kernel"] = tuple(cfg["kernel"])
    if cls is FullyConnected:
        cfg["in_shape"] = tuple(cfg["in_shape"])
    return cls(**cfg)
