"""Central finite-difference checks of every backward pass, in float64.

Each check draws a random instance, contracts the layer output with a random
tensor to get a scalar, and compares analytic and numeric gradients by
relative L2 error. Instances where a perturbation flips an argmax or a ReLU
(a kink) are redrawn.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import layers as L
from .patchwork import bag_loss

TOLERANCE = 1e-6
STEP = 1e-5


class _Kink(Exception):
    pass


def relative_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def numeric_grad(fn, arr, h=STEP, signature=None):
    """d fn / d arr by central differences; ``fn`` returns (loss, signature)."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        lp, sp = fn()
        flat[i] = old - h
        lm, sm = fn()
        flat[i] = old
        if signature is not None and (sp != signature or sm != signature):
            raise _Kink()
        gf[i] = (lp - lm) / (2 * h)
    return g


@dataclass
class CheckResult:
    layer: str
    instances: int
    max_error: float
    rejected: int
    seconds: float

    @property
    def ok(self):
        return self.max_error < TOLERANCE


def _sig(*arrays):
    return b"".join(np.ascontiguousarray(a).tobytes() for a in arrays)


# each case: rng -> (dict of arrays, fn(arrays) -> (loss, signature), grads(arrays) -> dict)

def _epitomic_case(normalized):
    def make(rng):
        c, k = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        w = int(rng.integers(2, 4))
        v = w + int(rng.integers(1, 3))
        s = int(rng.integers(1, 3))
        hw = w + s * int(rng.integers(1, 3))
        x = rng.standard_normal((1, c, hw, hw))
        ep = rng.standard_normal((k, c, v, v))
        mk = lambda e: L.EpitomicLayerParams(e, None, w, s, 1, normalized, 0.01)
        fwd = L.normalized_epitomic_forward if normalized else L.epitomic_conv_forward
        bwd = L.normalized_epitomic_backward if normalized else L.epitomic_conv_backward
        y0, _ = fwd(x, mk(ep), None)
        r = rng.standard_normal(y0.shape)

        def fn(a):
            y, rec = fwd(a["x"], mk(a["epitomes"]), None)
            return float(np.sum(y * r)), _sig(rec.index)

        def grads(a):
            _, rec = fwd(a["x"], mk(a["epitomes"]), None)
            dx, de = bwd(r, rec, a["x"], mk(a["epitomes"]))
            return dict(x=dx, epitomes=de)
        return dict(x=x, epitomes=ep), fn, grads
    return make


def _maxpool_case(rng):
    c, k = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    w, d = int(rng.integers(2, 4)), int(rng.integers(1, 3))
    s = int(rng.integers(1, 3))
    hw = w + s * (2 * d - 1) + int(rng.integers(0, 2))
    x = rng.standard_normal((1, c, hw, hw))
    f = rng.standard_normal((k, c, w, w))
    mk = lambda f_: L.MaxPoolConvParams(f_, None, d, None, s)
    y0, _ = L.maxpool_conv_forward(x, mk(f), None)
    r = rng.standard_normal(y0.shape)

    def fn(a):
        y, rec = L.maxpool_conv_forward(a["x"], mk(a["filters"]), None)
        return float(np.sum(y * r)), _sig(rec.index)

    def grads(a):
        _, rec = L.maxpool_conv_forward(a["x"], mk(a["filters"]), None)
        dx, df = L.maxpool_conv_backward(r, rec, a["x"], mk(a["filters"]))
        return dict(x=dx, filters=df)
    return dict(x=x, filters=f), fn, grads


def _relu_case(rng):
    x = rng.standard_normal((2, 3, 3, 3))
    beta = rng.standard_normal(3) * 0.5
    r = rng.standard_normal(x.shape)

    def fn(a):
        y = L.relu_bias(a["x"], a["beta"])
        return float(np.sum(y * r)), _sig(y > 0)

    def grads(a):
        y = L.relu_bias(a["x"], a["beta"])
        g, gb = L.relu_bias_backward(r, y)
        return dict(x=g, beta=gb)
    return dict(x=x, beta=beta), fn, grads


def _lrn_case(rng):
    c = int(rng.integers(3, 8))
    x = rng.standard_normal((2, c, 2, 2)) * 30
    r = rng.standard_normal(x.shape)

    def fn(a):
        y, _ = L.lrn_forward(a["x"])
        return float(np.sum(y * r)), None

    def grads(a):
        _, sc = L.lrn_forward(a["x"])
        return dict(x=L.lrn_backward(r, a["x"], sc))
    return dict(x=x), fn, grads


def _conv_case(rng):
    c, k = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    kh, kw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    s, dil = int(rng.integers(1, 3)), int(rng.integers(1, 3))
    x = rng.standard_normal((2, c, 7, 7))
    wts = rng.standard_normal((k, c, kh, kw))
    b = rng.standard_normal(k)
    r = rng.standard_normal(L.conv_forward(x, wts, b, s, dil, None).shape)

    def fn(a):
        return float(np.sum(L.conv_forward(a["x"], a["w"], a["b"], s, dil, None) * r)), None

    def grads(a):
        dx, dw, db = L.conv_backward(r, a["x"], a["w"], s, dil)
        return dict(x=dx, w=dw, b=db)
    return dict(x=x, w=wts, b=b), fn, grads


def _fc_case(rng):
    n, i, o = int(rng.integers(1, 4)), int(rng.integers(2, 9)), int(rng.integers(1, 6))
    x = rng.standard_normal((n, i))
    wts = rng.standard_normal((o, i))
    b = rng.standard_normal(o)
    r = rng.standard_normal((n, o))

    def fn(a):
        return float(np.sum(L.fully_connected(a["x"], a["w"], a["b"], None) * r)), None

    def grads(a):
        dx, dw, db = L.fully_connected_backward(r, a["x"], a["w"])
        return dict(x=dx, w=dw, b=db)
    return dict(x=x, w=wts, b=b), fn, grads


def _dropout_case(rng):
    layer = L.Dropout(0.5, layer_id=int(rng.integers(0, 9)), seed=int(rng.integers(0, 99)))
    x = rng.standard_normal((2, 6))
    r = rng.standard_normal(x.shape)
    train = bool(rng.integers(0, 2))

    def fn(a):
        return float(np.sum(layer.forward(a["x"], train=train, step=3) * r)), None

    def grads(a):
        layer.forward(a["x"], train=train, step=3)
        return dict(x=layer.backward(r))
    return dict(x=x), fn, grads


def _xent_case(rng):
    n, c = int(rng.integers(1, 4)), int(rng.integers(2, 6))
    s = rng.standard_normal((n, c))
    lab = rng.integers(0, c, n)

    def fn(a):
        return L.softmax_xent(a["s"], lab)[0], None

    def grads(a):
        return dict(s=L.softmax_xent(a["s"], lab)[1])
    return dict(s=s), fn, grads


def _bag_case(mode):
    def make(rng):
        k, c = int(rng.integers(1, 6)), int(rng.integers(2, 6))
        s = rng.standard_normal((k, c))
        lab = int(rng.integers(0, c))

        def fn(a):
            return bag_loss(a["s"], lab, mode)[0], _sig(a["s"].argmax(axis=0))

        def grads(a):
            return dict(s=bag_loss(a["s"], lab, mode)[1])
        return dict(s=s), fn, grads
    return make


CASES = {
    "epitomic": _epitomic_case(False),
    "epitomic_norm": _epitomic_case(True),
    "maxpool_conv": _maxpool_case,
    "relu_bias": _relu_case,
    "lrn": _lrn_case,
    "conv": _conv_case,
    "fc": _fc_case,
    "dropout": _dropout_case,
    "softmax_xent": _xent_case,
    "bag_sum": _bag_case("sum"),
    "bag_average": _bag_case("average"),
    "bag_mil": _bag_case("mil"),
}


def check_layer(name, instances=20, seed=0, max_tries=None):
    """Max relative error over ``instances`` accepted random instances."""
    make = CASES[name]
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    worst, done, rejected = 0.0, 0, 0
    max_tries = max_tries or instances * 20
    t0 = time.perf_counter()
    while done < instances and done + rejected < max_tries:
        arrays, fn, grads = make(rng)
        _, sig = fn(arrays)
        analytic = grads(arrays)
        try:
            errs = [relative_error(analytic[k],
                                   numeric_grad(lambda: fn(arrays), arrays[k], signature=sig))
                    for k in arrays]
        except _Kink:
            rejected += 1
            continue
        worst = max(worst, *errs)
        done += 1
    return CheckResult(name, done, worst, rejected, time.perf_counter() - t0)


def run_suite(names=None, instances=20, seed=0):
    return [check_layer(n, instances, seed) for n in (names or CASES)]
