"""Sequential networks, SGD training, 10-view evaluation and checkpoints."""

import json
import logging
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .errors import CheckpointError, ConfigError, DimensionError, NonFiniteError

log = logging.getLogger(__name__)


def rng_stream(seed, name):
    """Independent generator for a named sub-stream (data, dropout, mining, init...)."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


class Network:
    """Ordered layer list ending in class scores; the loss head is softmax cross-entropy."""

    def __init__(self, layers, input_shape, num_classes, seed=0, name="net"):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.seed = seed
        self.name = name
        self.velocity = {}
        self.state = {}
        for layer in self.layers:
            if isinstance(layer, L.Dropout):
                layer.seed = seed
        self.check_shapes()

    # geometry ---------------------------------------------------------
    def check_shapes(self):
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except DimensionError as e:
                raise DimensionError(f"layer {i} ({layer.kind}): {e}", module="net") from e
            if any(s <= 0 for s in shape):
                raise DimensionError(f"layer {i} ({layer.kind}) produces empty shape {shape}",
                                     module="net")
        if shape[0] != self.num_classes:
            raise DimensionError(f"net outputs {shape[0]} scores for {self.num_classes} classes",
                                 module="net")
        return shape

    @property
    def dtype(self):
        for _, w in self.named_params():
            return w.dtype
        return np.dtype(np.float32)

    @property
    def convolutional(self):
        return not any(isinstance(l, L.FullyConnected) for l in self.layers)

    @property
    def window(self):
        return self.input_shape[1]

    @property
    def stride(self):
        s = 1
        for layer in self.layers:
            if layer.has_stride:
                s *= layer.stride
        return s

    # parameters -------------------------------------------------------
    def named_params(self):
        for i, layer in enumerate(self.layers):
            for pname, arr in layer.params.items():
                yield f"layers.{i}.{pname}", arr

    def params(self):
        return dict(self.named_params())

    def grads(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for pname, g in layer.grads.items():
                out[f"layers.{i}.{pname}"] = g
        return out

    def exempt_names(self, extra=()):
        names = set()
        for i, layer in enumerate(self.layers):
            if layer.decay_exempt or i in extra:
                names.update(f"layers.{i}.{p}" for p in layer.params)
        return names

    def normalized_layers(self):
        return [i for i, l in enumerate(self.layers) if getattr(l, "normalized", False)]

    # passes -----------------------------------------------------------
    def forward(self, x, train=False, step=0):
        if self.convolutional:
            if x.ndim != 4 or x.shape[1] != self.input_shape[0]:
                raise DimensionError(f"batch shape {x.shape} does not match {self.input_shape[0]}"
                                     " input channels", module="net")
        elif tuple(x.shape[1:]) != self.input_shape:
            raise DimensionError(f"batch shape {x.shape[1:]} != net input {self.input_shape}",
                                 module="net")
        acts = [x]
        for i, layer in enumerate(self.layers):
            x = layer.forward(x, train=train, step=step)
            if not np.all(np.isfinite(x)):
                raise NonFiniteError(f"non-finite activation after layer {i} ({layer.kind})",
                                     module="net")
            acts.append(x)
        self._acts = acts
        return x

    def forward_loss(self, x, labels, train=False, step=0):
        scores = self.forward(x, train=train, step=step)
        loss, self._dscores = L.softmax_xent(scores, labels)
        return self._acts, loss

    def backward(self, grad=None):
        g = self._dscores if grad is None else grad
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return self.grads()

    def predict_proba(self, x, batch=256):
        out = []
        for i in range(0, len(x), batch):
            out.append(L.softmax(self.forward(x[i:i + batch]).astype(np.float64)))
        return np.concatenate(out)

    def describe(self):
        return [dict(kind=l.kind, config=l.config()) for l in self.layers]


def build_network(blocks, input_shape, num_classes, seed=0, dtype=np.float32, name="net"):
    """Assemble a network from ``[(kind, config), ...]`` with an init sub-stream."""
    rng = rng_stream(seed, "init")
    layers = []
    for kind, cfg in blocks:
        cfg = dict(cfg)
        if L.LAYER_KINDS.get(kind) in (L.EpitomicConv, L.MaxPoolConv, L.Conv, L.FullyConnected):
            cfg.setdefault("rng", rng)
        layers.append(L.layer_from_config(kind, cfg, dtype))
    return Network(layers, input_shape, num_classes, seed=seed, name=name)


def class_t_blocks(num_classes=10, kind="epitomic", normalized=False, input_size=32,
                   channels=3, widths=(16, 32, 128), dropout=0.5, lam=0.01):
    """Desk-scale two-stage net alternating epitomic (or max-pool) conv with LRN.

    Epitomic stages use (W=5, V=7, stride 2) and (W=3, V=5, stride 2). The
    max-pool baseline uses the same filter sizes with 2x2 pooling so both nets
    have the same number of units per layer.
    """
    k1, k2, hidden = widths
    if kind == "epitomic":
        s1 = ("epitomic", dict(in_channels=channels, out_channels=k1, filter_size=5,
                               epitome_size=7, input_stride=2, normalized=normalized, lam=lam))
        s2 = ("epitomic", dict(in_channels=k1, out_channels=k2, filter_size=3, epitome_size=5,
                               input_stride=2, normalized=normalized, lam=lam))
        side = ((input_size - 5) // 2 + 1 - 3) // 2 + 1
    elif kind == "maxpool":
        if normalized:
            raise ConfigError("normalization is only implemented for epitomic layers",
                              module="net")
        s1 = ("maxpool_conv", dict(in_channels=channels, out_channels=k1, filter_size=5,
                                   pool_size=2))
        s2 = ("maxpool_conv", dict(in_channels=k1, out_channels=k2, filter_size=3, pool_size=2))
        side = ((input_size - 4) // 2 - 2) // 2
    else:
        raise ConfigError(f"unknown Class-T kind {kind!r}", module="net")
    blocks = [s1, ("relu", dict(channels=k1)), ("lrn", {}),
              s2, ("relu", dict(channels=k2)),
              ("fc", dict(in_shape=(k2, side, side), out_features=hidden)),
              ("relu", dict(channels=hidden))]
    if dropout:
        blocks.append(("dropout", dict(rate=dropout, layer_id=len(blocks))))
    blocks.append(("fc", dict(in_shape=(hidden,), out_features=num_classes)))
    return blocks


def class_t(num_classes=10, kind="epitomic", normalized=False, seed=0, input_size=32,
            channels=3, dtype=np.float32, **kw):
    blocks = class_t_blocks(num_classes, kind, normalized, input_size, channels, **kw)
    return build_network(blocks, (channels, input_size, input_size), num_classes, seed, dtype,
                         name=f"class-t-{kind}{'-norm' if normalized else ''}")


# ------------------------------------------------------------------ training

@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 128
    weight_decay: float = 5e-4
    decay_exempt: set = None
    lr_drop: float = 10.0
    patience: int = 3
    max_drops: int = 3
    epochs: int = 30
    seed: int = 0
    loss_mode: str = "single"
    flip: bool = True

    def validate(self, net=None):
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}", module="net")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}", module="net")
        if self.loss_mode not in ("single", "sum", "average", "mil"):
            raise ConfigError(f"unknown loss mode {self.loss_mode!r}", module="net")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch size must be >= 1 and epochs >= 0", module="net")
        if net is not None and self.decay_exempt is not None:
            missing = set(net.normalized_layers()) - set(self.decay_exempt)
            if missing:
                raise ConfigError(f"normalized layers {sorted(missing)} must be decay-exempt",
                                  module="net")
        return self


def sgd_step(params, grads, velocity, config, lr=None, exempt=()):
    """Momentum SGD with L2 decay, updating ``params`` and ``velocity`` in place.

    v <- momentum * v - lr * (g + decay * w);  w <- w + v
    """
    lr = config.lr if lr is None else lr
    for name, w in params.items():
        g = grads[name]
        decay = 0.0 if name in exempt else config.weight_decay
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(w)
        v *= w.dtype.type(config.momentum)
        v -= w.dtype.type(lr) * (g + w.dtype.type(decay) * w)
        w += v
    return params


def lr_schedule(history, base_lr=0.01, patience=3, factor=10.0, max_drops=3):
    """Learning rate after a sequence of per-epoch validation errors.

    The rate is divided by ``factor`` whenever the best error has not improved
    for ``patience`` epochs, at most ``max_drops`` times.
    """
    return base_lr / factor ** len(lr_drop_epochs(history, patience, max_drops))


def lr_drop_epochs(history, patience=3, max_drops=3):
    drops = []
    best = np.inf
    stale = 0
    for epoch, err in enumerate(history):
        if err < best:
            best, stale = err, 0
            continue
        stale += 1
        if stale >= patience and len(drops) < max_drops:
            drops.append(epoch)
            stale = 0
    return drops


def random_crop_flip(images, size, rng, flip=True):
    n, c, h, w = images.shape
    out = np.empty((n, c, size, size), dtype=images.dtype)
    ys = rng.integers(0, h - size + 1, n)
    xs = rng.integers(0, w - size + 1, n)
    flips = rng.random(n) < 0.5 if flip else np.zeros(n, bool)
    for i in range(n):
        crop = images[i, :, ys[i]:ys[i] + size, xs[i]:xs[i] + size]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


class Trainer:
    """Mini-batch SGD driver. Deterministic given (net seed, config)."""

    def __init__(self, net, config):
        self.net = net
        self.config = config.validate(net)
        extra = config.decay_exempt or ()
        self.exempt = net.exempt_names(extra)
        st = net.state.setdefault("trainer", {})
        st.setdefault("step", 0)
        st.setdefault("epoch", 0)
        st.setdefault("history", [])
        self.data_rng = rng_stream(config.seed, "data")

    @property
    def step(self):
        return self.net.state["trainer"]["step"]

    @property
    def lr(self):
        c = self.config
        hist = [h["val_error"] for h in self.net.state["trainer"]["history"]
                if h.get("val_error") is not None]
        return lr_schedule(hist, c.lr, c.patience, c.lr_drop, c.max_drops)

    def update(self, lr=None):
        net = self.net
        sgd_step(net.params(), net.grads(), net.velocity, self.config,
                 lr=self.lr if lr is None else lr, exempt=self.exempt)
        net.state["trainer"]["step"] += 1

    def train_batch(self, x, y):
        _, loss = self.net.forward_loss(x, y, train=True, step=self.step)
        self.net.backward()
        self.update()
        return loss

    def train_epoch(self, images, labels):
        c = self.config
        epoch = self.net.state["trainer"]["epoch"]
        rng = np.random.default_rng([c.seed, epoch, 7])
        order = rng.permutation(len(images))
        size = self.net.window
        losses = []
        for i in range(0, len(order), c.batch_size):
            idx = order[i:i + c.batch_size]
            x = random_crop_flip(images[idx], size, rng, c.flip)
            losses.append(self.train_batch(x, labels[idx]) * len(idx))
        self.net.state["trainer"]["epoch"] += 1
        return float(np.sum(losses) / len(images))

    def fit(self, images, labels, val=None, epochs=None, callback=None):
        epochs = self.config.epochs if epochs is None else epochs
        hist = self.net.state["trainer"]["history"]
        for _ in range(epochs):
            loss = self.train_epoch(images, labels)
            rec = dict(epoch=self.net.state["trainer"]["epoch"], loss=loss, lr=self.lr)
            if val is not None:
                rec["val_error"] = 1.0 - accuracy(self.net, *val)
            hist.append(rec)
            log.info("epoch %(epoch)d loss %(loss).4f lr %(lr).2g", rec)
            if callback is not None and callback(rec) is False:
                break
        return hist


def accuracy(net, images, labels, views=1, batch=256):
    if views == 10:
        probs = np.stack([ten_view_predict(net, im) for im in images])
    else:
        probs = net.predict_proba(center_crops(images, net.window), batch)
    return float(np.mean(probs.argmax(axis=1) == labels))


def center_crops(images, size):
    h, w = images.shape[2:]
    y0, x0 = (h - size) // 2, (w - size) // 2
    return np.ascontiguousarray(images[:, :, y0:y0 + size, x0:x0 + size])


def ten_views(image, size):
    c, h, w = image.shape
    if h < size or w < size:
        raise DimensionError(f"image {h}x{w} smaller than crop {size}", module="net")
    origins = [((h - size) // 2, (w - size) // 2), (0, 0), (0, w - size), (h - size, 0),
               (h - size, w - size)]
    crops = [image[:, y:y + size, x:x + size] for y, x in origins]
    crops += [c_[:, :, ::-1] for c_ in crops]
    return np.ascontiguousarray(np.stack(crops))


def ten_view_predict(net, image):
    """Average softmax over center + 4 corner crops and their mirror images."""
    return net.predict_proba(ten_views(image, net.window)).mean(axis=0)


# --------------------------------------------------------------- checkpoints

MAGIC = b"EPNT"
VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
ARCH_TENSOR = "__arch__"


def _arch_json(net):
    arch = dict(name=net.name, input_shape=list(net.input_shape), num_classes=net.num_classes,
                seed=net.seed, layers=net.describe(), state=net.state)
    return json.dumps(arch, sort_keys=True, separators=(",", ":"), default=_json_default)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (set, tuple)):
        return sorted(o) if isinstance(o, set) else list(o)
    raise TypeError(f"not serializable: {type(o)}")


def checkpoint_bytes(net):
    tensors = [(ARCH_TENSOR, np.frombuffer(_arch_json(net).encode(), np.uint8).astype("<f4"))]
    for name, arr in net.named_params():
        tensors.append((name, arr))
    for name in sorted(net.velocity):
        tensors.append((f"velocity.{name}", net.velocity[name]))
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(tensors))
    for name, arr in tensors:
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in "<=|" else arr.dtype
        code = _DTYPE_CODES.get(np.dtype(dt).newbyteorder("<"))
        if code is None:
            raise CheckpointError(f"tensor {name} has unsupported dtype {arr.dtype}")
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<BB", code, arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def save_checkpoint(net, path):
    data = checkpoint_bytes(net)
    with open(path, "wb") as f:
        f.write(data)
    return len(data)


def _read(buf, pos, n, what):
    if pos + n > len(buf):
        raise CheckpointError(f"truncated file while reading {what}", offset=pos)
    return buf[pos:pos + n], pos + n


def parse_checkpoint(buf):
    """Decode checkpoint bytes into an ordered list of (name, array)."""
    if len(buf) < 16:
        raise CheckpointError("truncated file", offset=len(buf))
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}", offset=0)
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("CRC32 mismatch", offset=len(buf) - 4)
    version, count = struct.unpack("<II", body[4:12])
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}", offset=4)
    pos = 12
    tensors = []
    for _ in range(count):
        raw, pos = _read(body, pos, 2, "name length")
        (nlen,) = struct.unpack("<H", raw)
        raw, pos = _read(body, pos, nlen, "name")
        name = raw.decode("utf-8")
        raw, pos = _read(body, pos, 2, "dtype/ndim")
        code, ndim = struct.unpack("<BB", raw)
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"unknown dtype code {code}", offset=pos - 2)
        raw, pos = _read(body, pos, 4 * ndim, "dims")
        dims = struct.unpack(f"<{ndim}I", raw)
        dt = _CODE_DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        raw, pos = _read(body, pos, nbytes, f"payload of {name}")
        tensors.append((name, np.frombuffer(raw, dt).reshape(dims).astype(dt.newbyteorder("="))))
    if pos != len(body):
        raise CheckpointError("trailing bytes after last tensor", offset=pos)
    return tensors


def load_checkpoint(path):
    with open(path, "rb") as f:
        buf = f.read()
    tensors = parse_checkpoint(buf)
    if not tensors or tensors[0][0] != ARCH_TENSOR:
        raise CheckpointError("missing architecture record", offset=12)
    arch = json.loads(bytes(tensors[0][1].astype(np.uint8)).decode())
    named = dict(tensors[1:])
    dtype = np.float32
    for name, arr in tensors[1:]:
        dtype = arr.dtype
        break
    layers = [L.layer_from_config(d["kind"], d["config"], dtype) for d in arch["layers"]]
    net = Network(layers, arch["input_shape"], arch["num_classes"], seed=arch["seed"],
                  name=arch["name"])
    net.state = arch.get("state", {})
    for name, arr in net.named_params():
        if name not in named:
            raise CheckpointError(f"missing tensor {name}")
        src = named.pop(name)
        if src.shape != arr.shape:
            raise CheckpointError(f"shape mismatch for {name}: {src.shape} vs {arr.shape}")
        arr[...] = src
    for name in list(named):
        if name.startswith("velocity."):
            net.velocity[name[len("velocity."):]] = named.pop(name).copy()
    if named:
        raise CheckpointError(f"unexpected tensors {sorted(named)}")
    return net
