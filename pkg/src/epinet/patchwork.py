"""Image pyramids packed into one canvas, and the losses trained over them.

A patchwork lays every pyramid level side by side in a single image so one
fully convolutional pass scores every (position, scale) window. Canvas pixels
map back to (x, y, scale) exactly; gutter pixels map to ``SENTINEL``.
"""

import copy
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .errors import ConfigError, DimensionError, EpinetError, PackingError, RangeError
from .net import Network, rng_stream, sgd_step

SENTINEL = None


# ------------------------------------------------------------------ pyramid

def resize_bilinear(image, out_h, out_w):
    """Bilinear resampling of a C x H x W array with half-pixel centers."""
    c, h, w = image.shape
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"cannot resize to {out_h}x{out_w}", module="patchwork")
    if (out_h, out_w) == (h, w):
        return image.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (src - lo).astype(image.dtype)

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    rows = image[:, y0] * (1 - fy)[None, :, None] + image[:, y1] * fy[None, :, None]
    return rows[:, :, x0] * (1 - fx) + rows[:, :, x1] * fx


@dataclass
class Level:
    scale: float
    image: np.ndarray
    aspect: float = 1.0

    @property
    def shape(self):
        return self.image.shape[1:]


@dataclass
class Pyramid:
    levels: list
    image_shape: tuple
    image_id: str = None
    warnings: list = field(default_factory=list)

    def factors(self, i):
        """Actual (y, x) resize factors of level i relative to the source image."""
        h, w = self.levels[i].shape
        return h / self.image_shape[0], w / self.image_shape[1]


def build_pyramid(image, scales, aspect=1.0, min_size=None, allow_subcrop=False,
                  image_id=None, square=False):
    """Resize ``image`` (C x H x W) once per scale.

    Level size is round(H * scale * aspect) x round(W * scale); with
    ``square=True`` every level is round(max(H, W) * scale) on both sides.
    Levels smaller than ``min_size`` are rejected unless ``allow_subcrop``;
    with ``allow_subcrop="skip"`` they are dropped.
    """
    scales = [float(s) for s in scales]
    warnings = []
    if not scales or any(s <= 0 for s in scales):
        raise ConfigError("scales must be non-empty and positive", module="patchwork")
    if any(b >= a for a, b in zip(scales, scales[1:])):
        raise ConfigError(f"scales must be strictly decreasing, got {scales}", module="patchwork")
    c, h, w = image.shape
    levels = []
    for s in scales:
        if square:
            lh = lw = int(round(max(h, w) * s))
        else:
            lh, lw = int(round(h * s * aspect)), int(round(w * s))
        if lh < 1 or lw < 1:
            if allow_subcrop == "skip":
                warnings.append(f"scale {s:.4g} gives a degenerate {lh}x{lw} level")
                continue
            raise DimensionError(f"scale {s} gives a level smaller than 1 px", module="patchwork")
        if min_size is not None and (lh < min_size or lw < min_size):
            if allow_subcrop == "skip":
                warnings.append(f"scale {s:.4g} level {lh}x{lw} is below the {min_size}px crop")
                continue
            if not allow_subcrop:
                raise DimensionError(f"level {lh}x{lw} at scale {s} is smaller than the "
                                     f"{min_size}px crop", module="patchwork", code="subcrop")
        levels.append(Level(s, resize_bilinear(image, lh, lw), aspect))
    return Pyramid(levels, (h, w), image_id, warnings)


# ------------------------------------------------------------------ packing

@dataclass
class Placement:
    level: int
    x: int
    y: int
    w: int
    h: int

    def contains(self, x, y, w=1, h=1):
        return self.x <= x and x + w <= self.x + self.w and self.y <= y and y + h <= self.y + self.h


def shelf_layout(sizes, width, gutter):
    """Next-fit shelf packing of (h, w) sizes, taller first, within ``width``.

    Returns (placements as (index, x, y), bounding width, bounding height) or
    None when some item is wider than the shelf.
    """
    order = sorted(range(len(sizes)), key=lambda i: (-sizes[i][0], i))
    x = y = gutter
    shelf_h = 0
    used_w = 0
    out = []
    for i in order:
        h, w = sizes[i]
        if gutter + w + gutter > width:
            return None
        if x + w + gutter > width:
            y += shelf_h + gutter
            x, shelf_h = gutter, 0
        out.append((i, x, y))
        x += w + gutter
        shelf_h = max(shelf_h, h)
        used_w = max(used_w, x)
    return out, used_w, y + shelf_h + gutter


def _round_up(v, m):
    return -(-v // m) * m


def plan_layout(sizes, gutter=16, stride=1, max_size=None):
    """Pick the shelf width giving the smallest longer canvas side (ties: area, narrower)."""
    widest = max(w for _, w in sizes)
    total = sum(w for _, w in sizes) + gutter * (len(sizes) + 1)
    best = None
    for width in range(widest + 2 * gutter, total + 1):
        res = shelf_layout(sizes, width, gutter)
        if res is None:
            continue
        slots, bw, bh = res
        cw, ch = _round_up(bw, stride), _round_up(bh, stride)
        key = (max(cw, ch), cw * ch, cw)
        if max_size is not None and (ch > max_size[0] or cw > max_size[1]):
            continue
        if best is None or key < best[0]:
            best = (key, slots, ch, cw)
    if best is None:
        need = plan_layout(sizes, gutter, stride)
        raise PackingError(f"levels do not fit a {max_size[0]}x{max_size[1]} canvas; minimal "
                           f"shelf canvas is {need[1]}x{need[2]}", required=(need[1], need[2]))
    _, slots, ch, cw = best
    return slots, ch, cw


@dataclass
class Patchwork:
    canvas: np.ndarray
    placements: list
    level_map: np.ndarray
    gutter: int
    pyramid: Pyramid = None
    fill: float = 0.0
    scales: list = field(default_factory=list)

    @property
    def shape(self):
        return self.canvas.shape[1:]

    def manifest(self):
        """One line per placement: ``level=<i> scale=<s> x=<x'> y=<y'> w=<w> h=<h>``."""
        return "".join(f"level={p.level} scale={self.scales[p.level]:.6g} x={p.x} y={p.y} "
                       f"w={p.w} h={p.h}\n" for p in self.placements)

    def placement_of(self, level):
        for p in self.placements:
            if p.level == level:
                return p
        raise RangeError(f"no placement for level {level}", module="patchwork")

    def level_index(self, scale):
        for i, s in enumerate(self.scales):
            if np.isclose(s, scale, rtol=1e-12, atol=0):
                return i
        raise RangeError(f"no level with scale {scale}", module="patchwork")


def pack_patchwork(pyramid, gutter=16, stride=1, fill=0.0, max_size=None):
    """Deterministic shelf packing of a pyramid into one canvas.

    Levels are sorted by decreasing height and placed left to right on
    shelves, with ``gutter`` pixels around every level. Canvas sides are
    rounded up to a multiple of ``stride``.
    """
    if gutter < 0:
        raise ConfigError("gutter must be >= 0", module="patchwork")
    sizes = [lv.shape for lv in pyramid.levels]
    slots, ch, cw = plan_layout(sizes, gutter, stride, max_size)
    c = pyramid.levels[0].image.shape[0]
    dtype = pyramid.levels[0].image.dtype
    canvas = np.full((c, ch, cw), fill, dtype=dtype)
    level_map = np.full((ch, cw), -1, dtype=np.int32)
    placements = []
    for i, x, y in sorted(slots):
        lh, lw = sizes[i]
        canvas[:, y:y + lh, x:x + lw] = pyramid.levels[i].image
        level_map[y:y + lh, x:x + lw] = i
        placements.append(Placement(i, x, y, lw, lh))
    return Patchwork(canvas, placements, level_map, gutter, pyramid, fill,
                     [lv.scale for lv in pyramid.levels])


def map_canvas_to_image(pw, x, y):
    """Canvas pixel -> (level x, level y, level scale); SENTINEL on gutters."""
    h, w = pw.shape
    if not (0 <= x < w and 0 <= y < h):
        raise RangeError(f"({x}, {y}) outside {w}x{h} canvas", module="patchwork")
    lev = int(pw.level_map[y, x])
    if lev < 0:
        return SENTINEL
    p = pw.placement_of(lev)
    return x - p.x, y - p.y, pw.scales[lev]


def map_image_to_canvas(pw, x, y, s):
    """(level x, level y, scale) -> canvas pixel."""
    lev = pw.level_index(s)
    p = pw.placement_of(lev)
    if not (0 <= x < p.w and 0 <= y < p.h):
        raise RangeError(f"({x}, {y}) outside level {lev} ({p.w}x{p.h})", module="patchwork")
    return x + p.x, y + p.y


def canvas_point_to_image(pw, x, y):
    """Continuous canvas point -> source-image point, via the level under it."""
    xi, yi = int(np.floor(x)), int(np.floor(y))
    h, w = pw.shape
    lev = int(pw.level_map[min(max(yi, 0), h - 1), min(max(xi, 0), w - 1)])
    if lev < 0:
        return SENTINEL
    p = pw.placement_of(lev)
    fy, fx = pw.pyramid.factors(lev)
    return (x - p.x) / fx, (y - p.y) / fy, lev


# ----------------------------------------------------- fully convolutional

def convolutionalize_fc(net):
    """Copy ``net`` with its FC layers turned into convolutions.

    The first FC becomes a kernel spanning its pre-flatten extent; later FCs
    become 1x1 convolutions. On a crop-sized input the copy computes exactly
    the same scores.
    """
    layers = []
    seen_fc = False
    for i, layer in enumerate(net.layers):
        if isinstance(layer, L.FullyConnected):
            w = layer.params["weights"]
            if len(layer.in_shape) == 3:
                c, h, ww = layer.in_shape
            elif seen_fc:
                c, h, ww = layer.in_shape[0], 1, 1
            else:
                raise EpinetError(f"FC layer {i} has unknown pre-collapse geometry "
                                  f"{layer.in_shape}", module="patchwork", code="convert")
            seen_fc = True
            layers.append(L.Conv(c, layer.out_features, (h, ww),
                                 weights=w.reshape(layer.out_features, c, h, ww).copy(),
                                 bias=layer.params["bias"].copy()))
        else:
            layers.append(copy.deepcopy(layer))
    out = Network(layers, net.input_shape, net.num_classes, seed=net.seed,
                  name=f"{net.name}-conv")
    return out


def crop_grid(shape, window, stride):
    """Number of score positions a fully convolutional net emits on ``shape``."""
    h, w = shape
    return (h - window) // stride + 1, (w - window) // stride + 1


def valid_positions(pw, window, stride, score_shape=None):
    """Score positions whose window lies entirely inside one placement."""
    gh, gw = crop_grid(pw.shape, window, stride) if score_shape is None else score_shape
    ys = np.arange(gh) * stride
    xs = np.arange(gw) * stride
    mask = np.zeros((gh, gw), bool)
    for p in pw.placements:
        my = (ys >= p.y) & (ys + window <= p.y + p.h)
        mx = (xs >= p.x) & (xs + window <= p.x + p.w)
        mask |= my[:, None] & mx[None, :]
    return mask


# ------------------------------------------------------------------ MIL head

def mil_max_head(score_maps, mask=None):
    """Per-class global max over unmasked positions.

    ``score_maps`` is C x H x W (or N x C x H x W). Returns (max scores,
    argmax positions as (row, col)); ties go to the first row-major index.
    """
    single = score_maps.ndim == 3
    s = score_maps[None] if single else score_maps
    n, c, h, w = s.shape
    flat = s.reshape(n, c, h * w)
    if mask is not None:
        mask = np.asarray(mask, bool)
        if mask.shape != (h, w):
            raise DimensionError(f"mask {mask.shape} != score map {(h, w)}", module="patchwork")
        if not mask.any():
            raise EpinetError("every score position is masked", module="patchwork",
                              code="masked")
        flat = np.where(mask.reshape(1, 1, -1), flat, -np.inf)
    idx = flat.argmax(axis=2)
    best = np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0]
    pos = np.stack([idx // w, idx % w], axis=-1)
    return (best[0], pos[0]) if single else (best, pos)


def mil_max_backward(grad, positions, map_shape):
    """Route the gradient of the pooled scores to the winning positions only."""
    single = grad.ndim == 1
    g = grad[None] if single else grad
    pos = positions[None] if single else positions
    n, c = g.shape
    out = np.zeros((n, c) + tuple(map_shape), dtype=g.dtype)
    ni, ci = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
    out[ni, ci, pos[..., 0], pos[..., 1]] = g
    return out[0] if single else out


BAG_MODES = ("sum", "average", "mil")


def bag_loss(scores, label, mode):
    """Loss of a bag of K instance score vectors (K x classes) and its gradient.

    sum: sum_k xent(y, f_k); average: xent(y, mean_k f_k); mil: xent(y, max_k f_k)
    with the max taken per class before the softmax.
    """
    scores = np.asarray(scores)
    if scores.ndim != 2 or scores.shape[0] < 1:
        raise DimensionError("bag must be a non-empty K x classes array", module="patchwork",
                             code="empty_bag")
    k = scores.shape[0]
    if mode == "sum":
        loss, g = L.softmax_xent(scores, np.full(k, label))
        return loss * k, g * k
    if mode == "average":
        loss, g = L.softmax_xent(scores.mean(axis=0), label)
        return loss, np.broadcast_to(g / k, scores.shape).copy()
    if mode == "mil":
        idx = scores.argmax(axis=0)
        best = scores[idx, np.arange(scores.shape[1])]
        loss, g = L.softmax_xent(best, label)
        grad = np.zeros_like(scores)
        grad[idx, np.arange(scores.shape[1])] = g
        return loss, grad
    raise ConfigError(f"unknown bag loss mode {mode!r}", module="patchwork")


# -------------------------------------------------------------- localization

@dataclass
class BoxPrior:
    """Mean object box relative to a reference frame.

    ``relative="image"``: width/height are fractions of the image and the box
    is centered on the mapped argmax, then shifted to lie inside the image.
    ``relative="window"``: width/height/offsets are fractions of the winning
    window's footprint in image coordinates.
    """

    width: float = 1.0
    height: float = 1.0
    dx: float = 0.0
    dy: float = 0.0
    relative: str = "image"


def fit_box_prior(windows, boxes, relative="window"):
    """Average GT boxes expressed relative to their winning windows (x, y, w, h)."""
    windows = np.asarray(windows, float)
    boxes = np.asarray(boxes, float)
    if relative == "window":
        cx = (boxes[:, 0] + boxes[:, 2] / 2 - windows[:, 0] - windows[:, 2] / 2) / windows[:, 2]
        cy = (boxes[:, 1] + boxes[:, 3] / 2 - windows[:, 1] - windows[:, 3] / 2) / windows[:, 3]
        return BoxPrior(float(np.mean(boxes[:, 2] / windows[:, 2])),
                        float(np.mean(boxes[:, 3] / windows[:, 3])),
                        float(np.mean(cx)), float(np.mean(cy)), "window")
    raise ConfigError(f"cannot fit a {relative!r} prior from windows", module="patchwork")


def window_box(pw, position, window, stride):
    """Image-space (x, y, w, h) footprint of the window at a score position."""
    r, c = position
    y0, x0 = r * stride, c * stride
    lev = int(pw.level_map[y0, x0])
    if lev < 0:
        raise EpinetError(f"score position {position} starts in a gutter", module="patchwork",
                          code="sentinel")
    p = pw.placement_of(lev)
    fy, fx = pw.pyramid.factors(lev)
    return (x0 - p.x) / fx, (y0 - p.y) / fy, window / fx, window / fy


def localize(pw, position, box_prior, window, stride, label=None):
    """Box for the argmax score position, from a global or per-class prior."""
    prior = box_prior[label] if isinstance(box_prior, dict) else box_prior
    x, y, w, h = window_box(pw, position, window, stride)
    ih, iw = pw.pyramid.image_shape
    if prior.relative == "window":
        bw, bh = prior.width * w, prior.height * h
        cx, cy = x + w / 2 + prior.dx * w, y + h / 2 + prior.dy * h
        x0, y0 = max(0.0, cx - bw / 2), max(0.0, cy - bh / 2)
        x1, y1 = min(float(iw), cx + bw / 2), min(float(ih), cy + bh / 2)
        return x0, y0, x1 - x0, y1 - y0
    bw, bh = prior.width * iw, prior.height * ih
    cx, cy = x + w / 2, y + h / 2
    x0 = min(max(cx - bw / 2, 0.0), iw - bw)
    y0 = min(max(cy - bh / 2, 0.0), ih - bh)
    return x0, y0, bw, bh


# ----------------------------------------------------------- MIL training

class PatchworkScorer:
    """Fixed patchwork layout shared by same-sized images."""

    def __init__(self, conv_net, image_shape, scales, gutter=4, fill=0.0, square=False):
        self.net = conv_net
        self.scales = list(scales)
        self.gutter, self.fill, self.square = gutter, fill, square
        probe = np.zeros(image_shape, np.float32)
        self.layout = self.patchwork(probe)
        self.mask = None

    def patchwork(self, image):
        pyr = build_pyramid(image, self.scales, min_size=self.net.window, square=self.square)
        return pack_patchwork(pyr, self.gutter, self.net.stride, self.fill)

    def canvases(self, images):
        return np.stack([self.patchwork(im).canvas for im in images])

    def scores(self, canvases, train=False, step=0):
        maps = self.net.forward(canvases, train=train, step=step)
        if self.mask is None:
            self.mask = valid_positions(self.layout, self.net.window, self.net.stride,
                                        maps.shape[2:])
        return maps


def train_patchwork(conv_net, images, labels, config, scales, gutter=4, epochs=None,
                    mode="mil", callback=None):
    """Fine-tune a convolutionalized net on patchworks with a bag loss.

    Every valid window of an image's patchwork is one instance of its bag.
    """
    if mode not in BAG_MODES:
        raise ConfigError(f"unknown bag loss mode {mode!r}", module="patchwork")
    scorer = PatchworkScorer(conv_net, images.shape[1:], scales, gutter)
    canvases = scorer.canvases(images)
    exempt = conv_net.exempt_names(config.decay_exempt or ())
    state = conv_net.state.setdefault("trainer", {"step": 0, "epoch": 0, "history": []})
    rng = rng_stream(config.seed, "data")
    for _ in range(config.epochs if epochs is None else epochs):
        order = rng.permutation(len(images))
        total = 0.0
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            x = canvases[idx]
            flip = rng.random(len(idx)) < 0.5 if config.flip else np.zeros(len(idx), bool)
            x = np.where(flip[:, None, None, None], x[..., ::-1], x)
            maps = scorer.scores(np.ascontiguousarray(x), train=True, step=state["step"])
            mask = scorer.mask
            if config.flip:
                masks = np.where(flip[:, None, None], mask[None, :, ::-1], mask[None])
            else:
                masks = np.broadcast_to(mask, (len(idx),) + mask.shape)
            grad = np.zeros_like(maps)
            for j in range(len(idx)):
                inst = maps[j][:, masks[j]].T
                loss, g = bag_loss(inst, labels[idx[j]], mode)
                grad[j][:, masks[j]] = g.T / len(idx)
                total += loss
            conv_net.backward(grad)
            sgd_step(conv_net.params(), conv_net.grads(), conv_net.velocity, config,
                     exempt=exempt)
            state["step"] += 1
        state["epoch"] += 1
        rec = dict(epoch=state["epoch"], loss=total / len(images))
        state["history"].append(rec)
        if callback is not None:
            callback(rec)
    return scorer


def predict_patchwork(scorer, images, batch=32):
    """Class probabilities from the MIL max over every valid window."""
    out = []
    for i in range(0, len(images), batch):
        maps = scorer.scores(scorer.canvases(images[i:i + batch]))
        best, _ = mil_max_head(maps, scorer.mask)
        out.append(L.softmax(best.astype(np.float64)))
    return np.concatenate(out)
