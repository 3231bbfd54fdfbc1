"""Sliding-window detection over scale/aspect patchworks.

Aspect convention: alpha = box width / box height. An aspect-alpha patchwork
scales the image vertically by alpha, so an alpha-shaped region becomes square
and the square detector window maps back to an alpha-shaped image box.
"""

import copy
import logging
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import layers as L
from .errors import ConfigError, EpinetError
from .net import Network, rng_stream, sgd_step
from .patchwork import build_pyramid, convolutionalize_fc, pack_patchwork, valid_positions

log = logging.getLogger(__name__)

NMS_THRESHOLD = 0.3


@dataclass
class SearchGrid:
    scales: tuple = tuple(np.geomspace(2.0, 1 / 6, 11))
    aspects: tuple = tuple(np.geomspace(1 / 3, 3, 5))
    stride: int = 8

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)
        self.aspects = tuple(float(a) for a in self.aspects)
        if any(b >= a for a, b in zip(self.scales, self.scales[1:])):
            raise ConfigError("grid scales must be strictly decreasing", module="detect")
        logs = np.log(sorted(self.aspects))
        if not np.allclose(logs, -logs[::-1], atol=1e-9):
            raise ConfigError("grid aspects must be symmetric around 1 in log space",
                              module="detect")

    def square(self):
        return SearchGrid(self.scales, (1.0,), self.stride)


@dataclass
class DetectionBox:
    cls: int
    score: float
    x: float
    y: float
    w: float
    h: float
    source: dict = field(default_factory=dict)

    @property
    def rect(self):
        return (self.x, self.y, self.w, self.h)


@dataclass
class GroundTruth:
    image_id: str
    cls: int
    x: int
    y: int
    w: int
    h: int

    @property
    def rect(self):
        return (self.x, self.y, self.w, self.h)


# ------------------------------------------------------------- geometry

def iou(a, b):
    """Exact intersection-over-union of (x, y, w, h) rectangles, as a Fraction."""
    ax, ay, aw, ah = (Fraction(v) for v in a)
    bx, by, bw, bh = (Fraction(v) for v in b)
    ix = min(ax + aw, bx + bw) - max(ax, bx)
    iy = min(ay + ah, by + bh) - max(ay, by)
    if ix <= 0 or iy <= 0:
        return Fraction(0)
    inter = ix * iy
    return inter / (aw * ah + bw * bh - inter)


def iou_matrix(boxes, ref):
    """Float IoU of every row of ``boxes`` (N x 4) against one rectangle."""
    b = np.asarray(boxes, float).reshape(-1, 4)
    x0 = np.maximum(b[:, 0], ref[0])
    y0 = np.maximum(b[:, 1], ref[1])
    x1 = np.minimum(b[:, 0] + b[:, 2], ref[0] + ref[2])
    y1 = np.minimum(b[:, 1] + b[:, 3], ref[1] + ref[3])
    inter = np.clip(x1 - x0, 0, None) * np.clip(y1 - y0, 0, None)
    return inter / (b[:, 2] * b[:, 3] + ref[2] * ref[3] - inter)


_EPS = 1e-9


def exact_threshold(t):
    """Threshold as the decimal it was written as: 0.3 means 3/10, not the nearest double."""
    return Fraction(repr(t)) if isinstance(t, float) else Fraction(t)


def _compare(values, boxes, ref, t, op):
    """Exact ``iou op t`` per row; floats decide unless within rounding of t."""
    out = op(values, t)
    near = np.flatnonzero(np.abs(values - t) < _EPS)
    tf = exact_threshold(t)
    for i in near:
        out[i] = op(iou(boxes[i], ref), tf)
    return out


def clip_box(box, shape):
    """Intersect (x, y, w, h) with an H x W image; None when nothing is left."""
    h, w = shape
    x0, y0 = max(box[0], 0), max(box[1], 0)
    x1, y1 = min(box[0] + box[2], w), min(box[1] + box[3], h)
    if x1 <= x0 or y1 <= y0:
        return None
    return (x0, y0, x1 - x0, y1 - y0)


def reshape_box(box, aspect):
    """Area-preserving reshape of a box to width/height = aspect about its center."""
    x, y, w, h = box
    area = w * h
    nw, nh = float(np.sqrt(area * aspect)), float(np.sqrt(area / aspect))
    return (x + w / 2 - nw / 2, y + h / 2 - nh / 2, nw, nh)


def oracle_aspect(box, gt_boxes, aspects=SearchGrid.aspects):
    """Grid aspect whose reshaped box best overlaps any GT (analysis only)."""
    if not gt_boxes:
        return 1.0
    best, best_a = Fraction(-1), 1.0
    for a in aspects:
        cand = reshape_box(box, a)
        score = max(iou(cand, g) for g in gt_boxes)
        if score > best:
            best, best_a = score, a
    return best_a


# ------------------------------------------------------------- patchworks

def build_aspect_patchworks(image, grid, window, stride=1, gutter=16, fill=0.0):
    """One patchwork per grid aspect; levels too small for the window are skipped.

    Returns (list of (aspect, Patchwork), warning strings).
    """
    if image.size == 0:
        raise EpinetError("empty image", module="detect", code="empty")
    out, warnings = [], []
    for a in grid.aspects:
        pyr = build_pyramid(image, grid.scales, aspect=a, min_size=window,
                            allow_subcrop="skip")
        warnings.extend(f"aspect {a:.3f}: {w}" for w in pyr.warnings)
        if not pyr.levels:
            warnings.append(f"aspect {a:.3f}: no level fits the {window}px window")
            continue
        out.append((a, pack_patchwork(pyr, gutter, stride, fill)))
    for w in warnings:
        log.info("skip: %s", w)
    return out, warnings


@dataclass
class WindowSet:
    """Every scored window of a patchwork, in canvas and image coordinates."""

    boxes: np.ndarray
    positions: np.ndarray
    levels: np.ndarray
    aspect: float
    score_shape: tuple


def patchwork_windows(pw, aspect, window, stride):
    h, w = pw.shape
    gh, gw = (h - window) // stride + 1, (w - window) // stride + 1
    mask = valid_positions(pw, window, stride, (gh, gw))
    rows, cols = np.nonzero(mask)
    y0, x0 = rows * stride, cols * stride
    lev = pw.level_map[y0, x0]
    boxes = np.empty((len(rows), 4))
    for i, p in enumerate(pw.placements):
        sel = lev == p.level
        fy, fx = pw.pyramid.factors(p.level)
        boxes[sel, 0] = (x0[sel] - p.x) / fx
        boxes[sel, 1] = (y0[sel] - p.y) / fy
        boxes[sel, 2] = window / fx
        boxes[sel, 3] = window / fy
    return WindowSet(boxes, np.stack([rows, cols], 1), lev, aspect, (gh, gw))


def canvas_crops(pw, positions, window, stride):
    c = pw.canvas
    return np.stack([c[:, r * stride:r * stride + window, q * stride:q * stride + window]
                     for r, q in positions]) if len(positions) else \
        np.empty((0, c.shape[0], window, window), c.dtype)


# ------------------------------------------------------------- conversion

def atrous_convert(net, stages=2):
    """Dense-scoring copy of a net: drop the last ``stages`` subsamplings.

    Every layer after a removed stride reads its input with dilation multiplied
    by the accumulated removed stride. FC layers are convolutionalized first.
    """
    if not net.convolutional:
        net = convolutionalize_fc(net)
    layers = [copy.deepcopy(l) for l in net.layers]
    strided = [i for i, l in enumerate(layers) if l.has_stride and l.stride > 1]
    if len(strided) < stages:
        raise EpinetError(f"net has {len(strided)} stride-bearing layers, need {stages}",
                          module="detect", code="convert")
    removed = set(strided[-stages:])
    factor = 1
    for i, layer in enumerate(layers):
        if factor > 1 and layer.has_stride and layer.stride > 1 and i not in removed:
            raise EpinetError(f"layer {i} keeps a stride after a removed one", module="detect",
                              code="convert")
        if isinstance(layer, L.MaxPoolConv):
            layer.dilation *= factor
            if i in removed:
                layer.pool_dilation *= layer.input_stride * factor
                gained = layer.input_stride * layer.pool_stride
                layer.input_stride, layer.pool_stride = 1, 1
                factor *= gained
            else:
                layer.pool_dilation *= factor
        elif isinstance(layer, (L.EpitomicConv, L.Conv)):
            layer.dilation *= factor
            if i in removed:
                gained = layer.stride
                layer.stride = 1
                factor *= gained
    return Network(layers, net.input_shape, net.num_classes, seed=net.seed,
                   name=f"{net.name}-atrous")


def subsample_fc(weights, target=4):
    """Keep an evenly spaced target x target subgrid of kernel taps (corners included).

    Returns (weights, step): the kept taps rescaled by source^2 / target^2 and
    the tap spacing, to be used as the layer's dilation multiplier.
    """
    k = weights.shape[-1]
    if weights.shape[-2] != k:
        raise ConfigError("subsample_fc expects a square kernel", module="detect")
    if target > k:
        raise ConfigError(f"target {target} exceeds kernel size {k}", module="detect")
    if target == k:
        return weights.copy(), 1
    if target == 1:
        idx, step = [k // 2], 1
    else:
        if (k - 1) % (target - 1):
            raise ConfigError(f"{target} taps cannot evenly span a {k}-tap kernel",
                              module="detect")
        step = (k - 1) // (target - 1)
        idx = list(range(0, k, step))
    kept = weights[..., idx, :][..., idx]
    return kept * weights.dtype.type(k * k / (target * target)), step


def subsample_fc_layer(layer, target=4):
    w, step = subsample_fc(layer.params["weights"], target)
    out = L.Conv(layer.in_channels, layer.out_channels, (target, target), layer.conv_stride,
                 layer.dilation * step, weights=w, bias=layer.params["bias"].copy())
    return out


# ------------------------------------------------------------- NMS / AP

def nms(boxes, threshold=NMS_THRESHOLD):
    """Greedy suppression; order is (score desc, x, y, w, h, class) so input order is irrelevant."""
    order = sorted(boxes, key=lambda b: (-b.score, b.x, b.y, b.w, b.h, b.cls))
    if not order:
        return []
    rects = np.array([b.rect for b in order], float)
    alive = np.ones(len(order), bool)
    keep = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        keep.append(order[i])
        rest = np.flatnonzero(alive[i + 1:]) + i + 1
        if len(rest):
            vals = iou_matrix(rects[rest], rects[i])
            over = _compare(vals, rects[rest], rects[i], threshold, np.greater)
            alive[rest[over]] = False
    return keep


def average_precision(detections, ground_truths, threshold=0.5):
    """Every-point VOC-style AP per class and their mean.

    ``detections``: (image_id, cls, score, (x, y, w, h)); ``ground_truths``:
    GroundTruth records. Classes without GT are excluded from the mean.
    Returns (dict class -> AP, mAP, warnings).
    """
    t = exact_threshold(threshold)
    gts = {}
    for g in ground_truths:
        gts.setdefault(g.cls, {}).setdefault(g.image_id, []).append(g.rect)
    classes = sorted(set(gts) | {d[1] for d in detections})
    aps, warnings = {}, []
    for c in classes:
        npos = sum(len(v) for v in gts.get(c, {}).values())
        if npos == 0:
            warnings.append(f"class {c} has no ground truth; AP undefined")
            continue
        dets = sorted((d for d in detections if d[1] == c),
                      key=lambda d: (-d[2], str(d[0]), tuple(d[3])))
        used = {k: [False] * len(v) for k, v in gts[c].items()}
        tp = []
        for image_id, _, _, rect in dets:
            best, best_j = None, -1
            for j, g in enumerate(gts[c].get(image_id, [])):
                if used[image_id][j]:
                    continue
                o = iou(rect, g)
                if o >= t and (best is None or o > best):
                    best, best_j = o, j
            if best_j >= 0:
                used[image_id][best_j] = True
            tp.append(best_j >= 0)
        aps[c] = float(_every_point_ap(tp, npos))
    for w in warnings:
        log.warning(w)
    m = float(np.mean(list(aps.values()))) if aps else float("nan")
    return aps, m, warnings


def _every_point_ap(tp, npos):
    hits = 0
    prec, rec = [], []
    for i, ok in enumerate(tp, 1):
        hits += ok
        prec.append(Fraction(hits, i))
        rec.append(Fraction(hits, npos))
    for i in range(len(prec) - 2, -1, -1):
        prec[i] = max(prec[i], prec[i + 1])
    ap, last = Fraction(0), Fraction(0)
    for p, r in zip(prec, rec):
        if r > last:
            ap += (r - last) * p
            last = r
    return ap


# ------------------------------------------------------------- mining

TIERS = (0.7, 0.6, 0.5)


@dataclass
class MiningResult:
    positives: list = field(default_factory=list)    # (gt index, window index, tier)
    negatives: list = field(default_factory=list)    # (gt index, window index)
    background: list = field(default_factory=list)   # window index
    unmatched: list = field(default_factory=list)    # gt index


def mine_training_samples(gt_boxes, windows, rng, n_pos=30, n_neg=200, tiers=TIERS,
                          neg_range=(0.2, 0.5), background_ratio=1.0):
    """Sample positive and poorly localized windows per GT box (x, y, w, h).

    Positives: ``n_pos`` windows above the first tier that has at least that
    many, else whatever the last tier offers. Localization negatives: up to
    ``n_neg`` windows with IoU strictly inside ``neg_range``. Background:
    windows below ``neg_range[0]`` against every GT, ``background_ratio``
    times the number of localization negatives.
    """
    windows = np.asarray(windows, float).reshape(-1, 4)
    res = MiningResult()
    clear = np.ones(len(windows), bool)
    for gi, g in enumerate(gt_boxes):
        vals = iou_matrix(windows, g)
        clear &= _compare(vals, windows, g, neg_range[0], np.less)
        chosen = None
        for t in tiers:
            idx = np.flatnonzero(_compare(vals, windows, g, t, np.greater))
            chosen = (t, idx)
            if len(idx) >= n_pos:
                break
        t, idx = chosen
        if len(idx) == 0:
            res.unmatched.append(gi)
            log.info("GT %d unmatched: no window above IoU %.1f", gi, tiers[-1])
            continue
        pick = rng.choice(idx, size=min(n_pos, len(idx)), replace=False)
        res.positives.extend((gi, int(w), t) for w in np.sort(pick))
        lo = _compare(vals, windows, g, neg_range[0], np.greater)
        hi = _compare(vals, windows, g, neg_range[1], np.less)
        nidx = np.flatnonzero(lo & hi)
        if len(nidx):
            pick = rng.choice(nidx, size=min(n_neg, len(nidx)), replace=False)
            res.negatives.extend((gi, int(w)) for w in np.sort(pick))
    bidx = np.flatnonzero(clear)
    n_bg = int(round(background_ratio * len(res.negatives))) if gt_boxes else \
        int(round(background_ratio * n_neg))
    if len(bidx) and n_bg:
        pick = rng.choice(bidx, size=min(n_bg, len(bidx)), replace=False)
        res.background = [int(w) for w in np.sort(pick)]
    return res


# ------------------------------------------------------------- detector

def _image_floats(image, mean, scale):
    return ((image.astype(np.float32) - mean[:, None, None]) * scale).astype(np.float32)


@dataclass
class DetectorData:
    crops: np.ndarray
    labels: np.ndarray
    unmatched: int = 0


def collect_detector_samples(images, boxes, net_window, net_stride, grid, mean, scale,
                             seed=0, gutter=4, n_pos=30, n_neg=200):
    """Mine windows on every training image and cut the matching canvas crops."""
    rng = rng_stream(seed, "mining")
    crops, labels, unmatched = [], [], 0
    for img, bxs in zip(images, boxes):
        x = _image_floats(img, mean, scale)
        pws, _ = build_aspect_patchworks(x, grid, net_window, net_stride, gutter, 0.0)
        sets = [(pw, patchwork_windows(pw, a, net_window, net_stride)) for a, pw in pws]
        allbox = np.concatenate([ws.boxes for _, ws in sets])
        offs = np.cumsum([0] + [len(ws.boxes) for _, ws in sets])
        gts = [b[1:] for b in bxs]
        res = mine_training_samples(gts, allbox, rng, n_pos, n_neg)
        unmatched += len(res.unmatched)
        picks = [(w, 1) for _, w, _ in res.positives] + [(w, 0) for _, w in res.negatives] + \
            [(w, 0) for w in res.background]
        for w, lab in picks:
            k = int(np.searchsorted(offs, w, side="right") - 1)
            pw, ws = sets[k]
            crops.append(canvas_crops(pw, [ws.positions[w - offs[k]]], net_window,
                                      net_stride)[0])
            labels.append(lab)
    return DetectorData(np.stack(crops), np.array(labels, np.int64), unmatched)


def logistic_loss(scores, labels, weights=None):
    """Mean binary logistic loss of one-column scores and its gradient."""
    s = scores.reshape(-1).astype(np.float64)
    y = np.where(labels > 0, 1.0, -1.0)
    wts = np.ones_like(s) if weights is None else weights
    z = -y * s
    loss = np.sum(wts * np.logaddexp(0, z)) / len(s)
    g = -y * wts / (1 + np.exp(-z)) / len(s)
    return loss, g.reshape(scores.shape).astype(scores.dtype)


def train_detector(net, data, config, epochs=None, neg_per_pos=3, callback=None):
    """SGD on mined crops; every epoch sees all positives and a fresh negative draw."""
    rng = rng_stream(config.seed, "data")
    pos = np.flatnonzero(data.labels == 1)
    neg = np.flatnonzero(data.labels == 0)
    exempt = net.exempt_names(config.decay_exempt or ())
    state = net.state.setdefault("trainer", {"step": 0, "epoch": 0, "history": []})
    for _ in range(config.epochs if epochs is None else epochs):
        k = min(len(neg), neg_per_pos * len(pos))
        idx = np.concatenate([pos, rng.choice(neg, size=k, replace=False)])
        idx = rng.permutation(idx)
        total = 0.0
        for i in range(0, len(idx), config.batch_size):
            b = idx[i:i + config.batch_size]
            x = data.crops[b]
            if config.flip:
                flip = rng.random(len(b)) < 0.5
                x = np.ascontiguousarray(np.where(flip[:, None, None, None], x[..., ::-1], x))
            scores = net.forward(x, train=True, step=state["step"])
            loss, g = logistic_loss(scores, data.labels[b])
            net.backward(g)
            sgd_step(net.params(), net.grads(), net.velocity, config, exempt=exempt)
            state["step"] += 1
            total += loss * len(b)
        state["epoch"] += 1
        rec = dict(epoch=state["epoch"], loss=total / len(idx))
        state["history"].append(rec)
        if callback is not None:
            callback(rec)
    return net


def detect_image(conv_net, image, grid, window, mean, scale, gutter=4, top_k=300,
                 threshold=NMS_THRESHOLD, cls=0, x_float=None):
    """Score every (scale, aspect, position) window, then NMS. Boxes are clipped to the image."""
    x = _image_floats(image, mean, scale) if x_float is None else x_float
    stride = conv_net.stride
    pws, _ = build_aspect_patchworks(x, grid, window, stride, gutter, 0.0)
    cands = []
    for a, pw in pws:
        maps = conv_net.forward(pw.canvas[None])[0, 0]
        ws = patchwork_windows(pw, a, window, stride)
        sc = maps[ws.positions[:, 0], ws.positions[:, 1]].astype(np.float64)
        for j in np.argsort(-sc, kind="stable")[:top_k]:
            rect = clip_box(ws.boxes[j], image.shape[1:])
            if rect is None:
                continue
            cands.append(DetectionBox(cls, float(sc[j]), *rect,
                                      source=dict(scale=pw.scales[ws.levels[j]], aspect=a,
                                                  position=tuple(int(v) for v in
                                                                 ws.positions[j]))))
    cands.sort(key=lambda b: -b.score)
    return nms(cands[:top_k], threshold)


def format_detections(image_id, boxes):
    """``<image-id> <class-id> <x> <y> <w> <h> <score>`` lines."""
    lines = []
    for b in boxes:
        x0, y0 = int(round(b.x)), int(round(b.y))
        x1, y1 = int(round(b.x + b.w)), int(round(b.y + b.h))
        lines.append(f"{image_id} {b.cls} {x0} {y0} {max(x1 - x0, 1)} {max(y1 - y0, 1)} "
                     f"{b.score:.6g}\n")
    return "".join(lines)


def detection_net(window=16, channels=3, widths=(16, 32, 64), seed=0, kind="epitomic"):
    """Small two-stage (stride 4) window classifier with one logistic output."""
    from .net import build_network
    c1, c2, f = widths
    if kind == "epitomic":
        s1 = ("epitomic", dict(in_channels=channels, out_channels=c1, filter_size=3,
                               epitome_size=4, input_stride=2))
        s2 = ("epitomic", dict(in_channels=c1, out_channels=c2, filter_size=3,
                               epitome_size=4, input_stride=2))
    else:
        s1 = ("conv", dict(in_channels=channels, out_channels=c1, kernel=3, stride=2))
        s2 = ("conv", dict(in_channels=c1, out_channels=c2, kernel=3, stride=2))
    e1 = (window - 3) // 2 + 1
    e2 = (e1 - 3) // 2 + 1
    blocks = [s1, ("relu", dict(channels=c1)), s2, ("relu", dict(channels=c2)),
              ("fc", dict(in_shape=(c2, e2, e2), out_features=f)), ("relu", dict(channels=f)),
              ("fc", dict(in_shape=(f,), out_features=1))]
    return build_network(blocks, (channels, window, window), 1, seed=seed, name="detector")
