"""Synthetic datasets and PPM/PGM image I/O."""

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EpinetError

SHAPES = ("square", "disk", "ring", "plus", "cross", "triangle", "hstripes", "vstripes",
          "checker", "frame")


# -------------------------------------------------------------------- netpbm

def write_pnm(path, image):
    """Write H x W (P5) or H x W x 3 (P6) uint8 data."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        raise EpinetError(f"PNM data must be uint8, got {image.dtype}", module="data",
                          code="format")
    if image.ndim == 2:
        magic = b"P5"
    elif image.ndim == 3 and image.shape[2] == 3:
        magic = b"P6"
    else:
        raise EpinetError(f"cannot write shape {image.shape} as PNM", module="data",
                          code="format")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + f"\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(image).tobytes())


def _tokens(buf, pos, count):
    out = []
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise EpinetError("truncated PNM header", module="data", code="format")
        out.append(buf[start:pos])
    return out, pos + 1


def read_pnm(path):
    """Read a binary PGM (P5) or PPM (P6) file with maxval 255."""
    with open(path, "rb") as f:
        buf = f.read()
    (magic, w, h, maxval), pos = _tokens(buf, 0, 4)
    if magic not in (b"P5", b"P6") or int(maxval) != 255:
        raise EpinetError(f"{path}: only 8-bit P5/P6 supported", module="data", code="format")
    w, h = int(w), int(h)
    ch = 3 if magic == b"P6" else 1
    data = np.frombuffer(buf[pos:pos + w * h * ch], np.uint8)
    if data.size != w * h * ch:
        raise EpinetError(f"{path}: truncated pixel data", module="data", code="format")
    return data.reshape((h, w, 3) if ch == 3 else (h, w)).copy()


# ------------------------------------------------------------------ datasets

@dataclass
class Dataset:
    task: str
    images: np.ndarray            # N x C x H x W uint8
    labels: np.ndarray = None     # classification labels
    boxes: list = None            # detection: per image list of (class, x, y, w, h)
    split: np.ndarray = None      # "train" | "val" | "test" per image
    num_classes: int = 1
    seed: int = None
    meta: dict = field(default_factory=dict)

    def subset(self, name):
        idx = np.flatnonzero(self.split == name)
        return Dataset(self.task, self.images[idx],
                       None if self.labels is None else self.labels[idx],
                       None if self.boxes is None else [self.boxes[i] for i in idx],
                       self.split[idx], self.num_classes, self.seed, dict(self.meta))

    def mean(self):
        return self.images.reshape(len(self.images), self.images.shape[1], -1).mean(
            axis=(0, 2)).astype(np.float32)

    def floats(self, mean=None, scale=1.0):
        """Mean-subtracted float32 pixels."""
        mean = self.mean() if mean is None else np.asarray(mean, np.float32)
        x = self.images.astype(np.float32) - mean.reshape(1, -1, 1, 1)
        return x * np.float32(scale)

    def __len__(self):
        return len(self.images)


def _shape_mask(kind, dy, dx, r, period):
    ay, ax = np.abs(dy), np.abs(dx)
    box = np.maximum(ay, ax) <= r
    if kind == "square":
        return box
    if kind == "disk":
        return dy * dy + dx * dx <= r * r
    if kind == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if kind == "plus":
        t = 0.3 * r
        return ((ax <= t) & (ay <= r)) | ((ay <= t) & (ax <= r))
    if kind == "cross":
        t = 0.3 * r
        return box & ((np.abs(dx - dy) <= t) | (np.abs(dx + dy) <= t))
    if kind == "triangle":
        return (dy <= r) & (dy >= -r) & (ax <= (dy + r) / 2)
    if kind == "hstripes":
        return box & (np.floor((dy + r) / period) % 2 == 0)
    if kind == "vstripes":
        return box & (np.floor((dx + r) / period) % 2 == 0)
    if kind == "checker":
        return box & ((np.floor((dy + r) / period) + np.floor((dx + r) / period)) % 2 == 0)
    if kind == "frame":
        return box & (np.maximum(ay, ax) >= 0.55 * r)
    raise ConfigError(f"unknown shape {kind!r}", module="data")


def _background(rng, size, noise):
    base = rng.uniform(0.2, 0.4)
    return base + rng.normal(0.0, noise, (3, size[0], size[1]))


def render_shape(canvas, kind, cy, cx, r, color):
    _, h, w = canvas.shape
    yy, xx = np.mgrid[0:h, 0:w]
    period = max(2.0, r / 2.0)
    mask = _shape_mask(kind, yy + 0.5 - cy, xx + 0.5 - cx, r, period)
    canvas[:, mask] = np.asarray(color)[:, None]
    return mask


def _to_u8(img):
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def generate_classification(n, num_classes=10, image_size=32, radius=(5.0, 11.0), noise=0.08,
                            seed=0, splits=None):
    """One shape per image at a random position and scale on a noisy background.

    ``boxes`` holds the pixel extent of each rendered shape.

    Labels cycle through the classes so counts are balanced; order is shuffled.
    """
    if num_classes > len(SHAPES):
        raise ConfigError(f"at most {len(SHAPES)} shape classes", module="data")
    if 2 * radius[1] > image_size:
        raise ConfigError(f"shapes of radius {radius[1]} do not fit in {image_size}px images",
                          module="data", code="too_large")
    rng = np.random.default_rng([seed, 101])
    labels = rng.permutation(np.arange(n) % num_classes)
    images = np.empty((n, 3, image_size, image_size), np.uint8)
    boxes = []
    for i, lab in enumerate(labels):
        img = _background(rng, (image_size, image_size), noise)
        r = rng.uniform(*radius)
        cy, cx = rng.uniform(r, image_size - r, 2)
        color = rng.uniform(0.6, 1.0, 3)
        mask = render_shape(img, SHAPES[lab], cy, cx, r, color)
        ys, xs = np.nonzero(mask)
        if ys.size:
            boxes.append([(int(lab), int(xs.min()), int(ys.min()), int(xs.max() - xs.min() + 1),
                           int(ys.max() - ys.min() + 1))])
        else:
            boxes.append([])
        images[i] = _to_u8(img)
    split = _split_tags(n, splits)
    return Dataset("classify", images, labels.astype(np.int64), boxes, split, num_classes, seed,
                   dict(image_size=image_size, radius=list(radius)))


def _split_tags(n, splits):
    splits = splits or {"train": n}
    tags = np.empty(n, dtype=object)
    start = 0
    for name, count in splits.items():
        tags[start:start + count] = name
        start += count
    if start != n:
        raise ConfigError(f"split sizes sum to {start}, expected {n}", module="data")
    return tags.astype(str)


def _rect_iou(a, b):
    ix = max(0.0, min(a[0] + a[2], b[0] + b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[1] + a[3], b[1] + b[3]) - max(a[1], b[1]))
    inter = ix * iy
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def generate_detection(n, image_size=64, aspects=None, side=(14.0, 30.0), jitter=0.1,
                       max_objects=3, noise=0.08, seed=0, splits=None, max_overlap=0.1):
    """Images with 1..max_objects filled rectangles of grid aspect ratio (+/- jitter).

    Aspect is width / height. GT boxes are integer pixel rectangles inside the image.
    """
    if aspects is None:
        aspects = np.geomspace(1 / 3, 3, 5)
    rng = np.random.default_rng([seed, 202])
    images = np.empty((n, 3, image_size, image_size), np.uint8)
    all_boxes = []
    for i in range(n):
        img = _background(rng, (image_size, image_size), noise)
        boxes = []
        target = int(rng.integers(1, max_objects + 1))
        tries = 0
        while len(boxes) < target and tries < 100:
            tries += 1
            a = float(rng.choice(aspects)) * float(np.exp(rng.uniform(-jitter, jitter)))
            s = rng.uniform(*side)
            w = int(round(s * np.sqrt(a)))
            h = int(round(s / np.sqrt(a)))
            if not (2 <= w <= image_size and 2 <= h <= image_size):
                continue
            x = int(rng.integers(0, image_size - w + 1))
            y = int(rng.integers(0, image_size - h + 1))
            if any(_rect_iou((x, y, w, h), b[1:]) > max_overlap for b in boxes):
                continue
            boxes.append((0, x, y, w, h))
        for _, x, y, w, h in boxes:
            img[:, y:y + h, x:x + w] = rng.uniform(0.6, 1.0, 3)[:, None, None]
        images[i] = _to_u8(img)
        all_boxes.append(boxes)
    split = _split_tags(n, splits)
    return Dataset("detect", images, None, all_boxes, split, 1, seed,
                   dict(image_size=image_size, side=list(side)))


def generate_synthetic(task, config=None, seed=0):
    config = dict(config or {})
    if task == "classify":
        return generate_classification(seed=seed, **config)
    if task == "detect":
        return generate_detection(seed=seed, **config)
    raise ConfigError(f"unknown task {task!r}", module="data")


# ----------------------------------------------------------- disk layout

def save_dataset(ds, root):
    """Write images as PPM plus text index files.

    labels.txt: ``<image-id> <label> <split>``; detection datasets instead have
    splits.txt (``<image-id> <split>``) and annotations.txt
    (``<image-id> <class-id> <x> <y> <w> <h>``).
    """
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    for i, img in enumerate(ds.images):
        write_pnm(os.path.join(root, "images", f"{i:06d}.ppm"), img.transpose(1, 2, 0))
    with open(os.path.join(root, "dataset.txt"), "w") as f:
        f.write(f"task {ds.task}\nnum_classes {ds.num_classes}\nseed {ds.seed}\n")
    if ds.task == "classify":
        with open(os.path.join(root, "labels.txt"), "w") as f:
            for i, (lab, sp) in enumerate(zip(ds.labels, ds.split)):
                f.write(f"{i:06d} {int(lab)} {sp}\n")
    else:
        with open(os.path.join(root, "splits.txt"), "w") as f:
            for i, sp in enumerate(ds.split):
                f.write(f"{i:06d} {sp}\n")
        write_annotations(os.path.join(root, "annotations.txt"),
                          [(f"{i:06d}", b) for i, bs in enumerate(ds.boxes) for b in bs])


def write_annotations(path, records):
    with open(path, "w") as f:
        for image_id, (cls, x, y, w, h) in records:
            f.write(f"{image_id} {int(cls)} {int(x)} {int(y)} {int(w)} {int(h)}\n")


def read_annotations(path):
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise EpinetError(f"{path}:{lineno}: expected 6 fields", module="data",
                                  code="format")
            image_id, *nums = parts
            cls, x, y, w, h = (int(v) for v in nums)
            if w <= 0 or h <= 0:
                raise EpinetError(f"{path}:{lineno}: non-positive box", module="data",
                                  code="format")
            out.append((image_id, (cls, x, y, w, h)))
    return out


def load_dataset(root):
    meta = {}
    with open(os.path.join(root, "dataset.txt")) as f:
        for line in f:
            k, v = line.split(None, 1)
            meta[k] = v.strip()
    task = meta["task"]
    index = "labels.txt" if task == "classify" else "splits.txt"
    ids, labels, split = [], [], []
    with open(os.path.join(root, index)) as f:
        for line in f:
            parts = line.split()
            ids.append(parts[0])
            if task == "classify":
                labels.append(int(parts[1]))
            split.append(parts[-1])
    images = np.stack([read_pnm(os.path.join(root, "images", f"{i}.ppm")).transpose(2, 0, 1)
                       for i in ids])
    boxes = None
    if task == "detect":
        pos = {i: k for k, i in enumerate(ids)}
        boxes = [[] for _ in ids]
        for image_id, b in read_annotations(os.path.join(root, "annotations.txt")):
            boxes[pos[image_id]].append(b)
    seed = None if meta.get("seed") in (None, "None") else int(meta["seed"])
    return Dataset(task, images, np.asarray(labels, np.int64) if labels else None, boxes,
                   np.asarray(split), int(meta["num_classes"]), seed)
