"""``epinet`` command line: train, eval, train-mil, detect, gradcheck, bench, gen-data, pack-debug.

Results go to stdout, progress to stderr. Exit status: 0 success, 1
validation failure, 2 usage error. Failures print one
``ERROR:<module>:<code>: <message>`` line.
"""

import argparse
import logging
import os
import sys
import time

import numpy as np

from . import detect as D
from . import layers as L
from . import patchwork as P
from .config import RunConfig
from .data import generate_synthetic, load_dataset, read_pnm, save_dataset, write_annotations
from .errors import EpinetError
from .gradcheck import TOLERANCE, run_suite, CASES
from .net import (Trainer, TrainConfig, accuracy, center_crops, class_t, load_checkpoint,
                  save_checkpoint)

log = logging.getLogger("epinet")


def _out(line):
    print(line, flush=True)


def _progress(line):
    print(line, file=sys.stderr, flush=True)


# ------------------------------------------------------------------ helpers

def train_config(cfg):
    t = cfg.train
    return TrainConfig(lr=t["lr"], momentum=t["momentum"], batch_size=t["batch_size"],
                       weight_decay=t["weight_decay"], lr_drop=t["lr_drop"],
                       patience=t["patience"], max_drops=t["max_drops"], epochs=t["epochs"],
                       seed=t["seed"], loss_mode=t["loss_mode"], flip=t["flip"])


def dataset_for(cfg):
    d = cfg.data
    if os.path.isdir(d["path"]):
        return load_dataset(d["path"])
    log.info("no dataset at %s; generating synthetic %s data (seed %d)", d["path"], d["task"],
             d["seed"])
    return synthesize(cfg)


def synthesize(cfg):
    d = cfg.data
    splits = {"train": d["train"], "test": d["test"]}
    if d["task"] == "classify":
        params = dict(n=d["n"], num_classes=d["num_classes"], image_size=d["image_size"],
                      splits=splits)
    else:
        params = dict(n=d["n"], image_size=d["image_size"], splits=splits)
    return generate_synthetic(d["task"], params, d["seed"])


def preprocess(state, images):
    p = state["preprocess"]
    mean = np.asarray(p["mean"], np.float32)
    return ((images.astype(np.float32) - mean[None, :, None, None]) *
            np.float32(p["scale"])).astype(np.float32)


def make_net(cfg, num_classes):
    n = cfg.net
    return class_t(num_classes, n["kind"], n["normalized"], n["seed"], n["input_size"],
                   widths=tuple(n["widths"]), dropout=n["dropout"], lam=n["lam"])


def grid_from(cfg):
    d = cfg.detect
    r = d["aspect_max"]
    return D.SearchGrid(np.geomspace(d["scale_max"], d["scale_min"], d["num_scales"]),
                        np.geomspace(1 / r, r, d["num_aspects"]))


# ------------------------------------------------------------------ commands

def cmd_train(args):
    cfg = RunConfig.load(args.config)
    ds = dataset_for(cfg)
    if ds.task == "detect":
        return _train_detector(cfg, ds, args)
    train, test = ds.subset("train"), ds.subset("test")
    tc = train_config(cfg)
    if args.resume:
        net = load_checkpoint(args.resume)
    else:
        net = make_net(cfg, ds.num_classes)
        net.state["preprocess"] = dict(mean=train.mean().tolist(),
                                       scale=cfg.train["input_scale"])
    xtr = preprocess(net.state, train.images)
    val = (preprocess(net.state, test.images), test.labels) if len(test) else None
    trainer = Trainer(net, tc)
    remaining = max(0, tc.epochs - net.state["trainer"]["epoch"])

    def report(rec):
        _progress(f"epoch {rec['epoch']} loss {rec['loss']:.4f} lr {rec['lr']:.3g}"
                  + (f" val_error {rec['val_error']:.4f}" if "val_error" in rec else ""))
    trainer.fit(xtr, train.labels, val, epochs=remaining, callback=report)
    save_checkpoint(net, cfg.train["checkpoint"])
    hist = net.state["trainer"]["history"]
    if hist:
        last = hist[-1]
        _out(f"epochs={last['epoch']} loss={last['loss']:.6f}"
             + (f" test_accuracy={1 - last['val_error']:.4f}" if "val_error" in last else ""))
    _out(f"checkpoint={cfg.train['checkpoint']}")
    return 0


def _train_detector(cfg, ds, args):
    d = cfg.detect
    train = ds.subset("train")
    grid = grid_from(cfg)
    net = load_checkpoint(args.resume) if args.resume else \
        D.detection_net(window=d["window"], seed=cfg.net["seed"])
    if not args.resume:
        net.state["preprocess"] = dict(mean=train.mean().tolist(),
                                       scale=cfg.train["input_scale"])
    p = net.state["preprocess"]
    data = D.collect_detector_samples(train.images, train.boxes, d["window"], net.stride, grid,
                                      np.asarray(p["mean"], np.float32), p["scale"],
                                      seed=cfg.train["seed"], gutter=d["gutter"],
                                      n_pos=d["n_pos"], n_neg=d["n_neg"])
    _progress(f"mined {int(data.labels.sum())} positives, {int((data.labels == 0).sum())} "
              f"negatives, {data.unmatched} unmatched GT")
    tc = train_config(cfg)
    D.train_detector(net, data, tc, epochs=d["epochs"],
                     callback=lambda r: _progress(f"epoch {r['epoch']} loss {r['loss']:.4f}"))
    net.state["detect"] = dict(scales=list(grid.scales), aspects=list(grid.aspects),
                               window=d["window"], gutter=d["gutter"], nms=d["nms"],
                               top_k=d["top_k"])
    save_checkpoint(net, cfg.train["checkpoint"])
    _out(f"checkpoint={cfg.train['checkpoint']}")
    return 0


def cmd_eval(args):
    net = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    test = ds.subset("test") if np.any(ds.split == "test") else ds
    x = preprocess(net.state, test.images)
    acc = accuracy(net, x, test.labels, views=args.views)
    _out(f"accuracy={acc:.6f} images={len(test)} views={args.views}")
    return 0


def cmd_train_mil(args):
    cfg = RunConfig.load(args.config)
    ds = dataset_for(cfg)
    train, test = ds.subset("train"), ds.subset("test")
    tc = train_config(cfg)
    net = make_net(cfg, ds.num_classes)
    net.state["preprocess"] = dict(mean=train.mean().tolist(), scale=cfg.train["input_scale"])
    xtr = preprocess(net.state, train.images)
    xte = preprocess(net.state, test.images)
    mode = cfg.train["loss_mode"]
    progress = lambda r: _progress(f"epoch {r['epoch']} loss {r['loss']:.4f}")
    if mode == "single":
        Trainer(net, tc).fit(center_crops(xtr, net.window), train.labels,
                             callback=progress)
        acc = accuracy(net, xte, test.labels)
        out = net
    else:
        conv = P.convolutionalize_fc(net)
        conv.state = net.state
        scorer = P.train_patchwork(conv, xtr, train.labels, tc, cfg.patchwork["scales"],
                                   cfg.patchwork["gutter"], mode=mode, callback=progress)
        probs = P.predict_patchwork(scorer, xte, cfg.patchwork["batch_size"])
        acc = float(np.mean(probs.argmax(axis=1) == test.labels))
        out = conv
    save_checkpoint(out, cfg.train["checkpoint"])
    _out(f"mode={mode} test_accuracy={acc:.4f}")
    _out(f"checkpoint={cfg.train['checkpoint']}")
    return 0


def cmd_detect(args):
    net = load_checkpoint(args.ckpt)
    if "detect" not in net.state:
        raise EpinetError(f"{args.ckpt} is not a detector checkpoint", module="cli",
                          code="checkpoint")
    s = net.state["detect"]
    grid = D.SearchGrid(s["scales"], s["aspects"])
    img = read_pnm(args.image)
    img = img[None] if img.ndim == 2 else img.transpose(2, 0, 1)
    conv = P.convolutionalize_fc(net) if not net.convolutional else net
    p = net.state["preprocess"]
    boxes = D.detect_image(conv, img, grid, s["window"], np.asarray(p["mean"], np.float32),
                           p["scale"], gutter=s["gutter"], top_k=s["top_k"],
                           threshold=s["nms"])
    image_id = os.path.splitext(os.path.basename(args.image))[0]
    text = D.format_detections(image_id, boxes)
    with open(args.out, "w") as f:
        f.write(text)
    _out(f"detections={len(boxes)} out={args.out}")
    return 0


def cmd_gradcheck(args):
    names = [args.layer] if args.layer else None
    if args.layer and args.layer not in CASES:
        raise EpinetError(f"unknown layer {args.layer!r}; choose from {', '.join(CASES)}",
                          module="cli", code="usage")
    failed = False
    for r in run_suite(names, args.instances, args.seed):
        _out(f"{r.layer} max_rel_error={r.max_error:.3e} instances={r.instances} "
             f"{'ok' if r.ok else 'FAIL'}")
        failed |= not r.ok or r.instances < args.instances
    if failed:
        print(f"ERROR:gradcheck:tolerance: relative error above {TOLERANCE:g}", file=sys.stderr)
        return 1
    return 0


def bench_report(filter_size=8, pool=5, channels=3, filters=16, blocks=4, repeats=3):
    """Inner products per output unit for matched epitomic and max-pool layers."""
    rng = np.random.default_rng(0)
    size = filter_size - 1 + pool * blocks
    x = rng.standard_normal((1, channels, size, size)).astype(np.float32)
    v = filter_size + pool - 1
    ep = L.EpitomicLayerParams(rng.standard_normal((filters, channels, v, v)).astype(np.float32),
                               None, filter_size, pool, 1)
    mp = L.MaxPoolConvParams(rng.standard_normal((filters, channels, filter_size, filter_size))
                             .astype(np.float32), None, pool)
    rows = {}
    for name, fn, params in (("epitomic", L.epitomic_conv_forward, ep),
                             ("maxpool", L.maxpool_conv_forward, mp)):
        counter = L.OpCounter()
        y, _ = fn(x, params, counter)
        t0 = time.perf_counter()
        for _ in range(repeats):
            fn(x, params, None)
        rows[name] = dict(inner_products=counter.inner_products, outputs=counter.outputs,
                          per_output=counter.per_output(), shape=y.shape,
                          seconds=(time.perf_counter() - t0) / repeats)
    ratio = rows["epitomic"]["inner_products"] / rows["maxpool"]["inner_products"]
    return rows, ratio, v


def cmd_bench(args):
    rows, ratio, v = bench_report(args.filter, args.pool, args.channels, args.filters,
                                  args.blocks)
    _out(f"geometry filter={args.filter} pool={args.pool} epitome={v} channels={args.channels} "
         f"filters={args.filters}")
    for name, r in rows.items():
        _out(f"{name} inner_products={r['inner_products']} outputs={r['outputs']} "
             f"per_output={r['per_output']:.2f} wall_ms={r['seconds'] * 1e3:.3f}")
    _out(f"ratio={ratio:.2f}")
    return 0


def cmd_gen_data(args):
    if args.config:
        cfg = RunConfig.load(args.config)
    else:
        cfg = RunConfig()
        if args.task == "detect":
            cfg["data.image_size"], cfg["data.n"] = 64, 300
            cfg["data.train"], cfg["data.test"] = 200, 100
    if args.task:
        cfg["data.task"] = args.task
    if args.seed is not None:
        cfg["data.seed"] = args.seed
    for key in ("n", "train", "test", "image_size"):
        if getattr(args, key) is not None:
            cfg[f"data.{key}"] = getattr(args, key)
    ds = synthesize(cfg)
    out = args.out or cfg.data["path"]
    save_dataset(ds, out)
    _out(f"task={ds.task} images={len(ds)} out={out}")
    return 0


def cmd_pack_debug(args):
    img = read_pnm(args.image)
    img = (img[None] if img.ndim == 2 else img.transpose(2, 0, 1)).astype(np.float32)
    scales = [float(s) for s in args.scales.split(",")]
    pyr = P.build_pyramid(img, scales, square=args.square)
    pw = P.pack_patchwork(pyr, args.gutter, args.stride, fill=float(img.mean()))
    sys.stdout.write(pw.manifest())
    _progress(f"canvas {pw.shape[1]}x{pw.shape[0]}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="epinet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train", help="train a Class-T classifier or a detector")
    s.add_argument("--config", required=True)
    s.add_argument("--resume")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="test accuracy of a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--views", type=int, choices=(1, 10), default=1)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("train-mil", help="patchwork training with a bag loss")
    s.add_argument("--config", required=True)
    s.set_defaults(fn=cmd_train_mil)

    s = sub.add_parser("detect", help="scale/aspect sliding-window detection on one image")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_detect)

    s = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    s.add_argument("--layer")
    s.add_argument("--instances", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_gradcheck)

    s = sub.add_parser("bench", help="epitomic vs max-pool cost parity")
    s.add_argument("--filter", type=int, default=8)
    s.add_argument("--pool", type=int, default=5)
    s.add_argument("--channels", type=int, default=3)
    s.add_argument("--filters", type=int, default=16)
    s.add_argument("--blocks", type=int, default=4)
    s.set_defaults(fn=cmd_bench)

    s = sub.add_parser("gen-data", help="write a synthetic dataset")
    s.add_argument("--task", choices=("classify", "detect"))
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.add_argument("--out")
    s.add_argument("--n", type=int)
    s.add_argument("--train", type=int)
    s.add_argument("--test", type=int)
    s.add_argument("--image-size", dest="image_size", type=int)
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("pack-debug", help="print the patchwork manifest for an image")
    s.add_argument("--image", required=True)
    s.add_argument("--scales", default="1.0,0.75,0.55,0.4,0.3,0.225")
    s.add_argument("--gutter", type=int, default=16)
    s.add_argument("--stride", type=int, default=1)
    s.add_argument("--square", action="store_true")
    s.set_defaults(fn=cmd_pack_debug)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(name)s: %(message)s")
    try:
        return args.fn(args)
    except EpinetError as e:
        print(e.line(), file=sys.stderr)
        return 1
    except OSError as e:
        msg = " ".join(f"{e.strerror}: {e.filename}".split())
        print(f"ERROR:cli:io: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
