"""Random fixtures and independent oracles shared by the test modules."""

from __future__ import annotations

import math
import random

import numpy as np

from backbone_lens.arch import model_spec_from_dict
from backbone_lens.metrics import DetBox, GtBox

# --------------------------------------------------------------------------
# random small model specs
# --------------------------------------------------------------------------


def random_spec(rng: random.Random, max_layers: int = 8, max_ch: int = 32, max_hw: int = 32):
    """A valid scaled spec of <= max_layers layers plus an input shape of at most max_hw^2."""
    in_c = rng.randint(1, 4)
    h, w = rng.randint(4, max_hw), rng.randint(4, max_hw)
    meta = [(in_c, h, w)]  # meta[0] is the graph input, meta[i + 1] is layer i
    layers = []
    for i in range(rng.randint(1, max_layers)):
        c, ch, cw = meta[-1]
        same_hw = [j for j in range(len(meta) - 1) if meta[j][1:] == (ch, cw)]
        kinds = ["Conv", "Conv", "Bottleneck", "C2f", "C3k", "C3k2", "SPPF", "FusionStub"]
        if ch <= 16 and cw <= 16:
            kinds.append("Upsample")
        if same_hw:
            kinds += ["Concat", "Concat"]
        kind = rng.choice(kinds)
        out = rng.randint(1, max_ch)
        if kind == "Conv":
            k = rng.choice([1, 2, 3, 5])
            s = rng.choice([1, 1, 2]) if min(ch, cw) >= 4 else 1
            g = rng.choice([d for d in range(1, math.gcd(c, out) + 1) if c % d == 0 and out % d == 0])
            args = {"out_channels": out, "kernel": k, "stride": s, "groups": g}
            oh = (ch + 2 * (k // 2) - k) // s + 1
            ow = (cw + 2 * (k // 2) - k) // s + 1
            meta.append((out, oh, ow))
            layers.append({"from": [-1], "repeats": rng.randint(1, 2), "kind": kind, "args": args})
        elif kind == "Bottleneck":
            shortcut = rng.random() < 0.5
            if shortcut:
                out = c
            args = {"out_channels": out, "shortcut": shortcut, "e": rng.choice([0.25, 0.5, 1.0])}
            reps = rng.randint(1, 2) if out == c or not shortcut else 1
            meta.append((out, ch, cw))
            layers.append({"from": [-1], "repeats": reps, "kind": kind, "args": args})
        elif kind in ("C2f", "C3k", "C3k2"):
            args = {"out_channels": out, "shortcut": rng.random() < 0.5, "e": rng.choice([0.25, 0.5])}
            if kind == "C3k2":
                args["c3k"] = rng.random() < 0.5
                args["c3k_repeats"] = rng.randint(1, 2)
            meta.append((out, ch, cw))
            layers.append({"from": [-1], "repeats": rng.randint(1, 2), "kind": kind, "args": args})
        elif kind == "SPPF":
            meta.append((out, ch, cw))
            layers.append({"from": [-1], "kind": kind, "args": {"out_channels": out, "kernel": rng.choice([3, 5])}})
        elif kind == "Upsample":
            meta.append((c, 2 * ch, 2 * cw))
            layers.append({"from": [-1], "kind": kind})
        elif kind == "FusionStub":
            meta.append((c, ch, cw))
            layers.append({"from": [-1], "kind": kind})
        else:
            j = rng.choice(same_hw)
            # meta[0] (graph input) is only reachable through a relative index
            entries = [-1, -(i + 1)] if j == 0 else [-1, j - 1]
            meta.append((c + meta[j][0], ch, cw))
            layers.append({"from": entries, "kind": kind})
    spec = model_spec_from_dict(
        {"name": "random", "depth_multiple": 1.0, "width_multiple": 1.0, "in_channels": in_c, "layers": layers}
    )
    return spec, (1, in_c, h, w)


# --------------------------------------------------------------------------
# convolution oracle
# --------------------------------------------------------------------------


def conv2d_scalar(x, weight, stride, padding, groups=1):
    """Scalar-loop convolution, one output element at a time."""
    n, c, h, w = x.shape
    out_ch, cin_g, k, _ = weight.shape
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    out = np.zeros((n, out_ch, oh, ow))
    cout_g = out_ch // groups
    for b in range(n):
        for o in range(out_ch):
            g = o // cout_g
            for y in range(oh):
                for xx in range(ow):
                    acc = 0.0
                    for ci in range(cin_g):
                        for i in range(k):
                            for j in range(k):
                                yy, xj = y * stride + i - padding, xx * stride + j - padding
                                if 0 <= yy < h and 0 <= xj < w:
                                    acc += weight[o, ci, i, j] * x[b, g * cin_g + ci, yy, xj]
                    out[b, o, y, xx] = acc
    return out


# --------------------------------------------------------------------------
# detection fixtures and AP oracle
# --------------------------------------------------------------------------


def _iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def random_detection_fixture(rng: random.Random, max_dets=10, max_gts=5, max_classes=3, images=("a", "b")):
    n_cls = rng.randint(1, max_classes)

    def box():
        x, y = rng.randint(0, 6), rng.randint(0, 6)
        return (float(x), float(y), float(x + rng.randint(2, 4)), float(y + rng.randint(2, 4)))

    gts = [GtBox(rng.choice(images), rng.randrange(n_cls), box()) for _ in range(rng.randint(0, max_gts))]
    dets = []
    for _ in range(rng.randint(0, max_dets)):
        if gts and rng.random() < 0.6:
            g = rng.choice(gts)
            jitter = rng.choice([0.0, 0.0, 0.5, 1.0])
            b = (g.box[0] + jitter, g.box[1], g.box[2] + jitter, g.box[3])
            cls = g.class_id if rng.random() < 0.8 else rng.randrange(n_cls)
            dets.append(DetBox(g.image_id, cls, rng.choice([0.1, 0.3, 0.5, 0.7, 0.9, rng.random()]), b))
        else:
            dets.append(DetBox(rng.choice(images), rng.randrange(n_cls), rng.random(), box()))
    return dets, gts, n_cls


def brute_match_count(dets, gts, cls, thr, iou_thr=0.5):
    """TP count for ``cls`` using only detections with score >= thr, matched from scratch."""
    kept = [d for d in dets if d.class_id == cls and d.score >= thr]
    kept.sort(key=lambda d: (-d.score, d.image_id, d.class_id, d.box))
    pool = sorted([g for g in gts if g.class_id == cls], key=lambda g: (g.image_id, g.class_id, g.box))
    used = set()
    tp = 0
    for d in kept:
        cands = [(j, _iou(d.box, g.box)) for j, g in enumerate(pool) if g.image_id == d.image_id and j not in used]
        if not cands:
            continue
        best = max(cands, key=lambda t: (t[1], -t[0]))
        if best[1] >= iou_thr:
            used.add(best[0])
            tp += 1
    return tp, len(kept)


def brute_ap(dets, gts, cls, iou_thr=0.5):
    """Exact integral of max{P(t) : R(t) >= r} over r in [0, 1], enumerating every score threshold."""
    n_gt = sum(1 for g in gts if g.class_id == cls)
    if n_gt == 0:
        return 0.0
    pts = []
    for t in sorted({d.score for d in dets if d.class_id == cls}):
        tp, n = brute_match_count(dets, gts, cls, t, iou_thr)
        pts.append((tp / n_gt, tp / n))
    recalls = sorted({r for r, _ in pts})
    area, prev = 0.0, 0.0
    for r in recalls:
        area += (r - prev) * max(p for rr, p in pts if rr >= r)
        prev = r
    return area
