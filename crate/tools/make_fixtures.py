#!/usr/bin/env python3
"""Generate the committed recorded-backend fixture set.

Writes synthetic scenes, `.rawhead` head tensors for the plate and
character stages, and `reference.json` holding the detections and plate
strings produced by a standalone NumPy implementation of letterbox,
arg-max decode, greedy NMS and x-ordering. The Rust test suite replays the
tensors and compares against these references.

Usage: python3 tools/make_fixtures.py [OUT_DIR]   (default fixtures/recorded)
"""

import json
import math
import struct
import sys
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFont

SIDE = 640
CONF = 0.25
NMS_IOU = 0.45
PAD = 0.05
PLATE_ANCHORS = 8400
CHAR_ANCHORS = 2100
GLYPHS = "0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ"
SEED = 20240611


# --- reference post-processing -------------------------------------------

def letterbox(src_w, src_h, side=SIDE):
    scale = min(side / src_w, side / src_h)
    return {
        "scale": scale,
        "pad_x": (side - scale * src_w) / 2.0,
        "pad_y": (side - scale * src_h) / 2.0,
        "src_w": src_w,
        "src_h": src_h,
    }


def to_model(box, t):
    x1, y1, x2, y2 = box
    s = t["scale"]
    return (x1 * s + t["pad_x"], y1 * s + t["pad_y"], x2 * s + t["pad_x"], y2 * s + t["pad_y"])


def from_model(box, t):
    x1, y1, x2, y2 = box
    s = t["scale"]
    w, h = float(t["src_w"]), float(t["src_h"])

    def cx(v):
        return min(max(v, 0.0), w)

    def cy(v):
        return min(max(v, 0.0), h)

    return (
        cx((x1 - t["pad_x"]) / s),
        cy((y1 - t["pad_y"]) / s),
        cx((x2 - t["pad_x"]) / s),
        cy((y2 - t["pad_y"]) / s),
    )


def decode(head, conf):
    rows, cols = head.shape
    out = []
    for c in range(cols):
        scores = head[4:, c]
        cls = int(np.argmax(scores))
        score = float(scores[cls])
        if score < conf:
            continue
        cxv, cyv, w, h = (float(v) for v in head[:4, c])
        if w <= 0 or h <= 0:
            continue
        box = (cxv - w / 2.0, cyv - h / 2.0, cxv + w / 2.0, cyv + h / 2.0)
        out.append((box, cls, score))
    return out


def iou(a, b):
    iw = max(min(a[2], b[2]) - max(a[0], b[0]), 0.0)
    ih = max(min(a[3], b[3]) - max(a[1], b[1]), 0.0)
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return 0.0 if union <= 0 else inter / union


def nms(dets, thr, class_aware):
    order = sorted(dets, key=lambda d: (-d[2], d[0][0], d[0][1], d[1]))
    kept = []
    for d in order:
        if all((class_aware and k[1] != d[1]) or iou(k[0], d[0]) <= thr for k in kept):
            kept.append(d)
    return kept


def postprocess(head, t, class_aware):
    kept = nms(decode(head, CONF), NMS_IOU, class_aware)
    return kept, [(from_model(b, t), c, s) for b, c, s in kept]


def crop_rect(img_w, img_h, box, pad):
    x1, y1, x2, y2 = box
    px = pad * (x2 - x1)
    py = pad * (y2 - y1)
    left = math.floor(min(max(x1 - px, 0.0), img_w))
    top = math.floor(min(max(y1 - py, 0.0), img_h))
    right = math.ceil(max(min(x2 + px, img_w), 0.0))
    bottom = math.ceil(max(min(y2 + py, img_h), 0.0))
    return left, top, right - left, bottom - top


# --- tensor synthesis ----------------------------------------------------

def background_head(rng, nc, anchors):
    head = np.zeros((4 + nc, anchors), dtype=np.float32)
    head[0] = rng.uniform(0, SIDE, anchors)
    head[1] = rng.uniform(0, SIDE, anchors)
    head[2] = rng.uniform(4, 120, anchors)
    head[3] = rng.uniform(4, 120, anchors)
    head[4:] = rng.uniform(0.0, 0.2, (nc, anchors))
    return head


def place(head, rng, used, box_model, cls, score, nc):
    col = int(rng.integers(0, head.shape[1]))
    while col in used:
        col = int(rng.integers(0, head.shape[1]))
    used.add(col)
    x1, y1, x2, y2 = box_model
    head[0, col] = (x1 + x2) / 2.0
    head[1, col] = (y1 + y2) / 2.0
    head[2, col] = x2 - x1
    head[3, col] = y2 - y1
    head[4:, col] = rng.uniform(0.0, 0.05, nc)
    head[4 + cls, col] = score


def shifted(box, dx, dy):
    return (box[0] + dx, box[1] + dy, box[2] + dx, box[3] + dy)


def write_rawhead(path, head):
    rows, cols = head.shape
    with open(path, "wb") as f:
        f.write(b"RHD0")
        f.write(struct.pack("<III", rows, cols, 0))
        f.write(head.astype("<f4").tobytes(order="C"))


# --- scenes --------------------------------------------------------------

def font(size):
    try:
        return ImageFont.load_default(size=size)
    except TypeError:
        return ImageFont.load_default()


def draw_plate(draw, box, text):
    x1, y1, x2, y2 = box
    draw.rectangle([x1, y1, x2 - 1, y2 - 1], fill=(235, 235, 220), outline=(20, 20, 20), width=2)
    size = max(int((y2 - y1) * 0.6), 8)
    draw.text(((x1 + x2) / 2, (y1 + y2) / 2), text, fill=(15, 15, 15), font=font(size), anchor="mm")


def glyph_layout(crop_w, crop_h, text):
    """Glyph boxes in crop pixels, evenly spaced inside the padded margin."""
    n = len(text)
    if n == 0:
        return []
    margin_x = crop_w * 0.08
    pitch = (crop_w - 2 * margin_x) / n
    gw = pitch * 0.72
    gh = crop_h * 0.62
    top = (crop_h - gh) / 2.0
    out = []
    for i, ch in enumerate(text):
        cx = margin_x + pitch * (i + 0.5)
        out.append((ch, (cx - gw / 2, top, cx + gw / 2, top + gh)))
    return out


class Builder:
    def __init__(self, out):
        self.out = out
        self.rng = np.random.default_rng(SEED)
        self.tensors = {}
        self.readings = {}
        (out / "images").mkdir(parents=True, exist_ok=True)
        (out / "crops").mkdir(parents=True, exist_ok=True)

    def char_tensor(self, key, crop_w, crop_h, text, extras=()):
        """Character head for a crop; returns reference observations."""
        rng = self.rng
        t = letterbox(crop_w, crop_h)
        head = background_head(rng, 36, CHAR_ANCHORS)
        used = set()
        layout = glyph_layout(crop_w, crop_h, text)
        for i, (ch, box) in enumerate(layout):
            m = to_model(box, t)
            score = float(rng.uniform(0.62, 0.97))
            place(head, rng, used, m, GLYPHS.index(ch), score, 36)
            # near-duplicate of the same glyph, suppressed by NMS
            place(head, rng, used, shifted(m, 1.5, -1.0), GLYPHS.index(ch), score - 0.2, 36)
            if i in extras:
                # competing class at the same location, removed by class-agnostic NMS
                other = (GLYPHS.index(ch) + 7) % 36
                place(head, rng, used, shifted(m, -1.0, 0.5), other, score - 0.1, 36)
        write_rawhead(self.out / f"{key}.rawhead", head)
        model_dets, dets = postprocess(head, t, class_aware=False)
        self.tensors[key] = {
            "kind": "character",
            "source_size": [crop_w, crop_h],
            "class_aware": False,
            "detections_model": [list(b) + [c, s] for b, c, s in model_dets],
            "detections": [list(b) + [c, s] for b, c, s in dets],
        }
        obs = sorted(
            dets,
            key=lambda d: ((d[0][0] + d[0][2]) / 2, (d[0][1] + d[0][3]) / 2, -d[2], d[1]),
        )
        return obs

    def scene(self, image_id, size, plates):
        """plates: list of (box in source px, text, score)."""
        rng = self.rng
        w, h = size
        img = Image.new("RGB", size, (70, 80, 90))
        draw = ImageDraw.Draw(img)
        for i in range(12):
            x, y = int(rng.integers(0, w)), int(rng.integers(0, h))
            shade = tuple(int(v) for v in rng.integers(40, 160, 3))
            draw.rectangle([x, y, x + int(rng.integers(10, 200)), y + int(rng.integers(10, 120))], fill=shade)
        for box, text, _ in plates:
            draw_plate(draw, box, text)
        img.save(self.out / "images" / f"{image_id}.png")

        t = letterbox(w, h)
        head = background_head(rng, 1, PLATE_ANCHORS)
        used = set()
        for box, _, score in plates:
            m = to_model(box, t)
            place(head, rng, used, m, 0, score, 1)
            place(head, rng, used, shifted(m, 3.0, 1.0), 0, score - 0.25, 1)
            place(head, rng, used, shifted(m, -2.0, -1.5), 0, score - 0.4, 1)
        write_rawhead(self.out / f"{image_id}.rawhead", head)
        model_dets, dets = postprocess(head, t, class_aware=True)
        self.tensors[image_id] = {
            "kind": "plate",
            "source_size": [w, h],
            "class_aware": True,
            "detections_model": [list(b) + [c, s] for b, c, s in model_dets],
            "detections": [list(b) + [c, s] for b, c, s in dets],
        }

        texts = {}
        for box, text, _ in plates:
            texts[tuple(round(v) for v in box)] = text
        readings = []
        for k, (pbox, _, pscore) in enumerate(dets):
            text = min(texts.items(), key=lambda kv: sum(abs(a - b) for a, b in zip(kv[0], pbox)))[1]
            cx, cy, cw, ch = crop_rect(w, h, pbox, PAD)
            key = f"{image_id}.plate{k}"
            obs = self.char_tensor(key, cw, ch, text, extras=(1,))
            readings.append({
                "box": list(pbox),
                "confidence": pscore,
                "crop": [cx, cy, cw, ch],
                "text": "".join(GLYPHS[c] for _, c, _ in obs),
                "characters": [
                    {
                        "glyph": GLYPHS[c],
                        "box": [b[0] + cx, b[1] + cy, b[2] + cx, b[3] + cy],
                        "confidence": s,
                    }
                    for b, c, s in obs
                ],
            })
            assert readings[-1]["text"] == text, (image_id, readings[-1]["text"], text)
        self.readings[image_id] = readings

    def crop_fixture(self, key, size, text):
        w, h = size
        img = Image.new("RGB", size, (235, 235, 220))
        if text:
            draw = ImageDraw.Draw(img)
            draw.text((w / 2, h / 2), text, fill=(15, 15, 15), font=font(int(h * 0.6)), anchor="mm")
        img.save(self.out / "crops" / f"{key}.png")
        obs = self.char_tensor(key, w, h, text, extras=(0, 3) if text else ())
        got = "".join(GLYPHS[c] for _, c, _ in obs)
        assert got == text, (key, got, text)

    def finish(self):
        ref = {
            "generator": "tools/make_fixtures.py",
            "seed": SEED,
            "thresholds": {"conf": CONF, "nms_iou": NMS_IOU, "pad": PAD},
            "tensors": dict(sorted(self.tensors.items())),
            "readings": dict(sorted(self.readings.items())),
        }
        with open(self.out / "reference.json", "w") as f:
            json.dump(ref, f, indent=1)
            f.write("\n")
        with open(self.out / "truth.csv", "w") as f:
            f.write("image,text,x1,y1,x2,y2\n")
            for image_id, readings in sorted(self.readings.items()):
                for r in readings:
                    b = [f"{v:.3f}" for v in r["box"]]
                    f.write(f"{image_id},{r['text']},{','.join(b)}\n")


def main():
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("fixtures/recorded")
    b = Builder(out)
    b.scene("lpr_0001", (1280, 720), [((520.3, 430.6, 760.8, 490.2), "ABC123", 0.93)])
    b.scene("lpr_0002", (640, 480), [
        ((60.4, 300.2, 260.7, 350.9), "MH12DE", 0.91),
        ((380.1, 100.5, 600.6, 150.3), "XY9876", 0.78),
    ])
    b.scene("lpr_0003", (800, 600), [])
    b.scene("lpr_0004", (1024, 768), [((0.0, 700.4, 180.2, 768.0), "7Z7Z7", 0.88)])
    b.scene("lpr_0005", (720, 1280), [((180.6, 900.3, 540.2, 980.7), "KA05MN4321", 0.86)])
    b.crop_fixture("plate_ABC123", (220, 60), "ABC123")
    b.crop_fixture("plate_blank", (200, 50), "")
    b.finish()


if __name__ == "__main__":
    main()
