"""Procedural GUI screenshots with exact element annotations.

Each screen is a flat background with non-overlapping elements: icons
(circle, triangle, cross, plus glyphs), widgets (buttons, checkboxes) and
text (rows of glyph blocks). One element is the grounding target and is
named by a templated instruction such as ``click the red circle icon``.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

CORPUS_VERSION = 1

COLORS: dict[str, tuple[int, int, int]] = {
    "red": (220, 40, 40),
    "orange": (245, 140, 20),
    "yellow": (225, 195, 15),
    "green": (40, 165, 60),
    "cyan": (20, 185, 200),
    "blue": (40, 80, 220),
    "purple": (130, 50, 190),
    "pink": (235, 90, 175),
}

# shape -> kind; the kind word is part of every instruction
SHAPES: dict[str, str] = {
    "circle": "icon",
    "triangle": "icon",
    "cross": "icon",
    "plus": "icon",
    "button": "widget",
    "checkbox": "widget",
    "label": "text",
    "paragraph": "text",
}
KINDS = ("icon", "widget", "text")

# (min, max) width / height ratio per shape
_ASPECT = {
    "circle": (1.0, 1.0), "triangle": (1.0, 1.0), "cross": (1.0, 1.0), "plus": (1.0, 1.0),
    "checkbox": (1.0, 1.0), "button": (1.6, 2.6), "label": (2.0, 3.5), "paragraph": (1.5, 2.2),
}

INSTRUCTION_WORDS = ("click", "the") + tuple(COLORS) + tuple(SHAPES) + KINDS


@dataclass(frozen=True)
class PlatformPreset:
    name: str
    canvas: tuple[int, int]  # (H, W)
    distractors: tuple[int, int]  # inclusive range
    element_size: tuple[int, int]  # min/max element height in pixels
    backgrounds: tuple[tuple[int, int, int], ...]
    gap: int = 4

    def __post_init__(self):
        h, w = self.canvas
        if h < 64 or w < 64:
            raise ValueError(f"preset {self.name}: canvas {self.canvas} smaller than 64x64")
        lo, hi = self.element_size
        if not (0 < lo <= hi) or hi * _ASPECT["label"][1] > w or hi > h:
            raise ValueError(f"preset {self.name}: element sizes {self.element_size} do not fit canvas")
        if not 0 <= self.distractors[0] <= self.distractors[1]:
            raise ValueError(f"preset {self.name}: bad distractor range {self.distractors}")


_LIGHT = ((255, 255, 255), (236, 237, 240), (248, 244, 232))
_DARK = ((36, 38, 44),)

PRESETS: dict[str, PlatformPreset] = {
    "mobile": PlatformPreset("mobile", (384, 192), (4, 8), (28, 52), _LIGHT + _DARK),
    "desktop": PlatformPreset("desktop", (288, 448), (8, 16), (24, 52), _LIGHT + _DARK),
    "web": PlatformPreset("web", (288, 448), (8, 16), (24, 40), _LIGHT + _DARK, gap=3),
}


def get_preset(name: str) -> PlatformPreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass(frozen=True)
class ElementAnnotation:
    bbox: tuple[float, float, float, float]  # normalized x0, y0, x1, y1
    color: str
    shape: str
    pixel_box: tuple[int, int, int, int] = (0, 0, 0, 0)  # x0, y0, x1, y1, exclusive ends

    def __post_init__(self):
        x0, y0, x1, y1 = self.bbox
        if not (0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1):
            raise ValueError(f"invalid bbox {self.bbox}")
        if self.shape not in SHAPES or self.color not in COLORS:
            raise ValueError(f"unknown attributes {self.color}/{self.shape}")

    @property
    def kind(self) -> str:
        return SHAPES[self.shape]

    @property
    def report_kind(self) -> str:
        """Column split used in reports: text vs icon/widget."""
        return "text" if self.kind == "text" else "icon/widget"

    @property
    def attributes(self) -> tuple[str, str, str]:
        return (self.color, self.shape, self.kind)

    @property
    def instruction_text(self) -> str:
        return f"click the {self.color} {self.shape} {self.kind}"

    @property
    def instruction(self) -> list[str]:
        return self.instruction_text.split()

    @property
    def center(self) -> tuple[float, float]:
        x0, y0, x1, y1 = self.bbox
        return ((x0 + x1) / 2, (y0 + y1) / 2)

    def to_dict(self) -> dict:
        return {"bbox": [round(v, 6) for v in self.bbox], "color": self.color,
                "shape": self.shape, "kind": self.kind, "pixel_box": list(self.pixel_box)}

    @classmethod
    def from_dict(cls, d: dict) -> ElementAnnotation:
        return cls(tuple(d["bbox"]), d["color"], d["shape"], tuple(d.get("pixel_box", (0, 0, 0, 0))))


@dataclass
class Sample:
    image: np.ndarray  # uint8 H x W x 3
    platform: str
    target: ElementAnnotation
    distractors: list[ElementAnnotation]
    seed: int
    background: tuple[int, int, int] = (255, 255, 255)
    id: str = ""
    extras: dict = field(default_factory=dict)

    @property
    def elements(self) -> list[ElementAnnotation]:
        return [self.target, *self.distractors]

    def float_image(self, dtype=np.float32) -> np.ndarray:
        return to_float(self.image, dtype)


def to_float(img: np.ndarray, dtype=np.float32) -> np.ndarray:
    dtype = np.dtype(dtype)
    return (img.astype(dtype) / dtype.type(255.0)).astype(dtype)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


# ------------------------------------------------------------------ layout


def _place(rng: np.random.Generator, preset: PlatformPreset, shapes: Sequence[str]):
    h, w = preset.canvas
    lo, hi = preset.element_size
    occupied = np.zeros((h, w), dtype=bool)
    boxes = []
    for shape in shapes:
        for _ in range(200):
            eh = int(rng.integers(lo, hi + 1))
            a0, a1 = _ASPECT[shape]
            ew = int(round(eh * rng.uniform(a0, a1)))
            ew = min(ew, w - 2)
            x0 = int(rng.integers(1, w - ew))
            y0 = int(rng.integers(1, h - eh))
            g = preset.gap
            if occupied[max(0, y0 - g): y0 + eh + g, max(0, x0 - g): x0 + ew + g].any():
                continue
            occupied[y0: y0 + eh, x0: x0 + ew] = True
            boxes.append((x0, y0, x0 + ew, y0 + eh))
            break
        else:
            return None
    return boxes


def generate_screen(seed: int, preset: PlatformPreset | str, max_retries: int = 20) -> Sample:
    """Deterministically build one annotated screen from ``(seed, preset)``."""
    if isinstance(preset, str):
        preset = get_preset(preset)
    rng = np.random.default_rng(seed)
    h, w = preset.canvas
    n = 1 + int(rng.integers(preset.distractors[0], preset.distractors[1] + 1))
    pairs = [(c, s) for c in COLORS for s in SHAPES]
    if n > len(pairs):
        raise ValueError(f"cannot place {n} distinct elements")
    bg = preset.backgrounds[int(rng.integers(len(preset.backgrounds)))]
    for _ in range(max_retries):
        chosen = [pairs[i] for i in rng.choice(len(pairs), size=n, replace=False)]
        boxes = _place(rng, preset, [s for _, s in chosen])
        if boxes is not None:
            break
    else:
        raise RuntimeError(f"could not place {n} elements on {preset.name} after {max_retries} retries")
    elems = [
        ElementAnnotation((x0 / w, y0 / h, x1 / w, y1 / h), c, s, (x0, y0, x1, y1))
        for (c, s), (x0, y0, x1, y1) in zip(chosen, boxes)
    ]
    t = int(rng.integers(n))
    target = elems[t]
    sample = Sample(np.zeros((h, w, 3), np.uint8), preset.name, target,
                    elems[:t] + elems[t + 1:], seed, bg)
    sample.image = render(sample)
    return sample


# --------------------------------------------------------------- rendering


def _glyph_mask(shape: str, bh: int, bw: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:bh, 0:bw]
    u = (xx + 0.5) / bw * 2 - 1  # [-1, 1] pixel centres
    v = (yy + 0.5) / bh * 2 - 1
    if shape == "button":
        return np.ones((bh, bw), bool)
    if shape == "circle":
        return u * u + v * v <= 1.0
    if shape == "triangle":
        # apex top-centre, base along the bottom edge
        return (v >= -1) & (np.abs(u) <= (v + 1) / 2)
    th = max(2.5 / min(bh, bw), 0.22)
    if shape == "plus":
        return (np.abs(u) <= th) | (np.abs(v) <= th)
    if shape == "cross":
        return (np.abs(u - v) <= th * 1.2) | (np.abs(u + v) <= th * 1.2)
    if shape == "checkbox":
        t = max(2, min(bh, bw) // 7)
        m = np.ones((bh, bw), bool)
        m[t:bh - t, t:bw - t] = False
        c = slice(bh // 2 - 1, bh // 2 + 2), slice(bw // 2 - 1, bw // 2 + 2)
        m[c] = True
        return m
    rows = 1 if shape == "label" else max(2, bh // 14)
    m = np.zeros((bh, bw), bool)
    row_h = bh / rows
    for r in range(rows):
        gy0 = int(r * row_h + row_h * 0.2)
        gy1 = max(gy0 + 2, int((r + 1) * row_h - row_h * 0.2))
        x = 1
        while x < bw - 2:
            gw = int(rng.integers(3, 7))
            m[gy0:gy1, x: min(x + gw, bw - 1)] = True
            x += gw + (5 if rng.random() < 0.2 else 2)
    return m


def render(sample: Sample) -> np.ndarray:
    """Rasterize ``sample`` to an 8-bit H x W x 3 image."""
    h, w = sample.image.shape[:2]
    img = np.empty((h, w, 3), np.uint8)
    img[:] = sample.background
    for i, el in enumerate(sample.elements):
        if el is None:  # screens without a target render background only
            continue
        x0, y0, x1, y1 = el.pixel_box
        if x1 <= x0 or y1 <= y0:
            bx0, by0, bx1, by1 = el.bbox
            x0, y0 = int(round(bx0 * w)), int(round(by0 * h))
            x1, y1 = int(round(bx1 * w)), int(round(by1 * h))
        rng = np.random.default_rng([sample.seed & 0xFFFFFFFF, i])
        mask = _glyph_mask(el.shape, y1 - y0, x1 - x0, rng)
        region = img[y0:y1, x0:x1]
        region[mask] = COLORS[el.color]
    return img


# ------------------------------------------------------------------ corpus


def derive_seed(*parts) -> int:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def split_for(master_seed: int, index: int) -> str:
    r = derive_seed(master_seed, index, "split") % 100
    return "train" if r < 80 else ("val" if r < 90 else "test")


def sample_id(index: int) -> str:
    return f"{index:06d}"


def sample_record(sample: Sample, image_path: str, vocab=None) -> dict:
    from .vocab import default_vocabulary

    vocab = vocab or default_vocabulary()
    t = sample.target
    return {
        "id": sample.id,
        "image_path": image_path,
        "platform": sample.platform,
        "seed": sample.seed,
        "background": list(sample.background),
        "instruction_text": t.instruction_text,
        "instruction_tokens": vocab.encode(t.instruction),
        "target_bbox": [round(v, 6) for v in t.bbox],
        "kind": t.kind,
        "target": t.to_dict(),
        "distractors": [d.to_dict() for d in sample.distractors],
    }


def _write_one(args):
    out, master_seed, index, preset_name = args
    seed = derive_seed(master_seed, index)
    s = generate_screen(seed, preset_name)
    s.id = sample_id(index)
    rel = f"images/{s.id}.png"
    Image.fromarray(s.image).save(Path(out) / rel, format="PNG", optimize=False, compress_level=6)
    return sample_record(s, rel)


def make_corpus(n: int, presets: Sequence[str], master_seed: int, out: str | os.PathLike,
                workers: int = 1) -> Path:
    """Write ``n`` samples, ``annotations.jsonl`` and ``manifest.json`` under ``out``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    presets = list(presets)
    for p in presets:
        get_preset(p)
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    jobs = [(str(out), master_seed, i, presets[i % len(presets)]) for i in range(n)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            records = list(ex.map(_write_one, jobs, chunksize=32))
    else:
        records = [_write_one(j) for j in jobs]
    with open(out / "annotations.jsonl", "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    splits = {"train": [], "val": [], "test": []}
    for i in range(n):
        splits[split_for(master_seed, i)].append(sample_id(i))
    manifest = {
        "corpus_version": CORPUS_VERSION,
        "master_seed": master_seed,
        "n": n,
        "presets": presets,
        "splits": splits,
    }
    with open(out / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")
    return out


class Corpus:
    """Read-only view of a corpus directory."""

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        mpath = self.root / "manifest.json"
        if not mpath.exists():
            raise FileNotFoundError(f"no corpus manifest at {mpath}")
        self.manifest = json.loads(mpath.read_text())
        self.records: dict[str, dict] = {}
        with open(self.root / "annotations.jsonl") as f:
            for line in f:
                r = json.loads(line)
                self.records[r["id"]] = r

    def split(self, name: str) -> list[str]:
        return list(self.manifest["splits"][name])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update((self.root / "manifest.json").read_bytes())
        h.update((self.root / "annotations.jsonl").read_bytes())
        return h.hexdigest()[:16]

    def load_pixels(self, sid: str) -> np.ndarray:
        with Image.open(self.root / self.records[sid]["image_path"]) as im:
            return np.asarray(im.convert("RGB"))

    def load_sample(self, sid: str) -> Sample:
        r = self.records[sid]
        return Sample(self.load_pixels(sid), r["platform"],
                      ElementAnnotation.from_dict(r["target"]),
                      [ElementAnnotation.from_dict(d) for d in r["distractors"]],
                      r["seed"], tuple(r.get("background", (255, 255, 255))), id=sid)
