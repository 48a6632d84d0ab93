"""Natural-noise transforms for H x W x 3 float images in [0, 1].

All transforms are pure: stochastic ones take an explicit seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

LUMA = np.array([0.299, 0.587, 0.114])

KINDS = ("gaussian_noise", "gaussian_blur", "color_jitter", "contrast", "resize_budget")

# composed pipelines always run in this order
PIPELINE_ORDER = ("resize_budget", "gaussian_blur", "gaussian_noise", "color_jitter", "contrast")


def gaussian_noise(img: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return img.copy()
    rng = np.random.default_rng(seed)
    noisy = img + rng.normal(0.0, sigma, size=img.shape).astype(img.dtype)
    return np.clip(noisy, 0.0, 1.0)


def gaussian_kernel(radius: int, sigma_b: float) -> np.ndarray:
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma_b) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, radius: int, sigma_b: float) -> np.ndarray:
    """Separable Gaussian blur with clamp-to-edge borders."""
    if radius < 0 or sigma_b <= 0:
        raise ValueError(f"need radius >= 0 and sigma_b > 0, got {radius}, {sigma_b}")
    h, w = img.shape[:2]
    if 2 * radius + 1 > min(h, w):
        raise ValueError(f"kernel size {2 * radius + 1} exceeds image extent {min(h, w)}")
    if radius == 0:
        return img.copy()
    k = gaussian_kernel(radius, sigma_b)
    src = img.astype(np.float64)
    padded = np.pad(src, ((radius, radius), (0, 0), (0, 0)), mode="edge")
    tmp = sum(k[i] * padded[i:i + h] for i in range(2 * radius + 1))
    padded = np.pad(tmp, ((0, 0), (radius, radius), (0, 0)), mode="edge")
    out = sum(k[i] * padded[:, i:i + w] for i in range(2 * radius + 1))
    return np.clip(out, 0.0, 1.0).astype(img.dtype)


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    d = mx - mn
    safe = np.where(d > 0, d, 1.0)
    h = np.where(mx == r, ((g - b) / safe) % 6.0,
                 np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = np.where(d > 0, h / 6.0, 0.0)
    s = np.where(mx > 0, d / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([h, s, mx], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    choices = [
        np.stack(c, axis=-1)
        for c in ((v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q))
    ]
    out = np.zeros_like(hsv)
    for k, c in enumerate(choices):
        out = np.where((i == k)[..., None], c, out)
    return out


def _draw(value, rng: np.random.Generator) -> float:
    if isinstance(value, (list, tuple)):
        lo, hi = value
        return float(rng.uniform(lo, hi))
    return float(value)


def color_jitter(img: np.ndarray, brightness=1.0, saturation=1.0, hue_shift=0.0,
                 seed: int = 0) -> np.ndarray:
    """Brightness scale, then saturation toward per-pixel luma, then hue rotation.

    Each factor is a number or a ``(lo, hi)`` range drawn uniformly per image.
    """
    rng = np.random.default_rng(seed)
    b = _draw(brightness, rng)
    s = _draw(saturation, rng)
    hs = _draw(hue_shift, rng)
    if b < 0 or s < 0:
        raise ValueError(f"jitter factors must be non-negative, got brightness={b}, saturation={s}")
    if abs(hs) > 0.5:
        raise ValueError(f"|hue_shift| must be <= 0.5, got {hs}")
    out = img.astype(np.float64)
    if b != 1.0:
        out = np.clip(out * b, 0.0, 1.0)
    if s != 1.0:
        luma = (out @ LUMA)[..., None]
        out = np.clip(luma + s * (out - luma), 0.0, 1.0)
    if hs != 0.0:
        hsv = rgb_to_hsv(out)
        hsv[..., 0] = (hsv[..., 0] + hs) % 1.0
        out = hsv_to_rgb(hsv)
    return np.clip(out, 0.0, 1.0).astype(img.dtype)


def contrast(img: np.ndarray, factor: float) -> np.ndarray:
    """Scale deviations from the global mean luma by ``factor``."""
    if factor < 0:
        raise ValueError(f"contrast factor must be >= 0, got {factor}")
    if factor == 1.0:
        return img.copy()
    src = img.astype(np.float64)
    m = float((src @ LUMA).mean())
    return np.clip(m + factor * (src - m), 0.0, 1.0).astype(img.dtype)


def budget_shape(h: int, w: int, max_pixels: int) -> tuple[int, int]:
    """Largest aspect-preserving (H', W') with H' * W' <= max_pixels."""
    if h * w <= max_pixels:
        return h, w

    def area(hh):
        return hh * max(1, int(round(hh * w / h)))

    # area is non-decreasing in H', so walk from the real-valued estimate
    hh = max(1, min(h, int(math.floor(h * math.sqrt(max_pixels / (h * w))))))
    while hh < h and area(hh + 1) <= max_pixels:
        hh += 1
    while hh > 1 and area(hh) > max_pixels:
        hh -= 1
    if area(hh) > max_pixels:
        return 1, max(1, min(w, max_pixels))
    return hh, max(1, int(round(hh * w / h)))


def _lerp_axis(src: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = src.shape[axis]
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    a = pos - i0
    shape = [1] * src.ndim
    shape[axis] = n_out
    a = a.reshape(shape)
    lo = np.take(src, i0, axis=axis)
    hi = np.take(src, i1, axis=axis)
    return lo + a * (hi - lo)


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resampling."""
    src = img.astype(np.float64)
    out = _lerp_axis(src, out_h, 0)
    out = _lerp_axis(out, out_w, 1)
    return out.astype(img.dtype)


def resize_budget(img: np.ndarray, max_pixels: int) -> np.ndarray:
    if max_pixels < 64:
        raise ValueError(f"max_pixels must be >= 64, got {max_pixels}")
    h, w = img.shape[:2]
    if h * w <= max_pixels:
        return img.copy()
    nh, nw = budget_shape(h, w, max_pixels)
    return np.clip(bilinear_resize(img, nh, nw), 0.0, 1.0)


# ------------------------------------------------------------------- specs

_IDENTITY: dict[str, dict[str, Any]] = {
    "gaussian_noise": {"sigma": 0.0},
    "gaussian_blur": {"radius": 0, "sigma_b": 1.0},
    "color_jitter": {"brightness": 1.0, "saturation": 1.0, "hue_shift": 0.0},
    "contrast": {"factor": 1.0},
    "resize_budget": {"max_pixels": 1 << 40},
}

_STOCHASTIC = {"gaussian_noise", "color_jitter"}


@dataclass(frozen=True)
class NoiseSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}")
        unknown = set(self.params) - set(_IDENTITY[self.kind])
        if unknown:
            raise ValueError(f"{self.kind}: unknown parameters {sorted(unknown)}")
        merged = {**_IDENTITY[self.kind], **self.params}
        object.__setattr__(self, "params", merged)

    @classmethod
    def identity(cls, kind: str) -> NoiseSpec:
        return cls(kind, dict(_IDENTITY[kind]))

    @property
    def stochastic(self) -> bool:
        return self.kind in _STOCHASTIC

    @property
    def label(self) -> str:
        args = ",".join(f"{k}={_fmt(v)}" for k, v in sorted(self.params.items()))
        return f"{self.kind}({args})"

    def apply(self, img: np.ndarray, seed: int | None = None) -> np.ndarray:
        p = self.params
        seed = self.seed if seed is None else seed
        if self.kind == "gaussian_noise":
            return gaussian_noise(img, p["sigma"], seed)
        if self.kind == "gaussian_blur":
            return gaussian_blur(img, int(p["radius"]), p["sigma_b"])
        if self.kind == "color_jitter":
            return color_jitter(img, p["brightness"], p["saturation"], p["hue_shift"], seed)
        if self.kind == "contrast":
            return contrast(img, p["factor"])
        return resize_budget(img, int(p["max_pixels"]))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": {k: _plain(v) for k, v in self.params.items()},
                "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> NoiseSpec:
        extra = set(d) - {"kind", "params", "seed"}
        if extra:
            raise ValueError(f"unknown NoiseSpec keys {sorted(extra)}")
        params = {k: tuple(v) if isinstance(v, list) else v for k, v in d.get("params", {}).items()}
        return cls(d["kind"], params, int(d.get("seed", 0)))


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return "[" + ":".join(_fmt(x) for x in v) + "]"
    return f"{v:g}" if isinstance(v, float) else str(v)


def apply_pipeline(img: np.ndarray, specs: list[NoiseSpec], seed: int | None = None) -> np.ndarray:
    """Apply several specs in the fixed pipeline order."""
    order = {k: i for i, k in enumerate(PIPELINE_ORDER)}
    out = img
    for i, spec in enumerate(sorted(specs, key=lambda s: order[s.kind])):
        out = spec.apply(out, None if seed is None else seed + i)
    return out


def default_grid() -> list[NoiseSpec]:
    """Severity sweep used by default noise campaigns."""
    grid = [NoiseSpec("gaussian_noise", {"sigma": s}) for s in (0.02, 0.05, 0.1)]
    grid += [NoiseSpec("gaussian_blur", {"radius": r, "sigma_b": r / 2}) for r in (1, 2, 3)]
    grid.append(NoiseSpec("color_jitter", {"brightness": (0.7, 1.3), "saturation": (0.7, 1.3),
                                           "hue_shift": (-0.1, 0.1)}))
    grid += [NoiseSpec("contrast", {"factor": f}) for f in (0.5, 1.5, 2.0)]
    return grid
