"""Coordinate token format and prediction parsing.

Positions are milli-normalized integers 0..999 written with exactly
three digits per field: ``(xxx,yyy)`` for points and
``(x0,y0,x1,y1)`` (three digits each) for boxes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

_FIELDS = {"point": 2, "bbox": 4}


@dataclass(frozen=True)
class Point:
    x: int
    y: int


@dataclass(frozen=True)
class Box:
    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x0 + self.x1) / 2, (self.y0 + self.y1) / 2)


@dataclass(frozen=True)
class GroundingPrediction:
    raw_tokens: tuple[str, ...]
    parsed: Point | Box | None

    @property
    def valid(self) -> bool:
        return self.parsed is not None

    @property
    def text(self) -> str:
        return "".join(self.raw_tokens)

    def point(self) -> tuple[float, float] | None:
        """Predicted location in normalized [0, 1] units (box centre for boxes)."""
        if isinstance(self.parsed, Point):
            return (self.parsed.x / 1000.0, self.parsed.y / 1000.0)
        if isinstance(self.parsed, Box):
            cx, cy = self.parsed.center
            return (cx / 1000.0, cy / 1000.0)
        return None

    def to_dict(self) -> dict:
        d: dict = {"raw": self.text, "valid": self.valid}
        if isinstance(self.parsed, Point):
            d["point"] = [self.parsed.x, self.parsed.y]
        elif isinstance(self.parsed, Box):
            d["box"] = [self.parsed.x0, self.parsed.y0, self.parsed.x1, self.parsed.y1]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> GroundingPrediction:
        parsed: Point | Box | None = None
        if "point" in d:
            parsed = Point(*d["point"])
        elif "box" in d:
            parsed = Box(*d["box"])
        return cls(tuple(d["raw"]), parsed)


def parse_prediction(tokens: Sequence[str] | str, mode: str = "point") -> GroundingPrediction:
    """Strict parse; anything off-grammar yields an invalid prediction."""
    toks = tuple(tokens)
    n = _FIELDS[mode]
    expect = 2 + 3 * n + (n - 1)
    invalid = GroundingPrediction(toks, None)
    if len(toks) != expect or toks[0] != "(" or toks[-1] != ")":
        return invalid
    body = toks[1:-1]
    values = []
    for f in range(n):
        chunk = body[f * 4: f * 4 + 3]
        if len(chunk) != 3 or not all(len(c) == 1 and c.isdigit() for c in chunk):
            return invalid
        if f < n - 1 and body[f * 4 + 3] != ",":
            return invalid
        values.append(int("".join(chunk)))
    if mode == "point":
        return GroundingPrediction(toks, Point(*values))
    x0, y0, x1, y1 = values
    if x0 > x1 or y0 > y1:
        return invalid
    return GroundingPrediction(toks, Box(x0, y0, x1, y1))


def to_milli(v: float) -> int:
    return min(999, max(0, int(round(v * 1000))))


def format_point(x: float, y: float) -> str:
    return f"({to_milli(x):03d},{to_milli(y):03d})"


def format_box(x0: float, y0: float, x1: float, y1: float) -> str:
    return f"({to_milli(x0):03d},{to_milli(y0):03d},{to_milli(x1):03d},{to_milli(y1):03d})"


def target_string(bbox: Sequence[float], mode: str) -> str:
    """Ground-truth output string for a normalized element box."""
    x0, y0, x1, y1 = bbox
    if mode == "point":
        return format_point((x0 + x1) / 2, (y0 + y1) / 2)
    return format_box(x0, y0, x1, y1)
