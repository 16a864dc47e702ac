"""Five-patch antenna design space and its three-channel raster image.

Image arrays are indexed ``[channel, row, col]`` with row 0 at y = 0 (the
bottom of the substrate) and col 0 at x = 0.  Channels are x-boundary,
y-boundary and binary interior.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgument

X_BOUND, Y_BOUND, INTERIOR = 0, 1, 2
DEFAULT_RES = 10
_COORD_DECIMALS = 9
_VALUE_DECIMALS = 12


@dataclass(frozen=True)
class Patch:
    size: tuple[float, float]
    x_range: tuple[float, float]
    y_range: tuple[float, float]


# sizes and bottom-left location ranges in mm
FIVE_PATCHES = (
    Patch((0.75, 5.49), (0.0, 10.0), (0.5, 0.5)),
    Patch((17.64, 1.7), (0.0, 12.36), (1.0, 4.7)),
    Patch((11.38, 3.0), (10.0, 18.62), (1.0, 3.0)),
    Patch((18.63, 0.56), (0.0, 11.37), (1.0, 5.44)),
    Patch((0.99, 2.43), (10.0, 29.01), (-2.0, 3.57)),
)


@dataclass(frozen=True)
class DesignVector:
    locations: np.ndarray  # (M, 2) bottom-left corners, mm

    def __post_init__(self):
        loc = np.asarray(self.locations, float).reshape(-1, 2)
        loc.setflags(write=False)
        object.__setattr__(self, "locations", loc)

    def flat(self) -> np.ndarray:
        return self.locations.ravel().copy()

    def to_dict(self) -> dict:
        return {"locations": self.locations.tolist()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d) -> "DesignVector":
        return cls(np.asarray(d["locations"] if isinstance(d, dict) else d, float))

    def __eq__(self, other):
        return isinstance(other, DesignVector) and np.array_equal(self.locations, other.locations)

    def __hash__(self):
        return hash(self.locations.tobytes())


@dataclass(frozen=True)
class DesignSpace:
    width: float = 30.0      # S_x
    height: float = 6.0      # S_y
    thickness: float = 1.6   # S_z; carried, not modelled by the oracle
    epsilon_r: float = 4.4
    patches: tuple[Patch, ...] = field(default=FIVE_PATCHES)

    @property
    def m(self) -> int:
        return len(self.patches)

    @property
    def lower(self) -> np.ndarray:
        return np.array([[p.x_range[0], p.y_range[0]] for p in self.patches]).ravel()

    @property
    def upper(self) -> np.ndarray:
        return np.array([[p.x_range[1], p.y_range[1]] for p in self.patches]).ravel()

    def design(self, locations, tol: float = 1e-9) -> DesignVector:
        """Validated design; out-of-range locations are rejected."""
        loc = np.asarray(locations, float).reshape(-1, 2)
        if loc.shape[0] != self.m:
            raise InvalidArgument(f"expected {self.m} patch locations", got=loc.shape[0])
        flat = loc.ravel()
        bad = np.flatnonzero((flat < self.lower - tol) | (flat > self.upper + tol))
        if bad.size:
            i = int(bad[0])
            raise InvalidArgument(f"patch {i // 2 + 1} {'xy'[i % 2]}-location {flat[i]} outside "
                                  f"[{self.lower[i]}, {self.upper[i]}]", index=i)
        return DesignVector(loc)

    def clamp(self, flat) -> np.ndarray:
        return np.clip(np.asarray(flat, float), self.lower, self.upper)

    def port(self, design: DesignVector) -> tuple[float, float]:
        """Port location: bottom-left corner of patch 1."""
        x, y = design.locations[0]
        return float(x), float(y)

    def rectangles(self, design: DesignVector) -> np.ndarray:
        """(M, 4) array of ``x_bl, y_bl, x_tr, y_tr`` in mm."""
        sizes = np.array([p.size for p in self.patches])
        return np.concatenate([design.locations, design.locations + sizes], axis=1)


def sample_design(space: DesignSpace, seed) -> DesignVector:
    rng = np.random.default_rng(seed)
    return DesignVector(rng.uniform(space.lower, space.upper).reshape(-1, 2))


@dataclass(frozen=True, eq=False)
class AntennaImage:
    channels: np.ndarray  # (3, H, W)
    resolution: int

    @property
    def height(self) -> int:
        return self.channels.shape[1]

    @property
    def width(self) -> int:
        return self.channels.shape[2]


def _floor_frac(v: float):
    v = round(v, _COORD_DECIMALS)
    f = int(np.floor(v))
    return f, v - f


def _patch_layers(rect, res: int, h: int, w: int):
    xb = np.zeros((h, w))
    yb = np.zeros((h, w))
    inside = np.zeros((h, w), bool)
    x0, fx0 = _floor_frac(rect[0] * res)
    y0, fy0 = _floor_frac(rect[1] * res)
    x1, fx1 = _floor_frac(rect[2] * res)
    y1, fy1 = _floor_frac(rect[3] * res)
    vl = round(1.0 - fx0, _VALUE_DECIMALS)
    vr = round(fx1, _VALUE_DECIMALS)
    vb = round(1.0 - fy0, _VALUE_DECIMALS)
    vt = round(fy1, _VALUE_DECIMALS)

    rows = slice(max(y0, 0), min(y1 + 1, h))
    cols = slice(max(x0, 0), min(x1 + 1, w))
    # out-of-substrate edges are dropped, never redrawn at the substrate edge
    if 0 <= x0 < w:
        xb[rows, x0] = vl
    if 0 <= x1 < w:
        xb[rows, x1] = np.maximum(xb[rows, x1], vr)
    if 0 <= y0 < h:
        yb[y0, cols] = vb
    if 0 <= y1 < h:
        yb[y1, cols] = np.maximum(yb[y1, cols], vt)
    ir = slice(max(y0 + 1, 0), max(min(y1, h), 0))
    ic = slice(max(x0 + 1, 0), max(min(x1, w), 0))
    inside[ir, ic] = True
    return xb, yb, inside


def rasterize_rectangles(rects, width_mm: float, height_mm: float, res: int) -> AntennaImage:
    h = int(round(height_mm * res))
    w = int(round(width_mm * res))
    xb = np.zeros((h, w))
    yb = np.zeros((h, w))
    inside = np.zeros((h, w), bool)
    for rect in np.asarray(rects, float).reshape(-1, 4):
        px, py, pin = _patch_layers(rect, res, h, w)
        np.maximum(xb, px, out=xb)
        np.maximum(yb, py, out=yb)
        inside |= pin
    # overlapping patches merge: edges covered by any interior disappear
    xb[inside] = 0.0
    yb[inside] = 0.0
    return AntennaImage(np.stack([xb, yb, inside.astype(float)]), res)


def rasterize(space: DesignSpace, design: DesignVector, res: int = DEFAULT_RES) -> AntennaImage:
    return rasterize_rectangles(space.rectangles(design), space.width, space.height, res)


def image_statistics(img: AntennaImage) -> dict:
    ch = img.channels
    names = ("x_boundary", "y_boundary", "interior")
    out = {n: {"min": float(ch[i].min()), "max": float(ch[i].max()), "sum": float(ch[i].sum())}
           for i, n in enumerate(names)}
    out["interior_area"] = int(np.count_nonzero(ch[INTERIOR]))
    out["shape"] = [int(s) for s in ch.shape]
    return out


def to_pgm(plane: np.ndarray) -> bytes:
    """8-bit binary PGM; rows flipped so +y points up in viewers."""
    data = np.clip(np.rint(np.asarray(plane, float) * 255.0), 0, 255).astype(np.uint8)[::-1]
    h, w = data.shape
    return f"P5\n{w} {h}\n255\n".encode() + data.tobytes()


def from_pgm(blob: bytes) -> np.ndarray:
    parts = blob.split(b"\n", 3)
    w, h = (int(v) for v in parts[1].split())
    data = np.frombuffer(parts[3], np.uint8, count=w * h).reshape(h, w)[::-1]
    return data.astype(float) / 255.0
