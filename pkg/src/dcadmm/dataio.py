"""Datasets, constraint specifications, file formats and metrics.

File formats
------------
features CSV
    One row per vertex, comma-separated decimals, optionally ending in a
    ``label:<int>`` cell.
labels
    One integer per line.
matrix binary
    Magic ``DCMX``, two little-endian uint32 (rows, cols), then row-major
    little-endian float64 values.
constraint spec
    JSON object with arrays ``balance_cliques`` (``members``, ``lower``,
    ``upper``), ``potts_edges`` (``i``, ``j``, ``weight``) and ``clamps``
    (``vertex``, ``label``).
images
    Binary PPM (P6) and PGM (P5) with maxval 255.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .core import BalanceClique, PairwisePotts, UnaryClamp

MOON_RADIUS = 1.0
MOON_OFFSET = 0.5
MOON_PAIR_SPACING = 2.0


class DataFormatError(ValueError):
    """Malformed input file; ``line`` is 1-based when known."""

    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        elif line is not None:
            where = f"line {line}: "
        super().__init__(where + message)
        self.path = path
        self.line = line


@dataclass
class Dataset:
    features: np.ndarray
    true_labels: Optional[np.ndarray] = None
    fixed_labels: Dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-d array")
        if not np.isfinite(self.features).all():
            raise ValueError("features must be finite")
        n = self.features.shape[0]
        if self.true_labels is not None:
            self.true_labels = np.asarray(self.true_labels, dtype=np.int64)
            if self.true_labels.shape != (n,):
                raise ValueError("true_labels length must match the feature rows")
        for v in self.fixed_labels:
            if not 0 <= v < n:
                raise ValueError(f"fixed label vertex {v} out of range")

    @property
    def n(self) -> int:
        return self.features.shape[0]


@dataclass
class ConstraintSpec:
    balance_cliques: List[BalanceClique] = field(default_factory=list)
    potts_edges: List[PairwisePotts] = field(default_factory=list)
    clamps: List[UnaryClamp] = field(default_factory=list)

    def terms(self) -> list:
        return [*self.clamps, *self.potts_edges, *self.balance_cliques]

    def to_dict(self) -> dict:
        return {
            "balance_cliques": [{"members": [int(m) for m in c.members],
                                 "lower": [int(v) for v in c.lower],
                                 "upper": [int(v) for v in c.upper]}
                                for c in self.balance_cliques],
            "potts_edges": [{"i": int(e.i), "j": int(e.j), "weight": float(e.weight)}
                            for e in self.potts_edges],
            "clamps": [{"vertex": int(c.vertex), "label": int(c.label)} for c in self.clamps],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ConstraintSpec":
        unknown = set(data) - {"balance_cliques", "potts_edges", "clamps"}
        if unknown:
            raise DataFormatError(f"unknown constraint keys: {sorted(unknown)}")
        try:
            return cls(
                balance_cliques=[BalanceClique(tuple(c["members"]), tuple(c["lower"]),
                                               tuple(c["upper"]))
                                 for c in data.get("balance_cliques", [])],
                potts_edges=[PairwisePotts(int(e["i"]), int(e["j"]), float(e["weight"]))
                             for e in data.get("potts_edges", [])],
                clamps=[UnaryClamp(int(c["vertex"]), int(c["label"]))
                        for c in data.get("clamps", [])],
            )
        except (KeyError, TypeError) as exc:
            raise DataFormatError(f"malformed constraint entry: {exc!r}") from exc

    @classmethod
    def from_fixed_labels(cls, fixed: Dict[int, int]) -> "ConstraintSpec":
        return cls(clamps=[UnaryClamp(v, l) for v, l in sorted(fixed.items())])


def save_constraints(path, spec: ConstraintSpec):
    Path(path).write_text(json.dumps(spec.to_dict(), indent=1) + "\n")


def load_constraints(path) -> ConstraintSpec:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(exc.msg, path, exc.lineno) from exc
    if not isinstance(data, dict):
        raise DataFormatError("constraint spec must be a JSON object", path)
    return ConstraintSpec.from_dict(data)


# -- synthetic data -----------------------------------------------------------

def moon_arc(label: int, theta):
    """Point on the arc of class ``label`` at angle ``theta`` in ``[0, pi]``.

    Classes come in interleaved pairs: an upper half circle of unit radius
    and a lower one shifted right by the radius and down by the offset.
    Pair ``p`` is lifted by ``p * MOON_PAIR_SPACING``.
    """
    theta = np.asarray(theta, dtype=np.float64)
    lift = (label // 2) * MOON_PAIR_SPACING
    if label % 2 == 0:
        x = MOON_RADIUS * np.cos(theta)
        y = MOON_RADIUS * np.sin(theta) + lift
    else:
        x = MOON_RADIUS * (1.0 - np.cos(theta))
        y = MOON_OFFSET - MOON_RADIUS * np.sin(theta) + lift
    return np.stack([x, y], axis=-1)


def distance_to_arc(points, label: int) -> np.ndarray:
    """Euclidean distance from each point to the arc of ``label``."""
    pts = np.asarray(points, dtype=np.float64)
    lift = (label // 2) * MOON_PAIR_SPACING
    if label % 2 == 0:
        c = np.array([0.0, lift])
        rel = pts - c
    else:
        c = np.array([MOON_RADIUS, MOON_OFFSET + lift])
        rel = c - pts
    # the arc is the upper half circle around c (in the rotated frame)
    ang = np.arctan2(rel[:, 1], rel[:, 0])
    inside = (ang >= 0) & (ang <= np.pi)
    radial = np.abs(np.hypot(rel[:, 0], rel[:, 1]) - MOON_RADIUS)
    ends = np.minimum(np.hypot(rel[:, 0] - MOON_RADIUS, rel[:, 1]),
                      np.hypot(rel[:, 0] + MOON_RADIUS, rel[:, 1]))
    return np.where(inside, radial, ends)


def generate_moons(n_per_class: int = 150, n_classes: int = 4, noise_sigma: float = 0.1,
                   seed=None) -> Dataset:
    """Interleaved half-circle arcs with isotropic Gaussian noise.

    Two classes give the usual two-moons picture; four stack a second
    pair above the first.
    """
    if n_classes not in (2, 4):
        raise ValueError("n_classes must be 2 or 4")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be nonnegative")
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for c in range(n_classes):
        theta = rng.uniform(0.0, math.pi, size=n_per_class)
        xs.append(moon_arc(c, theta))
        ys.append(np.full(n_per_class, c, dtype=np.int64))
    x = np.concatenate(xs)
    if noise_sigma > 0:
        x = x + rng.normal(scale=noise_sigma, size=x.shape)
    return Dataset(features=x, true_labels=np.concatenate(ys))


def generate_balance_cliques(true_labels, n_cliques: int, clique_size: int, slack: int,
                             seed=None, n_labels: Optional[int] = None) -> ConstraintSpec:
    """Random cliques whose per-label counts may deviate by ``slack`` from the truth."""
    y = np.asarray(true_labels, dtype=np.int64)
    n = len(y)
    if not 1 <= clique_size <= n:
        raise ValueError("clique_size must be in [1, |V|]")
    if slack < 0:
        raise ValueError("slack must be nonnegative")
    k = int(y.max()) + 1 if n_labels is None else n_labels
    rng = np.random.default_rng(seed)
    cliques = []
    for _ in range(n_cliques):
        members = np.sort(rng.choice(n, size=clique_size, replace=False))
        counts = np.bincount(y[members], minlength=k)
        lower = np.maximum(0, counts - slack)
        upper = np.minimum(clique_size, counts + slack)
        cliques.append(BalanceClique(tuple(int(m) for m in members),
                                     tuple(int(v) for v in lower),
                                     tuple(int(v) for v in upper)))
    return ConstraintSpec(balance_cliques=cliques)


def standardize(features) -> np.ndarray:
    """Zero mean and unit variance per column; constant columns are only centred."""
    x = np.asarray(features, dtype=np.float64)
    sd = x.std(axis=0)
    return (x - x.mean(axis=0)) / np.where(sd > 0, sd, 1.0)


# -- tabular files -----------------------------------------------------------

def load_features_csv(path) -> Dataset:
    rows, labels = [], []
    width = None
    with open(path, newline="") as fh:
        for lineno, cells in enumerate(csv.reader(fh), start=1):
            if not cells or all(not c.strip() for c in cells):
                continue
            label = None
            if cells[-1].strip().startswith("label:"):
                text = cells[-1].strip()[len("label:"):]
                try:
                    label = int(text)
                except ValueError:
                    raise DataFormatError(f"bad label cell {cells[-1]!r}", path, lineno) from None
                cells = cells[:-1]
            try:
                values = [float(c) for c in cells]
            except ValueError:
                bad = next(c for c in cells if not _is_float(c))
                raise DataFormatError(f"non-numeric cell {bad!r}", path, lineno) from None
            if not all(math.isfinite(v) for v in values):
                raise DataFormatError("non-finite value", path, lineno)
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise DataFormatError(f"expected {width} features, found {len(values)}",
                                      path, lineno)
            if labels and (label is None) != (labels[0] is None):
                raise DataFormatError("label column present on some rows only", path, lineno)
            rows.append(values)
            labels.append(label)
    if not rows:
        raise DataFormatError("no data rows", path)
    truth = None if labels[0] is None else np.array(labels, dtype=np.int64)
    return Dataset(np.array(rows, dtype=np.float64), truth)


def _is_float(text):
    try:
        float(text)
        return True
    except ValueError:
        return False


def save_features_csv(path, features, labels=None):
    x = np.asarray(features, dtype=np.float64)
    with open(path, "w", newline="") as fh:
        for i, row in enumerate(x):
            cells = [repr(float(v)) for v in row]
            if labels is not None:
                cells.append(f"label:{int(labels[i])}")
            fh.write(",".join(cells) + "\n")


_MATRIX_MAGIC = b"DCMX"


def save_matrix(path, matrix):
    m = np.ascontiguousarray(matrix, dtype="<f8")
    if m.ndim != 2:
        raise ValueError("matrix must be 2-d")
    with open(path, "wb") as fh:
        fh.write(_MATRIX_MAGIC + struct.pack("<II", *m.shape))
        fh.write(m.tobytes())


def load_matrix(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != _MATRIX_MAGIC or len(data) < 12:
        raise DataFormatError("not a DCMX matrix file", path)
    rows, cols = struct.unpack("<II", data[4:12])
    body = data[12:]
    if len(body) != 8 * rows * cols:
        raise DataFormatError(f"expected {rows}x{cols} values, file holds {len(body) // 8}",
                              path)
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(np.float64)


def load_dataset(path, format: str = "csv_features") -> Dataset:
    if format == "csv_features":
        return load_features_csv(path)
    if format == "matrix_binary":
        return Dataset(load_matrix(path))
    raise ValueError(f"unknown dataset format {format!r}")


def save_labels(path, labels):
    y = np.asarray(labels, dtype=np.int64)
    Path(path).write_text("".join(f"{int(v)}\n" for v in y))


def load_labels(path) -> np.ndarray:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            try:
                out.append(int(text))
            except ValueError:
                raise DataFormatError(f"not an integer label: {text!r}", path, lineno) from None
    return np.array(out, dtype=np.int64)


# -- images ----------------------------------------------------------------------

def _read_token(data, pos):
    while pos < len(data):
        ch = data[pos:pos + 1]
        if ch == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(data) and not data[pos:pos + 1].isspace():
        pos += 1
    return data[start:pos], pos


def read_pnm(path) -> np.ndarray:
    """Read a P6 (``h x w x 3``) or P5 (``h x w``) image with maxval 255."""
    data = Path(path).read_bytes()
    magic, pos = _read_token(data, 0)
    if magic not in (b"P5", b"P6"):
        raise DataFormatError(f"unsupported image magic {magic!r}; need P5 or P6", path)
    fields = []
    for _ in range(3):
        tok, pos = _read_token(data, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise DataFormatError(f"bad header field {tok!r}", path) from None
    w, h, maxval = fields
    if maxval != 255:
        raise DataFormatError(f"maxval must be 255, got {maxval}", path)
    pos += 1
    channels = 3 if magic == b"P6" else 1
    body = data[pos:pos + w * h * channels]
    if len(body) != w * h * channels:
        raise DataFormatError("truncated pixel data", path)
    img = np.frombuffer(body, dtype=np.uint8)
    return img.reshape(h, w, 3) if channels == 3 else img.reshape(h, w)


def write_pnm(path, image):
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    if img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    elif img.ndim == 2:
        magic = b"P5"
    else:
        raise ValueError("image must be h x w or h x w x 3")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(img).tobytes())


def grid_potts_edges(height: int, width: int, weight: float) -> List[PairwisePotts]:
    """4-connected grid edges in row-major vertex order."""
    idx = np.arange(height * width).reshape(height, width)
    pairs = [(idx[:, :-1].ravel(), idx[:, 1:].ravel()), (idx[:-1, :].ravel(), idx[1:, :].ravel())]
    return [PairwisePotts(int(i), int(j), float(weight))
            for a, b in pairs for i, j in zip(a, b)]


def image_features(image, coords: bool = True) -> np.ndarray:
    """Per-pixel ``(r, g, b[, x/width, y/height])`` scaled to ``[0, 1]``."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None].repeat(3, axis=2)
    h, w = img.shape[:2]
    feats = [img.reshape(-1, 3) / 255.0]
    if coords:
        yy, xx = np.mgrid[0:h, 0:w]
        feats.append(np.column_stack([xx.ravel() / max(w - 1, 1), yy.ravel() / max(h - 1, 1)]))
    return np.hstack(feats)


def load_image_problem(image_path, scribbles_path, potts_weight: float, coords: bool = True):
    """Pixel dataset and grid constraints from an image and a scribble mask.

    Scribble value ``v > 0`` clamps the pixel to label ``v - 1``; 0 leaves it
    free.  Returns ``(dataset, spec, shape, n_labels)``.
    """
    img = read_pnm(image_path)
    if img.ndim != 3:
        raise DataFormatError("image must be a colour P6 file", image_path)
    marks = read_pnm(scribbles_path)
    if marks.ndim != 2:
        raise DataFormatError("scribbles must be a P5 graymap", scribbles_path)
    if marks.shape != img.shape[:2]:
        raise DataFormatError(f"scribble size {marks.shape[::-1]} differs from image size "
                              f"{img.shape[1::-1]}", scribbles_path)
    h, w = marks.shape
    flat = marks.ravel().astype(np.int64)
    fixed = {int(i): int(flat[i]) - 1 for i in np.flatnonzero(flat)}
    n_labels = max(2, int(flat.max()))
    spec = ConstraintSpec(potts_edges=grid_potts_edges(h, w, potts_weight) if potts_weight > 0 else [],
                          clamps=[UnaryClamp(v, l) for v, l in sorted(fixed.items())])
    return Dataset(image_features(img, coords), fixed_labels=fixed), spec, (h, w), n_labels


# -- metrics -----------------------------------------------------------------

def metrics(pred, truth, exclude=None) -> dict:
    """Error rate over non-excluded vertices and intersection-over-union per class."""
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ValueError("prediction and truth lengths differ")
    keep = np.ones(len(pred), dtype=bool)
    if exclude is not None:
        keep[np.asarray(list(exclude), dtype=np.int64)] = False
    p, t = pred[keep], truth[keep]
    error = float(np.mean(p != t)) if len(p) else 0.0
    ious = {}
    for c in np.unique(t):
        inter = np.sum((p == c) & (t == c))
        union = np.sum((p == c) | (t == c))
        ious[int(c)] = float(inter / union) if union else 1.0
    mean_iou = float(np.mean(list(ious.values()))) if ious else 1.0
    return {"error_rate": error, "per_class_iou": ious, "mean_iou": mean_iou}
