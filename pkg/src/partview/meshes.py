"""Part-labeled triangle meshes: OFF file I/O and procedural shape families.

The procedural families stand in for a real fine-grained dataset: every
shape is a composition of labeled cuboids, and subcategories of a family
differ only by disjoint parameter regimes, so the inter-subcategory
variance is small by construction while the intra-subcategory variance
comes from the per-shape random sampling.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, GeometryError, ParseError

# vertex coordinates are quantized to 9 significant decimal digits at
# generation time so OFF text round-trips are exact
_COORD_FMT = "%.9g"


@dataclass
class Mesh:
    vertices: np.ndarray  # (N, 3) float64
    faces: np.ndarray     # (M, 3) int64, triangles
    part_labels: np.ndarray  # (M,) int64, one label per face

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.part_labels = np.asarray(self.part_labels, dtype=np.int64).reshape(-1)
        if self.faces.shape[0] < 1:
            raise GeometryError("mesh must contain at least one face")
        if self.part_labels.shape[0] != self.faces.shape[0]:
            raise GeometryError(
                f"{self.part_labels.shape[0]} labels for {self.faces.shape[0]} faces")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise GeometryError("face index out of vertex range")


def load_off(path: str) -> Mesh:
    """Parse an ASCII OFF file; polygons are fan-triangulated.

    A ``<path>.lbl`` sidecar (one integer per line, one line per
    post-triangulation face) supplies part labels; without it every face
    gets label 0.
    """
    with open(path, "r", encoding="utf-8") as fh:
        raw_lines = fh.readlines()

    lines = []  # (line_number, content) with comments/blanks removed
    for i, line in enumerate(raw_lines, start=1):
        stripped = line.split("#", 1)[0].strip()
        if stripped:
            lines.append((i, stripped))

    if not lines or lines[0][1] != "OFF":
        ln = lines[0][0] if lines else 1
        raise ParseError(f"{path}:{ln}: expected 'OFF' header")
    if len(lines) < 2:
        raise ParseError(f"{path}: missing counts line")
    ln, counts = lines[1]
    parts = counts.split()
    if len(parts) < 2:
        raise ParseError(f"{path}:{ln}: counts line needs vertex and face counts")
    try:
        n_vertices, n_faces = int(parts[0]), int(parts[1])
    except ValueError:
        raise ParseError(f"{path}:{ln}: non-integer counts {counts!r}") from None

    if len(lines) < 2 + n_vertices + n_faces:
        raise ParseError(f"{path}: truncated, expected {n_vertices} vertices and {n_faces} faces")

    vertices = np.zeros((n_vertices, 3))
    for vi in range(n_vertices):
        ln, text = lines[2 + vi]
        fields = text.split()
        if len(fields) < 3:
            raise ParseError(f"{path}:{ln}: vertex line needs 3 coordinates")
        try:
            vertices[vi] = [float(fields[0]), float(fields[1]), float(fields[2])]
        except ValueError:
            raise ParseError(f"{path}:{ln}: bad vertex coordinate in {text!r}") from None

    triangles: list[tuple[int, int, int]] = []
    for fi in range(n_faces):
        ln, text = lines[2 + n_vertices + fi]
        fields = text.split()
        try:
            k = int(fields[0])
            idx = [int(v) for v in fields[1:1 + k]]
        except (ValueError, IndexError):
            raise ParseError(f"{path}:{ln}: bad face line {text!r}") from None
        if len(idx) != k or k < 3:
            raise ParseError(f"{path}:{ln}: face declares {k} vertices, got {len(idx)}")
        for v in idx:
            if v < 0 or v >= n_vertices:
                raise ParseError(f"{path}:{ln}: face index {v} out of range [0,{n_vertices})")
        # fan triangulation from the first vertex
        for a, b in zip(idx[1:-1], idx[2:]):
            triangles.append((idx[0], a, b))

    faces = np.array(triangles, dtype=np.int64)
    labels = np.zeros(len(faces), dtype=np.int64)

    label_path = path + ".lbl"
    if os.path.exists(label_path):
        with open(label_path, "r", encoding="utf-8") as fh:
            label_lines = [l.strip() for l in fh if l.strip()]
        if len(label_lines) != len(faces):
            raise ParseError(
                f"{label_path}: {len(label_lines)} labels for {len(faces)} triangulated faces")
        try:
            labels = np.array([int(l) for l in label_lines], dtype=np.int64)
        except ValueError:
            raise ParseError(f"{label_path}: non-integer label") from None

    return Mesh(vertices, faces, labels)


def write_off(mesh: Mesh, path: str, with_labels: bool = True) -> None:
    """Write mesh as ASCII OFF (9 significant digits) plus .lbl sidecar."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("OFF\n")
        fh.write(f"{len(mesh.vertices)} {len(mesh.faces)} 0\n")
        for v in mesh.vertices:
            fh.write(" ".join(_COORD_FMT % c for c in v) + "\n")
        for f in mesh.faces:
            fh.write(f"3 {f[0]} {f[1]} {f[2]}\n")
    if with_labels:
        with open(path + ".lbl", "w", encoding="utf-8", newline="\n") as fh:
            for l in mesh.part_labels:
                fh.write(f"{l}\n")


def normalize_mesh(mesh: Mesh) -> Mesh:
    """Center on the bounding-box midpoint and scale the bounding sphere to radius 1."""
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    if np.allclose(lo, hi, atol=0.0):
        raise GeometryError("mesh has zero extent")
    centered = mesh.vertices - (lo + hi) / 2.0
    radius = float(np.max(np.linalg.norm(centered, axis=1)))
    if radius <= 0.0:
        raise GeometryError("mesh bounding sphere has zero radius")
    return Mesh(centered / radius, mesh.faces.copy(), mesh.part_labels.copy())


# ---------------------------------------------------------------------------
# procedural families

_CUBE_FACES = np.array([
    [0, 1, 2], [0, 2, 3],  # bottom (y = lo)
    [4, 6, 5], [4, 7, 6],  # top (y = hi)
    [0, 4, 5], [0, 5, 1],  # z = lo side
    [3, 2, 6], [3, 6, 7],  # z = hi side
    [0, 3, 7], [0, 7, 4],  # x = lo side
    [1, 5, 6], [1, 6, 2],  # x = hi side
], dtype=np.int64)


def _cuboid(center, size):
    cx, cy, cz = center
    sx, sy, sz = (s / 2.0 for s in size)
    verts = np.array([
        [cx - sx, cy - sy, cz - sz],
        [cx + sx, cy - sy, cz - sz],
        [cx + sx, cy - sy, cz + sz],
        [cx - sx, cy - sy, cz + sz],
        [cx - sx, cy + sy, cz - sz],
        [cx + sx, cy + sy, cz - sz],
        [cx + sx, cy + sy, cz + sz],
        [cx - sx, cy + sy, cz + sz],
    ])
    return verts, _CUBE_FACES.copy()


@dataclass(frozen=True)
class ShapeFamily:
    """A generator recipe: named parts plus per-subcategory parameter regimes.

    ``param_ranges`` maps parameter name -> (low, high); shapes sample each
    parameter uniformly.  Subcategories of the same family share the
    parameter names but occupy disjoint regimes of the discriminative ones.
    """

    family_id: str
    subcategory_id: str
    param_ranges: dict[str, tuple[float, float]] = field(hash=False)
    part_names: tuple[str, ...] = ()
    # part label -> part category index (legs of a chair share one category)
    label_categories: dict[int, int] = field(default_factory=dict, hash=False)


def _chair_family(sub: str, back_lo: float, back_hi: float) -> ShapeFamily:
    ranges = {
        "seat_width": (0.85, 1.15),
        "seat_depth": (0.85, 1.15),
        "seat_thickness": (0.09, 0.15),
        "leg_height": (0.42, 0.58),
        "leg_thickness": (0.09, 0.15),
        "back_height": (back_lo, back_hi),
        "back_thickness": (0.07, 0.11),
    }
    return ShapeFamily(
        family_id="chair",
        subcategory_id=sub,
        param_ranges=ranges,
        part_names=("seat", "back", "leg_fl", "leg_fr", "leg_bl", "leg_br"),
        label_categories={0: 0, 1: 1, 2: 2, 3: 2, 4: 2, 5: 2},
    )


def _table_family(sub: str, leg_lo: float, leg_hi: float) -> ShapeFamily:
    ranges = {
        "top_width": (1.0, 1.4),
        "top_depth": (0.7, 1.0),
        "top_thickness": (0.06, 0.1),
        "leg_height": (leg_lo, leg_hi),
        "leg_thickness": (0.08, 0.13),
    }
    return ShapeFamily(
        family_id="table",
        subcategory_id=sub,
        param_ranges=ranges,
        part_names=("top", "leg_fl", "leg_fr", "leg_bl", "leg_br"),
        label_categories={0: 0, 1: 1, 2: 1, 3: 1, 4: 1},
    )


def _plane_family(sub: str, span_lo: float, span_hi: float) -> ShapeFamily:
    ranges = {
        "body_length": (1.3, 1.7),
        "body_width": (0.18, 0.26),
        "body_height": (0.18, 0.26),
        "wing_span": (span_lo, span_hi),
        "wing_chord": (0.28, 0.4),
        "wing_thickness": (0.04, 0.07),
        "tail_height": (0.25, 0.38),
        "tail_chord": (0.18, 0.26),
    }
    return ShapeFamily(
        family_id="plane",
        subcategory_id=sub,
        param_ranges=ranges,
        part_names=("body", "wing_l", "wing_r", "tail"),
        label_categories={0: 0, 1: 1, 2: 1, 3: 2},
    )


FAMILIES: dict[str, dict[str, ShapeFamily]] = {
    "chair": {
        "lowback": _chair_family("lowback", 0.18, 0.34),
        "midback": _chair_family("midback", 0.52, 0.72),
        "highback": _chair_family("highback", 0.95, 1.25),
    },
    "table": {
        "coffee": _table_family("coffee", 0.22, 0.34),
        "dining": _table_family("dining", 0.5, 0.66),
        "bar": _table_family("bar", 0.85, 1.05),
    },
    "plane": {
        "shortwing": _plane_family("shortwing", 0.7, 0.95),
        "midwing": _plane_family("midwing", 1.15, 1.45),
        "longwing": _plane_family("longwing", 1.7, 2.05),
    },
}


def get_family(family_id: str, subcategory_id: str) -> ShapeFamily:
    try:
        return FAMILIES[family_id][subcategory_id]
    except KeyError:
        raise ConfigError(f"unknown shape family {family_id!r}/{subcategory_id!r}") from None


def family_subcategories(family_id: str) -> list[str]:
    if family_id not in FAMILIES:
        raise ConfigError(f"unknown shape family {family_id!r}")
    return list(FAMILIES[family_id])


def sample_params(family: ShapeFamily, seed: int) -> dict[str, float]:
    """The parameter draw behind generate_shape, exposed for regime checks."""
    rng = np.random.default_rng(seed)
    # sorted order makes the draw independent of dict insertion order
    return {name: float(rng.uniform(lo, hi))
            for name, (lo, hi) in sorted(family.param_ranges.items())}


def _assemble(parts: list[tuple[np.ndarray, np.ndarray]]) -> Mesh:
    verts, faces, labels = [], [], []
    offset = 0
    for label, (v, f) in enumerate(parts):
        verts.append(v)
        faces.append(f + offset)
        labels.append(np.full(len(f), label, dtype=np.int64))
        offset += len(v)
    vertices = np.concatenate(verts, axis=0)
    # quantize so OFF text (9 significant digits) round-trips exactly
    vertices = np.array([[float(_COORD_FMT % c) for c in row] for row in vertices])
    return Mesh(vertices, np.concatenate(faces, axis=0), np.concatenate(labels))


def generate_shape(family: ShapeFamily, seed: int) -> Mesh:
    """Deterministic labeled cuboid assembly for (family, seed)."""
    p = sample_params(family, seed)
    builder = {
        "chair": _build_chair,
        "table": _build_table,
        "plane": _build_plane,
    }.get(family.family_id)
    if builder is None:
        raise ConfigError(f"unknown shape family {family.family_id!r}")
    return _assemble(builder(p))


def _build_chair(p):
    w, d = p["seat_width"], p["seat_depth"]
    st, lh, lt = p["seat_thickness"], p["leg_height"], p["leg_thickness"]
    bh, bt = p["back_height"], p["back_thickness"]
    seat = _cuboid((0.0, lh + st / 2, 0.0), (w, st, d))
    back = _cuboid((0.0, lh + st + bh / 2, -d / 2 + bt / 2), (w, bh, bt))
    legs = []
    for sx in (-1.0, 1.0):
        for sz in (-1.0, 1.0):
            cx = sx * (w / 2 - lt / 2)
            cz = sz * (d / 2 - lt / 2)
            legs.append(_cuboid((cx, lh / 2, cz), (lt, lh, lt)))
    # label order: seat 0, back 1, legs 2..5 (fl, fr, bl, br)
    return [seat, back] + legs


def _build_table(p):
    w, d = p["top_width"], p["top_depth"]
    tt, lh, lt = p["top_thickness"], p["leg_height"], p["leg_thickness"]
    top = _cuboid((0.0, lh + tt / 2, 0.0), (w, tt, d))
    legs = []
    for sx in (-1.0, 1.0):
        for sz in (-1.0, 1.0):
            legs.append(_cuboid((sx * (w / 2 - lt / 2), lh / 2, sz * (d / 2 - lt / 2)),
                                (lt, lh, lt)))
    return [top] + legs


def _build_plane(p):
    bl, bw, bhh = p["body_length"], p["body_width"], p["body_height"]
    span, chord, wt = p["wing_span"], p["wing_chord"], p["wing_thickness"]
    th, tc = p["tail_height"], p["tail_chord"]
    body = _cuboid((0.0, 0.0, 0.0), (bw, bhh, bl))
    wing_l = _cuboid((-(bw / 2 + span / 2), 0.0, 0.1), (span, wt, chord))
    wing_r = _cuboid((bw / 2 + span / 2, 0.0, 0.1), (span, wt, chord))
    tail = _cuboid((0.0, bhh / 2 + th / 2, -bl / 2 + tc / 2), (bw * 0.4, th, tc))
    return [body, wing_l, wing_r, tail]
