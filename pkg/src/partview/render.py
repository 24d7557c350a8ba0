"""Software rasterization of meshes into view sequences, plus the
part-colored renders that ground-truth part boxes are extracted from.

Rendering is deterministic: triangles are drawn in face order with a
strict z-test, so coplanar surfaces resolve to the first-drawn face.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, GeometryError
from .meshes import Mesh

BACKGROUND = 1.0  # white

# 64 flat part colors: a 4x4x4 RGB grid over {0, 80, 160, 240}, which can
# never collide with the 255-valued white background
_LEVELS = (0, 80, 160, 240)
PALETTE = np.array([(r, g, b) for r in _LEVELS for g in _LEVELS for b in _LEVELS],
                   dtype=np.float64) / 255.0


@dataclass(frozen=True)
class CameraRig:
    """V viewpoints on a ring: uniform azimuths, shared elevation/distance."""

    views: int = 12
    elevation_deg: float = 30.0
    distance: float = 2.5
    fov_deg: float = 40.0
    image_size: int = 64

    @property
    def azimuths_deg(self) -> np.ndarray:
        return np.arange(self.views) * (360.0 / self.views)

    def key(self) -> tuple:
        return (self.views, self.elevation_deg, self.distance, self.fov_deg, self.image_size)


@dataclass
class ViewSet:
    """Ordered view sequence; order matches azimuth order."""

    images: list[np.ndarray]  # V arrays of (H, W, 3) floats in [0, 1]
    rig: CameraRig


@dataclass(frozen=True)
class BBox:
    """Axis-aligned pixel box, max edges exclusive."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def area(self) -> float:
        return max(0.0, self.x_max - self.x_min) * max(0.0, self.y_max - self.y_min)

    def center_size(self) -> tuple[float, float, float, float]:
        return ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0,
                self.x_max - self.x_min, self.y_max - self.y_min)


def camera_basis(azimuth_deg: float, rig: CameraRig):
    """Camera position and orthonormal (right, up, forward) axes."""
    az = np.deg2rad(azimuth_deg)
    el = np.deg2rad(rig.elevation_deg)
    pos = rig.distance * np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
    forward = -pos / np.linalg.norm(pos)
    world_up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, world_up)
    norm = np.linalg.norm(right)
    if norm < 1e-12:  # looking straight down/up
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / norm
    up = np.cross(right, forward)
    return pos, right, up, forward


def project_points(points: np.ndarray, azimuth_deg: float, rig: CameraRig):
    """World points -> (pixel x, pixel y, camera depth).

    Perspective projection with the rig's vertical field of view; pixel x
    grows right, pixel y grows down; a point's pixel coordinates locate it
    in continuous image space where pixel (i, j) covers [j, j+1) x [i, i+1).
    """
    pos, right, up, forward = camera_basis(azimuth_deg, rig)
    rel = points - pos
    x_cam = rel @ right
    y_cam = rel @ up
    depth = rel @ forward
    t = np.tan(np.deg2rad(rig.fov_deg) / 2.0)
    half = rig.image_size / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        px = half + (x_cam / (depth * t)) * half
        py = half - (y_cam / (depth * t)) * half
    return px, py, depth


def _raster_triangle(color_buf, z_buf, pts2d, depths, colors):
    """Rasterize one triangle with screen-space barycentrics and a 1/z z-test."""
    h, w = z_buf.shape
    (x0, y0), (x1, y1), (x2, y2) = pts2d
    area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
    if abs(area) < 1e-12:
        return
    lo_x = max(int(np.floor(min(x0, x1, x2))), 0)
    hi_x = min(int(np.ceil(max(x0, x1, x2))), w)
    lo_y = max(int(np.floor(min(y0, y1, y2))), 0)
    hi_y = min(int(np.ceil(max(y0, y1, y2))), h)
    if lo_x >= hi_x or lo_y >= hi_y:
        return
    xs = np.arange(lo_x, hi_x) + 0.5
    ys = np.arange(lo_y, hi_y) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    w0 = ((x1 - x0) * (gy - y0) - (gx - x0) * (y1 - y0)) / area
    w1 = ((gx - x0) * (y2 - y0) - (x2 - x0) * (gy - y0)) / area
    w2 = 1.0 - w0 - w1
    inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
    if not inside.any():
        return
    # 1/z is affine in screen space, so barycentric interpolation is exact;
    # w2 weights vertex 0, w1 vertex 1, w0 vertex 2 with these edge functions
    inv_z = w2 * (1.0 / depths[0]) + w1 * (1.0 / depths[1]) + w0 * (1.0 / depths[2])
    z = 1.0 / inv_z
    region_z = z_buf[lo_y:hi_y, lo_x:hi_x]
    win = inside & (z < region_z)
    if not win.any():
        return
    region_z[win] = z[win]
    region_c = color_buf[lo_y:hi_y, lo_x:hi_x]
    region_c[win] = colors


def _render(mesh: Mesh, rig: CameraRig, face_colors: np.ndarray) -> list[np.ndarray]:
    size = rig.image_size
    images = []
    for az in rig.azimuths_deg:
        px, py, depth = project_points(mesh.vertices, az, rig)
        color = np.full((size, size, 3), BACKGROUND)
        zbuf = np.full((size, size), np.inf)
        for fi, face in enumerate(mesh.faces):
            d = depth[face]
            if np.any(d <= 1e-9):  # behind or at the camera plane
                continue
            pts = [(px[v], py[v]) for v in face]
            _raster_triangle(color, zbuf, pts, d, face_colors[fi])
        images.append(color)
    return images


def render_views(mesh: Mesh, rig: CameraRig) -> ViewSet:
    """Flat-shaded grayscale views; brightness = |face normal . view dir|."""
    verts = mesh.vertices
    if verts.shape[0] < 3:
        raise GeometryError("mesh has no renderable triangles")
    images = []
    size = rig.image_size
    for az in rig.azimuths_deg:
        pos, _, _, _ = camera_basis(az, rig)
        a = verts[mesh.faces[:, 0]]
        b = verts[mesh.faces[:, 1]]
        c = verts[mesh.faces[:, 2]]
        normals = np.cross(b - a, c - a)
        norms = np.linalg.norm(normals, axis=1, keepdims=True)
        norms[norms < 1e-15] = 1.0
        normals = normals / norms
        centroids = (a + b + c) / 3.0
        to_cam = pos - centroids
        to_cam = to_cam / np.linalg.norm(to_cam, axis=1, keepdims=True)
        brightness = np.abs(np.sum(normals * to_cam, axis=1))
        face_colors = np.repeat(brightness[:, None], 3, axis=1)

        px, py, depth = project_points(verts, az, rig)
        color = np.full((size, size, 3), BACKGROUND)
        zbuf = np.full((size, size), np.inf)
        for fi, face in enumerate(mesh.faces):
            d = depth[face]
            if np.any(d <= 1e-9):
                continue
            _raster_triangle(color, zbuf, [(px[v], py[v]) for v in face], d, face_colors[fi])
        images.append(color)
    return ViewSet(images, rig)


def render_part_colored(mesh: Mesh, rig: CameraRig) -> ViewSet:
    """Flat palette color per part label, one shared z-buffer per view."""
    labels = np.unique(mesh.part_labels)
    if labels.max() >= len(PALETTE):
        raise ConfigError(f"part label {labels.max()} exceeds palette size {len(PALETTE)}")
    face_colors = PALETTE[mesh.part_labels]
    return ViewSet(_render(mesh, rig, face_colors), rig)


def extract_part_bboxes(colored: np.ndarray) -> list[tuple[int, BBox]]:
    """Tight pixel boxes per palette color present in a part-colored view."""
    h, w, _ = colored.shape
    quant = np.rint(colored * 255.0).astype(np.int64)
    code = quant[:, :, 0] * 65536 + quant[:, :, 1] * 256 + quant[:, :, 2]
    bg_code = 255 * 65536 + 255 * 256 + 255
    palette_codes = (np.rint(PALETTE * 255).astype(np.int64) @ np.array([65536, 256, 1]))
    code_to_label = {int(c): i for i, c in enumerate(palette_codes)}

    present = np.unique(code)
    boxes = []
    for c in present:
        if c == bg_code:
            continue
        label = code_to_label.get(int(c))
        if label is None:
            raise DataError(f"off-palette pixel color code {int(c):06x}")
        ys, xs = np.nonzero(code == c)
        boxes.append((label, BBox(float(xs.min()), float(ys.min()),
                                  float(xs.max() + 1), float(ys.max() + 1))))
    boxes.sort(key=lambda t: t[0])
    return boxes


def clean_small_parts(boxes: list[tuple[int, BBox]],
                      category_of: dict[int, int] | None = None) -> list[tuple[int, BBox]]:
    """Drop boxes with area < 0.45 x the max box area of the same part category.

    ``category_of`` maps part label -> category (e.g. all four chair legs
    share one category); without it every label is its own category and
    nothing is removed.  The boundary is inclusive: area == 0.45 x max stays.
    """
    if not boxes:
        return []
    cat = (lambda label: category_of.get(label, label)) if category_of else (lambda label: label)
    max_area: dict[int, float] = {}
    for label, box in boxes:
        c = cat(label)
        max_area[c] = max(max_area.get(c, 0.0), box.area())
    return [(label, box) for label, box in boxes
            if box.area() >= 0.45 * max_area[cat(label)]]


def ground_truth_boxes(mesh: Mesh, rig: CameraRig,
                       category_of: dict[int, int] | None = None) -> list[list[BBox]]:
    """Cleaned per-view part boxes with labels collapsed to one class."""
    colored = render_part_colored(mesh, rig)
    per_view = []
    for img in colored.images:
        boxes = clean_small_parts(extract_part_bboxes(img), category_of)
        per_view.append([box for _, box in boxes])
    return per_view


def write_gt_csv(path: str, per_view: list[list[BBox]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["view_index", "x_min", "y_min", "x_max", "y_max"])
        for vi, boxes in enumerate(per_view):
            for b in boxes:
                writer.writerow([vi, int(b.x_min), int(b.y_min), int(b.x_max), int(b.y_max)])


def read_gt_csv(path: str) -> dict[int, list[BBox]]:
    if not os.path.exists(path):
        raise DataError(f"missing ground-truth file {path}")
    out: dict[int, list[BBox]] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["view_index", "x_min", "y_min", "x_max", "y_max"]:
            raise DataError(f"{path}: unexpected ground-truth header {header}")
        for row in reader:
            vi = int(row[0])
            out.setdefault(vi, []).append(
                BBox(float(row[1]), float(row[2]), float(row[3]), float(row[4])))
    return out


def draw_box_outline(image: np.ndarray, box: BBox, color=(1.0, 0.0, 0.0)) -> None:
    """1-pixel rectangle outline, in place; used by detection visualization."""
    h, w, _ = image.shape
    x0 = int(np.clip(box.x_min, 0, w - 1))
    x1 = int(np.clip(box.x_max - 1, 0, w - 1))
    y0 = int(np.clip(box.y_min, 0, h - 1))
    y1 = int(np.clip(box.y_max - 1, 0, h - 1))
    image[y0, x0:x1 + 1] = color
    image[y1, x0:x1 + 1] = color
    image[y0:y1 + 1, x0] = color
    image[y0:y1 + 1, x1] = color
