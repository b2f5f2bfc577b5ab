"""Data ingestion and synthesis.

Covers the OFF mesh format (including the glued ``OFF490 518 0`` header
malformation found in ModelNet40 files), area-weighted surface sampling,
PointNet-style augmentation, text/binary point-cloud files, manifests, and
deterministic synthetic datasets for desk-scale classification and
segmentation experiments.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .errors import ContractError, FormatError, ParseError


# ---------------------------------------------------------------------------
# meshes
# ---------------------------------------------------------------------------

@dataclass
class Mesh:
    vertices: np.ndarray            # (V, 3) float64
    faces: np.ndarray               # (F, 3) int64, fan-triangulated
    dropped_degenerate: int = 0     # zero-area faces removed on load


@dataclass
class PointCloud:
    points: np.ndarray                       # (N, c) float64, c in {3, 9}
    class_label: int | None = None
    point_labels: np.ndarray | None = None   # (N,) int64


@dataclass
class DatasetManifest:
    entries: list                    # (path, int label) or (path, label path)
    split: str = "train"
    class_names: list = field(default_factory=list)


def parse_off(text):
    """Parse OFF mesh text into a Mesh.

    Accepts the standard header, the glued ``OFF<counts>`` form, comments
    (#) and blank lines. Vertex lines carry exactly three reals; face lines
    carry a vertex count followed by exactly that many indices (polygons
    are fan-triangulated). Anything else raises ParseError with the line
    number; nothing is silently truncated.
    """
    tokens = []  # (line_number, token list)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            tokens.append((lineno, line.split()))

    if not tokens:
        raise ParseError("empty OFF file", line=1)
    lineno, head = tokens[0]
    if not head[0].startswith("OFF"):
        raise ParseError("missing OFF header", line=lineno)
    glued = head[0][3:]
    if glued or len(head) > 1:
        counts_tokens = ([glued] if glued else []) + head[1:]
        counts_line = lineno
        cursor = 1
    else:
        if len(tokens) < 2:
            raise ParseError("missing element counts", line=lineno)
        counts_line, counts_tokens = tokens[1]
        cursor = 2

    if len(counts_tokens) != 3:
        raise ParseError("element counts must be three integers", line=counts_line)
    try:
        n_vertices, n_faces, _ = (int(t) for t in counts_tokens)
    except ValueError:
        raise ParseError("element counts must be three integers", line=counts_line) from None
    if n_vertices < 0 or n_faces < 0:
        raise ParseError("element counts must be nonnegative", line=counts_line)

    body = tokens[cursor:]
    if len(body) < n_vertices + n_faces:
        raise ParseError(
            f"truncated file: expected {n_vertices} vertices and {n_faces} faces",
            line=body[-1][0] if body else counts_line)

    vertices = np.empty((n_vertices, 3), dtype=np.float64)
    for i in range(n_vertices):
        lineno, parts = body[i]
        if len(parts) != 3:
            raise ParseError(f"vertex needs exactly 3 coordinates, got {len(parts)}", line=lineno)
        try:
            vertices[i] = [float(p) for p in parts]
        except ValueError:
            raise ParseError("vertex coordinates must be reals", line=lineno) from None

    triangles = []
    dropped = 0
    for i in range(n_faces):
        lineno, parts = body[n_vertices + i]
        try:
            k = int(parts[0])
        except ValueError:
            raise ParseError("face must start with its vertex count", line=lineno) from None
        if k < 3:
            raise ParseError(f"face with {k} vertices", line=lineno)
        if len(parts) != k + 1:
            raise ParseError(f"face declares {k} vertices but has {len(parts) - 1}", line=lineno)
        try:
            idx = [int(p) for p in parts[1:]]
        except ValueError:
            raise ParseError("face indices must be integers", line=lineno) from None
        for j in idx:
            if not 0 <= j < n_vertices:
                raise ParseError(f"face index {j} out of range for {n_vertices} vertices",
                                 line=lineno)
        for a, b in zip(idx[1:-1], idx[2:]):
            tri = (idx[0], a, b)
            area = _triangle_area(vertices[tri[0]], vertices[tri[1]], vertices[tri[2]])
            if area == 0.0:
                dropped += 1
            else:
                triangles.append(tri)

    faces = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    return Mesh(vertices=vertices, faces=faces, dropped_degenerate=dropped)


def load_off(path):
    return parse_off(Path(path).read_text())


def _triangle_area(a, b, c):
    return 0.5 * float(np.linalg.norm(np.cross(b - a, c - a)))


def _face_areas(mesh):
    a = mesh.vertices[mesh.faces[:, 0]]
    b = mesh.vertices[mesh.faces[:, 1]]
    c = mesh.vertices[mesh.faces[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


def _sample_faces(mesh, n, rng):
    """Draw n surface points; returns (points, face index per point)."""
    areas = _face_areas(mesh)
    total = areas.sum()
    if mesh.faces.shape[0] == 0 or total <= 0.0:
        raise ContractError("mesh has no non-degenerate face to sample")
    face_idx = rng.choice(mesh.faces.shape[0], size=n, p=areas / total)
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    a = mesh.vertices[mesh.faces[face_idx, 0]]
    b = mesh.vertices[mesh.faces[face_idx, 1]]
    c = mesh.vertices[mesh.faces[face_idx, 2]]
    points = a + u[:, None] * (b - a) + v[:, None] * (c - a)
    return points, face_idx


def normalize_cloud(points):
    """Center to zero mean and scale to unit max radius."""
    centered = points - points.mean(axis=0)
    radius = np.linalg.norm(centered, axis=1).max()
    if radius > 0.0:
        centered /= radius
    return centered


def sample_surface(mesh, n, seed):
    """Area-weighted surface sampling with uniform barycentric placement,
    centered and scaled to the unit sphere."""
    if n < 1:
        raise ContractError("sample count must be positive")
    rng = rngmod.stream(seed, rngmod.SURFACE)
    points, _ = _sample_faces(mesh, n, rng)
    return PointCloud(points=normalize_cloud(points))


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass
class AugmentParams:
    translate_range: float = 0.2          # per-axis uniform in +-range
    scale_low: float = 2.0 / 3.0          # per-axis anisotropic scale
    scale_high: float = 3.0 / 2.0
    dropout_max: float = 0.875            # cap on the random dropout ratio

    def validate(self):
        if self.translate_range < 0 or not 0 < self.scale_low <= self.scale_high:
            raise ContractError("invalid augmentation ranges")
        if not 0 <= self.dropout_max < 1:
            raise ContractError("dropout_max must be in [0, 1)")


def augment(cloud, seed, params=None, *, _rng=None):
    """Random anisotropic scale, translation, and point dropout.

    Dropout picks a ratio uniform in [0, dropout_max]; dropped points have
    their coordinates replaced by the first surviving point so N is
    preserved. Labels are never touched. Deterministic given the seed.
    """
    params = params or AugmentParams()
    params.validate()
    rng = _rng if _rng is not None else rngmod.stream(seed, rngmod.AUGMENT)
    pts = np.array(cloud.points, dtype=np.float64)
    n = pts.shape[0]

    scale = rng.uniform(params.scale_low, params.scale_high, size=3)
    shift = rng.uniform(-params.translate_range, params.translate_range, size=3)
    pts[:, :3] = pts[:, :3] * scale + shift

    if params.dropout_max > 0.0:
        ratio = rng.random() * params.dropout_max
        dropped = rng.random(n) <= ratio
        if dropped.all():
            dropped[:] = False
        if dropped.any():
            first_survivor = int(np.nonzero(~dropped)[0][0])
            pts[dropped] = pts[first_survivor]

    return PointCloud(points=pts, class_label=cloud.class_label,
                      point_labels=None if cloud.point_labels is None
                      else np.array(cloud.point_labels))


# ---------------------------------------------------------------------------
# synthetic datasets
# ---------------------------------------------------------------------------

CLASS_NAMES = ("sphere", "cube", "cylinder", "cone", "torus", "plane",
               "helix", "cross")
JITTER_SIGMA = 0.01


@dataclass
class Dataset:
    """Stacked clouds with class labels and/or per-point labels."""

    points: np.ndarray                      # (M, N, c)
    labels: np.ndarray                      # (M,) class labels, or -1
    point_labels: np.ndarray | None = None  # (M, N)
    class_names: list = field(default_factory=list)

    def __len__(self):
        return self.points.shape[0]

    def cloud(self, i):
        return PointCloud(
            points=self.points[i],
            class_label=None if self.labels[i] < 0 else int(self.labels[i]),
            point_labels=None if self.point_labels is None else self.point_labels[i])


def _shape_sphere(rng, n):
    v = rng.normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _shape_cube(rng, n):
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.empty((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    for i in range(n):
        others = [d for d in range(3) if d != axis[i]]
        pts[i, axis[i]] = sign[i]
        pts[i, others[0]] = uv[i, 0]
        pts[i, others[1]] = uv[i, 1]
    return pts


def _shape_cylinder(rng, n):
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    z = rng.uniform(-1.0, 1.0, size=n)
    return np.stack([0.6 * np.cos(theta), 0.6 * np.sin(theta), z], axis=1)


def _shape_cone(rng, n):
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    t = np.sqrt(rng.random(n))  # area-uniform along the slant
    r = 0.8 * t
    z = 1.0 - 2.0 * t
    return np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def _shape_torus(rng, n):
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    phi = rng.uniform(0.0, 2.0 * np.pi, size=n)
    ring = 0.75 + 0.25 * np.cos(phi)
    return np.stack([ring * np.cos(theta), ring * np.sin(theta),
                     0.25 * np.sin(phi)], axis=1)


def _shape_plane(rng, n):
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    return np.stack([uv[:, 0], uv[:, 1], np.zeros(n)], axis=1)


def _shape_helix(rng, n):
    # Lives on the same radius-0.6 cylinder as _shape_cylinder; only the
    # local 1-D curve structure tells them apart.
    t = rng.uniform(0.0, 4.0 * np.pi, size=n)
    return np.stack([0.6 * np.cos(t), 0.6 * np.sin(t),
                     t / (2.0 * np.pi) - 1.0], axis=1)


def _shape_cross(rng, n):
    # Two orthogonal rectangles sharing the z axis.
    which = rng.random(n) < 0.5
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    pts = np.zeros((n, 3))
    pts[which, 0] = uv[which, 0]
    pts[which, 2] = uv[which, 1]
    pts[~which, 1] = uv[~which, 0]
    pts[~which, 2] = uv[~which, 1]
    return pts


_SHAPE_FNS = (_shape_sphere, _shape_cube, _shape_cylinder, _shape_cone,
              _shape_torus, _shape_plane, _shape_helix, _shape_cross)


def _base_cloud(class_id, rng, n_points):
    """Noise-free class prototype, centered and scaled to the unit sphere."""
    return normalize_cloud(_SHAPE_FNS[class_id](rng, n_points))


def _synth_split(seed, split_tag, n_per_class, n_points):
    n_classes = len(_SHAPE_FNS)
    points = np.empty((n_classes * n_per_class, n_points, 3))
    labels = np.empty(n_classes * n_per_class, dtype=np.int64)
    row = 0
    for class_id in range(n_classes):
        for i in range(n_per_class):
            rng = rngmod.stream(seed, split_tag, class_id, i)
            cloud = _base_cloud(class_id, rng, n_points)
            points[row] = cloud + rng.normal(scale=JITTER_SIGMA, size=cloud.shape)
            labels[row] = class_id
            row += 1
    return Dataset(points=points, labels=labels, class_names=list(CLASS_NAMES))


def synth_classification(seed, n_per_class, n_points):
    """Eight noisy geometric primitives; disjoint train/test streams."""
    train = _synth_split(seed, rngmod.SYNTH_TRAIN, n_per_class, n_points)
    test = _synth_split(seed, rngmod.SYNTH_TEST, max(1, n_per_class // 4), n_points)
    return train, test


SEG_PART_NAMES = ("knob", "stick", "sheet", "bar")


def _seg_lollipop(rng, n):
    n_knob = n // 2
    pts = np.empty((n, 3))
    labels = np.empty(n, dtype=np.int64)
    knob = _shape_sphere(rng, n_knob) * 0.45
    knob[:, 2] += 0.55
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n - n_knob)
    z = rng.uniform(-1.0, 0.2, size=n - n_knob)
    stick = np.stack([0.08 * np.cos(theta), 0.08 * np.sin(theta), z], axis=1)
    pts[:n_knob], labels[:n_knob] = knob, 0
    pts[n_knob:], labels[n_knob:] = stick, 1
    return pts, labels


def _seg_signpost(rng, n):
    n_sheet = n // 2
    pts = np.empty((n, 3))
    labels = np.empty(n, dtype=np.int64)
    uv = rng.uniform(-1.0, 1.0, size=(n_sheet, 2))
    sheet = np.stack([uv[:, 0] * 0.7, np.zeros(n_sheet), 0.4 + 0.4 * uv[:, 1]], axis=1)
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n - n_sheet)
    z = rng.uniform(-1.0, 0.0, size=n - n_sheet)
    post = np.stack([0.08 * np.cos(theta), 0.08 * np.sin(theta), z], axis=1)
    pts[:n_sheet], labels[:n_sheet] = sheet, 2
    pts[n_sheet:], labels[n_sheet:] = post, 1
    return pts, labels


def _seg_barbell(rng, n):
    n_bar = n // 3
    n_knob = (n - n_bar) // 2
    pts = np.empty((n, 3))
    labels = np.empty(n, dtype=np.int64)
    left = _shape_sphere(rng, n_knob) * 0.35
    left[:, 0] -= 0.8
    right = _shape_sphere(rng, n - n_bar - n_knob) * 0.35
    right[:, 0] += 0.8
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n_bar)
    x = rng.uniform(-0.6, 0.6, size=n_bar)
    bar = np.stack([x, 0.07 * np.cos(theta), 0.07 * np.sin(theta)], axis=1)
    pts[:n_knob], labels[:n_knob] = left, 0
    pts[n_knob:n - n_bar], labels[n_knob:n - n_bar] = right, 0
    pts[n - n_bar:], labels[n - n_bar:] = bar, 3
    return pts, labels


_SEG_FNS = (_seg_lollipop, _seg_signpost, _seg_barbell)


def synth_segmentation(seed, n_samples, n_points):
    """Composite shapes with per-point part labels (4 part classes)."""
    points = np.empty((n_samples, n_points, 3))
    point_labels = np.empty((n_samples, n_points), dtype=np.int64)
    for i in range(n_samples):
        rng = rngmod.stream(seed, rngmod.SYNTH_SEG, i)
        pts, labels = _SEG_FNS[i % len(_SEG_FNS)](rng, n_points)
        pts = normalize_cloud(pts)
        points[i] = pts + rng.normal(scale=JITTER_SIGMA, size=pts.shape)
        point_labels[i] = labels
    return Dataset(points=points, labels=np.full(n_samples, -1, dtype=np.int64),
                   point_labels=point_labels, class_names=list(SEG_PART_NAMES))


# ---------------------------------------------------------------------------
# point-cloud files
# ---------------------------------------------------------------------------

POINT_MAGIC = b"PCP1"
POINT_VERSION = 1
_FLAG_CLASS_LABEL = 1
_FLAG_POINT_LABELS = 2

_INT_TOKEN = frozenset("+-0123456789")


def _format_real(v):
    s = f"{v:.17g}"
    if not any(ch in s for ch in ".eE") and "nan" not in s and "inf" not in s:
        s += ".0"
    return s


def write_points_text(path, cloud):
    """One point per line: c reals, plus a trailing integer per-point label
    when present."""
    with open(path, "w") as fh:
        for i, row in enumerate(cloud.points):
            parts = [_format_real(v) for v in row]
            if cloud.point_labels is not None:
                parts.append(str(int(cloud.point_labels[i])))
            fh.write(" ".join(parts) + "\n")


def read_points_text(path):
    """Parse a text point file; the last column is taken as per-point
    labels when every entry is an integer literal."""
    rows = []
    width = None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if width is None:
                width = len(parts)
                if width < 3:
                    raise ParseError(f"point line has only {width} columns", line=lineno)
            elif len(parts) != width:
                raise ParseError(f"expected {width} columns, got {len(parts)}", line=lineno)
            rows.append((lineno, parts))
    if not rows:
        raise ParseError("empty point file", line=1)

    has_labels = width > 3 and all(set(parts[-1]) <= _INT_TOKEN for _, parts in rows)
    n_coords = width - 1 if has_labels else width
    points = np.empty((len(rows), n_coords))
    labels = np.empty(len(rows), dtype=np.int64) if has_labels else None
    for i, (lineno, parts) in enumerate(rows):
        try:
            points[i] = [float(p) for p in parts[:n_coords]]
            if has_labels:
                labels[i] = int(parts[-1])
        except ValueError:
            raise ParseError("malformed point record", line=lineno) from None
    return PointCloud(points=points, point_labels=labels)


def write_points_binary(path, cloud):
    """PCP1 container: magic, version, N, c, flags, optional class label,
    row-major little-endian float64 coordinates, optional int64 labels."""
    n, c = cloud.points.shape
    flags = 0
    if cloud.class_label is not None:
        flags |= _FLAG_CLASS_LABEL
    if cloud.point_labels is not None:
        flags |= _FLAG_POINT_LABELS
    with open(path, "wb") as fh:
        fh.write(POINT_MAGIC)
        fh.write(struct.pack("<IQQI", POINT_VERSION, n, c, flags))
        if cloud.class_label is not None:
            fh.write(struct.pack("<q", int(cloud.class_label)))
        fh.write(np.ascontiguousarray(cloud.points, dtype="<f8").tobytes())
        if cloud.point_labels is not None:
            fh.write(np.ascontiguousarray(cloud.point_labels, dtype="<i8").tobytes())


def read_points_binary(path):
    blob = Path(path).read_bytes()
    if blob[:4] != POINT_MAGIC:
        raise FormatError("bad point-file magic")
    version, n, c, flags = struct.unpack_from("<IQQI", blob, 4)
    if version != POINT_VERSION:
        raise FormatError(f"unsupported point-file version {version}")
    offset = 4 + struct.calcsize("<IQQI")
    class_label = None
    if flags & _FLAG_CLASS_LABEL:
        (class_label,) = struct.unpack_from("<q", blob, offset)
        offset += 8
    need = offset + 8 * n * c
    if len(blob) < need:
        raise FormatError("truncated point file")
    points = np.frombuffer(blob, dtype="<f8", count=n * c, offset=offset).reshape(n, c).copy()
    offset = need
    point_labels = None
    if flags & _FLAG_POINT_LABELS:
        if len(blob) < offset + 8 * n:
            raise FormatError("truncated point labels")
        point_labels = np.frombuffer(blob, dtype="<i8", count=n, offset=offset).copy()
    return PointCloud(points=points, class_label=class_label, point_labels=point_labels)


def write_points(path, cloud, fmt="binary"):
    if fmt == "binary":
        write_points_binary(path, cloud)
    elif fmt == "text":
        write_points_text(path, cloud)
    else:
        raise ContractError(f"unknown point format {fmt!r}")


def read_points(path, fmt=None):
    if fmt is None:
        with open(path, "rb") as fh:
            fmt = "binary" if fh.read(4) == POINT_MAGIC else "text"
    if fmt == "binary":
        return read_points_binary(path)
    if fmt == "text":
        return read_points_text(path)
    raise ContractError(f"unknown point format {fmt!r}")


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def write_manifest(path, manifest):
    with open(path, "w") as fh:
        for entry_path, label in manifest.entries:
            fh.write(f"{entry_path}\t{label}\n")


def read_manifest(path, split="train"):
    entries = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise ParseError("manifest line needs 'path<TAB>label'", line=lineno)
            entry_path, label = line.split("\t", 1)
            try:
                entries.append((entry_path, int(label)))
            except ValueError:
                entries.append((entry_path, label))  # per-point label file
    return DatasetManifest(entries=entries, split=split)


def load_manifest_dataset(manifest_path):
    """Materialize a manifest into a stacked Dataset; labels must all be
    class integers or all be per-point label paths."""
    manifest = read_manifest(manifest_path)
    base = Path(manifest_path).parent
    clouds, labels, point_labels = [], [], []
    for entry_path, label in manifest.entries:
        cloud = read_points(base / entry_path)
        clouds.append(cloud.points)
        if isinstance(label, int):
            labels.append(label)
        else:
            label_cloud = read_points(base / label)
            if label_cloud.point_labels is None:
                raise FormatError(f"label file {label!r} carries no per-point labels")
            point_labels.append(label_cloud.point_labels)
            labels.append(-1)
    points = np.stack(clouds)
    return Dataset(points=points,
                   labels=np.asarray(labels, dtype=np.int64),
                   point_labels=np.stack(point_labels) if point_labels else None)
