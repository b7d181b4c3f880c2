"""Mesh containers, Procrustes alignment, normals and cylindrical unwrapping.

Conventions: the vertical axis is ``y``, the face looks down ``+z`` and the
unwrap seam sits at the back (``-z``) of the template.
"""
from dataclasses import dataclass, field
import logging
import math
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import (AlignmentDegenerateError, InputError,
                     NormalizationDegenerateError, UnwrapFoldError)

logger = logging.getLogger(__name__)

FALLBACK_NORMAL = np.array([0.0, 0.0, 1.0])


@dataclass
class Mesh:
    """Triangle mesh in dense correspondence with a named template topology."""

    vertices: np.ndarray
    faces: np.ndarray
    topology_id: str = "default"

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise InputError(f"vertices must be N x 3, got {self.vertices.shape}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise InputError(f"faces must be M x 3, got {self.faces.shape}")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise InputError("face indices out of range")

    @property
    def n_vertices(self):
        return len(self.vertices)

    def with_vertices(self, vertices):
        return Mesh(vertices, self.faces, self.topology_id)

    def face_areas(self):
        v = self.vertices
        cross = np.cross(v[self.faces[:, 1]] - v[self.faces[:, 0]],
                         v[self.faces[:, 2]] - v[self.faces[:, 0]])
        return 0.5 * np.linalg.norm(cross, axis=1)


@dataclass
class SimilarityTransform:
    """``x -> scale * rotation @ x + translation``."""

    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if not self.scale > 0:
            raise InputError(f"scale must be positive, got {self.scale}")

    def apply(self, points):
        return self.scale * np.asarray(points) @ self.rotation.T + self.translation

    def compose(self, inner):
        """Return ``self ∘ inner``."""
        return SimilarityTransform(
            self.scale * inner.scale,
            self.rotation @ inner.rotation,
            self.scale * self.rotation @ inner.translation + self.translation,
        )

    def inverse(self):
        rt = self.rotation.T
        return SimilarityTransform(1.0 / self.scale, rt, -(rt @ self.translation) / self.scale)

    def is_valid(self, atol=1e-9):
        r = self.rotation
        return (self.scale > 0
                and np.allclose(r.T @ r, np.eye(3), atol=atol)
                and abs(np.linalg.det(r) - 1.0) <= atol)


def _check_same_topology(meshes):
    first = meshes[0]
    for m in meshes[1:]:
        if (m.topology_id != first.topology_id or m.vertices.shape != first.vertices.shape
                or not np.array_equal(m.faces, first.faces)):
            raise InputError("meshes do not share a topology")


def procrustes_fit(source, reference):
    """Closed-form least-squares similarity mapping point set ``source`` onto ``reference``."""
    source = np.asarray(source, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    mu_s = source.mean(axis=0)
    mu_r = reference.mean(axis=0)
    xs = source - mu_s
    xr = reference - mu_r
    sv = np.linalg.svd(xs, compute_uv=False)
    if sv[0] == 0.0 or sv[1] <= 1e-12 * sv[0]:
        raise AlignmentDegenerateError("source points are coincident or collinear")
    u, sigma, vt = np.linalg.svd(xs.T @ xr)
    d = np.ones(3)
    if np.linalg.det(vt.T @ u.T) < 0:
        d[2] = -1.0
    rotation = (vt.T * d) @ u.T
    scale = float((sigma * d).sum() / (xs * xs).sum())
    if scale <= 0:
        raise AlignmentDegenerateError("optimal scale is not positive")
    translation = mu_r - scale * rotation @ mu_s
    return SimilarityTransform(scale, rotation, translation)


def similarity_align_pair(source, reference):
    """Align ``source`` to ``reference`` by the optimal similarity transform.

    Returns
    -------
    transform : SimilarityTransform
    aligned : Mesh
        ``transform`` applied to ``source``.
    """
    _check_same_topology([source, reference])
    transform = procrustes_fit(source.vertices, reference.vertices)
    return transform, source.with_vertices(transform.apply(source.vertices))


class GPAResult(NamedTuple):
    aligned: list
    transforms: list
    consensus: Mesh
    residuals: list


def _rescale_about_centroid(points, size):
    centroid = points.mean(axis=0)
    centered = points - centroid
    return centroid + centered * (size / np.linalg.norm(centered))


def gpa_align(meshes, max_iters=100, tol=1e-7):
    """Generalized Procrustes analysis of a mesh corpus.

    The consensus starts as the first mesh. Each iteration aligns every mesh
    to the consensus, replaces the consensus with the vertex-wise mean and
    restores the consensus centroid size of the first mesh, which keeps the
    scheme from shrinking towards zero. ``residuals[k]`` is
    ``sum_i ||aligned_i - consensus_k||^2`` after the k-th alignment pass.
    Iteration stops once the Frobenius norm of the consensus update drops
    below ``tol`` or after ``max_iters`` passes.
    """
    meshes = list(meshes)
    if len(meshes) < 2:
        raise InputError("gpa_align needs at least two meshes")
    _check_same_topology(meshes)

    consensus = meshes[0].vertices.copy()
    size = np.linalg.norm(consensus - consensus.mean(axis=0))
    if size == 0:
        raise AlignmentDegenerateError("reference mesh is degenerate")

    residuals = []
    for _ in range(max(1, max_iters)):
        transforms = [procrustes_fit(m.vertices, consensus) for m in meshes]
        aligned = np.stack([t.apply(m.vertices) for t, m in zip(transforms, meshes)])
        residuals.append(float(((aligned - consensus) ** 2).sum()))
        updated = _rescale_about_centroid(aligned.mean(axis=0), size)
        movement = np.linalg.norm(updated - consensus)
        consensus = updated
        if movement < tol:
            break

    template = meshes[0]
    return GPAResult(
        [template.with_vertices(a) for a in aligned],
        transforms,
        template.with_vertices(consensus),
        residuals,
    )


def normalize_corpus_scale(meshes):
    """Scale a corpus by one global factor so that ``max |coordinate| == 1``.

    Returns the scaled meshes and the factor that was applied; divide by it
    to recover model units.
    """
    meshes = list(meshes)
    peak = max((float(np.abs(m.vertices).max()) for m in meshes), default=0.0)
    if peak == 0.0:
        raise NormalizationDegenerateError("corpus has no nonzero coordinate")
    factor = 1.0 / peak
    scaled = []
    for m in meshes:
        v = m.vertices * factor
        # Pin the extreme coordinate to exactly +/-1 despite rounding.
        v[np.abs(m.vertices) == peak] = np.sign(m.vertices[np.abs(m.vertices) == peak])
        scaled.append(m.with_vertices(v))
    return scaled, factor


def compute_vertex_normals(mesh, return_fallback_count=False):
    """Area-weighted per-vertex normals.

    Vertices with no accumulated normal (isolated or only touching
    degenerate faces) receive ``+z`` and are reported in the log.
    """
    v = mesh.vertices
    f = mesh.faces
    # The unnormalized cross product already carries twice the face area.
    face_n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    acc = np.zeros_like(v)
    for k in range(3):
        np.add.at(acc, f[:, k], face_n)
    norms = np.linalg.norm(acc, axis=1)
    bad = norms <= 1e-300
    normals = np.empty_like(acc)
    normals[~bad] = acc[~bad] / norms[~bad, None]
    normals[bad] = FALLBACK_NORMAL
    n_bad = int(bad.sum())
    if n_bad:
        logger.warning("%d vertices had no incident area; using +z fallback normals", n_bad)
    if return_fallback_count:
        return normals, n_bad
    return normals


@dataclass
class UVLayout:
    """Per-vertex texture coordinates of a template topology."""

    uv: np.ndarray
    topology_id: str = "default"

    def __post_init__(self):
        self.uv = np.asarray(self.uv, dtype=np.float64)
        if self.uv.ndim != 2 or self.uv.shape[1] != 2:
            raise InputError(f"uv must be N x 2, got {self.uv.shape}")
        if self.uv.size and (self.uv.min() < 0.0 or self.uv.max() > 1.0):
            raise InputError("uv coordinates must lie in [0, 1]")

    @property
    def n_vertices(self):
        return len(self.uv)


def cylindrical_unwrap(template):
    """Cylindrical UV coordinates of a y-up, z-forward template mesh.

    ``u`` is the azimuth about the vertical axis through the template
    centroid with ``+z`` at ``u = 0.5`` and the seam at the back; ``v`` is
    the height rescaled to ``[0, 1]``.

    Raises
    ------
    UnwrapFoldError
        If a triangle spans more than half the ``u`` range, i.e. crosses
        the seam.
    """
    v = template.vertices
    centroid = v.mean(axis=0)
    azimuth = np.arctan2(v[:, 0] - centroid[0], v[:, 2] - centroid[2])
    u = 0.5 + azimuth / (2.0 * math.pi)
    y = v[:, 1]
    span = y.max() - y.min()
    if span <= 0:
        raise InputError("template has no vertical extent")
    vv = (y - y.min()) / span
    uv = np.clip(np.stack([u, vv], axis=1), 0.0, 1.0)

    fu = uv[template.faces, 0]
    width = fu.max(axis=1) - fu.min(axis=1)
    crossing = np.flatnonzero(width > 0.5)
    if crossing.size:
        raise UnwrapFoldError(
            f"{crossing.size} triangles cross the unwrap seam (first: face {crossing[0]})")
    return UVLayout(uv, template.topology_id)


def uv_signed_areas(layout, faces):
    """Signed UV-space triangle areas (positive = counter-clockwise)."""
    p = layout.uv[faces]
    e1 = p[:, 1] - p[:, 0]
    e2 = p[:, 2] - p[:, 0]
    return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])


def icosphere(subdivisions=3, radius=1.0):
    """Geodesic sphere from a subdivided icosahedron (20 * 4**k faces)."""
    t = (1.0 + math.sqrt(5.0)) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
             (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.array(p, dtype=np.float64) / np.linalg.norm(p) for p in verts]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return Mesh(np.array(verts) * radius, np.array(faces), f"icosphere{subdivisions}")


# ---------------------------------------------------------------------------
# Wavefront OBJ


def _fmt(x):
    return format(float(x), ".8g")


def read_obj(path, topology_id="default", return_colors=False):
    """Read ``v`` and triangular ``f`` records.

    Six-component ``v`` lines carry per-vertex RGB colors. Polygons with
    more than three corners are rejected.
    """
    vertices, colors, faces = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                vals = [float(x) for x in parts[1:]]
                if len(vals) not in (3, 4, 6):
                    raise InputError(f"{path}:{lineno}: malformed vertex record")
                vertices.append(vals[:3])
                if len(vals) == 6:
                    colors.append(vals[3:])
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise InputError(f"{path}:{lineno}: only triangular faces are supported")
                idx = []
                for token in parts[1:]:
                    i = int(token.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(vertices) + i)
                faces.append(idx)
    if colors and len(colors) != len(vertices):
        raise InputError(f"{path}: vertex colors present on only some vertices")
    mesh = Mesh(np.array(vertices, dtype=np.float64).reshape(-1, 3),
                np.array(faces, dtype=np.int64).reshape(-1, 3), topology_id)
    if return_colors:
        return mesh, (np.array(colors) if colors else None)
    return mesh


def write_obj(path, mesh, layout=None, normals=None, colors=None):
    """Write a mesh with optional ``vt`` (from a UV layout), ``vn`` and vertex colors."""
    lines = []
    for i, p in enumerate(mesh.vertices):
        rec = "v " + " ".join(_fmt(x) for x in p)
        if colors is not None:
            rec += " " + " ".join(_fmt(x) for x in colors[i])
        lines.append(rec)
    if layout is not None:
        lines.extend("vt " + " ".join(_fmt(x) for x in t) for t in layout.uv)
    if normals is not None:
        lines.extend("vn " + " ".join(_fmt(x) for x in n) for n in normals)
    for face in mesh.faces + 1:
        if layout is not None and normals is not None:
            lines.append("f " + " ".join(f"{i}/{i}/{i}" for i in face))
        elif layout is not None:
            lines.append("f " + " ".join(f"{i}/{i}" for i in face))
        elif normals is not None:
            lines.append("f " + " ".join(f"{i}//{i}" for i in face))
        else:
            lines.append("f " + " ".join(str(i) for i in face))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
