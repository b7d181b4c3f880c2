"""Per-vertex values <-> dense UV rasters, modality bundles and their container.

Raster convention: row ``i`` and column ``j`` sample the UV point
``((j + 0.5) / W, (i + 0.5) / H)``, so row 0 is ``v`` near 0.
"""
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import container
from .errors import ContainerParseError, InputError
from .geometry import UVLayout, compute_vertex_normals  # noqa: F401  (UVLayout re-exported)

MODALITIES = ("texture", "normals", "shape")
DEFAULT_RANGES = {"texture": (0.0, 1.0), "normals": (-1.0, 1.0), "shape": (-1.0, 1.0)}
BUNDLE_KIND = "tbgan.bundle"
BUNDLE_VERSION = 1


def _is_pow2(n):
    return n > 0 and (n & (n - 1)) == 0


@dataclass
class ModalityMap:
    data: np.ndarray
    mask: np.ndarray
    modality: str
    value_range: tuple = (-1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.value_range = tuple(float(x) for x in self.value_range)
        if self.modality not in MODALITIES:
            raise InputError(f"unknown modality {self.modality!r}")
        if self.data.ndim != 3:
            raise InputError(f"map data must be H x W x C, got {self.data.shape}")
        h, w = self.data.shape[:2]
        if not (_is_pow2(h) and _is_pow2(w)):
            raise InputError(f"map size {h}x{w} is not a power of two")
        if self.mask.shape != (h, w):
            raise InputError("mask shape does not match map")

    @property
    def resolution(self):
        return self.data.shape[0]

    def __eq__(self, other):
        return (isinstance(other, ModalityMap) and self.modality == other.modality
                and self.value_range == other.value_range
                and np.array_equal(self.mask, other.mask)
                and self.data.dtype == other.data.dtype
                and self.data.tobytes() == other.data.tobytes())


@dataclass
class ModalityBundle:
    """Co-registered texture, normals and shape maps of one face."""

    texture: ModalityMap
    normals: ModalityMap
    shape: ModalityMap
    expression: np.ndarray = None
    topology_id: str = "default"

    def __post_init__(self):
        if self.expression is not None:
            self.expression = np.asarray(self.expression, dtype=np.float64)
        shapes = {m.data.shape for m in self.maps()}
        if len(shapes) != 1:
            raise InputError(f"modality maps disagree in shape: {sorted(shapes)}")
        if not (np.array_equal(self.texture.mask, self.normals.mask)
                and np.array_equal(self.texture.mask, self.shape.mask)):
            raise InputError("modality maps must share one coverage mask")

    def maps(self):
        return (self.texture, self.normals, self.shape)

    @property
    def resolution(self):
        return self.texture.resolution

    @property
    def mask(self):
        return self.texture.mask

    def validate(self, normals_tol=1e-3):
        """Check the data-level invariants of a bundle extracted from meshes."""
        if not self.mask.any():
            raise InputError("bundle has empty coverage")
        if np.abs(self.shape.data).max() > 1.0:
            raise InputError("shape values leave [-1, 1]")
        if np.abs(self.normals.data).max() > 1.0 + normals_tol:
            raise InputError("normal values leave [-1, 1]")
        lengths = np.linalg.norm(self.normals.data[self.mask].astype(np.float64), axis=-1)
        if lengths.size and np.abs(lengths - 1.0).max() > normals_tol:
            raise InputError("covered normals are not unit length")
        if self.expression is not None:
            check_simplex(self.expression)

    def __eq__(self, other):
        if not isinstance(other, ModalityBundle):
            return NotImplemented
        if (self.expression is None) != (other.expression is None):
            return False
        if self.expression is not None and not np.array_equal(self.expression, other.expression):
            return False
        return (self.topology_id == other.topology_id and self.texture == other.texture
                and self.normals == other.normals and self.shape == other.shape)


def check_simplex(p, tol=1e-6):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim < 1 or (p < -tol).any() or (np.abs(p.sum(axis=-1) - 1.0) > tol).any():
        raise InputError(f"expression label is not on the probability simplex: {p}")
    return p


# ---------------------------------------------------------------------------
# Rasterization


@dataclass(frozen=True)
class RasterPlan:
    """Pixel -> (face, barycentric) lookup for one layout at one resolution."""

    face_index: np.ndarray    # H x W, -1 where uncovered
    weights: np.ndarray       # H x W x 3 barycentric weights
    nearest: np.ndarray       # H x W flat index of nearest covered pixel

    @property
    def mask(self):
        return self.face_index >= 0


def _edge(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def build_raster_plan(uv, faces, resolution):
    """Assign every pixel centre to the lowest-indexed UV triangle containing it."""
    if resolution < 4 or not _is_pow2(resolution):
        raise InputError(f"resolution must be a power of two >= 4, got {resolution}")
    uv = np.asarray(uv, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    res = resolution
    face_index = np.full((res, res), -1, dtype=np.int64)
    weights = np.zeros((res, res, 3), dtype=np.float64)
    centres = (np.arange(res) + 0.5) / res

    tri = uv[faces]  # M x 3 x 2
    lo = np.floor(tri.min(axis=1) * res - 0.5).astype(np.int64)
    hi = np.ceil(tri.max(axis=1) * res - 0.5).astype(np.int64)
    lo = np.clip(lo, 0, res - 1)
    hi = np.clip(hi, 0, res - 1)
    for fi in range(len(faces)):
        (ax, ay), (bx, by), (cx, cy) = tri[fi]
        area = _edge(ax, ay, bx, by, cx, cy)
        if area == 0.0:
            continue
        j0, i0 = lo[fi]
        j1, i1 = hi[fi]
        px = centres[j0:j1 + 1][None, :]
        py = centres[i0:i1 + 1][:, None]
        wa = _edge(bx, by, cx, cy, px, py) / area
        wb = _edge(cx, cy, ax, ay, px, py) / area
        wc = _edge(ax, ay, bx, by, px, py) / area
        inside = (wa >= 0) & (wb >= 0) & (wc >= 0)
        block = face_index[i0:i1 + 1, j0:j1 + 1]
        take = inside & (block < 0)
        if not take.any():
            continue
        block[take] = fi
        wblock = weights[i0:i1 + 1, j0:j1 + 1]
        wblock[take, 0] = wa[take]
        wblock[take, 1] = wb[take]
        wblock[take, 2] = wc[take]

    mask = face_index >= 0
    if not mask.any():
        raise InputError("layout covers no pixel centre at this resolution")
    _, (ni, nj) = ndimage.distance_transform_edt(~mask, return_indices=True)
    nearest = ni * res + nj
    return RasterPlan(face_index, weights, nearest)


@lru_cache(maxsize=16)
def _cached_plan(uv_bytes, faces_bytes, n_uv, n_faces, resolution):
    uv = np.frombuffer(uv_bytes, dtype=np.float64).reshape(n_uv, 2)
    faces = np.frombuffer(faces_bytes, dtype=np.int64).reshape(n_faces, 3)
    return build_raster_plan(uv, faces, resolution)


def raster_plan(layout, faces, resolution):
    """Cached :func:`build_raster_plan` keyed on the layout contents."""
    uv = np.ascontiguousarray(layout.uv, dtype=np.float64)
    faces = np.ascontiguousarray(faces, dtype=np.int64)
    return _cached_plan(uv.tobytes(), faces.tobytes(), len(uv), len(faces), int(resolution))


def rasterize_with_plan(values, faces, plan):
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    mask = plan.mask
    fidx = plan.face_index[mask]
    corners = np.asarray(faces)[fidx]           # K x 3
    va, vb, vc = (values[corners[:, k]] for k in range(3))
    w = plan.weights[mask]
    # Anchored at corner a so that constant fields come out exactly.
    covered = va + w[:, 1:2] * (vb - va) + w[:, 2:3] * (vc - va)
    res = mask.shape[0]
    out = np.zeros((res, res, values.shape[1]), dtype=np.float64)
    out[mask] = covered
    flat = out.reshape(res * res, -1)
    out = flat[plan.nearest.ravel()].reshape(out.shape)
    return out.astype(np.float32), mask.copy()


def rasterize_to_uv(values, mesh, layout, resolution, modality="shape", value_range=None):
    """Barycentric rasterization of per-vertex ``values`` into a UV map.

    Pixels whose centre lies in no triangle take the value of the nearest
    covered pixel; their mask entry stays ``False``.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] != layout.n_vertices or mesh.n_vertices != layout.n_vertices:
        raise InputError("values, mesh and layout disagree on the vertex count")
    plan = raster_plan(layout, mesh.faces, resolution)
    data, mask = rasterize_with_plan(values, mesh.faces, plan)
    if value_range is None:
        value_range = DEFAULT_RANGES[modality]
    return ModalityMap(data, mask, modality, value_range)


def sample_from_uv(uv_map, layout):
    """Bilinear lookup of a UV map at every vertex coordinate (N x C, float64)."""
    data = uv_map.data.astype(np.float64) if isinstance(uv_map, ModalityMap) \
        else np.asarray(uv_map, dtype=np.float64)
    h, w = data.shape[:2]
    x = np.clip(layout.uv[:, 0] * w - 0.5, 0.0, w - 1)
    y = np.clip(layout.uv[:, 1] * h - 0.5, 0.0, h - 1)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    top = data[y0, x0] * (1 - fx) + data[y0, x1] * fx
    bottom = data[y1, x0] * (1 - fx) + data[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def mesh_to_bundle(mesh, colors, layout, resolution, expression=None):
    """Rasterize texture, object-space normals and positions of one aligned mesh.

    Interpolated normals are renormalized per pixel.
    """
    if colors is None:
        colors = np.zeros((mesh.n_vertices, 3))
    plan = raster_plan(layout, mesh.faces, resolution)
    tex, mask = rasterize_with_plan(colors, mesh.faces, plan)
    nrm, _ = rasterize_with_plan(compute_vertex_normals(mesh), mesh.faces, plan)
    shp, _ = rasterize_with_plan(mesh.vertices, mesh.faces, plan)
    nrm64 = nrm.astype(np.float64)
    nrm = (nrm64 / np.linalg.norm(nrm64, axis=-1, keepdims=True)).astype(np.float32)
    return ModalityBundle(
        ModalityMap(tex, mask, "texture", DEFAULT_RANGES["texture"]),
        ModalityMap(nrm, mask, "normals", DEFAULT_RANGES["normals"]),
        ModalityMap(shp, mask, "shape", DEFAULT_RANGES["shape"]),
        expression=expression, topology_id=mesh.topology_id)


# ---------------------------------------------------------------------------
# Bundles


def bundle_concat(bundle):
    """Stack a bundle into an H x W x 9 array ordered texture | normals | shape."""
    return np.concatenate([m.data for m in bundle.maps()], axis=-1).astype(np.float32, copy=False)


def bundle_split(stacked, mask, expression=None, value_ranges=None, topology_id="default"):
    """Inverse of :func:`bundle_concat`."""
    stacked = np.asarray(stacked, dtype=np.float32)
    if stacked.ndim != 3 or stacked.shape[-1] != 9:
        raise InputError(f"expected H x W x 9 array, got {stacked.shape}")
    value_ranges = value_ranges or DEFAULT_RANGES
    maps = [ModalityMap(stacked[..., 3 * k:3 * k + 3].copy(), mask, name, value_ranges[name])
            for k, name in enumerate(MODALITIES)]
    return ModalityBundle(*maps, expression=expression, topology_id=topology_id)


def split_like(stacked, reference):
    """Split ``stacked`` reusing mask, ranges and label metadata of ``reference``."""
    return bundle_split(stacked, reference.mask, reference.expression,
                        {m.modality: m.value_range for m in reference.maps()},
                        reference.topology_id)


def _orthonormal_basis(n):
    """Tangent frames for unit vectors ``n`` (..., 3), continuous except at z = 0."""
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    sign = np.where(z >= 0, 1.0, -1.0)
    a = -1.0 / (sign + z)
    b = x * y * a
    t = np.stack([1.0 + sign * x * x * a, sign * b, -sign * x], axis=-1)
    bt = np.stack([b, sign + y * y * a, -y], axis=-1)
    return t, bt


def apply_detail_normals(normals, detail, weight, tile_factor):
    """Composite a tileable detail normal map onto a normals map.

    The detail map's x/y components, scaled by ``weight``, perturb the base
    normal along a tangent frame built from it; the sum is renormalized.
    Pixels with zero weight are returned untouched.
    """
    if normals.modality != "normals":
        raise InputError("apply_detail_normals expects a normals map")
    detail = np.asarray(detail, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    h, w = normals.data.shape[:2]
    if tile_factor < 1 or detail.ndim != 3 or detail.shape[2] != 3 \
            or detail.shape[0] * tile_factor != h or detail.shape[1] * tile_factor != w:
        raise InputError(
            f"detail map {detail.shape} tiled {tile_factor}x does not cover {h}x{w}")
    if weight.shape != (h, w) or weight.min() < 0 or weight.max() > 1:
        raise InputError("weight must be an H x W map in [0, 1]")
    tiled = np.tile(detail, (tile_factor, tile_factor, 1))
    base = normals.data.astype(np.float64)
    unit = base / np.linalg.norm(base, axis=-1, keepdims=True)
    t, b = _orthonormal_basis(unit)
    pert = weight[..., None] * (tiled[..., 0:1] * t + tiled[..., 1:2] * b)
    out = base + pert
    out /= np.linalg.norm(out, axis=-1, keepdims=True)
    out = out.astype(np.float32)
    untouched = weight == 0
    out[untouched] = normals.data[untouched]
    return ModalityMap(out, normals.mask, "normals", normals.value_range)


# ---------------------------------------------------------------------------
# Container


def write_bundle(bundle, path):
    """Write ``bundle`` as a directory container (see docs/formats.md)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    modalities = {}
    for m in bundle.maps():
        entry = container.write_array(path, f"{m.modality}.f32", m.data, "<f4")
        entry["value_range"] = list(m.value_range)
        modalities[m.modality] = entry
    mask_entry = container.write_array(path, "mask.bits", np.packbits(bundle.mask.ravel()), "u1")
    mask_entry["packing"] = "packbits-msb"
    mask_entry["mask_shape"] = list(bundle.mask.shape)
    meta = {
        "kind": BUNDLE_KIND,
        "format_version": BUNDLE_VERSION,
        "resolution": list(bundle.mask.shape),
        "channel_order": list(MODALITIES),
        "modalities": modalities,
        "mask": mask_entry,
        "expression": None if bundle.expression is None else [float(x) for x in bundle.expression],
        "topology_id": bundle.topology_id,
    }
    container.dump_json(meta, path / container.META_NAME)
    return path


def read_bundle(path):
    path = Path(path)
    meta = container.read_meta(path, BUNDLE_KIND, BUNDLE_VERSION)
    modalities = container.require(meta, "modalities")
    mask_entry = container.require(meta, "mask")
    resolution = tuple(container.require(meta, "resolution"))
    shape = tuple(container.require(mask_entry, "mask_shape", "mask"))
    if shape != resolution:
        raise ContainerParseError("mask shape disagrees with resolution", field="mask.mask_shape")
    bits = container.read_array(path, mask_entry, "mask")
    mask = np.unpackbits(bits, count=shape[0] * shape[1]).reshape(shape).astype(bool)
    maps = []
    for name in MODALITIES:
        if name not in modalities:
            raise ContainerParseError(f"meta.json: missing modality '{name}'",
                                      field=f"modalities.{name}")
        entry = modalities[name]
        data = container.read_array(path, entry, f"modalities.{name}")
        value_range = container.require(entry, "value_range", f"modalities.{name}")
        maps.append(ModalityMap(data, mask, name, tuple(value_range)))
    expression = meta.get("expression")
    return ModalityBundle(*maps,
                          expression=None if expression is None else np.asarray(expression),
                          topology_id=container.require(meta, "topology_id"))
