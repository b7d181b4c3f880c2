"""Corpus extraction (meshes -> bundles) and dataset directories.

A dataset directory holds::

    manifest.json       entries (bundle path, expression label, identity)
    template/           normalized consensus mesh, UV layout, optional regions
    bundles/NNNNNN/     one bundle container per sample
"""
from dataclasses import asdict, dataclass
import json
from pathlib import Path

import numpy as np
import torch

from . import container
from .arch import bundles_to_tensor
from .errors import ContainerParseError, InputError
from .geometry import (Mesh, UVLayout, cylindrical_unwrap, gpa_align,
                       normalize_corpus_scale)
from .uvcodec import (check_simplex, mesh_to_bundle, rasterize_to_uv, read_bundle,
                      write_bundle)

MANIFEST_VERSION = 1
TEMPLATE_KIND = "tbgan.template"
TEMPLATE_VERSION = 1


@dataclass
class DatasetEntry:
    bundle: str
    expression: list
    identity: str


@dataclass
class DatasetManifest:
    entries: list
    topology_id: str
    resolution: int
    scale_factor: float
    format_version: int = MANIFEST_VERSION
    n_expressions: int = 7

    def validate(self):
        for e in self.entries:
            if e.expression is not None:
                check_simplex(e.expression)
                if len(e.expression) != self.n_expressions:
                    raise InputError(f"label of {e.bundle} has wrong length")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        for key in ("entries", "topology_id", "resolution", "scale_factor", "format_version"):
            if key not in data:
                raise ContainerParseError(f"manifest.json: missing field '{key}'", field=key)
        if data["format_version"] != MANIFEST_VERSION:
            raise container.FormatVersionError(
                f"manifest version {data['format_version']} != {MANIFEST_VERSION}")
        entries = [DatasetEntry(**e) for e in data["entries"]]
        return cls(entries, data["topology_id"], int(data["resolution"]),
                   float(data["scale_factor"]), data["format_version"],
                   int(data.get("n_expressions", 7)))


def write_template(path, template, layout, scale_factor, regions=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = {
        "vertices": container.write_array(path, "vertices.f64", template.vertices, "<f8"),
        "faces": container.write_array(path, "faces.i64", template.faces, "<i8"),
        "uv": container.write_array(path, "uv.f64", layout.uv, "<f8"),
    }
    if regions is not None:
        arrays["regions"] = container.write_array(path, "regions.f32", regions, "<f4")
    meta = {"kind": TEMPLATE_KIND, "format_version": TEMPLATE_VERSION,
            "topology_id": template.topology_id, "scale_factor": scale_factor,
            "arrays": arrays}
    container.dump_json(meta, path / container.META_NAME)


def read_template(path):
    """Return ``(template, layout, scale_factor, regions)``."""
    path = Path(path)
    meta = container.read_meta(path, TEMPLATE_KIND, TEMPLATE_VERSION)
    arrays = container.require(meta, "arrays")
    topo = container.require(meta, "topology_id")
    get = lambda name: container.read_array(path, container.require(arrays, name), name)  # noqa: E731
    template = Mesh(get("vertices"), get("faces"), topo)
    layout = UVLayout(get("uv"), topo)
    regions = get("regions") if "regions" in arrays else None
    return template, layout, float(container.require(meta, "scale_factor")), regions


def extract_corpus(meshes, colors, resolution, labels=None, identities=None,
                   out_dir=None, regions_per_vertex=None):
    """Align, normalize and unwrap a dense-correspondence corpus into bundles.

    Returns ``(bundles, template, layout, scale_factor, regions)``; when
    ``out_dir`` is given the dataset directory is written as well.
    ``regions_per_vertex`` (R x N) are optional per-vertex weights rasterized
    alongside the template, used for expression statistics.
    """
    meshes = list(meshes)
    n = len(meshes)
    labels = [None] * n if labels is None else list(labels)
    identities = [str(i) for i in range(n)] if identities is None else [str(i) for i in identities]
    colors = [None] * n if colors is None else list(colors)

    gpa = gpa_align(meshes)
    aligned, factor = normalize_corpus_scale(gpa.aligned)
    template = gpa.consensus.with_vertices(gpa.consensus.vertices * factor)
    layout = cylindrical_unwrap(template)

    bundles = [mesh_to_bundle(m, c, layout, resolution, lab)
               for m, c, lab in zip(aligned, colors, labels)]
    for b in bundles:
        b.validate()

    regions = None
    if regions_per_vertex is not None:
        regions = np.stack([
            rasterize_to_uv(np.asarray(r)[:, None], template, layout, resolution).data[..., 0]
            for r in regions_per_vertex])

    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "bundles").mkdir(parents=True, exist_ok=True)
        entries = []
        for i, (b, ident) in enumerate(zip(bundles, identities)):
            rel = f"bundles/{i:06d}"
            write_bundle(b, out_dir / rel)
            entries.append(DatasetEntry(
                rel, None if b.expression is None else [float(x) for x in b.expression], ident))
        write_template(out_dir / "template", template, layout, factor, regions)
        n_expr = next((len(e.expression) for e in entries if e.expression is not None), 0)
        manifest = DatasetManifest(entries, template.topology_id, resolution, factor,
                                   n_expressions=n_expr).validate()
        container.dump_json(manifest.to_dict(), out_dir / "manifest.json")
    return bundles, template, layout, factor, regions


@dataclass
class Dataset:
    manifest: DatasetManifest
    bundles: list
    template: Mesh
    layout: UVLayout
    scale_factor: float
    regions: np.ndarray = None

    @property
    def mask(self):
        return self.bundles[0].mask

    def tensors(self, dtype=torch.float32):
        """``(data N x 9 x H x W, labels N x n_expressions)`` tensors."""
        data = bundles_to_tensor(self.bundles, dtype)
        labels = torch.tensor(np.stack([
            b.expression if b.expression is not None else np.zeros(self.manifest.n_expressions)
            for b in self.bundles]), dtype=dtype)
        return data, labels

    def labels(self):
        return np.stack([b.expression for b in self.bundles])


def load_dataset(path):
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise InputError(f"{mpath} does not exist")
    manifest = DatasetManifest.from_dict(json.loads(mpath.read_text())).validate()
    bundles = [read_bundle(path / e.bundle) for e in manifest.entries]
    template, layout, factor, regions = read_template(path / "template")
    for b in bundles:
        if b.resolution != manifest.resolution or b.topology_id != manifest.topology_id:
            raise InputError("bundle disagrees with manifest resolution or topology")
    return Dataset(manifest, bundles, template, layout, factor, regions)
