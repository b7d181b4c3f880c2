"""Sampling, latent interpolation and conversion of generated maps to meshes."""
from pathlib import Path

import numpy as np
import torch

from .arch import GrowthState, tensor_to_bundles
from .errors import ContractError, InputError
from .geometry import Mesh, write_obj
from .uvcodec import check_simplex, sample_from_uv, write_bundle


def _generate_one(G, z, p, growth, mask, topology_id):
    """One latent at a time, so a given ``z`` always runs the same kernels."""
    dtype = next(G.parameters()).dtype
    z_t = torch.as_tensor(np.asarray(z, dtype=np.float64)[None], dtype=dtype)
    p_t = None if p is None else torch.as_tensor(np.asarray(p, dtype=np.float64)[None], dtype=dtype)
    with torch.no_grad():
        x = G(z_t, p_t, growth.level, growth.blend)
    if mask is not None and mask.shape[0] != x.shape[-1]:
        mask = None
    return tensor_to_bundles(x, mask, None if p is None else [p], topology_id)[0]


def _labels_for(expression, n, n_expressions):
    if expression is None:
        if n_expressions:
            raise InputError("generator is conditional; an expression label is required")
        return [None] * n
    arr = np.asarray(expression, dtype=np.float64)
    if arr.ndim == 1:
        arr = np.repeat(arr[None], n, axis=0)
    if arr.shape != (n, n_expressions):
        raise InputError(f"expected {n} labels of length {n_expressions}, got {arr.shape}")
    check_simplex(arr)
    return list(arr)


def sample_latents(n, latent_dim, seed):
    return np.random.default_rng(seed).standard_normal((n, latent_dim))


def sample_faces(G, n, expression, seed, growth=None, mask=None, topology_id="default"):
    """Draw ``n`` standard-normal latents and generate a bundle for each.

    Returns a list of ``(z, bundle)`` pairs.
    """
    cfg = G.config
    growth = growth or GrowthState(cfg.L)
    latents = sample_latents(n, cfg.latent_dim, seed)
    labels = _labels_for(expression, n, cfg.n_expressions)
    return [(z, _generate_one(G, z, p, growth, mask, topology_id))
            for z, p in zip(latents, labels)]


def interpolation_latents(z1, z2, steps):
    """Evenly spaced latents from ``z1`` to ``z2`` inclusive."""
    if steps < 2:
        raise InputError("interpolation needs at least two steps")
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    t = np.arange(steps, dtype=np.float64) / (steps - 1)
    out = z1[None] + t[:, None] * (z2 - z1)[None]
    out[-1] = z2
    return out


def interpolate_identities(G, z1, z2, steps, p, growth=None, mask=None, topology_id="default"):
    """Bundles generated along the straight line between two latents."""
    growth = growth or GrowthState(G.config.L)
    if p is not None:
        check_simplex(p)
    return [_generate_one(G, z, p, growth, mask, topology_id)
            for z in interpolation_latents(z1, z2, steps)]


def bundle_to_mesh(bundle, layout, template, scale_factor=1.0):
    """Sample a bundle back onto the template topology.

    Returns ``(mesh, vertex_normals, vertex_colors)``; positions are
    divided by ``scale_factor`` to return to model units.
    """
    if layout.topology_id != template.topology_id or layout.n_vertices != template.n_vertices:
        raise ContractError("layout and template topologies differ")
    if bundle.topology_id not in (template.topology_id, "default"):
        raise ContractError(
            f"bundle topology {bundle.topology_id!r} != template {template.topology_id!r}")
    positions = sample_from_uv(bundle.shape, layout) / scale_factor
    normals = sample_from_uv(bundle.normals, layout)
    lengths = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = np.where(lengths > 0, normals / np.where(lengths > 0, lengths, 1.0), [0.0, 0.0, 1.0])
    colors = sample_from_uv(bundle.texture, layout)
    mesh = Mesh(positions, template.faces.copy(), template.topology_id)
    return mesh, normals, colors


def export_face(out_dir, name, bundle, layout, template, scale_factor):
    """Write ``<name>.obj`` and the bundle container ``<name>.bundle``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mesh, normals, colors = bundle_to_mesh(bundle, layout, template, scale_factor)
    write_obj(out_dir / f"{name}.obj", mesh, layout, normals, np.clip(colors, 0.0, 1.0))
    write_bundle(bundle, out_dir / f"{name}.bundle")
    return mesh
