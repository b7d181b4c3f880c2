"""Linear face/head shape models and face-to-head latent regression."""
from dataclasses import dataclass
from pathlib import Path
import warnings

import numpy as np

from . import container
from .errors import ContractError, InputError
from .geometry import Mesh

HEADMODEL_KIND = "tbgan.headmodel"
HEADMODEL_VERSION = 1


class RankDeficiencyWarning(UserWarning):
    pass


@dataclass
class PCAModel:
    mean: np.ndarray
    components: np.ndarray   # D x k, orthonormal columns
    eigenvalues: np.ndarray  # k, descending

    @property
    def dim(self):
        return self.mean.shape[0]

    @property
    def n_components(self):
        return self.components.shape[1]


@dataclass
class RegressionMap:
    W: np.ndarray     # k_head x k_face
    bias: np.ndarray  # k_head

    def __call__(self, latent):
        return np.asarray(latent) @ self.W.T + self.bias


def pca_build(data, k=None, variance_fraction=None):
    """Principal components of the rows of ``data`` (n x D).

    Eigenvalues use the population normalization (divide by n), so
    duplicating every row leaves the model unchanged. With
    ``variance_fraction`` the smallest ``k`` explaining at least that
    fraction of the total variance is kept; with neither, ``min(n-1, D)``.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 2:
        raise InputError("pca_build needs an n x D matrix with n >= 2")
    n, dim = data.shape
    k_max = min(n - 1, dim)
    if k is not None and not 1 <= k <= k_max:
        raise InputError(f"k={k} outside [1, {k_max}]")
    mean = data.mean(axis=0)
    _, s, vt = np.linalg.svd(data - mean, full_matrices=False)
    eig = s ** 2 / n
    if k is None:
        if variance_fraction is not None:
            if not 0 < variance_fraction <= 1:
                raise InputError("variance_fraction must be in (0, 1]")
            total = eig.sum()
            cum = np.cumsum(eig) / total if total > 0 else np.ones_like(eig)
            k = int(np.searchsorted(cum, variance_fraction - 1e-12) + 1)
            k = min(max(k, 1), k_max)
        else:
            k = k_max
    comps = vt[:k].T.copy()
    # Deterministic sign: largest-magnitude loading of each component is positive.
    pivots = np.argmax(np.abs(comps), axis=0)
    comps *= np.sign(comps[pivots, np.arange(k)])
    return PCAModel(mean, comps, eig[:k].copy())


def pca_project_reconstruct(model, sample):
    """Latent coordinates of ``sample`` and its reconstruction from them."""
    sample = np.asarray(sample, dtype=np.float64)
    if sample.shape[-1] != model.dim:
        raise InputError(f"sample dimension {sample.shape[-1]} != model dimension {model.dim}")
    latent = (sample - model.mean) @ model.components
    return latent, model.mean + latent @ model.components.T


def fit_head_regression(face_latents, head_latents):
    """Least-squares affine map ``h ~ W f + bias``.

    Solved by an SVD-based least-squares routine on ``[f, 1]``; a rank
    deficient design yields the minimum-norm solution and a
    :class:`RankDeficiencyWarning`.
    """
    F_ = np.asarray(face_latents, dtype=np.float64)
    H = np.asarray(head_latents, dtype=np.float64)
    if F_.ndim != 2 or H.ndim != 2 or F_.shape[0] != H.shape[0]:
        raise InputError("face and head latents must be n x k matrices with equal n")
    design = np.hstack([F_, np.ones((F_.shape[0], 1))])
    coef, _, rank, _ = np.linalg.lstsq(design, H, rcond=None)
    if rank < design.shape[1]:
        warnings.warn(f"regression design has rank {rank} < {design.shape[1]}; "
                      "returning the minimum-norm solution", RankDeficiencyWarning, stacklevel=2)
    return RegressionMap(coef[:-1].T.copy(), coef[-1].copy())


def regression_objective(reg, face_latents, head_latents):
    r = reg(face_latents) - np.asarray(head_latents)
    return float((r * r).sum())


def head_latent_for_face(face_vertices, face_pca, reg):
    flat = np.asarray(face_vertices, dtype=np.float64).reshape(-1)
    if flat.shape[0] != face_pca.dim:
        raise ContractError(
            f"face mesh has {flat.shape[0]} coordinates, face model expects {face_pca.dim}")
    latent, _ = pca_project_reconstruct(face_pca, flat)
    return reg(latent)


def complete_head(face_mesh, face_pca, head_pca, reg, head_template):
    """Full-head mesh regressed from a face mesh."""
    if head_template.vertices.size != head_pca.dim:
        raise ContractError("head template does not match the head model dimension")
    if reg.W.shape != (head_pca.n_components, face_pca.n_components):
        raise ContractError("regression map does not match the PCA models")
    head_latent = head_latent_for_face(face_mesh.vertices, face_pca, reg)
    head = head_pca.mean + head_pca.components @ head_latent
    return head_template.with_vertices(head.reshape(-1, 3))


def face_region_distance(head_mesh, face_mesh, face_indices):
    """Largest distance between input face vertices and their head counterparts."""
    diff = head_mesh.vertices[np.asarray(face_indices)] - face_mesh.vertices
    return float(np.linalg.norm(diff, axis=1).max())


def build_head_models(face_meshes, head_meshes, k_face=None, k_head=None,
                      variance_fraction=None):
    """Face PCA, head PCA and the latent regression from paired meshes."""
    face_data = np.stack([m.vertices.reshape(-1) for m in face_meshes])
    head_data = np.stack([m.vertices.reshape(-1) for m in head_meshes])
    face_pca = pca_build(face_data, k_face, variance_fraction)
    head_pca = pca_build(head_data, k_head, variance_fraction)
    face_lat, _ = pca_project_reconstruct(face_pca, face_data)
    head_lat, _ = pca_project_reconstruct(head_pca, head_data)
    return face_pca, head_pca, fit_head_regression(face_lat, head_lat)


# ---------------------------------------------------------------------------
# Persistence


def save_head_model(path, face_pca, head_pca, reg, head_template, face_indices=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = {
        "face_mean": face_pca.mean, "face_components": face_pca.components,
        "face_eigenvalues": face_pca.eigenvalues,
        "head_mean": head_pca.mean, "head_components": head_pca.components,
        "head_eigenvalues": head_pca.eigenvalues,
        "W": reg.W, "bias": reg.bias,
        "head_faces": head_template.faces.astype(np.float64),
        "head_template": head_template.vertices,
    }
    if face_indices is not None:
        arrays["face_indices"] = np.asarray(face_indices, dtype=np.float64)
    entries = {name: container.write_array(path, f"{name}.f64", arr, "<f8")
               for name, arr in arrays.items()}
    meta = {"kind": HEADMODEL_KIND, "format_version": HEADMODEL_VERSION,
            "arrays": entries, "head_topology_id": head_template.topology_id}
    container.dump_json(meta, path / container.META_NAME)
    return path


def load_head_model(path):
    """Return ``(face_pca, head_pca, reg, head_template, face_indices)``."""
    path = Path(path)
    meta = container.read_meta(path, HEADMODEL_KIND, HEADMODEL_VERSION)
    entries = container.require(meta, "arrays")

    def get(name):
        if name not in entries:
            raise container.ContainerParseError(f"missing array '{name}'", field=f"arrays.{name}")
        return container.read_array(path, entries[name], f"arrays.{name}")

    face = PCAModel(get("face_mean"), get("face_components"), get("face_eigenvalues"))
    head = PCAModel(get("head_mean"), get("head_components"), get("head_eigenvalues"))
    reg = RegressionMap(get("W"), get("bias"))
    template = Mesh(get("head_template"), get("head_faces").astype(np.int64),
                    meta.get("head_topology_id", "head"))
    face_indices = get("face_indices").astype(np.int64) if "face_indices" in entries else None
    return face, head, reg, template, face_indices
