"""Procedural face and head corpora standing in for registered scan datasets.

Faces are patches of deformed ellipsoids sampled on a regular
(azimuth, elevation) grid, so every identity shares one topology. Each of
the seven expression classes except neutral raises a bump and a reddish
blush in its own facial region; :func:`expression_statistic` reads those
regions back from a texture map, which makes conditioning measurable.
"""
from dataclasses import dataclass
import math

import numpy as np

from .dataset import extract_corpus, load_dataset
from .geometry import Mesh

N_EXPRESSIONS = 7
EXPRESSION_NAMES = ("neutral", "happy", "sad", "surprise", "angry", "disgust", "fear")
# (azimuth, elevation) of each non-neutral expression region, radians.
EXPRESSION_CENTRES = np.array([
    (-0.45, -0.35), (0.0, -0.35), (0.45, -0.35),
    (-0.45, 0.30), (0.0, 0.30), (0.45, 0.30),
])
EXPRESSION_WIDTH = 0.35
EXPRESSION_DEPTH = 0.05
EXPRESSION_TINT = np.array([0.8, -0.4, -0.4])
MODEL_SCALE = 90.0


@dataclass(frozen=True)
class FaceGrid:
    """Sampling grid of the face patch."""

    n_azimuth: int = 40
    n_elevation: int = 40
    max_azimuth: float = math.radians(75)
    max_elevation: float = math.radians(45)

    @property
    def topology_id(self):
        return f"synthface-{self.n_azimuth}x{self.n_elevation}"

    def angles(self):
        return (np.linspace(-self.max_azimuth, self.max_azimuth, self.n_azimuth),
                np.linspace(-self.max_elevation, self.max_elevation, self.n_elevation))

    def step(self):
        th, ph = self.angles()
        return th[1] - th[0], ph[1] - ph[0]


def grid_faces(n_cols, n_rows):
    """Counter-clockwise (outward-facing) triangles of a row-major vertex grid."""
    faces = []
    for r in range(n_rows - 1):
        for c in range(n_cols - 1):
            a = r * n_cols + c
            b, cc, d = a + 1, a + n_cols + 1, a + n_cols
            faces.append((a, b, cc))
            faces.append((a, cc, d))
    return np.array(faces, dtype=np.int64)


def _gauss(theta, phi, centre, width):
    return np.exp(-((theta - centre[0]) ** 2 + (phi - centre[1]) ** 2) / (2 * width ** 2))


def expression_weights(theta, phi):
    """Per-point weights of the six expression regions (6 x N)."""
    return np.stack([_gauss(theta, phi, c, EXPRESSION_WIDTH) for c in EXPRESSION_CENTRES])


@dataclass
class Identity:
    radii: np.ndarray
    waves: np.ndarray       # K x 4: amplitude, azimuth freq, elevation freq, phase
    nose: float
    skin: np.ndarray
    gradient: float


def random_identity(rng):
    size = MODEL_SCALE * (1.0 + 0.08 * rng.standard_normal())
    radii = size * np.array([0.75, 1.0, 0.85]) * (1.0 + 0.06 * rng.standard_normal(3))
    waves = np.column_stack([
        0.02 * rng.standard_normal(4),
        rng.uniform(0.5, 2.5, 4),
        rng.uniform(0.5, 2.5, 4),
        rng.uniform(0, 2 * np.pi, 4),
    ])
    skin = np.array([0.74, 0.56, 0.46]) + 0.03 * rng.standard_normal(3)
    return Identity(radii, waves, 0.12 * (1.0 + 0.2 * rng.standard_normal()), skin,
                    0.05 * rng.standard_normal())


def surface(identity, theta, phi, expression=0, intensity=1.0):
    """Points and colors of an identity on arbitrary (azimuth, elevation) samples."""
    radial = np.zeros_like(theta)
    for amp, ft, fp, ph in identity.waves:
        radial += amp * np.sin(ft * theta + fp * phi + ph)
    radial += identity.nose * _gauss(theta, phi, (0.0, -0.05), 0.15)
    color = identity.skin[None, :] + identity.gradient * phi[:, None]
    color = color - 0.10 * _gauss(theta, phi, (0.0, -0.55), 0.12)[:, None]
    if expression:
        w = intensity * _gauss(theta, phi, EXPRESSION_CENTRES[expression - 1], EXPRESSION_WIDTH)
        radial += EXPRESSION_DEPTH * w
        color = color + w[:, None] * EXPRESSION_TINT
    a, b, c = identity.radii
    scale = 1.0 + radial
    pts = np.stack([a * np.sin(theta) * np.cos(phi),
                    b * np.sin(phi),
                    c * np.cos(theta) * np.cos(phi)], axis=1) * scale[:, None]
    return pts, np.clip(color, 0.0, 1.0)


def random_pose(rng, points):
    angle = math.radians(8.0) * rng.standard_normal(3)
    cx, cy, cz = np.cos(angle)
    sx, sy, sz = np.sin(angle)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    scale = 1.0 + 0.05 * rng.standard_normal()
    shift = 5.0 * rng.standard_normal(3)
    return scale * points @ (rz @ ry @ rx).T + shift


def one_hot(index, n=N_EXPRESSIONS):
    v = np.zeros(n)
    v[index] = 1.0
    return v


def generate_corpus(n_identities, per_identity, seed, grid=FaceGrid()):
    """Posed face meshes, vertex colors, one-hot labels and identity tags.

    Sample ``j`` of an identity has expression ``j % 7``; samples sharing an
    expression differ by intensity jitter, small surface noise and pose
    (every sample but the very first gets a random similarity pose).
    """
    rng = np.random.default_rng(seed)
    th, ph = grid.angles()
    theta, phi = (a.ravel() for a in np.meshgrid(th, ph))
    faces = grid_faces(grid.n_azimuth, grid.n_elevation)
    meshes, colors, labels, idents = [], [], [], []
    for i in range(n_identities):
        ident = random_identity(rng)
        for j in range(per_identity):
            expr = j % N_EXPRESSIONS
            intensity = rng.uniform(0.85, 1.15)
            pts, col = surface(ident, theta, phi, expr, intensity)
            pts = pts + 0.05 * rng.standard_normal(pts.shape)
            col = np.clip(col + 0.01 * rng.standard_normal(col.shape), 0.0, 1.0)
            # The first sample stays in the canonical y-up, z-forward frame; GPA
            # inherits its frame, which the cylindrical unwrap relies on.
            posed = random_pose(rng, pts)
            if not meshes:
                posed = pts
            meshes.append(Mesh(posed, faces, grid.topology_id))
            colors.append(col)
            labels.append(one_hot(expr))
            idents.append(f"id{i:04d}")
    regions = expression_weights(theta, phi)
    return meshes, colors, labels, idents, regions


def make_synthetic_dataset(n_identities, per_identity, resolution, seed, out_dir,
                           grid=FaceGrid()):
    """Generate a corpus, push it through extraction and write a dataset directory."""
    meshes, colors, labels, idents, regions = generate_corpus(
        n_identities, per_identity, seed, grid)
    extract_corpus(meshes, colors, resolution, labels, idents, out_dir, regions)
    return load_dataset(out_dir).manifest


# ---------------------------------------------------------------------------
# Expression probe


def expression_statistic(texture, regions, mask=None):
    """Region-weighted red-minus-green excess for each expression region.

    ``texture`` is H x W x 3 (or B x H x W x 3), ``regions`` R x H x W.
    The face-wide mean is subtracted so that skin tone cancels.
    """
    tex = np.asarray(texture, dtype=np.float64)
    single = tex.ndim == 3
    if single:
        tex = tex[None]
    signal = tex[..., 0] - tex[..., 1]
    weights = np.asarray(regions, dtype=np.float64)
    if mask is not None:
        weights = weights * mask[None]
        base = (signal * mask).sum(axis=(1, 2)) / mask.sum()
    else:
        base = signal.mean(axis=(1, 2))
    stats = np.einsum("bhw,rhw->br", signal, weights) / weights.sum(axis=(1, 2))[None]
    stats = stats - base[:, None]
    return stats[0] if single else stats


class NearestCentroidProbe:
    """Linear probe: assign a statistic vector to the closest class mean."""

    def fit(self, stats, labels):
        labels = np.asarray(labels)
        if labels.ndim == 2:
            labels = labels.argmax(axis=1)
        self.classes_ = np.unique(labels)
        self.centroids_ = np.stack([stats[labels == c].mean(axis=0) for c in self.classes_])
        return self

    def predict(self, stats):
        d = ((np.asarray(stats)[:, None, :] - self.centroids_[None]) ** 2).sum(axis=-1)
        return self.classes_[d.argmin(axis=1)]

    def score(self, stats, labels):
        labels = np.asarray(labels)
        if labels.ndim == 2:
            labels = labels.argmax(axis=1)
        return float((self.predict(stats) == labels).mean())


# ---------------------------------------------------------------------------
# Face/head pairs for head completion


def head_grid_indices(grid, extra_azimuth, extra_elevation):
    """Head sampling angles extending the face grid, and the face sub-grid indices."""
    dth, dph = grid.step()
    th = -grid.max_azimuth + dth * np.arange(-extra_azimuth, grid.n_azimuth + extra_azimuth)
    ph = -grid.max_elevation + dph * np.arange(-extra_elevation, grid.n_elevation + extra_elevation)
    n_cols = len(th)
    rows = np.arange(grid.n_elevation) + extra_elevation
    cols = np.arange(grid.n_azimuth) + extra_azimuth
    face_idx = (rows[:, None] * n_cols + cols[None, :]).ravel()
    return th, ph, face_idx


def make_head_corpus(n, seed, grid=FaceGrid(), extra_azimuth=8, extra_elevation=6):
    """Paired neutral face and head meshes of ``n`` random identities.

    The head extends the face patch sideways and vertically on the same
    angular spacing, so ``head.vertices[face_indices]`` equals the face.
    Returns ``(faces, heads, face_indices)``.
    """
    rng = np.random.default_rng(seed)
    th, ph, face_idx = head_grid_indices(grid, extra_azimuth, extra_elevation)
    theta, phi = (a.ravel() for a in np.meshgrid(th, ph))
    head_faces = grid_faces(len(th), len(ph))
    face_faces = grid_faces(grid.n_azimuth, grid.n_elevation)
    faces, heads = [], []
    for _ in range(n):
        ident = random_identity(rng)
        pts, _ = surface(ident, theta, phi)
        heads.append(Mesh(pts, head_faces, f"synthhead-{len(th)}x{len(ph)}"))
        faces.append(Mesh(pts[face_idx], face_faces, grid.topology_id))
    return faces, heads, face_idx
