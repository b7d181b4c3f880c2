"""Self-checks run by ``tbgan verify``: gradient verification and small oracle suites."""
import math

import numpy as np
import torch
from torch import nn

from .arch import ArchConfig, GrowthState, build_discriminator, build_generator
from .geometry import Mesh, SimilarityTransform, gpa_align, similarity_align_pair
from .headmodel import pca_build
from .training import (cross_entropy, discriminator_objective, generator_objective, grad_check,
                       gradient_penalty)
from .uvcodec import build_raster_plan


def tiny_config():
    """L=3, d=1, 16 x 16 output; small enough for float64 finite differences."""
    return ArchConfig(L=3, d=1, base_resolution=2, latent_dim=8, channel_schedule=[8, 8, 4, 4])


def tiny_losses(seed=0, batch=2):
    """Float64 tiny TBGAN with fixed inputs; returns ``(G, D, g_loss_fn, d_loss_fn)``."""
    cfg = tiny_config()
    G = build_generator(cfg, seed).double()
    D = build_discriminator(cfg, seed + 1).double()
    gen = torch.Generator().manual_seed(seed)
    res = cfg.output_resolution
    real = torch.rand(batch, 9, res, res, generator=gen, dtype=torch.float64) * 2 - 1
    z = torch.randn(batch, cfg.latent_dim, generator=gen, dtype=torch.float64)
    p = torch.softmax(torch.randn(batch, cfg.n_expressions, generator=gen, dtype=torch.float64), -1)
    alpha = torch.rand(batch, generator=gen, dtype=torch.float64)
    growth = GrowthState(cfg.L)

    def d_loss():
        return discriminator_objective(G, D, real, z, p, 10.0, growth, alpha=alpha)[0]

    def g_loss():
        return generator_objective(G, D, z, p, growth)[0]

    return G, D, g_loss, d_loss


def gradient_errors(n_directions=16, seed=0):
    """Worst finite-difference relative error of the generator and critic objectives."""
    G, D, g_loss, d_loss = tiny_losses(seed)
    return {
        "generator": grad_check(g_loss, list(G.parameters()), n_directions, seed=seed),
        "discriminator": grad_check(d_loss, list(D.parameters()), n_directions, seed=seed + 1),
    }


class LinearCritic(nn.Module):
    """``D(x) = <w, x> + b``; its gradient penalty is ``(||w|| - 1)**2``."""

    def __init__(self, shape, seed=0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.w = nn.Parameter(torch.randn(shape, generator=gen, dtype=torch.float64) * 0.1)
        self.b = nn.Parameter(torch.zeros((), dtype=torch.float64))

    def forward(self, x, *args):
        return (x * self.w).flatten(1).sum(1) + self.b


def oracle_checks(seed=0):
    """Closed-form checks; returns ``{name: (error, tolerance)}``."""
    rng = np.random.default_rng(seed)
    out = {}

    # Similarity recovery.
    pts = rng.standard_normal((50, 3))
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    q *= np.sign(np.linalg.det(q))
    truth = SimilarityTransform(1.7, q, rng.standard_normal(3))
    src = Mesh(truth.apply(pts), np.zeros((0, 3), dtype=np.int64))
    _, aligned = similarity_align_pair(src, Mesh(pts, src.faces))
    out["procrustes_recovery"] = (float(np.abs(aligned.vertices - pts).max()), 1e-9)

    # GPA residuals never increase.
    meshes = [Mesh(pts + 0.1 * rng.standard_normal(pts.shape), src.faces) for _ in range(5)]
    res = gpa_align(meshes).residuals
    out["gpa_monotone"] = (float(max(0.0, np.max(np.diff(res), initial=0.0))), 1e-12)

    # Gradient penalty of a linear critic.
    critic = LinearCritic((1, 9, 4, 4), seed)
    real = torch.rand(3, 9, 4, 4, dtype=torch.float64)
    fake = torch.rand(3, 9, 4, 4, dtype=torch.float64)
    gp = float(gradient_penalty(critic, real, fake))
    expected = (float(critic.w.norm()) - 1.0) ** 2
    out["gp_linear_critic"] = (abs(gp - expected), 1e-6)

    # Uniform softmax cross entropy.
    ce = float(cross_entropy(torch.zeros(4, 7, dtype=torch.float64),
                             torch.eye(7, dtype=torch.float64)[:4]))
    out["uniform_cross_entropy"] = (abs(ce - math.log(7)), 1e-6)

    # Coverage of a single triangle against direct point-in-triangle tests.
    tri = np.array([[0.1, 0.2], [0.8, 0.3], [0.4, 0.9]])
    plan = build_raster_plan(tri, np.array([[0, 1, 2]]), 32)
    c = (np.arange(32) + 0.5) / 32
    uu, vv = np.meshgrid(c, c)
    p = np.stack([uu, vv], -1)
    signs = [np.cross(tri[(k + 1) % 3] - tri[k], p - tri[k]) for k in range(3)]
    inside = np.all([s >= 0 for s in signs], axis=0) | np.all([s <= 0 for s in signs], axis=0)
    out["coverage_single_triangle"] = (float(np.sum(inside != (plan.face_index >= 0))), 0.0)

    # PCA eigenvalues against a covariance eigendecomposition.
    data = rng.standard_normal((40, 12))
    model = pca_build(data, k=10)
    eig = np.sort(np.linalg.eigvalsh(np.cov(data.T, bias=True)))[::-1][:10]
    out["pca_eigenvalues"] = (float(np.max(np.abs(model.eigenvalues - eig) / eig)), 1e-8)
    return out
