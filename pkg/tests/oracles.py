"""Independent reference implementations used as test oracles."""
import numpy as np
from scipy.linalg import orthogonal_procrustes
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation


def similarity_objective(params, src, ref):
    """Residual vector of ``s R src + t - ref`` for ``params = (log s, rotvec, t)``."""
    s = np.exp(params[0])
    R = Rotation.from_rotvec(params[1:4]).as_matrix()
    return (s * src @ R.T + params[4:7] - ref).ravel()


def brute_force_similarity(src, ref):
    """Minimum of the similarity alignment objective by generic nonlinear least squares."""
    best = None
    for start in ([0, 0, 0], [np.pi / 2, 0, 0], [0, np.pi / 2, 0], [0, 0, np.pi / 2]):
        x0 = np.concatenate([[0.0], start, ref.mean(0) - src.mean(0)])
        sol = least_squares(similarity_objective, x0, args=(src, ref), xtol=1e-15,
                            ftol=1e-15, gtol=1e-15, max_nfev=20000)
        cost = float((sol.fun ** 2).sum())
        if best is None or cost < best:
            best = cost
    return best


def _align(src, ref):
    sc, rc = src - src.mean(0), ref - ref.mean(0)
    R, _ = orthogonal_procrustes(sc, rc)  # sc @ R ~ rc
    s = np.trace(rc.T @ sc @ R) / (sc ** 2).sum()
    return s * sc @ R + ref.mean(0)


def gpa_oracle(meshes, iters=1000):
    """Long-run alternating GPA with the consensus size held at the first mesh's."""
    cons = meshes[0].copy()
    size = np.linalg.norm(cons - cons.mean(0))
    for _ in range(iters):
        aligned = [_align(m, cons) for m in meshes]
        mean = np.mean(aligned, axis=0)
        c = mean.mean(0)
        cons = c + (mean - c) * size / np.linalg.norm(mean - c)
    aligned = [_align(m, cons) for m in meshes]
    return sum(float(((a - cons) ** 2).sum()) for a in aligned)


def point_in_triangle_coverage(uv, faces, res):
    """Per-pixel containment scan over all faces (closed triangles, either winding)."""
    c = (np.arange(res) + 0.5) / res
    px, py = np.meshgrid(c, c)
    covered = np.zeros((res, res), dtype=bool)
    count = np.zeros((res, res), dtype=np.int64)
    for f in faces:
        a, b, cc = uv[f]
        d1 = (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0])
        d2 = (cc[0] - b[0]) * (py - b[1]) - (cc[1] - b[1]) * (px - b[0])
        d3 = (a[0] - cc[0]) * (py - cc[1]) - (a[1] - cc[1]) * (px - cc[0])
        inside = ((d1 >= 0) & (d2 >= 0) & (d3 >= 0)) | ((d1 <= 0) & (d2 <= 0) & (d3 <= 0))
        area = (b[0] - a[0]) * (cc[1] - a[1]) - (b[1] - a[1]) * (cc[0] - a[0])
        if area == 0:
            continue
        covered |= inside
        count += inside
    return covered, count


def strict_interior_count(uv, faces, res):
    """Pixels strictly inside more than one triangle (true fold-over, edges excluded)."""
    c = (np.arange(res) + 0.5) / res
    px, py = np.meshgrid(c, c)
    count = np.zeros((res, res), dtype=np.int64)
    for f in faces:
        a, b, cc = uv[f]
        d1 = (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0])
        d2 = (cc[0] - b[0]) * (py - b[1]) - (cc[1] - b[1]) * (px - b[0])
        d3 = (a[0] - cc[0]) * (py - cc[1]) - (a[1] - cc[1]) * (px - cc[0])
        count += ((d1 > 0) & (d2 > 0) & (d3 > 0)) | ((d1 < 0) & (d2 < 0) & (d3 < 0))
    return count


def smooth_field(rng, points, n_terms=4):
    """Random low-frequency field over 3-D points, offset away from zero."""
    scale = np.abs(points).max()
    p = points / scale
    out = np.full((len(points), 3), 3.0)
    for _ in range(n_terms):
        k = rng.normal(size=(3, 3)) * 1.5
        phase = rng.uniform(0, 2 * np.pi, 3)
        out += 0.3 * np.sin(p @ k + phase)
    return out


def cross_entropy_loop(logits, labels):
    total = 0.0
    for row, lab in zip(logits, labels):
        m = max(row)
        lse = m + np.log(sum(np.exp(x - m) for x in row))
        total += -sum(p * (x - lse) for p, x in zip(lab, row))
    return total / len(logits)


def normal_equations_objective(F, H):
    """Least-squares fit of ``H ~ F W^T + b`` via explicit normal equations."""
    A = np.hstack([F, np.ones((len(F), 1))])
    coef = np.linalg.solve(A.T @ A, A.T @ H)
    return float(((A @ coef - H) ** 2).sum()), coef
