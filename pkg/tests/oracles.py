"""Independent reference computations used by the test-suite.

None of these reuse the code paths they check: gradients come from central
finite differences, GPA from a bracketing/bisection search, Procrustes from a
generic optimiser.
"""
import numpy as np
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from liftadapt.geometry import box_extent, project_pose_approx


def fd_grad(loss_fn, values: np.ndarray, h: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences of ``loss_fn()`` w.r.t. entries of ``values`` (mutated in place)."""
    idx = range(values.size) if indices is None else indices
    out = np.zeros(values.size)
    for i in idx:
        old = values[i]
        values[i] = old + h
        fp = loss_fn()
        values[i] = old - h
        fm = loss_fn()
        values[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out


def max_rel_err(analytic, numeric, floor: float = 1e-3) -> float:
    """Largest elementwise relative error.

    Entries smaller than ``floor`` times the largest numeric entry are
    measured against that floor, since finite differences of exact zeros
    return pure roundoff.
    """
    analytic = np.asarray(analytic).ravel()
    numeric = np.asarray(numeric).ravel()
    scale = max(float(np.abs(numeric).max()), 1e-12)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor * scale)
    return float(np.max(np.abs(analytic - numeric) / denom))


def gpa_oracle(target2d, source3d, cam, root_index=0, z_lo=500.0, z_hi=20000.0,
               n_grid=400, n_bisect=50):
    """Grid + bisection solve of the box-perimeter and root-position constraints.

    Works one pair at a time under the approximate projection; each residual
    is monotone in its unknown, so bracketing followed by bisection converges.
    """
    target2d = np.asarray(target2d, float)
    source3d = np.asarray(source3d, float)
    tb = box_extent(target2d)
    want = tb.dx + tb.dy
    xr, yr = target2d[root_index]

    def lateral(z):
        # root x/y that pin the projected root at fixed depth, by bisection
        def solve(axis, goal):
            lo, hi = -50.0 * z, 50.0 * z
            for _ in range(200):
                mid = 0.5 * (lo + hi)
                p = project_pose_approx(source3d, np.array([mid, 0, z]) if axis == 0
                                        else np.array([0, mid, z]), cam)[root_index, axis]
                if p < goal:
                    lo = mid
                else:
                    hi = mid
            return 0.5 * (lo + hi)
        return solve(0, xr), solve(1, yr)

    def resid(z):
        x, y = 0.0, 0.0  # box size under approx projection is independent of X, Y
        b = box_extent(project_pose_approx(source3d, np.array([x, y, z]), cam))
        return (b.dx + b.dy) - want

    grid = np.geomspace(z_lo, z_hi, n_grid)
    vals = np.array([resid(z) for z in grid])
    # residual decreases with depth; find the sign change
    k = int(np.nonzero(vals < 0)[0][0])
    lo, hi = grid[k - 1], grid[k]
    for _ in range(n_bisect):
        mid = 0.5 * (lo + hi)
        if resid(mid) > 0:
            lo = mid
        else:
            hi = mid
    z = 0.5 * (lo + hi)
    x, y = lateral(z)
    return np.array([x, y, z])


def procrustes_oracle(pred, gt):
    """MPJPE after similarity alignment found by generic optimisation (no SVD)."""
    pred = np.asarray(pred, float)
    gt = np.asarray(gt, float)

    def transform(p):
        R = Rotation.from_rotvec(p[:3]).as_matrix()
        return np.exp(p[3]) * pred @ R.T + p[4:7]

    def sq(p):
        return np.sum((transform(p) - gt) ** 2)

    best = None
    for start in Rotation.random(8, random_state=0).as_rotvec():
        x0 = np.concatenate([start, [0.0], gt.mean(0) - pred.mean(0)])
        res = minimize(sq, x0, method="BFGS", options={"gtol": 1e-12, "maxiter": 5000})
        if best is None or res.fun < best.fun:
            best = res
    return float(np.mean(np.linalg.norm(transform(best.x) - gt, axis=1)))
