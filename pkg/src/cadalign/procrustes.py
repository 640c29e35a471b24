"""Weighted orthogonal Procrustes with reflection correction, its similarity
(Umeyama) variant, and the reverse-mode derivative of the rotation through
the 3x3 SVD.

The rotation maps CAD points onto scan points: ``R @ (p_cad - c_cad) ~
p_scan - c_scan``. With the weighted cross-covariance ``H = U S V^T`` the
solution is ``R = U diag(1, 1, d) V^T`` where ``d = det(V U^T)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GAP_EPS = 1e-6
RANK_RTOL = 1e-9


class ProcrustesError(ValueError):
    pass


class TooFewPoints(ProcrustesError):
    pass


class DegenerateConfiguration(ProcrustesError):
    pass


class ZeroVariance(ProcrustesError):
    pass


class GradientSingular(ProcrustesError):
    pass


@dataclass(frozen=True)
class CorrespondenceSet:
    """Paired CAD-space and scan-space points with non-negative weights."""

    p_cad: np.ndarray
    p_scan: np.ndarray
    weight: np.ndarray = None

    def __post_init__(self):
        pc = np.asarray(self.p_cad, dtype=np.float64)
        ps = np.asarray(self.p_scan, dtype=np.float64)
        if pc.ndim != 2 or pc.shape[1] != 3 or ps.shape != pc.shape:
            raise ValueError(f"point sets must both be (n, 3), got {pc.shape} and {ps.shape}")
        w = np.ones(len(pc)) if self.weight is None else np.asarray(self.weight, dtype=np.float64)
        if w.shape != (len(pc),):
            raise ValueError("need one weight per correspondence")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and non-negative")
        object.__setattr__(self, "p_cad", pc)
        object.__setattr__(self, "p_scan", ps)
        object.__setattr__(self, "weight", w)

    def __len__(self):
        return len(self.p_cad)

    def subset(self, idx):
        return CorrespondenceSet(self.p_cad[idx], self.p_scan[idx], self.weight[idx])


@dataclass(frozen=True)
class ProcrustesSolution:
    rotation: np.ndarray
    singular_values: np.ndarray
    centroids: tuple
    cross_covariance: np.ndarray
    U: np.ndarray
    Vt: np.ndarray
    d: float

    @property
    def c_cad(self):
        return self.centroids[0]

    @property
    def c_scan(self):
        return self.centroids[1]


def _centered(c):
    if len(c) < 3:
        raise TooFewPoints(f"need at least 3 correspondences, got {len(c)}")
    w = c.weight
    W = w.sum()
    if W <= 0:
        raise TooFewPoints("all correspondence weights are zero")
    c_cad = w @ c.p_cad / W
    c_scan = w @ c.p_scan / W
    return c_cad, c_scan, c.p_cad - c_cad, c.p_scan - c_scan


def solve_rotation(c):
    """Rotation minimizing ``sum_i w_i ||R (p_cad_i - c_cad) - (p_scan_i - c_scan)||^2``.

    Raises
    ------
    TooFewPoints
        Fewer than 3 correspondences or zero total weight.
    DegenerateConfiguration
        The centered cross-covariance has rank < 2 (e.g. collinear points),
        so the rotation is not determined.
    """
    c_cad, c_scan, qc, qs = _centered(c)
    H = (qs * c.weight[:, None]).T @ qc
    U, S, Vt = np.linalg.svd(H)
    if not np.all(np.isfinite(S)) or S[0] == 0 or S[1] <= RANK_RTOL * S[0]:
        raise DegenerateConfiguration(
            f"cross-covariance rank < 2 (singular values {S}); rotation undetermined")
    d = 1.0 if np.linalg.det(Vt.T @ U.T) >= 0 else -1.0
    R = U @ np.diag([1.0, 1.0, d]) @ Vt
    return ProcrustesSolution(R, S, (c_cad, c_scan), H, U, Vt, d)


def residual(c, R, scale=1.0, translation=None):
    """Weighted sum of squared residuals of ``scale * R p_cad + t`` vs ``p_scan``.

    Without ``translation`` both sets are centered on their weighted centroids.
    """
    if translation is None:
        _, _, qc, qs = _centered(c)
        r = scale * qc @ np.asarray(R).T - qs
    else:
        r = scale * c.p_cad @ np.asarray(R).T + translation - c.p_scan
    return float(c.weight @ (r ** 2).sum(axis=1))


def solve_similarity(c):
    """Weighted Umeyama fit of ``p_scan ~ s R p_cad + t`` with uniform ``s``.

    Returns
    -------
    (R, s, t)
    """
    sol = solve_rotation(c)
    _, _, qc, _ = _centered(c)
    var = float(c.weight @ (qc ** 2).sum(axis=1))
    if var <= 0:
        raise ZeroVariance("all CAD points coincide; scale undetermined")
    S = sol.singular_values
    s = (S[0] + S[1] + sol.d * S[2]) / var
    t = sol.c_scan - s * sol.rotation @ sol.c_cad
    return sol.rotation, float(s), t


def rotation_gradient(c, dL_dR, gap_eps=GAP_EPS, solution=None):
    """Back-propagate ``dL/dR`` to both point sets.

    Parameters
    ----------
    c : CorrespondenceSet
    dL_dR : (3, 3) array
        Gradient of a scalar loss with respect to the solved rotation.
    gap_eps : float
        Minimum admissible gap between singular values (and for
        ``s2 + s3``); below it the SVD derivative blows up and
        :class:`GradientSingular` is raised.

    Returns
    -------
    dL_dPcad, dL_dPscan : (n, 3) arrays
    """
    sol = solution if solution is not None else solve_rotation(c)
    S = sol.singular_values
    gaps = [S[0] - S[1], S[1] - S[2], S[0] - S[2], S[1] + S[2]]
    if min(gaps) <= gap_eps:
        raise GradientSingular(f"singular values {S} too close for a stable SVD derivative")

    U, V = sol.U, sol.Vt.T
    D = np.array([1.0, 1.0, sol.d])
    G = U.T @ np.asarray(dL_dR, dtype=np.float64) @ V

    # R = U D V^T. With P = U^T dH V, the antisymmetric generators of dU and
    # dV solve a 2x2 system per index pair; folding that into <G, dR> gives
    # dL/dP_ij = K_ij * (G_ij (D_j s_j - D_i s_i) - G_ji (D_i s_j - D_j s_i)),
    # K_ij = 1 / (s_j^2 - s_i^2) off the diagonal.
    s2 = S ** 2
    K = s2[None, :] - s2[:, None]
    np.fill_diagonal(K, 1.0)
    K = 1.0 / K
    np.fill_diagonal(K, 0.0)
    Ds_j = D[None, :] * S[None, :]
    Ds_i = D[:, None] * S[:, None]
    A = G * (Ds_j - Ds_i) - G.T * (D[:, None] * S[None, :] - D[None, :] * S[:, None])
    dL_dP = K * A
    dL_dH = U @ dL_dP @ V.T

    # H = sum_i w_i (s_i - c_s)(c_i - c_c)^T; centering terms vanish in the
    # differential because weighted centered sums are zero.
    _, _, qc, qs = _centered(c)
    w = c.weight[:, None]
    dL_dPscan = w * (qc @ dL_dH.T)
    dL_dPcad = w * (qs @ dL_dH)
    return dL_dPcad, dL_dPscan


def frobenius_loss_grad(R, R_gt):
    """``L = ||R - R_gt||_F^2`` and ``dL/dR``; the default rotation loss."""
    diff = np.asarray(R) - np.asarray(R_gt)
    return float((diff ** 2).sum()), 2.0 * diff
