"""Neo-Hookean hydrostatic/deviatoric constraint functions with analytic gradients.

Energy density splits into a volume-preserving term driven by det(F) and a
distortion term driven by the Frobenius norm of F; both are exposed as
constraint functions suitable for compliance-based position projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SQRT3 = math.sqrt(3.0)

# Below this Frobenius norm an element is fully collapsed and the deviatoric
# gradient direction is undefined; gradients are zeroed instead of divided.
DEVIATORIC_EPS = 1e-9


@dataclass
class ConstraintEval:
    value: float
    gradients: np.ndarray  # (4, 3), one per tet vertex; rows sum to zero


def deformation_gradient(positions: np.ndarray, rest_inv: np.ndarray) -> np.ndarray:
    """F = D_s * rest_inv for one tet given its 4 deformed vertex positions.

    Inverted elements yield det(F) < 0, which is valid downstream input.
    """
    p = np.asarray(positions, dtype=np.float64)
    d_s = np.stack([p[1] - p[0], p[2] - p[0], p[3] - p[0]], axis=1)
    return d_s @ rest_inv


def _cofactor(f: np.ndarray) -> np.ndarray:
    """d det(F) / dF, columns are cross products of F's columns."""
    c0 = np.cross(f[:, 1], f[:, 2])
    c1 = np.cross(f[:, 2], f[:, 0])
    c2 = np.cross(f[:, 0], f[:, 1])
    return np.stack([c0, c1, c2], axis=1)


def _chain_to_vertices(dC_dF: np.ndarray, rest_inv: np.ndarray) -> np.ndarray:
    """Chain a 3x3 gradient w.r.t. F through F = D_s * B to the 4 vertices."""
    g = dC_dF @ rest_inv.T  # columns are gradients w.r.t. x1, x2, x3
    grads = np.zeros((4, 3))
    grads[1] = g[:, 0]
    grads[2] = g[:, 1]
    grads[3] = g[:, 2]
    grads[0] = -grads[1] - grads[2] - grads[3]
    return grads


def hydrostatic_constraint(
    f: np.ndarray, rest_inv: np.ndarray, rest_correction: float = 0.0
) -> ConstraintEval:
    """C_H = det(F) - 1 (- rest_correction when the opt-in stabilization is on)."""
    cof = _cofactor(f)
    value = float(np.linalg.det(f)) - 1.0 - rest_correction
    return ConstraintEval(value, _chain_to_vertices(cof, rest_inv))


def deviatoric_constraint(f: np.ndarray, rest_inv: np.ndarray) -> ConstraintEval:
    """C_D = sqrt(tr(F^T F)), the Frobenius norm of F; sqrt(3) at rest.

    The solver projects C_D - sqrt(3) so the rest state carries no force.
    """
    norm = float(np.sqrt((f * f).sum()))
    if norm < DEVIATORIC_EPS:
        return ConstraintEval(norm, np.zeros((4, 3)))
    return ConstraintEval(norm, _chain_to_vertices(f / norm, rest_inv))


def neo_hookean_energy(f: np.ndarray, lame_lambda: float, lame_mu: float) -> float:
    """Energy density (Pa): lambda/2 (det F - 1)^2 + mu/2 (tr(F^T F) - 3)."""
    det = float(np.linalg.det(f))
    tr = float((f * f).sum())
    return 0.5 * lame_lambda * (det - 1.0) ** 2 + 0.5 * lame_mu * (tr - 3.0)


def deformation_gradients(positions: np.ndarray, tets: np.ndarray, rest_inv: np.ndarray) -> np.ndarray:
    """Batched F for all tets; (m, 3, 3)."""
    p = positions[tets]
    d_s = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0], p[:, 3] - p[:, 0]], axis=2)
    return d_s @ rest_inv


def elastic_residuals(
    positions: np.ndarray,
    tets: np.ndarray,
    rest_inv: np.ndarray,
    rest_correction: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Effective constraint values (C_D - sqrt3, C_H) for all tets, batched."""
    f = deformation_gradients(positions, tets, rest_inv)
    dev = np.sqrt((f * f).sum(axis=(1, 2))) - SQRT3
    hyd = np.linalg.det(f) - 1.0 - rest_correction
    return dev, hyd
