import math

import numpy as np
import pytest

from surgsim.constitutive import (
    SQRT3,
    deformation_gradient,
    deviatoric_constraint,
    elastic_residuals,
    hydrostatic_constraint,
    neo_hookean_energy,
)
from surgsim.mesh import TetMesh, compute_rest_state

from conftest import random_tet


def _rest(pts):
    mesh = TetMesh(vertices=np.asarray(pts, dtype=np.float64),
                   tets=np.array([[0, 1, 2, 3]]))
    compute_rest_state(mesh)
    return mesh.rest_inv[0]


REST_PTS = np.array([
    [0.0, 0.0, 0.0],
    [0.05, 0.0, 0.0],
    [0.0, 0.05, 0.0],
    [0.0, 0.0, 0.05],
])


class TestDeformationGradient:
    def test_rest_is_identity(self):
        b = _rest(REST_PTS)
        f = deformation_gradient(REST_PTS, b)
        assert np.allclose(f, np.eye(3), atol=1e-12)

    def test_uniform_scaling(self):
        b = _rest(REST_PTS)
        centroid = REST_PTS.mean(axis=0)
        scaled = centroid + 2.0 * (REST_PTS - centroid)
        f = deformation_gradient(scaled, b)
        assert np.allclose(f, 2.0 * np.eye(3), atol=1e-12)
        assert np.linalg.det(f) == pytest.approx(8.0, rel=1e-12)

    def test_reflection_gives_negative_det(self):
        b = _rest(REST_PTS)
        mirrored = REST_PTS.copy()
        mirrored[:, 0] *= -1.0
        f = deformation_gradient(mirrored, b)
        assert np.linalg.det(f) < 0


class TestConstraintValues:
    def test_hydrostatic_examples(self):
        b = _rest(REST_PTS)
        assert hydrostatic_constraint(np.eye(3), b).value == pytest.approx(0.0, abs=1e-12)
        assert hydrostatic_constraint(2.0 * np.eye(3), b).value == pytest.approx(7.0)
        f = np.diag([1.0, 1.0, 0.5])
        assert hydrostatic_constraint(f, b).value == pytest.approx(-0.5)

    def test_hydrostatic_rest_correction(self):
        b = _rest(REST_PTS)
        assert hydrostatic_constraint(np.eye(3), b, rest_correction=0.25).value == \
            pytest.approx(-0.25)

    def test_deviatoric_examples(self):
        b = _rest(REST_PTS)
        assert deviatoric_constraint(np.eye(3), b).value == pytest.approx(math.sqrt(3.0))
        assert deviatoric_constraint(2.0 * np.eye(3), b).value == pytest.approx(math.sqrt(12.0))
        f = np.diag([2.0, 1.0, 1.0])
        assert deviatoric_constraint(f, b).value == pytest.approx(math.sqrt(6.0))

    def test_deviatoric_floor_and_collapse_guard(self, rng):
        b = _rest(REST_PTS)
        for _ in range(20):
            f = rng.normal(size=(3, 3))
            assert deviatoric_constraint(f, b).value >= 0.0
        collapsed = deviatoric_constraint(np.zeros((3, 3)), b)
        assert collapsed.value == 0.0
        assert np.all(collapsed.gradients == 0.0)


class TestEnergy:
    def test_rest_energy_zero(self):
        assert neo_hookean_energy(np.eye(3), 2.0, 2.0) == pytest.approx(0.0, abs=1e-14)

    def test_direct_substitution(self):
        # det(2I) = 8 -> (lam/2) * 49; tr = 12 -> (mu/2) * 9
        assert neo_hookean_energy(2.0 * np.eye(3), 2.0, 2.0) == pytest.approx(58.0)

    def test_small_strain_expansion(self):
        # numeric expansion oracle: for F = diag(1, 1, 1+eps) the exact energy
        # is (lam/2) eps^2 + mu eps + (mu/2) eps^2, since det and trace are
        # polynomial in eps
        lam, mu = 164429.5302013423, 3355.7046979865772
        for eps in (1e-3, 1e-4, -1e-4):
            f = np.diag([1.0, 1.0, 1.0 + eps])
            expected = 0.5 * lam * eps**2 + mu * eps + 0.5 * mu * eps**2
            assert neo_hookean_energy(f, lam, mu) == pytest.approx(expected, rel=1e-10)

    def test_energy_constraint_consistency(self, rng):
        # (lam/2) C_H^2 equals the hydrostatic term, per element
        lam = 1234.5
        b = _rest(REST_PTS)
        for _ in range(10):
            pts = REST_PTS + rng.normal(scale=5e-3, size=(4, 3))
            f = deformation_gradient(pts, b)
            c_h = hydrostatic_constraint(f, b).value
            psi_h = 0.5 * lam * (np.linalg.det(f) - 1.0) ** 2
            assert 0.5 * lam * c_h**2 == pytest.approx(psi_h, rel=1e-12)


def _fd_gradient(constraint, pts, rest_inv, h=1e-6):
    """Central finite differences of the constraint value in vertex positions."""
    grads = np.zeros((4, 3))
    for i in range(4):
        for k in range(3):
            plus = pts.copy()
            plus[i, k] += h
            minus = pts.copy()
            minus[i, k] -= h
            fp = deformation_gradient(plus, rest_inv)
            fm = deformation_gradient(minus, rest_inv)
            grads[i, k] = (constraint(fp, rest_inv).value
                           - constraint(fm, rest_inv).value) / (2.0 * h)
    return grads


class TestGradients:
    @pytest.mark.parametrize("constraint", [hydrostatic_constraint, deviatoric_constraint])
    def test_analytic_matches_finite_differences(self, constraint, rng):
        for _ in range(100):
            rest = random_tet(rng)
            b = _rest(rest)
            pts = rest + rng.normal(scale=0.2 * 0.05, size=(4, 3))
            f = deformation_gradient(pts, b)
            analytic = constraint(f, b).gradients
            numeric = _fd_gradient(constraint, pts, b)
            scale = max(np.abs(numeric).max(), 1.0)
            assert np.abs(analytic - numeric).max() / scale < 1e-5

    @pytest.mark.parametrize("constraint", [hydrostatic_constraint, deviatoric_constraint])
    def test_translation_invariance(self, constraint, rng):
        rest = random_tet(rng)
        b = _rest(rest)
        pts = rest + rng.normal(scale=0.01, size=(4, 3))
        shift = pts + np.array([0.123, -4.56, 7.89])
        f0 = deformation_gradient(pts, b)
        f1 = deformation_gradient(shift, b)
        c0, c1 = constraint(f0, b), constraint(f1, b)
        assert c1.value == pytest.approx(c0.value, abs=1e-10)
        assert np.abs(c0.gradients.sum(axis=0)).max() < 1e-9

    def test_rotation_invariance(self, rng):
        from scipy.spatial.transform import Rotation

        rest = random_tet(rng)
        b = _rest(rest)
        pts = rest + rng.normal(scale=0.01, size=(4, 3))
        rot = Rotation.random(random_state=7).as_matrix()
        f0 = deformation_gradient(pts, b)
        f1 = deformation_gradient(pts @ rot.T, b)
        assert deviatoric_constraint(f1, b).value == pytest.approx(
            deviatoric_constraint(f0, b).value, abs=1e-9)
        assert hydrostatic_constraint(f1, b).value == pytest.approx(
            hydrostatic_constraint(f0, b).value, abs=1e-9)


def test_batched_residuals_match_scalar_path(rng):
    pts = np.array([random_tet(rng) for _ in range(5)]).reshape(-1, 3)
    tets = np.arange(20, dtype=np.int64).reshape(5, 4)
    mesh = TetMesh(vertices=pts, tets=tets)
    compute_rest_state(mesh)
    moved = pts + rng.normal(scale=1e-3, size=pts.shape)
    dev, hyd = elastic_residuals(moved, tets, mesh.rest_inv)
    for t in range(5):
        f = deformation_gradient(moved[tets[t]], mesh.rest_inv[t])
        assert dev[t] == pytest.approx(deviatoric_constraint(f, mesh.rest_inv[t]).value - SQRT3)
        assert hyd[t] == pytest.approx(hydrostatic_constraint(f, mesh.rest_inv[t]).value)
