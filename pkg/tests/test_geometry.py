import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdr_refine.geometry import (
    GeometryError,
    backbone_dihedrals,
    ca_angle,
    dihedral,
    kabsch,
    kabsch_rmsd,
    rmsd_raw,
)
from cdr_refine.synthetic import build_backbone

from .conftest import axis_rotation, random_rotation
from .oracles import law_of_cosines_angle, rotation_search_rmsd, torsion_by_rotation


class TestDihedral:
    def test_planar_cis(self):
        assert dihedral((0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0)) == 0.0

    def test_planar_trans_is_plus_pi(self):
        assert dihedral((0, 0, 0), (1, 0, 0), (1, 1, 0), (2, 1, 0)) == math.pi

    def test_right_angle_sign(self):
        pts = [(0, 0, 0), (1, 0, 0), (1, 1, 0), (1, 1, 1)]
        expected = torsion_by_rotation(math.pi / 2, *pts[:3], (0, 1, 0))
        assert np.allclose(expected, pts[3])
        assert abs(dihedral(*pts) - math.pi / 2) < 1e-12

    @pytest.mark.parametrize("theta", np.linspace(-math.pi + 1e-3, math.pi, 13))
    def test_rotation_about_axis_oracle(self, theta):
        p1, p2, p3, cis = (0.3, -0.2, 0.1), (1.1, 0.0, 0.0), (1.4, 1.3, -0.2), (0.2, 1.6, 0.3)
        p4 = torsion_by_rotation(theta, p1, p2, p3, torsion_by_rotation(0.0, p1, p2, p3, cis))
        base = dihedral(p1, p2, p3, cis)
        want = (base + theta + math.pi) % (2 * math.pi) - math.pi
        got = dihedral(p1, p2, p3, p4)
        assert abs((got - want + math.pi) % (2 * math.pi) - math.pi) < 1e-10

    @pytest.mark.parametrize("pts", [
        [(0, 0, 0), (0, 0, 0), (1, 1, 0), (1, 1, 1)],
        [(0, 0, 0), (1, 0, 0), (2, 0, 0), (2, 1, 0)],
    ])
    def test_degenerate(self, pts):
        with pytest.raises(GeometryError):
            dihedral(*pts)

    def test_rigid_invariance(self, rng):
        pts = rng.normal(size=(4, 3))
        r, t = random_rotation(rng), rng.normal(size=3) * 10
        assert abs(dihedral(*pts) - dihedral(*(pts @ r.T + t))) < 1e-9


class TestBackboneDihedrals:
    def test_recovers_construction_torsions(self, rng):
        phi = rng.uniform(-3, 3, 6)
        psi = rng.uniform(-3, 3, 6)
        omega = rng.uniform(-3, 3, 6)
        triples = backbone_dihedrals(*build_backbone(phi, psi, omega))
        for i, tri in enumerate(triples):
            assert tri.defined == (i > 0, i < 5, i < 5)
            if i > 0:
                assert abs(tri.phi - phi[i]) < 1e-10
            if i < 5:
                assert abs(tri.psi - psi[i]) < 1e-10
                assert abs(tri.omega - omega[i]) < 1e-10
            else:
                assert tri.psi == tri.omega == 0.0
        assert triples[0].phi == 0.0

    def test_needs_two_residues(self):
        with pytest.raises(GeometryError):
            backbone_dihedrals(np.zeros((1, 3)), np.ones((1, 3)), np.ones((1, 3)))

    def test_error_names_residue(self):
        n = np.array([[0.0, 0, 0], [3, 0, 0]])
        ca = np.array([[1.0, 0, 0], [4, 0, 0]])
        c = np.array([[2.0, 0, 0], [5, 0, 0]])
        with pytest.raises(GeometryError, match="residue 0"):
            backbone_dihedrals(n, ca, c)


class TestCaAngle:
    def test_collinear(self):
        assert ca_angle((-1, 0, 0), (0, 0, 0), (2, 0, 0)) == math.pi

    def test_orthogonal(self):
        assert abs(ca_angle((1, 0, 0), (0, 0, 0), (0, 1, 0)) - math.pi / 2) < 1e-15

    def test_law_of_cosines(self, rng):
        for _ in range(50):
            a, b, c = rng.normal(size=(3, 3))
            assert abs(ca_angle(a, b, c) - law_of_cosines_angle(a, b, c)) < 1e-10

    def test_zero_arm(self):
        with pytest.raises(GeometryError):
            ca_angle((0, 0, 0), (0, 0, 0), (1, 0, 0))


class TestRmsd:
    def test_identical(self, rng):
        p = rng.normal(size=(5, 3))
        assert rmsd_raw(p, p) == 0.0

    def test_345(self):
        assert rmsd_raw([(0, 0, 0)], [(3, 4, 0)]) == 5.0

    def test_direct_summation(self, rng):
        p, q = rng.normal(size=(9, 3)), rng.normal(size=(9, 3))
        total = sum((p[i, j] - q[i, j]) ** 2 for i in range(9) for j in range(3))
        assert rmsd_raw(p, q) == pytest.approx(math.sqrt(total / 9), rel=1e-15)


class TestKabsch:
    def test_identity(self, rng):
        p = rng.normal(size=(6, 3))
        rot, t, rmsd = kabsch(p, p)
        assert rmsd < 1e-12
        assert np.allclose(rot, np.eye(3), atol=1e-12)

    def test_recovers_37_degree_motion(self, rng):
        p = rng.normal(size=(10, 3))
        r = axis_rotation(rng.normal(size=3), math.radians(37))
        q = p @ r.T + np.array([1.0, 2.0, 3.0])
        rot, t, rmsd = kabsch(p, q)
        assert rmsd < 1e-9
        assert np.allclose(rot, r, atol=1e-10)
        assert np.allclose(p @ rot.T + t, q, atol=1e-9)

    def test_mirror_image_matches_search(self):
        p = np.array([[0.0, 0, 0], [1.5, 0, 0], [0, 1.0, 0], [0, 0, 2.0]])
        q = p * np.array([-1.0, 1, 1])
        rot, _, rmsd = kabsch(p, q)
        assert np.linalg.det(rot) == pytest.approx(1.0, abs=1e-10)
        assert abs(rmsd - rotation_search_rmsd(p, q)) < 1e-3

    def test_contract_errors(self):
        with pytest.raises(ValueError, match="at least 3"):
            kabsch(np.zeros((2, 3)), np.zeros((2, 3)))
        with pytest.raises(ValueError, match="coincide"):
            kabsch(np.ones((4, 3)), np.zeros((4, 3)))

    def test_rank_deficient_is_handled(self):
        p = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]])
        rot, _, rmsd = kabsch(p, p[:, [1, 0, 2]])
        assert rmsd < 1e-9
        assert np.linalg.det(rot) == pytest.approx(1.0)

    @given(st.integers(3, 12), st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_properties(self, n, seed):
        rng = np.random.default_rng(seed)
        p, q = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
        rot, _, rmsd = kabsch(p, q)
        assert np.allclose(rot.T @ rot, np.eye(3), atol=1e-10)
        assert abs(np.linalg.det(rot) - 1) < 1e-10
        assert rmsd <= rmsd_raw(p, q) + 1e-12
        assert abs(rmsd - kabsch_rmsd(q, p)) < 1e-9
