"""Backbone geometry on plain numpy arrays: torsions, Calpha angles, superposition."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class GeometryError(ValueError):
    """Points are degenerate for the requested construction."""


_TINY = 1e-12


def _vec(p):
    return np.asarray(p, dtype=np.float64)


def dihedral(p1, p2, p3, p4):
    """Signed torsion angle in radians for the chain p1-p2-p3-p4.

    Positive values follow the right-hand rule about the p2->p3 axis.
    """
    p1, p2, p3, p4 = map(_vec, (p1, p2, p3, p4))
    b1, b2, b3 = p2 - p1, p3 - p2, p4 - p3
    n1 = np.cross(b1, b2)
    n2 = np.cross(b2, b3)
    nb2 = np.linalg.norm(b2)
    if nb2 < _TINY or np.linalg.norm(n1) < _TINY or np.linalg.norm(n2) < _TINY:
        raise GeometryError("dihedral undefined for coincident or collinear points")
    y = nb2 * np.dot(b1, n2)
    x = np.dot(n1, n2)
    angle = float(np.arctan2(y, x))
    # atan2 returns -pi for the trans case on the negative side of zero
    return np.pi if angle == -np.pi else angle


@dataclass(frozen=True)
class DihedralTriple:
    phi: float
    psi: float
    omega: float
    defined: tuple

    def as_array(self):
        return np.array([self.phi, self.psi, self.omega])


def backbone_dihedrals(n, ca, c):
    """Per-residue (phi, psi, omega) for one contiguous chain segment.

    Angles needing a neighbour past either end are reported as 0 with their
    ``defined`` flag cleared. Requires at least two residues.
    """
    n, ca, c = (np.asarray(a, dtype=np.float64) for a in (n, ca, c))
    count = len(ca)
    if count < 2:
        raise GeometryError(f"need at least 2 residues for backbone dihedrals, got {count}")
    out = []
    for i in range(count):
        values, mask = [0.0, 0.0, 0.0], [False, False, False]
        try:
            if i > 0:
                values[0], mask[0] = dihedral(c[i - 1], n[i], ca[i], c[i]), True
            if i < count - 1:
                values[1], mask[1] = dihedral(n[i], ca[i], c[i], n[i + 1]), True
                values[2], mask[2] = dihedral(ca[i], c[i], n[i + 1], ca[i + 1]), True
        except GeometryError as exc:
            raise GeometryError(f"residue {i}: {exc}") from None
        out.append(DihedralTriple(values[0], values[1], values[2], tuple(mask)))
    return out


def ca_angle(a, b, c):
    """Interior angle at ``b`` in [0, pi]."""
    a, b, c = map(_vec, (a, b, c))
    u, v = a - b, c - b
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < _TINY or nv < _TINY:
        raise GeometryError("angle undefined for a zero-length arm")
    # arctan2 keeps full precision near 0 and pi, where arccos does not
    return float(np.arctan2(np.linalg.norm(np.cross(u, v)), np.dot(u, v)))


def rmsd_raw(p, q):
    """Root-mean-square deviation without any superposition."""
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"point sets differ in shape: {p.shape} vs {q.shape}")
    return float(np.sqrt(np.mean(np.sum((p - q) ** 2, axis=-1))))


def kabsch(p, q):
    """Proper rotation ``R`` and translation ``t`` minimising RMSD of ``R p + t`` against ``q``.

    Returns ``(R, t, rmsd)``. A reflection in the SVD solution is removed by
    flipping the sign of the axis with the smallest singular value.
    """
    p, q = np.asarray(p, dtype=np.float64), np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 2 or p.shape[1] != 3:
        raise ValueError(f"kabsch needs two [n x 3] arrays, got {p.shape} and {q.shape}")
    if len(p) < 3:
        raise ValueError(f"kabsch needs at least 3 points, got {len(p)}")
    pc, qc = p.mean(axis=0), q.mean(axis=0)
    p0, q0 = p - pc, q - qc
    if np.allclose(p0, 0.0, atol=_TINY):
        raise ValueError("kabsch undefined when all points coincide")
    u, _, vt = np.linalg.svd(p0.T @ q0)
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    trans = qc - rot @ pc
    return rot, trans, rmsd_raw(p0 @ rot.T, q0)


def kabsch_rmsd(p, q):
    return kabsch(p, q)[2]
