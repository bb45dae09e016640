"""Synthetic heavy chains with ideal backbone geometry, for tests and demos."""

from __future__ import annotations

import numpy as np

from .data import AMINO_ACIDS, AntibodyRecord

BOND_N_CA = 1.458
BOND_CA_C = 1.525
BOND_C_N = 1.329
ANGLE_N_CA_C = np.deg2rad(111.2)
ANGLE_CA_C_N = np.deg2rad(116.2)
ANGLE_C_N_CA = np.deg2rad(121.7)


def place_atom(a, b, c, bond, angle, torsion):
    """Position of d with |cd| = bond, angle(b, c, d) = angle, dihedral(a, b, c, d) = torsion."""
    bc = c - b
    bc /= np.linalg.norm(bc)
    normal = np.cross(b - a, bc)
    normal /= np.linalg.norm(normal)
    frame = np.stack([bc, np.cross(normal, bc), normal], axis=1)
    local = bond * np.array([-np.cos(angle), np.sin(angle) * np.cos(torsion), np.sin(angle) * np.sin(torsion)])
    return c + frame @ local


def build_backbone(phi, psi, omega):
    """N, CA, C arrays for a chain with the given torsions (phi[0] and psi/omega[-1] unused)."""
    count = len(phi)
    n = np.zeros((count, 3))
    ca = np.zeros((count, 3))
    c = np.zeros((count, 3))
    n[0] = [0.0, 0.0, 0.0]
    ca[0] = [BOND_N_CA, 0.0, 0.0]
    c[0] = ca[0] + BOND_CA_C * np.array([-np.cos(ANGLE_N_CA_C), np.sin(ANGLE_N_CA_C), 0.0])
    for i in range(1, count):
        n[i] = place_atom(n[i - 1], ca[i - 1], c[i - 1], BOND_C_N, ANGLE_CA_C_N, psi[i - 1])
        ca[i] = place_atom(ca[i - 1], c[i - 1], n[i], BOND_N_CA, ANGLE_C_N_CA, omega[i - 1])
        c[i] = place_atom(c[i - 1], n[i], ca[i], BOND_CA_C, ANGLE_N_CA_C, phi[i])
    return n, ca, c


def random_backbone(count, rng):
    phi = rng.uniform(-np.pi, np.pi, count)
    psi = rng.uniform(-np.pi, np.pi, count)
    omega = np.pi + rng.normal(0.0, 0.1, count)
    return build_backbone(phi, psi, omega)


def synthetic_record(rng, loop_lengths=(7, 6, 10), gap=4, pdb_id="syn0", resolution=2.0, seq=None):
    """A heavy-chain fragment with ``gap`` framework residues around each loop."""
    spans, pos = [], gap
    for length in loop_lengths:
        spans.append((pos, pos + length - 1))
        pos += length + gap
    total = pos
    if seq is None:
        seq = "".join(rng.choice(list(AMINO_ACIDS), size=total))
    n, ca, c = random_backbone(total, rng)
    return AntibodyRecord(
        pdb_id=pdb_id,
        heavy_seq=seq,
        loop_spans=tuple(spans),
        coords={"N": n, "CA": ca, "C": c},
        resolution=resolution,
    ).validate()
