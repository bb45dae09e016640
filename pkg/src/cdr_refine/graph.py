"""Residue graphs over the concatenated CDR loops.

Feature construction runs on the tape so that coordinates predicted by the
model stay differentiable through the graph rebuilt at the next iteration.
Only the neighbour selection (a discrete choice) is made on raw values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

NODE_DIM = 6
RBF_COUNT = 16
RBF_MAX = 20.0
OFFSET_CLAMP = 16
EDGE_DIM = RBF_COUNT + 3 + 1
# keeps norms differentiable when predicted atoms coincide
NORM_EPS = 1e-24


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _norm(v):
    return T.row_norm(v, NORM_EPS)


def _dot(a, b):
    return T.row_dot(a, b)


def torsion_sincos(p1, p2, p3, p4):
    """(sin, cos) columns of the torsion angle for row-aligned [m x 3] point tensors."""
    b1, b2, b3 = p2 - p1, p3 - p2, p4 - p3
    n1 = T.cross(b1, b2)
    n2 = T.cross(b2, b3)
    y = _norm(b2) * _dot(b1, n2)
    x = _dot(n1, n2)
    r = T.sqrt(x * x + y * y + NORM_EPS)
    return y / r, x / r


def _segments(lengths):
    out, start = [], 0
    for size in lengths:
        out.append((start, start + size))
        start += size
    return out


def _angle_positions(lengths):
    """Bundle indices where phi and psi/omega are defined within their own loop."""
    has_prev, has_next = [], []
    for start, stop in _segments(lengths):
        has_prev.extend(range(start + 1, stop))
        has_next.extend(range(start, stop - 1))
    return np.array(has_prev, dtype=np.intp), np.array(has_next, dtype=np.intp)


def _scatter_column(values, positions, size, fill):
    """Place ``values`` [m x 1] at ``positions`` in a length-``size`` column padded with ``fill``."""
    lookup = np.full(size, len(positions), dtype=np.intp)
    lookup[positions] = np.arange(len(positions))
    padded = T.concat([values, Tensor(np.full((1, 1), fill))], axis=0) if len(positions) else Tensor(np.full((1, 1), fill))
    return T.take_rows(padded, lookup)


def node_features(n, ca, c, lengths):
    """[r x 6] rows of (sin phi, cos phi, sin psi, cos psi, sin omega, cos omega).

    Torsions are computed inside each loop only; angles reaching past a loop
    end are undefined and encoded as (0, 1).
    """
    n, ca, c = _as_tensor(n), _as_tensor(ca), _as_tensor(c)
    r = ca.shape[0]
    prev_idx, next_idx = _angle_positions(lengths)
    cols = []
    if len(prev_idx):
        s, co = torsion_sincos(
            T.take_rows(c, prev_idx - 1), T.take_rows(n, prev_idx), T.take_rows(ca, prev_idx), T.take_rows(c, prev_idx)
        )
        cols += [_scatter_column(s, prev_idx, r, 0.0), _scatter_column(co, prev_idx, r, 1.0)]
    else:
        cols += [Tensor(np.zeros((r, 1))), Tensor(np.ones((r, 1)))]
    if len(next_idx):
        n_i, ca_i, c_i = T.take_rows(n, next_idx), T.take_rows(ca, next_idx), T.take_rows(c, next_idx)
        n_j, ca_j = T.take_rows(n, next_idx + 1), T.take_rows(ca, next_idx + 1)
        for s, co in (torsion_sincos(n_i, ca_i, c_i, n_j), torsion_sincos(ca_i, c_i, n_j, ca_j)):
            cols += [_scatter_column(s, next_idx, r, 0.0), _scatter_column(co, next_idx, r, 1.0)]
    else:
        cols += [Tensor(np.zeros((r, 1))), Tensor(np.ones((r, 1)))] * 2
    return T.concat(cols, axis=1)


def local_frames(n, ca, c):
    """Orthonormal residue frames (e1, e2, e3), each [r x 3], from CA->N and CA->C."""
    u1 = n - ca
    e1 = u1 / _norm(u1)
    u = c - ca
    u2 = u - e1 * _dot(e1, u)
    e2 = u2 / _norm(u2)
    return e1, e2, T.cross(e1, e2)


def knn_edges(ca, k=8):
    """Directed (source, neighbour) index arrays.

    Each residue links to its ``k`` nearest residues by CA distance (ties go to
    the lower index) and to its bundle neighbours i-1 and i+1.
    """
    ca = np.asarray(ca.data if isinstance(ca, Tensor) else ca)
    r = len(ca)
    if r < 2:
        raise ValueError(f"a residue graph needs at least 2 nodes, got {r}")
    dist = np.sqrt(((ca[:, None, :] - ca[None, :, :]) ** 2).sum(-1))
    src, dst = [], []
    for i in range(r):
        d = dist[i].copy()
        d[i] = np.inf
        order = np.argsort(d, kind="stable")[: min(k, r - 1)]
        chosen = list(order)
        for j in (i - 1, i + 1):
            if 0 <= j < r and j not in chosen:
                chosen.append(j)
        src.extend([i] * len(chosen))
        dst.extend(chosen)
    return np.array(src, dtype=np.intp), np.array(dst, dtype=np.intp)


def edge_features(n, ca, c, src, dst):
    """[E x 20]: 16 CA-distance RBFs, unit direction in the source frame, clamped offset."""
    n, ca, c = _as_tensor(n), _as_tensor(ca), _as_tensor(c)
    diff = T.take_rows(ca, dst) - T.take_rows(ca, src)
    dist = _norm(diff)
    centers = np.linspace(0.0, RBF_MAX, RBF_COUNT)[None, :]
    width = RBF_MAX / (RBF_COUNT - 1)
    scaled = (dist - centers) * (1.0 / width)
    rbf = T.exp(-(scaled * scaled))
    e1, e2, e3 = local_frames(n, ca, c)
    unit = diff / dist
    direction = T.concat([_dot(T.take_rows(e, src), unit) for e in (e1, e2, e3)], axis=1)
    offset = np.clip(dst - src, -OFFSET_CLAMP, OFFSET_CLAMP)[:, None] / OFFSET_CLAMP
    return T.concat([rbf, direction, Tensor(offset)], axis=1)


@dataclass
class LoopGraph:
    V: Tensor  # [r x 6]
    src: np.ndarray
    dst: np.ndarray
    E: Tensor  # [num_edges x 20]
    lengths: tuple

    @property
    def num_nodes(self):
        return self.V.shape[0]

    @property
    def loop_labels(self):
        return np.repeat(np.arange(1, 4), self.lengths)

    @property
    def boundaries(self):
        return tuple(s for s, _ in _segments(self.lengths))

    @property
    def edges(self):
        return [(int(i), int(j), self.E.data[e]) for e, (i, j) in enumerate(zip(self.src, self.dst))]

    def with_nodes(self, V):
        return LoopGraph(V, self.src, self.dst, self.E, self.lengths)


def build_graph(n, ca, c, lengths, k=8):
    """Graph over the residues of one bundle from (possibly tape-tracked) coordinates."""
    ca_t = _as_tensor(ca)
    src, dst = knn_edges(ca_t.data, k)
    return LoopGraph(
        V=node_features(n, ca, c, lengths),
        src=src,
        dst=dst,
        E=edge_features(n, ca, c, src, dst),
        lengths=tuple(lengths),
    )


def graph_from_bundle(bundle, k=8):
    return build_graph(bundle.n, bundle.ca, bundle.c, bundle.lengths, k)


def partition_nodes(graph):
    """Row blocks of V for H1, H2 and H3."""
    return tuple(graph.V[s:e] for s, e in _segments(graph.lengths))
