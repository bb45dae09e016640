"""Training objective: residue cross-entropy plus distance, torsion and CA-angle terms."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .graph import _angle_positions, _dot, _norm, _segments, torsion_sincos
from .tensor import Tensor

logger = logging.getLogger(__name__)

HUBER_DELTA = 1.0


def _t(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def seq_loss(log_probs, ground):
    """Summed negative log-likelihood of the ground-truth residue at each step."""
    if len(log_probs) != len(ground):
        raise ValueError(f"{len(log_probs)} predictions for {len(ground)} residues")
    total = Tensor(0.0)
    for lp, g in zip(log_probs, ground):
        total = total - _t(lp)[int(g)]
    return total


def _pairwise_distances(ca):
    i, j = np.triu_indices(ca.shape[0], k=1)
    return _norm(T.take_rows(ca, i) - T.take_rows(ca, j))


def dist_loss(ca_pred, ca_true, delta=HUBER_DELTA):
    """Mean Huber penalty over all i<j CA-CA distance errors."""
    ca_pred, ca_true = _t(ca_pred), _t(ca_true)
    if ca_pred.shape != ca_true.shape:
        raise ValueError(f"shape mismatch {ca_pred.shape} vs {ca_true.shape}")
    return _dist_term(ca_pred, _true_distances(ca_true), delta)


def _true_distances(ca):
    return _pairwise_distances(_t(ca)).data if ca.shape[0] >= 2 else None


def _dist_term(ca_pred, d_true, delta=HUBER_DELTA):
    if d_true is None:
        return Tensor(0.0)
    return T.huber(_pairwise_distances(ca_pred) - d_true, delta).mean()


def _torsions(n, ca, c, lengths):
    """(sin, cos) column pairs for every torsion defined inside a loop."""
    prev_idx, next_idx = _angle_positions(lengths)
    out = []
    if len(prev_idx):
        out.append(torsion_sincos(T.take_rows(c, prev_idx - 1), T.take_rows(n, prev_idx), T.take_rows(ca, prev_idx), T.take_rows(c, prev_idx)))
    if len(next_idx):
        n_i, ca_i, c_i = T.take_rows(n, next_idx), T.take_rows(ca, next_idx), T.take_rows(c, next_idx)
        n_j, ca_j = T.take_rows(n, next_idx + 1), T.take_rows(ca, next_idx + 1)
        out.append(torsion_sincos(n_i, ca_i, c_i, n_j))
        out.append(torsion_sincos(ca_i, c_i, n_j, ca_j))
    return out


def dihedral_loss(pred, true, lengths):
    """Mean squared error between (sin, cos) encodings of the defined phi/psi/omega.

    ``pred`` and ``true`` are (N, CA, C) triples. Returns 0 (and logs) when no
    torsion is defined, e.g. for single-residue loops.
    """
    g = _true_torsions(true, lengths)
    if not g:
        logger.warning("no torsion defined for loop lengths %s; dihedral loss is 0", tuple(lengths))
    return _dihedral_term(pred, g, lengths)


def _true_torsions(true, lengths):
    return [(s.data, c.data) for s, c in _torsions(*(_t(a) for a in true), lengths)]


def _dihedral_term(pred, g, lengths):
    if not g:
        logger.debug("no torsion defined for loop lengths %s; dihedral loss is 0", tuple(lengths))
        return Tensor(0.0)
    p = _torsions(*(_t(a) for a in pred), lengths)
    sq, count = Tensor(0.0), 0
    for (ps, pc), (gs, gc) in zip(p, g):
        ds, dc = ps - gs, pc - gc
        sq = sq + (ds * ds).sum() + (dc * dc).sum()
        count += 2 * ps.shape[0]
    return sq * (1.0 / count)


def _ca_cosines(ca, lengths):
    mids = [i for start, stop in _segments(lengths) for i in range(start + 1, stop - 1)]
    if not mids:
        return None
    mids = np.array(mids, dtype=np.intp)
    b = T.take_rows(ca, mids)
    u = T.take_rows(ca, mids - 1) - b
    v = T.take_rows(ca, mids + 1) - b
    return _dot(u, v) / (_norm(u) * _norm(v))


def ca_angle_loss(ca_pred, ca_true, lengths):
    """Mean squared difference of cos(angle) at every interior CA of each loop."""
    return _ca_term(ca_pred, _true_cosines(ca_true, lengths), lengths)


def _true_cosines(ca, lengths):
    cos = _ca_cosines(_t(ca), lengths)
    return None if cos is None else cos.data


def _ca_term(ca_pred, cos_true, lengths):
    if cos_true is None:
        return Tensor(0.0)
    d = _ca_cosines(_t(ca_pred), lengths) - cos_true
    return (d * d).mean()


@dataclass
class LossReport:
    l_seq: float
    l_d: float
    l_beta: float
    l_ca: float
    l_struct: float
    total: float
    per_iteration: list = field(default_factory=list)
    tensor: Tensor | None = field(default=None, repr=False)

    def as_dict(self):
        return {k: getattr(self, k) for k in ("l_seq", "l_d", "l_beta", "l_ca", "l_struct", "total")}


def default_seq_weight(mode):
    return 1.0 if mode == "generative" else 0.0


def total_loss(trace, bundle, w_seq=0.0):
    """Sequence loss plus structural losses summed over every iteration's coordinates."""
    lengths = bundle.lengths
    true = (bundle.n, bundle.ca, bundle.c)
    l_seq = seq_loss([s.log_probs for s in trace], bundle.residue_ids)
    d_true = _true_distances(bundle.ca)
    tors_true = _true_torsions(true, lengths)
    cos_true = _true_cosines(bundle.ca, lengths)
    l_d, l_beta, l_ca = Tensor(0.0), Tensor(0.0), Tensor(0.0)
    rows = []
    for t, step in enumerate(trace):
        d = _dist_term(step.ca, d_true)
        b = _dihedral_term((step.n, step.ca, step.c), tors_true, lengths)
        a = _ca_term(step.ca, cos_true, lengths)
        l_d, l_beta, l_ca = l_d + d, l_beta + b, l_ca + a
        rows.append({"t": t, "l_d": d.item(), "l_beta": b.item(), "l_ca": a.item()})
    l_struct = l_d + l_beta + l_ca
    total = l_seq * w_seq + l_struct
    return LossReport(
        l_seq=l_seq.item(),
        l_d=l_d.item(),
        l_beta=l_beta.item(),
        l_ca=l_ca.item(),
        l_struct=l_struct.item(),
        total=total.item(),
        per_iteration=rows,
        tensor=total,
    )
