"""Finite-difference verification of every primitive and of the end-to-end loss."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .losses import total_loss
from .model import ModelConfig, init_params, run_refinement
from .synthetic import synthetic_record

TOLERANCE = 1e-4
EPS = 1e-5
TOY_LOOPS = (3, 3, 3)
TOY_MODEL = ModelConfig(z=2, q=2, layers=1, hidden=3)


def _primitive_cases(rng):
    C = T.Tensor
    w = rng.normal(size=(4, 3))
    k2 = rng.normal(size=(2, 1, 2, 2))
    k3 = rng.normal(size=(1, 1, 3, 3))
    img = rng.normal(size=(1, 4, 5))
    proj = rng.normal(size=(4, 3))
    rows = rng.normal(size=(5, 3))
    flip = rows[::-1].copy()
    mat = rng.normal(size=(6, 2))
    idx = np.array([0, 2, 2, 4, 1])
    return [
        ("matmul", lambda x: (T.matmul(x, C(w)) ** 2).sum(), rng.normal(size=(2, 4))),
        ("conv2d/input", lambda x: (T.conv2d(x, C(k2)) ** 2).sum(), img),
        ("conv2d/kernel", lambda x: (T.conv2d(C(img), x) ** 2).sum(), k2.copy()),
        ("conv2d/z=3", lambda x: (T.conv2d(x, C(k3)) ** 2).sum(), img.copy()),
        ("relu", lambda x: (T.relu(x) * C(proj)).sum(), rng.normal(size=(4, 3))),
        ("sigmoid", lambda x: (T.sigmoid(x) * C(proj)).sum(), rng.normal(size=(4, 3))),
        ("softmax", lambda x: (T.softmax(x) * C(proj)).sum(), rng.normal(size=(4, 3))),
        ("log_softmax", lambda x: (T.log_softmax(x) * C(proj)).sum(), rng.normal(size=(4, 3))),
        ("batch_norm", lambda x: (T.batch_norm(x, 1.3, 0.2) * C(proj)).sum(), rng.normal(size=(4, 3))),
        ("huber", lambda x: (T.huber(x) * C(proj)).sum(), rng.normal(scale=2.0, size=(4, 3))),
        ("exp/log/sqrt", lambda x: (T.log(T.exp(x) + 1.0) + T.sqrt(x * x + 1.0)).sum(), rng.normal(size=(4, 3))),
        ("division", lambda x: (x / (x * x + 2.0)).sum(), rng.normal(size=(4, 3))),
        ("cross", lambda x: (T.cross(x, C(rows)) * C(flip)).sum(), rng.normal(size=(5, 3))),
        ("row_norm", lambda x: T.row_norm(x, 1e-10).sum(), rng.normal(size=(5, 3))),
        ("row_dot", lambda x: (T.row_dot(x, C(rows)) ** 2).sum(), rng.normal(size=(5, 3))),
        ("take_rows", lambda x: (T.take_rows(x, idx) * C(rows)).sum(), rng.normal(size=(5, 3))),
        ("concat/getitem", lambda x: (T.concat([x[1:], x[:2] * 2.0], axis=0) ** 2).sum(), rng.normal(size=(4, 3))),
        ("transpose/reshape", lambda x: (x.T.reshape(2, 6) @ C(mat)).sum(), rng.normal(size=(4, 3))),
    ]


def end_to_end_case(seed=0, config=TOY_MODEL, loops=TOY_LOOPS):
    """(loss function of the parameters, parameter list) for a small synthetic antibody."""
    record = synthetic_record(np.random.default_rng(seed), loops, pdb_id="toy")
    params = init_params(config, seed)

    def loss(_):
        result = run_refinement(record, params, config, "teacher_forced")
        return total_loss(result.trace, result.bundle, w_seq=1.0).tensor

    return loss, list(params.values())


def run_suite(seed=0, eps=EPS, end_to_end=True):
    """Returns ``[(name, max_relative_error, passed), ...]``."""
    rng = np.random.default_rng(seed)
    results = []
    for name, fn, x0 in _primitive_cases(rng):
        err = T.grad_check(fn, T.parameter(x0), eps)
        results.append((name, err, err < TOLERANCE))
    if end_to_end:
        fn, params = end_to_end_case(seed)
        err = T.grad_check(fn, params, eps)
        results.append(("end-to-end loss", err, err < TOLERANCE))
    return results
