"""One test per acceptance criterion; each also emits a PASS/FAIL line in the run summary."""

import math
import time

import numpy as np
import pytest

from cdr_refine import tensor as T
from cdr_refine.data import bundle_loops, parse_jsonl, preprocess, split, write_jsonl
from cdr_refine.evaluation import TABLE1_H3, TABLE1_OURS, improvement_pct, loop_rmsd
from cdr_refine.geometry import ca_angle, dihedral, kabsch
from cdr_refine.gradcheck import EPS, TOLERANCE, end_to_end_case
from cdr_refine.losses import total_loss
from cdr_refine.model import ModelConfig, fuse_masks, init_params, loop_attention, run_refinement
from cdr_refine.synthetic import synthetic_record
from cdr_refine.tensor import Tensor
from cdr_refine.training import TrainConfig, fit, load_checkpoint, save_checkpoint

from .conftest import ACCEPTANCE_LINES, random_rotation
from .oracles import law_of_cosines_angle, rotation_search_rmsd, torsion_by_rotation
from .test_evaluation import TABLE1_IMPROVEMENT


def verdict(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_gradient_correctness():
    start = time.perf_counter()
    fn, params = end_to_end_case(seed=0)
    err = T.grad_check(fn, params, EPS)
    elapsed = time.perf_counter() - start
    verdict(
        "gradient correctness",
        err < TOLERANCE and elapsed < 60,
        f"max rel err {err:.2e} (< {TOLERANCE:g}) over {sum(p.size for p in params)} parameters in {elapsed:.1f}s (< 60s)",
    )


def test_table_arithmetic():
    worst = max(abs(improvement_pct(TABLE1_H3[k], TABLE1_OURS) - TABLE1_IMPROVEMENT[k]) for k in TABLE1_H3)
    verdict("Table I arithmetic", worst < 1e-3 and len(TABLE1_H3) == 7, f"7 rows, max deviation {worst:.1e} points")


def test_kabsch_oracle():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        p = rng.normal(size=(int(rng.integers(3, 30)), 3)) * 10
        q = p @ random_rotation(rng).T + rng.normal(size=3) * 50
        worst = max(worst, kabsch(p, q)[2])
    mirror_gap = 0.0
    for _ in range(5):
        p = rng.normal(size=(4, 3)) * 3
        q = p * np.array([1.0, 1.0, -1.0])
        mirror_gap = max(mirror_gap, abs(kabsch(p, q)[2] - rotation_search_rmsd(p, q)))
    elapsed = time.perf_counter() - start
    verdict(
        "Kabsch oracle",
        worst < 1e-9 and mirror_gap < 1e-3 and elapsed < 30,
        f"rigid max rmsd {worst:.1e}, mirror gap {mirror_gap:.1e}, {elapsed:.1f}s",
    )


def test_geometry_oracles():
    rng = np.random.default_rng(7)
    errs = [
        abs(dihedral((0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0)) - 0.0),
        abs(dihedral((0, 0, 0), (1, 0, 0), (1, 1, 0), (2, 1, 0)) - math.pi),
        abs(dihedral((0, 0, 0), (1, 0, 0), (1, 1, 0), (1, 1, 1)) - math.pi / 2),
        abs(ca_angle((1, 0, 0), (0, 0, 0), (0, 1, 0)) - math.pi / 2),
        abs(ca_angle((-2, 0, 0), (0, 0, 0), (3, 0, 0)) - math.pi),
    ]
    invariance = 0.0
    for _ in range(200):
        p1, p2, p3, cis = rng.normal(size=(4, 3))
        theta = rng.uniform(-math.pi, math.pi)
        p4 = torsion_by_rotation(theta, p1, p2, p3, cis)
        want = (dihedral(p1, p2, p3, cis) + theta + math.pi) % (2 * math.pi) - math.pi
        got = dihedral(p1, p2, p3, p4)
        errs.append(abs((got - want + math.pi) % (2 * math.pi) - math.pi))
        errs.append(abs(ca_angle(p1, p2, p3) - law_of_cosines_angle(p1, p2, p3)))
        r, t = random_rotation(rng), rng.normal(size=3) * 10
        moved = [x @ r.T + t for x in (p1, p2, p3, p4)]
        invariance = max(invariance, abs(dihedral(*moved) - got), abs(ca_angle(*moved[:3]) - ca_angle(p1, p2, p3)))
    worst = max(errs)
    verdict(
        "geometry oracles",
        worst < 1e-10 and invariance < 1e-9,
        f"max oracle error {worst:.1e}, max rigid-motion change {invariance:.1e}",
    )


def test_attention_contract():
    rng = np.random.default_rng(11)
    lo, hi = 1.0, 0.0
    for i in range(100):
        cfg = ModelConfig(z=int(rng.integers(1, 7)), q=int(rng.integers(2, 11)), layers=1, hidden=4)
        params = init_params(cfg, i)
        m = loop_attention(Tensor(rng.normal(scale=5, size=(int(rng.integers(1, 15)), 6))), params, 1, cfg).data
        lo, hi = min(lo, m.min()), max(hi, m.max())
    in_range = 0.0 <= lo and hi <= 1.0

    V = Tensor(rng.normal(size=(9, 6)))
    identity = np.array_equal(fuse_masks([Tensor(np.ones((3, 6)))] * 3, V, (3, 3, 3)).data, V.data)
    record = synthetic_record(rng, (5, 4, 7))
    cfg = ModelConfig(layers=2, hidden=16)
    params = init_params(cfg, 3)
    for k in (1, 2, 3):
        params[f"att.{k}.{cfg.q - 1}.gamma"].data[:] = 0.0
        params[f"att.{k}.{cfg.q - 1}.beta"].data[:] = 40.0  # sigmoid(40) == 1.0 in float64
    with_masks = run_refinement(record, params, cfg)
    without = run_refinement(record, params, ModelConfig(layers=2, hidden=16, attention="none"))
    gap = abs(total_loss(with_masks.trace, with_masks.bundle).total - total_loss(without.trace, without.bundle).total)
    verdict(
        "attention contract",
        in_range and identity and gap <= 1e-12,
        f"mask range [{lo:.3g}, {hi:.3g}] over 100 inputs, unit-mask loss gap {gap:.1e}",
    )


def test_overfit_sanity():
    record = synthetic_record(np.random.default_rng(1), (5, 5, 8), pdb_id="memorise")
    config = TrainConfig(desk_scale=True, epochs=200, patience=200, seed=0)
    start = time.perf_counter()
    best, history = fit([record] * 8, [], config)
    elapsed = time.perf_counter() - start
    ratio = history[-1]["train_total"] / history[0]["train_total"]
    result = run_refinement(record, best.params(), config.model_config(), "teacher_forced")
    h3 = loop_rmsd(result.bundle, result.ca, "h3")
    mirrored = loop_rmsd(result.bundle, result.ca * np.array([1.0, 1.0, -1.0]), "h3")
    verdict(
        "overfit sanity",
        len(history) == 200 and ratio <= 0.25 and h3 < 1.0 and elapsed < 600,
        f"loss ratio {ratio:.3f} (<= 0.25), H3 RMSD {h3:.3f} A (< 1.0; mirror image {mirrored:.3f} A), {elapsed:.0f}s (< 600s)",
    )


def test_determinism_and_persistence(tmp_path):
    rng = np.random.default_rng(5)
    data = [synthetic_record(rng, (3, 4, 5), pdb_id=f"d{i}") for i in range(3)]
    paths = []
    for run in ("a", "b"):
        cfg = TrainConfig(desk_scale=True, epochs=2, seed=9, checkpoint_dir=str(tmp_path / run))
        fit(data[:2], data[2:], cfg)
        paths.append(tmp_path / run / "best.json")
    identical = paths[0].read_bytes() == paths[1].read_bytes()

    ckpt = load_checkpoint(paths[0])
    params = ckpt.params()
    mcfg = ckpt.train_config().model_config()
    before = run_refinement(data[2], params, mcfg)
    resaved = save_checkpoint(ckpt, tmp_path / "resaved.json")
    reloaded = load_checkpoint(resaved)
    after = run_refinement(data[2], reloaded.params(), reloaded.train_config().model_config())
    same_forward = all(np.array_equal(getattr(before, a), getattr(after, a)) for a in ("n", "ca", "c"))
    same_bytes = resaved.read_bytes() == paths[0].read_bytes()
    verdict(
        "determinism & persistence",
        identical and same_forward and same_bytes,
        f"checkpoints identical: {identical}, reload forward identical: {same_forward}, resave identical: {same_bytes}",
    )


def test_data_pipeline(tmp_path):
    rng = np.random.default_rng(50)
    records = [synthetic_record(rng, tuple(int(x) for x in rng.integers(3, 12, 3)), pdb_id=f"s{i}",
                                resolution=float(rng.uniform(1.0, 5.0))) for i in range(50)]
    path = tmp_path / "fifty.jsonl"
    write_jsonl(records, path)
    round_trip = parse_jsonl(path) == records
    once = preprocess(records)
    idempotent = preprocess(once) == once
    train, val = split(records, 0.8, seed=3)
    ids = sorted(r.pdb_id for r in train + val)
    partition = (
        ids == sorted(r.pdb_id for r in records)
        and not {r.pdb_id for r in train} & {r.pdb_id for r in val}
        and (len(train), len(val)) == (40, 10)
        and split(records, 0.8, seed=3) == (train, val)
    )
    verdict(
        "data pipeline",
        round_trip and idempotent and partition,
        f"round trip {round_trip}, idempotent {idempotent} ({len(once)} kept), split 40/10 exact {partition}",
    )


def test_loss_identities():
    rng = np.random.default_rng(8)
    record = synthetic_record(rng, (6, 5, 9))
    cfg = ModelConfig(layers=2, hidden=16)
    params = init_params(cfg, 1)
    params["head.seq"].data[:] = 0.0
    result = run_refinement(record, params, cfg)
    rep = total_loss(result.trace, result.bundle, w_seq=1.0)
    exact = rep.l_struct == rep.l_d + rep.l_beta + rep.l_ca
    r = len(result.bundle)
    gap = abs(rep.l_seq - r * math.log(20))
    verdict(
        "loss identities",
        exact and gap < 1e-9,
        f"l_struct decomposition bit-exact: {exact}, |l_seq - r ln 20| = {gap:.1e} for r = {r}",
    )
