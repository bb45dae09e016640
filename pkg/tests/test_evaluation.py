import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdr_refine.data import bundle_loops
from cdr_refine.evaluation import (
    TABLE1_H3,
    TABLE1_OURS,
    build_report,
    evaluate,
    improvement_pct,
    length_table,
    loop_rmsd,
    read_report_rows,
    write_report,
)
from cdr_refine.model import ModelConfig, init_params
from cdr_refine.synthetic import synthetic_record

from .conftest import random_rotation
from .oracles import rotation_search_rmsd

# "MLSA Improv.%" column, one entry per compared method
TABLE1_IMPROVEMENT = {
    "RosettaAntibody-G": 32.843,
    "ABodyBuilder": 26.182,
    "DeepAb": 24.691,
    "ABlooper": 20.143,
    "RefineGNN": 19.338,
    "MLSA-no att": 17.475,
    "MLSA-att": 6.301,
}


class TestImprovement:
    @pytest.mark.parametrize("name", sorted(TABLE1_H3))
    def test_table_rows(self, name):
        assert abs(improvement_pct(TABLE1_H3[name], TABLE1_OURS) - TABLE1_IMPROVEMENT[name]) < 1e-3

    def test_equal_is_zero(self):
        assert improvement_pct(2.0, 2.0) == 0.0

    def test_baseline_positive(self):
        with pytest.raises(ValueError):
            improvement_pct(0.0, 1.0)


class TestLoopRmsd:
    def test_identity_and_rigid_motion(self, rng, record):
        b = bundle_loops(record)
        assert loop_rmsd(b, b.ca, "h3") < 1e-12
        moved = b.ca @ random_rotation(rng).T + rng.normal(size=3) * 30
        for loop in ("h1", "h2", "h3"):
            assert loop_rmsd(record, moved, loop) < 1e-9
            assert loop_rmsd(b, moved, loop, alignment="bundle") < 1e-9

    def test_displaced_residue_vs_search(self, rng):
        rec = synthetic_record(rng, (3, 3, 4))
        b = bundle_loops(rec)
        pred = b.ca.copy()
        pred[7] += [0.8, -0.5, 0.3]
        got = loop_rmsd(b, pred, 2)
        assert got > 0.1
        assert abs(got - rotation_search_rmsd(pred[6:10], b.ca[6:10])) < 1e-3

    def test_symmetric(self, rng, record):
        b = bundle_loops(record)
        pred = b.ca + rng.normal(size=b.ca.shape)
        swapped = bundle_loops(record)
        swapped.ca = pred
        assert abs(loop_rmsd(b, pred, "h2") - loop_rmsd(swapped, b.ca, "h2")) < 1e-9

    def test_shape_and_alignment_errors(self, record):
        b = bundle_loops(record)
        with pytest.raises(ValueError):
            loop_rmsd(b, b.ca[:-1], "h1")
        with pytest.raises(ValueError):
            loop_rmsd(b, b.ca, "h1", alignment="framework")

    def test_two_residue_loop_uses_translation(self, rng):
        b = bundle_loops(synthetic_record(rng, (2, 3, 3)))
        pred = b.ca + np.array([5.0, 0, 0])
        assert loop_rmsd(b, pred, "h1") < 1e-12


class TestLengthTable:
    def test_single_and_pair(self):
        rows = [
            {"pdb": "a", "loop": "h3", "length": 9, "rmsd": 1.5},
            {"pdb": "b", "loop": "h3", "length": 12, "rmsd": 2.0},
            {"pdb": "c", "loop": "h3", "length": 12, "rmsd": 3.0},
            {"pdb": "c", "loop": "h1", "length": 12, "rmsd": 9.0},
        ]
        assert length_table(rows) == {9: 1.5, 12: 2.5}

    def test_group_by_oracle(self, rng):
        rows = [{"pdb": str(i), "loop": "h3", "length": int(rng.integers(5, 20)), "rmsd": float(rng.uniform(0, 4))}
                for i in range(20)]
        want = {}
        for n in range(7, 18):
            vals = [r["rmsd"] for r in rows if r["length"] == n]
            if vals:
                want[n] = sum(vals) / len(vals)
        got = length_table(rows)
        assert got.keys() == want.keys()
        assert all(abs(got[n] - want[n]) < 1e-15 for n in want)


@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=30))
@settings(max_examples=40)
def test_report_means_recompute_from_rows(values):
    rows = [{"pdb": f"p{i}", "loop": "h3", "length": 7 + i % 11, "rmsd": v} for i, v in enumerate(values)]
    rep = build_report(rows)
    assert rep.means["h3"] == pytest.approx(math.fsum(values) / len(values), rel=1e-12)


def test_evaluate_writes_consistent_csv(tmp_path, rng):
    data = [synthetic_record(rng, (3, 4, 7 + i), pdb_id=f"e{i}") for i in range(3)]
    cfg = ModelConfig(layers=1, hidden=8)
    rep = evaluate(data, init_params(cfg, 0), cfg)
    assert len(rep.rows) == 9
    assert set(rep.lengths) == {7, 8, 9}
    assert [r["method"] for r in rep.improvements] == list(TABLE1_H3)
    csv_path, json_path = write_report(rep, tmp_path)
    rows = read_report_rows(csv_path)
    assert csv_path.read_text().splitlines()[0] == "pdb,loop,length,rmsd"
    assert build_report(rows).means == rep.means
    assert "h3_by_length" in json_path.read_text()
