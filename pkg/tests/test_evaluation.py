import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adafuse.evaluation import (
    EvalReport,
    RankTable,
    avg_rank_drop,
    degradation_rate,
    evaluate_methods,
    gate_analysis,
    hits_at_k_accumulated,
)
from adafuse.exceptions import ConfigError, DataFormatError, DegenerateRegressionError
from adafuse.model import FusionConfig, GateRecord, fuse_forward_batch, init_params, static_fusion
from adafuse.retrieval import build_index
from adafuse.synthgen import GenConfig, generate_corpus, generate_dialogues

from oracles import full_sort_ranking, min_scan_hits, two_pass_ols

ranks_strategy = st.integers(1, 5).flatmap(
    lambda r: st.lists(st.lists(st.integers(1, 60), min_size=r, max_size=r), min_size=1, max_size=12)
)


def _table(ranks, method="static"):
    return RankTable(method, np.arange(len(ranks)), ranks)


class TestHits:
    def test_all_first(self):
        assert hits_at_k_accumulated(_table([[1, 1, 1]] * 4), 1).tolist() == [1.0, 1.0, 1.0]

    def test_single_dialogue_accumulates(self):
        assert hits_at_k_accumulated(_table([[50, 9, 80]]), 10).tolist() == [0.0, 1.0, 1.0]

    def test_hand_table_against_min_scan(self):
        ranks = [[12, 3, 40], [5, 50, 50], [30, 20, 11]]
        curve = hits_at_k_accumulated(_table(ranks), 10)
        assert curve.tolist() == min_scan_hits(ranks, 10) == pytest.approx([1 / 3, 2 / 3, 2 / 3])

    @settings(max_examples=100, deadline=None)
    @given(ranks_strategy, st.integers(1, 60))
    def test_monotone_and_matches_min_scan(self, ranks, k):
        curve = hits_at_k_accumulated(_table(ranks), k)
        assert np.all(np.diff(curve) >= 0)
        assert curve.tolist() == pytest.approx(min_scan_hits(ranks, k))

    def test_invalid(self):
        with pytest.raises(ConfigError):
            hits_at_k_accumulated(_table([[1]]), 0)
        with pytest.raises(DataFormatError):
            _table([[1, 2], [3]])
        with pytest.raises(DataFormatError):
            _table([[0, 2]])


class TestDegradation:
    def test_identical_tables(self):
        t = _table([[3, 4], [1, 9]])
        assert degradation_rate(t, t, 0) == 0.0 and avg_rank_drop(t, t, 1) == 0.0

    def test_one_of_four(self):
        text = _table([[5], [5], [5], [5]], "text_only")
        fused = _table([[5], [2], [6], [5]])
        assert degradation_rate(fused, text, 0) == 0.25
        assert avg_rank_drop(fused, text, 0) == 1.0

    def test_drop_is_mean_over_degraded_only(self):
        text = _table([[1], [1], [50]], "text_only")
        fused = _table([[11], [31], [2]])
        assert avg_rank_drop(fused, text, 0) == 20.0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_random_tables_match_counting_loop(self, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.integers(1, 30, size=(50, 3)), rng.integers(1, 30, size=(50, 3))
        fused, text = _table(a), _table(b, "text_only")
        for n in range(3):
            worse = [int(a[i, n]) - int(b[i, n]) for i in range(50) if a[i, n] > b[i, n]]
            rate = degradation_rate(fused, text, n)
            drop = avg_rank_drop(fused, text, n)
            assert rate == len(worse) / 50 and 0.0 <= rate <= 1.0
            assert drop == (sum(worse) / len(worse) if worse else 0.0)
            if rate > 0:
                assert drop >= 1

    def test_mismatched_tables(self):
        with pytest.raises(DataFormatError):
            degradation_rate(_table([[1], [2]]), _table([[1]]), 0)
        with pytest.raises(DataFormatError):
            degradation_rate(_table([[1]]), _table([[1]]), 3)


def _records(c, w):
    return [GateRecord(i, i % 3, 1.0 - wi, wi, ci) for i, (ci, wi) in enumerate(zip(c, w))]


class TestGate:
    def test_perfect_line(self):
        c = np.linspace(-0.5, 0.9, 20)
        ga = gate_analysis(_records(c, 0.5 * c + 0.1))
        assert ga.slope == pytest.approx(0.5, abs=1e-6)
        assert ga.intercept == pytest.approx(0.1, abs=1e-6)
        assert ga.pearson_r == pytest.approx(1.0, abs=1e-12)

    def test_anticorrelated(self):
        c = np.linspace(0, 1, 10)
        ga = gate_analysis(_records(c, 0.8 - 0.3 * c + 0.01 * np.sin(7 * c)))
        assert ga.slope < 0 and ga.pearson_r < 0

    def test_matches_two_pass_ols(self):
        rng = np.random.default_rng(9)
        c = rng.uniform(-1, 1, 1000)
        w = 0.2 * c + rng.normal(scale=0.1, size=1000)
        ga = gate_analysis(_records(c, w))
        slope, r = two_pass_ols(c.tolist(), w.tolist())
        assert ga.slope == pytest.approx(slope, abs=1e-12)
        assert ga.pearson_r == pytest.approx(r, abs=1e-12)
        assert ga.n == 1000

    def test_csv_export(self):
        ga = gate_analysis(_records([0.1, 0.2, 0.3], [0.5, 0.25, 0.125]))
        lines = ga.csv_export.splitlines()
        assert lines[0] == "sample_id,round,cos_td,image_weight"
        assert lines[1] == "0,0,0.1,0.5"
        assert len(lines) == 4

    def test_degenerate(self):
        with pytest.raises(DegenerateRegressionError):
            gate_analysis(_records([0.3] * 5, [0.1, 0.2, 0.3, 0.4, 0.5]))
        with pytest.raises(DegenerateRegressionError):
            gate_analysis(_records([0.1, 0.2], [0.1, 0.2]))


@pytest.fixture(scope="module")
def tiny_world():
    gc = GenConfig(corpus_size=20, dim=6, dialogues=5, rounds=3, seed=4)
    ids, M = generate_corpus(gc)
    data = generate_dialogues(gc, M, "test")
    fc = FusionConfig(d=6, d_proj=5, d_mid=4, d_hidden=3, n_experts=2, d_router=2)
    return build_index(ids, M), M, data, init_params(fc, 1)


class TestEndToEnd:
    def test_matches_full_sort_script(self, tiny_world):
        idx, M, data, params = tiny_world
        report = evaluate_methods(idx, data, params, static_w=0.55, k=3)
        ids = list(range(20))
        for method in ("text_only", "static", "adafuse"):
            expected = []
            for dlg in data:
                row = []
                for n in range(3):
                    if method == "text_only":
                        q = dlg.z_T[n] / np.linalg.norm(dlg.z_T[n].astype(np.float64))
                        q = q.astype(np.float32)
                    elif method == "static":
                        q = static_fusion(dlg.z_T[n], dlg.z_D[n], 0.55)
                    else:
                        q = fuse_forward_batch(params, dlg.z_T[n:n + 1], dlg.z_D[n:n + 1])[0][0]
                    order, _ = full_sort_ranking(M, ids, q)
                    row.append(order.index(dlg.target_id) + 1)
                expected.append(row)
            assert report.tables[method].ranks.tolist() == expected, method
        assert report.hits["adafuse"] == min_scan_hits(report.tables["adafuse"].ranks.tolist(), 3)

    def test_static_weight_one_is_text_only(self, tiny_world):
        idx, _, data, _ = tiny_world
        report = evaluate_methods(idx, data, static_w=1.0, methods=("text_only", "static"))
        np.testing.assert_array_equal(report.tables["static"].ranks, report.tables["text_only"].ranks)
        assert report.degradation["static"]["rate"] == [0.0, 0.0, 0.0]

    def test_k_equal_corpus_size_hits_everything(self, tiny_world):
        idx, _, data, params = tiny_world
        report = evaluate_methods(idx, data, params, k=20)
        for m in report.methods:
            assert report.hits[m][0] == 1.0

    def test_deterministic_and_serializable(self, tiny_world, tmp_path):
        idx, _, data, params = tiny_world
        a = evaluate_methods(idx, data, params, k=3)
        b = evaluate_methods(idx, data, params, k=3)
        assert a.to_json() == b.to_json()
        again = EvalReport.from_dict(json.loads(a.to_json()))
        assert again.to_json() == a.to_json()
        written = a.write(tmp_path)
        assert set(written) == {"report.json", "hits_curve.csv", "degradation_static.csv",
                                "degradation_adafuse.csv", "degradation.csv", "gate_scatter.csv"}
        assert (tmp_path / "hits_curve.csv").read_text().splitlines()[0] == "round,method,hits_at_k"
        assert (tmp_path / "degradation.csv").read_text() == (tmp_path / "degradation_adafuse.csv").read_text()
        assert (tmp_path / "degradation.csv").read_text().splitlines()[0] == "round,rate,avg_drop"
        assert len((tmp_path / "gate_scatter.csv").read_text().splitlines()) == 1 + 15

    def test_method_validation(self, tiny_world):
        idx, _, data, _ = tiny_world
        with pytest.raises(ConfigError):
            evaluate_methods(idx, data, methods=("bogus",))
        with pytest.raises(ConfigError):
            evaluate_methods(idx, data, params=None, methods=("adafuse",))
        with pytest.raises(ConfigError):
            evaluate_methods(idx, [], methods=("static",))

    def test_text_only_alone_has_no_degradation(self, tiny_world):
        idx, _, data, _ = tiny_world
        report = evaluate_methods(idx, data, methods=("text_only",))
        assert report.degradation == {} and report.methods == ["text_only"]

    def test_malformed_report(self):
        with pytest.raises(DataFormatError):
            EvalReport.from_dict({"k": 1})
