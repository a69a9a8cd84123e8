"""Average precision, sweeps, comparisons, representation export."""

from __future__ import annotations

import itertools

import numpy as np
import pytest

from tsvadlab.datagen import HOLDOUT_NOISE, LABEL_NAMES
from tsvadlab.evaluation import (
    ApResult,
    CLEAN,
    SNR_GRID,
    UndefinedApError,
    average_precision,
    compare,
    evaluate,
    evaluate_frames,
    export_representations,
    read_sweep_csv,
    snr_sweep,
    write_representations_csv,
    write_sweep_csv,
)
from tsvadlab.model import TsVadModel

from helpers import brute_force_average_precision


class TestAveragePrecision:
    def test_hand_case(self):
        ap = average_precision([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 1])
        assert ap == pytest.approx((1.0 + 2.0 / 3.0 + 3.0 / 4.0) / 3.0, abs=1e-9)
        assert ap == pytest.approx(0.80556, abs=1e-5)

    def test_perfect_ranking(self):
        assert average_precision([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_no_positives_undefined(self):
        with pytest.raises(UndefinedApError):
            average_precision([0.5, 0.4], [0, 0])

    def test_matches_oracle_on_all_ten_frame_patterns(self):
        rng = np.random.default_rng(0)
        scores = rng.uniform(size=10)
        for bits in itertools.product([0, 1], repeat=10):
            labels = np.array(bits)
            if labels.sum() == 0:
                with pytest.raises(UndefinedApError):
                    average_precision(scores, labels)
                continue
            got = average_precision(scores, labels)
            expected = brute_force_average_precision(list(scores), list(labels))
            assert got == pytest.approx(expected, abs=0), bits

    def test_ties_broken_by_original_order(self):
        # all scores tied: the ranking is the original order
        labels = [0, 1, 1, 0]
        got = average_precision([0.5, 0.5, 0.5, 0.5], labels)
        assert got == pytest.approx((1 / 2 + 2 / 3) / 2, abs=1e-12)

    def test_invariant_under_strictly_monotone_transforms(self, rng):
        scores = rng.uniform(size=50)
        labels = (rng.uniform(size=50) < 0.3).astype(int)
        labels[0] = 1
        base = average_precision(scores, labels)
        for transform in (lambda s: 2 * s + 7, np.exp, lambda s: s**3 + s):
            assert average_precision(transform(scores), labels) == pytest.approx(
                base, abs=1e-12
            )


class TestEvaluateFrames:
    def test_ideal_scores_reach_map_one(self, rng):
        labels = rng.integers(0, 3, size=200)
        probs = np.eye(3)[labels]
        result = evaluate_frames(probs, labels)
        assert result.map == 1.0
        assert result.ap_ns == result.ap_ts == result.ap_nts == 1.0

    def test_map_is_exact_mean(self, rng):
        labels = rng.integers(0, 3, size=300)
        probs = rng.dirichlet(np.ones(3), size=300)
        result = evaluate_frames(probs, labels)
        assert result.map == (result.ap_ns + result.ap_ts + result.ap_nts) / 3.0

    def test_missing_class_skipped_with_diagnostic(self, rng, caplog):
        labels = np.array([0, 1] * 20)  # no nts
        probs = rng.dirichlet(np.ones(3), size=40)
        with caplog.at_level("WARNING"):
            result = evaluate_frames(probs, labels)
        assert result.ap_nts is None
        assert result.skipped == ("nts",)
        assert "nts" in caplog.text
        assert result.map == (result.ap_ns + result.ap_ts) / 2.0

    def test_uniform_scores_match_independent_enumeration(self):
        """With constant scores and stable ordering the ranking is the frame
        order; the cyclically-last class sits at ranks 3k, where its
        precision is exactly its prevalence."""
        labels = np.tile([0, 1, 2], 40)
        probs = np.full((120, 3), 1.0 / 3.0)
        result = evaluate_frames(probs, labels)
        for idx, name in enumerate(LABEL_NAMES):
            oracle = brute_force_average_precision(
                [1.0 / 3.0] * 120, (labels == idx).astype(int).tolist()
            )
            assert result.ap(name) == pytest.approx(oracle, abs=0)
        # class at the cycle end ('nts' here) hits prevalence exactly
        assert result.ap_nts == pytest.approx(1.0 / 3.0, abs=1e-9)

    def test_shape_validation(self):
        with pytest.raises(ValueError):
            evaluate_frames(np.zeros((5, 2)), np.zeros(5, dtype=int))
        with pytest.raises(ValueError):
            evaluate_frames(np.zeros((5, 3)), np.zeros(4, dtype=int))


@pytest.fixture(scope="module")
def eval_model():
    return TsVadModel(method="film", seed=5)


class TestEvaluate:
    def test_runs_on_clean_split(self, tiny_dataset, eval_model):
        result = evaluate(eval_model, tiny_dataset, split="test")
        assert 0.0 <= result.map <= 1.0

    def test_permuting_utterance_order_changes_nothing(self, tiny_dataset, eval_model):
        base = evaluate(eval_model, tiny_dataset, split="test")
        entries = tiny_dataset.entries
        try:
            tiny_dataset.entries = entries[::-1]
            flipped = evaluate(eval_model, tiny_dataset, split="test")
        finally:
            tiny_dataset.entries = entries
        assert flipped.map == pytest.approx(base.map, abs=1e-12)
        assert flipped.ap_ts == pytest.approx(base.ap_ts, abs=1e-12)

    def test_unknown_split_rejected(self, tiny_dataset, eval_model):
        with pytest.raises(ValueError):
            evaluate(eval_model, tiny_dataset, split="holdout")


class TestSnrSweep:
    @pytest.fixture(scope="class")
    def report(self, tiny_dataset, eval_model):
        return snr_sweep(eval_model, tiny_dataset, split="test")

    def test_grid_contract(self, report, tiny_dataset):
        kinds = tuple(tiny_dataset.meta["noise_kinds"])
        for kind in kinds:
            conditions = report.conditions_for(kind)
            assert len(conditions) == 7  # 6 SNRs + shared clean
        assert len(report.cells) == len(kinds) * len(SNR_GRID) + 1

    def test_clean_cell_matches_direct_evaluate(self, report, tiny_dataset, eval_model):
        direct = evaluate(eval_model, tiny_dataset, split="test", condition=None)
        assert report.cells[(CLEAN, CLEAN)].map == direct.map
        assert report.cells[(CLEAN, CLEAN)].ap_ts == direct.ap_ts

    def test_seen_average_excludes_holdout(self, report):
        assert report.seen[HOLDOUT_NOISE] is False
        seen_kinds = [k for k, s in report.seen.items() if s]
        assert HOLDOUT_NOISE not in seen_kinds
        manual = np.mean([report.cell(k, -5).map for k in seen_kinds])
        assert report.seen_average(-5) == pytest.approx(manual, abs=0)

    def test_cells_recomputable_in_isolation(self, report, tiny_dataset, eval_model):
        cell = evaluate(
            eval_model, tiny_dataset, split="test", condition=("street", 5.0)
        )
        assert cell.map == report.cell("street", 5).map
        assert cell.ap_ns == report.cell("street", 5).ap_ns

    def test_csv_round_trip(self, report, tmp_path):
        path = tmp_path / "sweep.csv"
        write_sweep_csv(report, path)
        back = read_sweep_csv(path)
        assert set(back.cells) == set(report.cells)
        for key in report.cells:
            assert back.cells[key].map == pytest.approx(report.cells[key].map, abs=1e-9)


class TestCompare:
    def _fake_report(self, shift: float = 0.0):
        cells = {}
        seen = {}
        for kind in ("babble", "cafe"):
            seen[kind] = kind != "cafe"
            for snr in SNR_GRID:
                base = 0.5 + 0.01 * snr / 20 + (0.05 if kind == "babble" else 0.0)
                cells[(kind, str(snr))] = ApResult(
                    ap_ns=base + shift, ap_ts=base + shift, ap_nts=base + shift,
                    map=base + shift,
                )
        cells[(CLEAN, CLEAN)] = ApResult(0.9 + shift, 0.9 + shift, 0.9 + shift, 0.9 + shift)
        from tsvadlab.evaluation import SweepReport

        return SweepReport(cells=cells, seen=seen)

    def test_self_comparison_is_zero(self):
        report = self._fake_report()
        delta = compare(report, report)
        for row in delta.rows():
            assert all(v == 0.0 for v in row[2:])

    def test_uniform_shift_recovered(self):
        delta = compare(self._fake_report(), self._fake_report(shift=0.02))
        for row in delta.rows():
            assert row[5] == pytest.approx(0.02, abs=1e-12)

    def test_delta_of_averages_equals_average_of_deltas(self):
        a = self._fake_report()
        b = self._fake_report(shift=0.03)
        delta = compare(a, b)
        for snr in SNR_GRID:
            avg_of_deltas = delta.average_delta_map(seen=True, snr=snr)
            delta_of_avgs = b.seen_average(snr) - a.seen_average(snr)
            assert avg_of_deltas == pytest.approx(delta_of_avgs, abs=1e-12)

    def test_grid_mismatch_rejected(self):
        a = self._fake_report()
        b = self._fake_report()
        del b.cells[("babble", "0")]
        with pytest.raises(ValueError, match="grids differ"):
            compare(a, b)


class TestExportRepresentations:
    def test_row_geometry_and_caps(self, tiny_dataset, eval_model):
        rows = export_representations(
            eval_model, tiny_dataset, split="test",
            conditions=[(CLEAN, None)], n_per_class=50, seed=1,
        )
        assert all(len(r) == 3 + 64 for r in rows)
        for name in LABEL_NAMES:
            count = sum(1 for r in rows if r[2] == name)
            assert count <= 50

    def test_deterministic_given_seed(self, tiny_dataset, eval_model):
        kw = dict(split="test", conditions=[(CLEAN, None)], n_per_class=20, seed=3)
        a = export_representations(eval_model, tiny_dataset, **kw)
        b = export_representations(eval_model, tiny_dataset, **kw)
        assert a == b

    def test_shortfall_warns_and_exports_all(self, tiny_dataset, eval_model, caplog):
        with caplog.at_level("WARNING"):
            rows = export_representations(
                eval_model, tiny_dataset, split="test",
                conditions=[(CLEAN, None)], n_per_class=10**6, seed=0,
            )
        assert "exporting all" in caplog.text
        total_frames = sum(e.n_frames for e in tiny_dataset.entries_for("test"))
        assert len(rows) == total_frames

    def test_mixed_noise_conditions(self, tiny_dataset, eval_model):
        rows = export_representations(
            eval_model, tiny_dataset, split="test",
            conditions=[("mixed", 0.0)], n_per_class=30, seed=0,
        )
        assert all(r[0] == "mixed" and r[1] == "0" for r in rows)

    def test_csv_writer(self, tiny_dataset, eval_model, tmp_path):
        rows = export_representations(
            eval_model, tiny_dataset, split="test",
            conditions=[(CLEAN, None)], n_per_class=5, seed=0,
        )
        path = tmp_path / "reps.csv"
        write_representations_csv(rows, path)
        header = path.read_text().splitlines()[0].split(",")
        assert header[:3] == ["condition", "snr", "true_class"]
        assert len(header) == 3 + 64

    def test_pretrain_model_export(self, tiny_dataset):
        from tsvadlab.model import PretrainModel

        model = PretrainModel(seed=2)
        rows = export_representations(
            model, tiny_dataset, split="test",
            conditions=[(CLEAN, None)], n_per_class=10, seed=0,
        )
        assert rows and len(rows[0]) == 3 + 64
