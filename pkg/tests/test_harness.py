"""Protocol cells, results store, aggregation, ranking, and reports."""

import numpy as np
import pytest

from crossband.harness import (
    CELLS,
    IncompleteModelError,
    ModelSpec,
    ResultStore,
    RunConfig,
    RunRecord,
    UnsupportedCellError,
    _PairedBackbone,
    aggregate_seeds,
    build_ranking_table,
    dataset_averaged,
    emit_report,
    parse_csv,
    render_csv,
    render_radar_csv,
    render_text,
    run_cell,
    run_protocol,
    CELLS_BY_KEY,
    SETTINGS,
)
from crossband.adapt import FixedChannelViT
from crossband.autodiff import ParameterError
from crossband.model import ModelConfig
from crossband.synthetic import SyntheticConfig, generate_synthetic

from table1_fixture import CELL_ORDER, PUBLISHED, cell_scores


class TestCellSet:
    def test_exactly_seven_cells(self):
        keys = [c.key for c in CELLS]
        assert keys == ["RGB->RGB", "S2->S2", "RGB->S1", "S2->S1", "RGB->NS1S2",
                        "RGB->RGBN", "S2->S2+S1"]

    def test_categories(self):
        cats = {c.key: c.category for c in CELLS}
        assert cats["RGB->RGB"] == cats["S2->S2"] == "in-distribution"
        assert cats["RGB->S1"] == cats["S2->S1"] == cats["RGB->NS1S2"] == "no-overlap"
        assert cats["RGB->RGBN"] == cats["S2->S2+S1"] == "superset"

    def test_fixture_order_matches_protocol_order(self):
        assert list(CELL_ORDER) == [c.key for c in CELLS]


class TestStore:
    def record(self, seed=0, value=0.5, status="ok"):
        return RunRecord(model="m", dataset="d", cell="RGB->RGB",
                         category="in-distribution", seed=seed, mode="full",
                         metric="accuracy", value=value, wall_time=0.1,
                         config_hash="abc", status=status)

    def test_jsonl_roundtrip(self, tmp_path):
        store = ResultStore(tmp_path / "r.jsonl")
        rec = self.record()
        store.append(rec)
        loaded = store.load()
        assert loaded == [rec]

    def test_keys_skip_resume(self, tmp_path):
        store = ResultStore(tmp_path / "r.jsonl")
        store.append(self.record(seed=0))
        store.append(self.record(seed=1))
        assert store.existing_keys() == {("m", "d", "RGB->RGB", 0, "full"),
                                         ("m", "d", "RGB->RGB", 1, "full")}


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    cfg = SyntheticConfig(image_size=16, num_classes=3, rho=1.0, noise=0.02,
                          seed=33, train=24, val=8, test=12)
    return generate_synthetic(cfg, "classification", tmp_path_factory.mktemp("hds"))


FAST_CFG = RunConfig(mode="frozen", lr=5e-3, warmup_epochs=1, decay_epochs=3, batch_size=8)


def tiny_spec(name="tiny", kind="channel_vit"):
    return ModelSpec(name=name, kind=kind,
                     config=ModelConfig(embed_dim=16, depth=4, heads=2, patch=8, image_size=16))


class TestRunCell:
    def test_in_distribution_cell(self, tiny_dataset):
        rec = run_cell(tiny_spec(), tiny_dataset, "ds", CELLS_BY_KEY["RGB->RGB"], 0, FAST_CFG)
        assert rec.status == "ok"
        assert 0.0 <= rec.value <= 1.0
        assert rec.metric == "accuracy"

    def test_rerun_bit_identical(self, tiny_dataset):
        a = run_cell(tiny_spec(), tiny_dataset, "ds", CELLS_BY_KEY["RGB->S1"], 1, FAST_CFG)
        b = run_cell(tiny_spec(), tiny_dataset, "ds", CELLS_BY_KEY["RGB->S1"], 1, FAST_CFG)
        assert a.value == b.value

    def test_fixed_model_superset_uses_fourth_mean(self, tiny_dataset, monkeypatch):
        import crossband.harness as hmod

        calls = {}
        orig = hmod.adapt_rgbn_fourth_mean

        def spy(embed):
            calls["hit"] = True
            return orig(embed)

        monkeypatch.setattr(hmod, "adapt_rgbn_fourth_mean", spy)
        rec = run_cell(tiny_spec(kind="fixed_vit"), tiny_dataset, "ds",
                       CELLS_BY_KEY["RGB->RGBN"], 0, FAST_CFG)
        assert rec.status == "ok" and calls.get("hit")

    def test_fixed_model_no_overlap_replicates(self, tiny_dataset):
        rec = run_cell(tiny_spec(kind="fixed_vit"), tiny_dataset, "ds",
                       CELLS_BY_KEY["S2->S1"], 0, FAST_CFG)
        assert rec.status == "ok"
        assert 0.0 <= rec.value <= 1.0

    def test_paired_backbone_rejects_unknown_channel_count(self):
        cfg = ModelConfig(embed_dim=16, depth=4, heads=2, patch=8, image_size=16)
        model = FixedChannelViT(cfg, channels=3, seed=0)
        paired = _PairedBackbone({3: model})
        with pytest.raises(UnsupportedCellError):
            paired.encode(np.zeros((1, 5, 16, 16)))


class TestRunProtocol:
    def test_counts_and_resume(self, tiny_dataset, tmp_path):
        store = ResultStore(tmp_path / "results.jsonl")
        spec = tiny_spec()
        cells = CELLS[:2]
        recs = run_protocol([spec], {"ds": tiny_dataset}, seeds=[0, 1], cfg=FAST_CFG,
                            store=store, cells=cells)
        assert len(recs) == 1 * 1 * 2 * 2  # models x datasets x cells x seeds
        again = run_protocol([spec], {"ds": tiny_dataset}, seeds=[0, 1], cfg=FAST_CFG,
                             store=store, cells=cells)
        assert again == []  # fully resumed
        keys = [r.key for r in store.load()]
        assert len(keys) == len(set(keys))

    def test_interruption_independent_final_set(self, tiny_dataset, tmp_path):
        full_store = ResultStore(tmp_path / "full.jsonl")
        run_protocol([tiny_spec()], {"ds": tiny_dataset}, seeds=[0, 1], cfg=FAST_CFG,
                     store=full_store, cells=CELLS[:2])
        # simulate an interruption: run seed 0 first, then resume with both
        part_store = ResultStore(tmp_path / "part.jsonl")
        run_protocol([tiny_spec()], {"ds": tiny_dataset}, seeds=[0], cfg=FAST_CFG,
                     store=part_store, cells=CELLS[:2])
        run_protocol([tiny_spec()], {"ds": tiny_dataset}, seeds=[0, 1], cfg=FAST_CFG,
                     store=part_store, cells=CELLS[:2])
        key_val = lambda rs: sorted((r.key, r.value) for r in rs)
        assert key_val(full_store.load()) == key_val(part_store.load())

    def test_failures_recorded_and_run_continues(self, tiny_dataset, tmp_path, monkeypatch):
        import crossband.harness as hmod

        store = ResultStore(tmp_path / "err.jsonl")
        real = hmod.run_cell
        calls = {"n": 0}

        def flaky(spec, manifest, dataset_id, cell, seed, cfg):
            calls["n"] += 1
            if calls["n"] == 1:
                raise RuntimeError("boom")
            return real(spec, manifest, dataset_id, cell, seed, cfg)

        monkeypatch.setattr(hmod, "run_cell", flaky)
        recs = run_protocol([tiny_spec()], {"ds": tiny_dataset}, seeds=[0], cfg=FAST_CFG,
                            store=store, cells=CELLS[:2])
        statuses = sorted(r.status for r in recs)
        assert statuses == ["error", "ok"]
        err = [r for r in recs if r.status == "error"][0]
        assert "boom" in err.error and err.value is None

    def test_empty_inputs_rejected(self, tiny_dataset, tmp_path):
        store = ResultStore(tmp_path / "x.jsonl")
        with pytest.raises(ParameterError):
            run_protocol([], {"ds": tiny_dataset}, seeds=[0], cfg=FAST_CFG, store=store)


class TestAggregation:
    def rec(self, model="m", dataset="d", cell="RGB->RGB", seed=0, value=0.5, status="ok"):
        return RunRecord(model=model, dataset=dataset, cell=cell,
                         category="in-distribution", seed=seed, mode="full",
                         metric="accuracy", value=value, wall_time=0.0,
                         config_hash="h", status=status)

    def test_single_and_pair_means(self):
        recs = [self.rec(seed=0, value=0.5)]
        assert aggregate_seeds(recs)[("m", "d", "RGB->RGB", "full")] == 0.5
        recs.append(self.rec(seed=1, value=0.4))
        recs.append(self.rec(seed=2, value=0.6))
        assert aggregate_seeds(recs)[("m", "d", "RGB->RGB", "full")] == pytest.approx(0.5)

    def test_matches_brute_force_on_random_sets(self):
        rng = np.random.default_rng(3)
        recs, expected = [], {}
        for model in ("a", "b"):
            vals = rng.uniform(size=5)
            expected[model] = vals.mean()
            recs += [self.rec(model=model, seed=s, value=float(v)) for s, v in enumerate(vals)]
        got = aggregate_seeds(recs)
        for model in ("a", "b"):
            assert got[(model, "d", "RGB->RGB", "full")] == pytest.approx(expected[model])

    def test_error_records_excluded(self):
        recs = [self.rec(seed=0, value=0.5), self.rec(seed=1, value=None, status="error")]
        assert aggregate_seeds(recs)[("m", "d", "RGB->RGB", "full")] == 0.5

    def test_dataset_average_equal_weight(self):
        means = {("m", "d1", "RGB->RGB", "full"): 0.2, ("m", "d2", "RGB->RGB", "full"): 0.8}
        assert dataset_averaged(means)["m"]["RGB->RGB"] == pytest.approx(0.5)


class TestRankingTable:
    def test_missing_cell_named(self):
        scores = {"m": {c.key: 1.0 for c in CELLS[:-1]}}
        with pytest.raises(IncompleteModelError, match="S2->S2\\+S1"):
            build_ranking_table(scores)

    def test_hand_case(self):
        scores = {
            "a": dict(zip(CELL_ORDER, [1.0, 1.0, 0.5, 0.5, 0.5, 0.8, 0.8])),
            "b": dict(zip(CELL_ORDER, [0.6, 0.6, 0.9, 0.9, 0.9, 0.4, 0.4])),
        }
        table = build_ranking_table(scores)
        ra, rb = table.row("a"), table.row("b")
        assert ra.setting_avg["in-distribution"] == pytest.approx(1.0)
        assert ra.setting_avg["no-overlap"] == pytest.approx(0.5)
        assert rb.setting_rank["no-overlap"] == 1
        assert ra.setting_rank["in-distribution"] == 1
        assert ra.overall == pytest.approx(np.mean([1, 1, 0.5, 0.5, 0.5, 0.8, 0.8]))
        # overall is permutation-invariant in cell order
        shuffled = dict(zip(CELL_ORDER, [0.8, 0.8, 0.5, 0.5, 0.5, 1.0, 1.0]))
        t2 = build_ranking_table({"a": shuffled})
        assert t2.row("a").overall == pytest.approx(ra.overall)

    def test_tie_breaks_by_name(self):
        base = dict(zip(CELL_ORDER, [0.5] * 7))
        table = build_ranking_table({"zeta": dict(base), "alpha": dict(base)})
        assert table.row("alpha").setting_rank["in-distribution"] == 1
        assert table.row("zeta").setting_rank["in-distribution"] == 2


def _printed_half_ulp(x: float) -> float:
    """Half of the last printed decimal place of a fixture value."""
    text = repr(x)
    decimals = len(text.split(".")[1]) if "." in text else 0
    return 0.5 * 10 ** (-decimals)


class TestPublishedTableFixture:
    """Reproduction of the published 24-model aggregation arithmetic.

    The published setting averages were computed from unrounded scores, so
    from the printed (<=2 decimal) cells each aggregate is only recoverable
    to within (mean of the cells' half-ULPs) + 0.005. Six aggregates and one
    rank pair (an exact tie at 59.175 from printed cells, broken by hidden
    precision in the paper) sit between that bound and the nominal +-0.005;
    they are pinned below so any regression in our arithmetic still fails.
    """

    # entries whose published value is not recoverable at +-0.005 from cells
    KNOWN_BEYOND_TOLERANCE = {
        ("iBOT", "no-overlap"),
        ("iBOT-frozen", "no-overlap"),
        ("ResNet50", "no-overlap"),
        ("DINOv3-frozen", "no-overlap"),
        ("Prithvi", "no-overlap"),
        ("Prithvi-frozen", "overall"),
    }
    KNOWN_RANK_SWAPS = {("DINOv2-frozen", "in-distribution"), ("SatlasNet", "in-distribution")}

    def test_all_aggregates_within_printed_precision_bound(self):
        table = build_ranking_table(cell_scores())
        for model, (cells, avgs, _ranks, overall) in PUBLISHED.items():
            row = table.row(model)
            cell_ulps = [_printed_half_ulp(c) for c in cells]
            for s, pub, idx in zip(SETTINGS, avgs, ((0, 2), (2, 5), (5, 7))):
                bound = float(np.mean(cell_ulps[idx[0]:idx[1]])) + _printed_half_ulp(pub)
                assert abs(row.setting_avg[s] - pub) <= bound + 1e-12, (model, s)
            bound = float(np.mean(cell_ulps)) + _printed_half_ulp(overall)
            assert abs(row.overall - overall) <= bound + 1e-12, model

    def test_spec_tolerance_holds_except_pinned_set(self):
        table = build_ranking_table(cell_scores())
        beyond = set()
        for model, (_cells, avgs, _ranks, overall) in PUBLISHED.items():
            row = table.row(model)
            for s, pub in zip(SETTINGS, avgs):
                if abs(row.setting_avg[s] - pub) > 0.005 + 1e-9:
                    beyond.add((model, s))
            if abs(row.overall - overall) > 0.005 + 1e-9:
                beyond.add((model, "overall"))
        assert beyond == self.KNOWN_BEYOND_TOLERANCE

    def test_ranks_match_except_pinned_tie(self):
        table = build_ranking_table(cell_scores())
        mismatches = set()
        for model, (_cells, _avgs, ranks, _overall) in PUBLISHED.items():
            row = table.row(model)
            for s, pub in zip(SETTINGS, ranks):
                if row.setting_rank[s] != pub:
                    mismatches.add((model, s))
        assert mismatches == self.KNOWN_RANK_SWAPS

    def test_flagship_row_and_rank_anchors(self):
        table = build_ranking_table(cell_scores())
        chivit = table.row("ChiViT")
        assert abs(chivit.setting_avg["in-distribution"] - 62.67) <= 0.005 + 1e-9
        assert abs(chivit.setting_avg["no-overlap"] - 23.09) <= 0.005 + 1e-9
        assert abs(chivit.setting_avg["superset"] - 58.49) <= 0.005 + 1e-9
        assert abs(chivit.overall - 44.51) <= 0.005 + 1e-9
        assert chivit.setting_rank["no-overlap"] == 1
        assert chivit.setting_rank["superset"] == 1
        assert table.row("DINOv2").setting_rank["in-distribution"] == 1

    def test_runtime_under_one_second(self):
        import time

        start = time.time()
        for _ in range(10):
            build_ranking_table(cell_scores())
        assert (time.time() - start) / 10 < 1.0


class TestReports:
    def table(self):
        return build_ranking_table(cell_scores())

    def test_csv_roundtrip_identical(self):
        table = self.table()
        text = render_csv(table)
        parsed = parse_csv(text)
        assert render_csv(parsed) == text
        for row, prow in zip(table.rows, parsed.rows):
            assert row.model == prow.model
            assert row.cells == prow.cells
            assert row.setting_rank == prow.setting_rank

    def test_emissions_byte_identical(self, tmp_path):
        table = self.table()
        p1 = emit_report(table, "csv", tmp_path / "a")
        p2 = emit_report(table, "csv", tmp_path / "b")
        for a, b in zip(p1, p2):
            assert a.read_bytes() == b.read_bytes()

    def test_column_order_fixed(self):
        header = render_csv(self.table()).splitlines()[0]
        assert header.split(",")[:6] == [
            "model", "ID:RGB->RGB", "ID:S2->S2", "ID:AVG", "ID:rank", "NO:RGB->S1",
        ]

    def test_radar_rows(self):
        lines = render_radar_csv(self.table()).strip().splitlines()
        assert len(lines) == 1 + 24 * 7

    def test_text_render_and_bad_format(self, tmp_path):
        text = render_text(self.table())
        assert "overall:AVG" in text.splitlines()[0]
        with pytest.raises(ParameterError):
            emit_report(self.table(), "yaml", tmp_path)
