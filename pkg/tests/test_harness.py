import xml.etree.ElementTree as ET

import numpy as np
import pytest

from stucknet import harness, mlp
from stucknet.crossbar import IdealRealization
from stucknet.harness import (
    Curve,
    ModelCache,
    Scenario,
    SweepRecord,
    derive_seed,
    parse_csv,
    render_svg,
    reproduce,
    run_scenario,
    summarize,
    train_config_for,
    write_csv,
)
from stucknet.mlp import TrainConfig

TINY_CFG = TrainConfig(epochs=1, batch=64, seed=11)


def scenario(**kw):
    defaults = dict(
        dataset="synthetic", p_train=0.0, p_inf=0.0,
        epsilons=(0.0, 0.1, 0.2), n_realizations=2, seed=99,
    )
    defaults.update(kw)
    return Scenario(**defaults)


class TestScenario:
    def test_grid_must_start_at_zero(self):
        with pytest.raises(ValueError):
            scenario(epsilons=(0.05, 0.1))

    def test_grid_must_increase(self):
        with pytest.raises(ValueError):
            scenario(epsilons=(0.0, 0.2, 0.1))

    def test_needs_realizations(self):
        with pytest.raises(ValueError):
            scenario(n_realizations=0)

    def test_canonical_is_stable(self):
        assert scenario().canonical() == scenario().canonical()
        assert scenario(p_inf=0.1).canonical() != scenario().canonical()


class TestSeedDerivation:
    def test_deterministic(self):
        assert derive_seed(1, "ctx", 0) == derive_seed(1, "ctx", 0)

    def test_sensitive_to_all_inputs(self):
        base = derive_seed(1, "ctx", 0)
        assert derive_seed(2, "ctx", 0) != base
        assert derive_seed(1, "ctx2", 0) != base
        assert derive_seed(1, "ctx", 1) != base

    def test_is_u64(self):
        s = derive_seed(123, scenario().canonical(), 4)
        assert 0 <= s < 2**64


class TestCsv:
    def records(self):
        return [
            SweepRecord("synthetic", 0.0, 0.1, 0.05, r, 42 + r, 0.8512 - 0.01 * r)
            for r in range(3)
        ]

    def test_header_only_when_empty(self):
        assert write_csv([]) == harness.CSV_HEADER + "\n"

    def test_single_record_two_lines(self):
        text = write_csv(self.records()[:1])
        assert len(text.splitlines()) == 2

    def test_lf_endings_and_six_sig_digits(self):
        text = write_csv([SweepRecord("d", 0.123456789, 0.0, 0.0, 0, 1, 0.987654321)])
        assert "\r" not in text
        assert "0.123457" in text and "0.987654" in text

    def test_round_trip_byte_identical(self, tmp_path):
        path = tmp_path / "data.csv"
        write_csv(self.records(), path, comments=["scenario foo", "git=abc"])
        text = path.read_bytes().decode()
        records, comments = parse_csv(text)
        assert write_csv(records, comments=comments) == text


class TestSvg:
    def flat_curve(self):
        eps = np.array([0.0, 0.1, 0.2])
        return Curve("flat", eps, np.full(3, 0.5), np.zeros(3))

    def test_well_formed_xml(self):
        root = ET.fromstring(render_svg([self.flat_curve()]))
        assert root.tag.endswith("svg")

    def test_flat_curve_has_constant_y(self):
        text = render_svg([self.flat_curve()])
        polyline = next(l for l in text.splitlines() if "<polyline" in l)
        pts = polyline.split('points="')[1].split('"')[0].split()
        ys = {p.split(",")[1] for p in pts}
        assert len(ys) == 1

    def test_deterministic(self):
        curves = [self.flat_curve()]
        assert render_svg(curves) == render_svg(curves)

    def test_empty_input_rejected(self):
        with pytest.raises(ValueError):
            render_svg([])

    def test_writes_file(self, tmp_path):
        path = tmp_path / "plot.svg"
        render_svg([self.flat_curve()], path)
        assert path.read_bytes().startswith(b"<svg")


class TestRunScenario:
    def test_degenerate_sweep_equals_clean_accuracy(self, synth_train, synth_test):
        s = scenario(epsilons=(0.0,), n_realizations=1)
        cache = ModelCache()
        recs = run_scenario(s, synth_train, synth_test, cache=cache, base_cfg=TINY_CFG)
        assert len(recs) == 1
        cfg = train_config_for(s, TINY_CFG)
        params = cache.get_or_train("synthetic", cfg, synth_train)
        clean = mlp.evaluate(params, IdealRealization(), synth_test)
        assert recs[0].accuracy == clean

    def test_record_shape(self, synth_train, synth_test):
        s = scenario(p_inf=0.1)
        recs = run_scenario(s, synth_train, synth_test, base_cfg=TINY_CFG)
        assert len(recs) == len(s.epsilons) * s.n_realizations
        assert all(0.0 <= r.accuracy <= 1.0 for r in recs)

    def test_deterministic_csv_bytes(self, synth_train, synth_test):
        s = scenario(p_inf=0.2)
        a = write_csv(run_scenario(s, synth_train, synth_test, base_cfg=TINY_CFG))
        b = write_csv(run_scenario(s, synth_train, synth_test, base_cfg=TINY_CFG))
        assert a == b

    def test_serial_parallel_equivalence(self, synth_train, synth_test):
        s = scenario(p_inf=0.2, n_realizations=4)
        serial = write_csv(
            run_scenario(s, synth_train, synth_test, base_cfg=TINY_CFG, workers=1)
        )
        parallel = write_csv(
            run_scenario(s, synth_train, synth_test, base_cfg=TINY_CFG, workers=4)
        )
        assert serial == parallel

    def test_stuck_inference_lowers_clean_accuracy(self, synth_train, synth_test):
        cache = ModelCache()
        clean = run_scenario(
            scenario(epsilons=(0.0,), n_realizations=3),
            synth_train, synth_test, cache=cache, base_cfg=TINY_CFG,
        )
        stuck = run_scenario(
            scenario(epsilons=(0.0,), n_realizations=3, p_inf=0.2),
            synth_train, synth_test, cache=cache, base_cfg=TINY_CFG,
        )
        assert np.mean([r.accuracy for r in stuck]) < np.mean(
            [r.accuracy for r in clean]
        )


class TestModelCache:
    def test_disk_round_trip(self, tmp_path, synth_train):
        cfg = TrainConfig(epochs=1, seed=2)
        a = ModelCache(tmp_path).get_or_train("synthetic", cfg, synth_train)
        # a fresh cache instance must load the stored model, not retrain
        fresh = ModelCache(tmp_path)
        b = fresh.get_or_train("synthetic", cfg, synth_train)
        assert np.array_equal(a.W1, b.W1)
        assert len(list(tmp_path.glob("*.mnna"))) == 1

    def test_distinct_configs_distinct_keys(self, tmp_path, synth_train):
        cache = ModelCache(tmp_path)
        cache.get_or_train("synthetic", TrainConfig(epochs=1, seed=2), synth_train)
        cache.get_or_train("synthetic", TrainConfig(epochs=1, seed=3), synth_train)
        assert len(list(tmp_path.glob("*.mnna"))) == 2


@pytest.fixture(scope="module")
def result(tmp_path_factory, synth_train, synth_test):
    out = tmp_path_factory.mktemp("results")
    return reproduce(
        "fig3", "synthetic", out_root=out, seed=5,
        epsilons=(0.0, 0.1, 0.2), n_realizations=2,
        base_cfg=TINY_CFG, sets=(synth_train, synth_test),
    )


class TestReproduce:
    def test_outputs_exist(self, result):
        for key in ("csv", "svg", "config"):
            assert result[key].exists()
        assert "fig3/synthetic" in str(result["csv"])

    def test_three_curves_full_grid(self, result):
        records, _ = parse_csv(result["csv"].read_text())
        curves = summarize(records)
        assert len(curves) == 3
        assert all(len(c.mean) == 3 for c in curves)

    def test_comments_embed_config_and_git(self, result):
        _, comments = parse_csv(result["csv"].read_text())
        assert any(c.startswith("git=") for c in comments)
        assert sum(c.startswith("scenario ") for c in comments) == 3

    def test_unknown_figure(self, synth_train, synth_test):
        with pytest.raises(ValueError, match="unknown figure"):
            reproduce("fig9", "synthetic", sets=(synth_train, synth_test))

    def test_svg_parses(self, result):
        ET.parse(result["svg"])
