"""Chart rendering tests against the comparison CSV contract."""

import pytest

from moeplot import PlotError, PlotSpec, load_rows, normalize, render
from moeplot.cli import main

HEADER = ("config_id,policy,cooling,tbt_p99_ms,throughput_tps,"
          "energy_mj,dram_accesses,throttle")

IDENTITY = f"""{HEADER}
a3d1,hrofs,True,0.8,1000.0,50.0,4000,1.0
a3d1-2,hrofs,True,0.8,1000.0,50.0,4000,1.0
"""

TWO_POLICY = """config_id,policy,tbt_p99_ms,energy_mj
base,conventional,2.0,80.0
fused,hrofs,3.0,60.0
"""

COOLED = f"""{HEADER}
a3d1,hrofs,True,0.8,1000.0,50.0,4000,1.0
a3d1,hrofs,False,1.2,666.0,50.0,4000,0.66
duplex,conventional,True,1.6,500.0,150.0,9000,1.0
duplex,conventional,False,2.4,333.0,150.0,9000,0.66
"""


def write(tmp_path, text, name="cmp.csv"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


class TestNormalize:
    def test_identity_rows_are_all_ones(self, tmp_path):
        rows = load_rows(write(tmp_path, IDENTITY))
        _, _, values = normalize(rows, "tbt_p99_ms", "a3d1")
        assert values and all(v == 1.0 for v in values.values())

    def test_ratio_passes_through(self, tmp_path):
        rows = load_rows(write(tmp_path, TWO_POLICY))
        groups, states, values = normalize(rows, "tbt_p99_ms", "base")
        assert groups == ["base", "fused"]
        assert states == [""]
        assert values[("base", "")] == 1.0
        assert values[("fused", "")] == pytest.approx(1.5)

    def test_baseline_matches_policy_when_not_a_config(self, tmp_path):
        # "conventional" is a policy value, not a config_id, so grouping
        # falls through to the policy column
        rows = load_rows(write(tmp_path, TWO_POLICY))
        groups, _, values = normalize(rows, "energy_mj", "conventional")
        assert groups == ["conventional", "hrofs"]
        assert values[("conventional", "")] == 1.0
        assert values[("hrofs", "")] == pytest.approx(60.0 / 80.0)

    def test_cooling_states_normalize_independently(self, tmp_path):
        rows = load_rows(write(tmp_path, COOLED))
        groups, states, values = normalize(rows, "tbt_p99_ms", "a3d1")
        assert groups == ["a3d1", "duplex"]
        assert states == ["False", "True"]
        assert values[("a3d1", "True")] == 1.0
        assert values[("a3d1", "False")] == 1.0
        assert values[("duplex", "True")] == pytest.approx(2.0)
        assert values[("duplex", "False")] == pytest.approx(2.0)

    def test_missing_metric_column_named(self, tmp_path):
        rows = load_rows(write(tmp_path, TWO_POLICY))
        with pytest.raises(PlotError, match="nope"):
            normalize(rows, "nope", "conventional")

    def test_unknown_baseline_named(self, tmp_path):
        rows = load_rows(write(tmp_path, TWO_POLICY))
        with pytest.raises(PlotError, match="mystery"):
            normalize(rows, "tbt_p99_ms", "mystery")

    def test_ragged_csv_rejected(self, tmp_path):
        path = write(tmp_path, "config_id,policy,tbt_p99_ms\na,b\n")
        with pytest.raises(PlotError):
            load_rows(path)

    def test_non_numeric_metric_rejected(self, tmp_path):
        path = write(tmp_path, "config_id,policy,tbt_p99_ms\na,hrofs,fast\n")
        with pytest.raises(PlotError, match="tbt_p99_ms"):
            normalize(load_rows(path), "tbt_p99_ms", "a")

    def test_empty_csv_rejected(self, tmp_path):
        with pytest.raises(PlotError):
            load_rows(write(tmp_path, HEADER + "\n"))


class TestRender:
    def test_rerender_is_pixel_identical(self, tmp_path):
        csv_path = write(tmp_path, IDENTITY)
        outs = []
        for name in ("a.png", "b.png"):
            out = tmp_path / name
            values = render(PlotSpec(csv_path, "tbt_p99_ms", "a3d1",
                                     str(out)))
            assert all(v == 1.0 for v in values.values())
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]
        assert outs[0][:8] == b"\x89PNG\r\n\x1a\n"

    def test_failure_leaves_no_file(self, tmp_path):
        csv_path = write(tmp_path, "config_id,policy\n")  # no data rows
        out = tmp_path / "x.png"
        with pytest.raises(PlotError):
            render(PlotSpec(csv_path, "tbt_p99_ms", "a3d1", str(out)))
        assert not out.exists()
        assert not list(tmp_path.glob("*.tmp"))


class TestCli:
    def test_plot_roundtrip(self, tmp_path, capsys):
        csv_path = write(tmp_path, COOLED)
        out = tmp_path / "chart.png"
        rc = main(["plot", "--csv", csv_path, "--metric", "energy_mj",
                   "--baseline", "a3d1", "--out", str(out)])
        assert rc == 0
        assert out.exists() and out.stat().st_size > 0
        assert "chart.png" in capsys.readouterr().out

    def test_missing_column_exits_2(self, tmp_path, capsys):
        csv_path = write(tmp_path, TWO_POLICY)
        rc = main(["plot", "--csv", csv_path, "--metric", "dram_accesses",
                   "--baseline", "conventional",
                   "--out", str(tmp_path / "x.png")])
        assert rc == 2
        assert "dram_accesses" in capsys.readouterr().err
        assert not (tmp_path / "x.png").exists()

    def test_malformed_csv_exits_2_without_partial_file(self, tmp_path):
        csv_path = write(tmp_path, "config_id,policy,tbt_p99_ms\na,b\n")
        out = tmp_path / "x.png"
        rc = main(["plot", "--csv", csv_path, "--metric", "tbt_p99_ms",
                   "--baseline", "a", "--out", str(out)])
        assert rc == 2
        assert not out.exists()

    def test_missing_file_exits_2(self, tmp_path):
        rc = main(["plot", "--csv", str(tmp_path / "nope.csv"),
                   "--metric", "energy_mj", "--baseline", "x",
                   "--out", str(tmp_path / "x.png")])
        assert rc == 2
