import csv
import json

import numpy as np
import pytest

from clusterdepth import __version__
from clusterdepth.cli import main
from clusterdepth.config import ConfigError, build_config, read_keyvalue
from clusterdepth.inference import AdjustedPValueMap, ClusterRecord, Procedure
from clusterdepth.io import (IngestError, emit_results, file_digest, ingest, read_design,
                             read_results)


def _write(path, rows, delim=","):
    path.write_text("\n".join(delim.join(str(c) for c in r) for r in rows) + "\n")
    return path


@pytest.fixture
def dataset(tmp_path):
    rng = np.random.default_rng(0)
    Y = rng.standard_normal((20, 400))
    Y[10:, 180:220] += 2.0
    data = tmp_path / "signals.csv"
    np.savetxt(data, Y, delimiter=",")
    design = _write(tmp_path / "design.csv", [["group"]] + [["ctl"]] * 10 + [["trt"]] * 10)
    return data, design, Y


def test_ingest_shapes(dataset):
    data, design, Y = dataset
    signals, d = ingest(data, design)
    assert (signals.n, signals.m, signals.channel_count) == (20, 400, 1)
    assert d.q == 2 and d.r == 1
    assert d.G.tolist() == [[0.0, 1.0]]
    assert d.column_names == ("intercept", "group[trt]")
    assert np.array_equal(signals.data, Y)


def test_tab_delimited_and_header(tmp_path):
    data = _write(tmp_path / "d.tsv", [["t1", "t2", "t3"], [1, 2, 3], [4, 5, 6], [7, 8, 9.5],
                                       [1, 0, 1], [2, 2, 0]], "\t")
    design = _write(tmp_path / "x.tsv", [["age", "sex"], [30, "f"], [41, "m"], [25, "f"],
                                         [33, "m"], [52, "f"]], "\t")
    signals, d = ingest(data, design, contrast=["sex"])
    assert signals.data.shape == (5, 3) and signals.data[2, 2] == 9.5
    assert d.G.tolist() == [[0.0, 0.0, 1.0]]


def test_ragged_row_names_the_row(tmp_path, dataset):
    _, design, _ = dataset
    bad = _write(tmp_path / "bad.csv", [[1, 2, 3]] * 4 + [[1, 2]] + [[1, 2, 3]] * 15)
    with pytest.raises(IngestError, match="row 5"):
        ingest(bad, design)


def test_non_numeric_cell_names_row_and_column(tmp_path, dataset):
    _, design, _ = dataset
    bad = _write(tmp_path / "bad.csv", [[1, 2, 3]] * 2 + [[1, "x", 3]] + [[1, 2, 3]] * 17)
    with pytest.raises(IngestError, match="row 3, column 2"):
        ingest(bad, design)


def test_dimension_mismatch(tmp_path, dataset):
    data, _, _ = dataset
    design = _write(tmp_path / "short.csv", [["g"]] + [["a"], ["b"]] * 3)
    with pytest.raises(IngestError, match="design rows"):
        ingest(data, design)


def test_rank_deficient_design(tmp_path):
    design = _write(tmp_path / "x.csv", [["g", "h"], ["a", "a"], ["b", "b"], ["a", "a"], ["b", "b"]])
    with pytest.raises(ValueError, match="rank"):
        read_design(design)


def test_manifest_64_channels(tmp_path):
    rng = np.random.default_rng(1)
    wide = rng.standard_normal((4, 64 * 614))
    data = tmp_path / "wide.csv"
    np.savetxt(data, wide, delimiter=",", fmt="%.6f")
    manifest = _write(tmp_path / "channels.csv", [[f"E{k + 1}", 614] for k in range(64)])
    design = _write(tmp_path / "x.csv", [["g"], ["a"], ["a"], ["b"], ["b"]])
    signals, _ = ingest(data, design, channels=manifest)
    assert (signals.channel_count, signals.m) == (64, 614)
    assert signals.channel_names[0] == "E1"
    np.testing.assert_allclose(signals.data[:, :, 3], np.round(wide[:, 3 * 614:4 * 614], 6))


def test_manifest_width_mismatch(tmp_path):
    data = _write(tmp_path / "w.csv", [[1, 2, 3, 4]] * 3)
    manifest = _write(tmp_path / "c.csv", [["A", 3], ["B", 3]])
    design = _write(tmp_path / "x.csv", [["g"], ["a"], ["b"], ["b"]])
    with pytest.raises(IngestError, match="declares 3"):
        ingest(data, design, channels=manifest)


def _map(p, clusters=()):
    p = np.asarray(p, dtype=float)
    return AdjustedPValueMap(p, Procedure.CLUSTER_DEPTH_BOTH, 0.05, np.arange(p.size) * 0.1,
                             100, clusters=list(clusters), J_D={"head": 3, "tail": 2}, tau=4.4)


def test_round_trip_is_bit_exact(tmp_path):
    p = np.array([1.0, 0.1 + 0.2, 1 / 3, 0.01, 0.049999999999999996])
    csv_path, json_path = emit_results([_map(p)], {"seed": 3}, tmp_path / "out")
    back = read_results(csv_path)[("clusterdepth", "0")]
    assert np.array_equal(back["p_adjusted"], p)
    assert back["time_index"].tolist() == [1, 2, 3, 4, 5]
    assert back["significant"].tolist() == [False, False, False, True, True]
    with open(csv_path) as fh:
        first = fh.readline()
        header = next(csv.reader(fh))
    assert first.startswith("# ") and json.loads(first[2:])["config"] == {"seed": 3}
    assert header == ["channel", "time_index", "statistic", "p_adjusted", "significant", "procedure"]
    meta = json.loads(json_path.read_text())
    assert meta["seed"] == 3 and meta["rng"] == "numpy.random.PCG64"
    assert meta["version"] == __version__


def test_empty_result(tmp_path):
    csv_path, json_path = emit_results([_map(np.ones(6))], {"seed": 0}, tmp_path / "empty")
    back = read_results(csv_path)[("clusterdepth", "0")]
    assert np.all(back["p_adjusted"] == 1)
    assert json.loads(json_path.read_text())["results"][0]["clusters"] == []


def test_cluster_table_carries_both_directions(tmp_path):
    J = 263 - 128 + 1
    rec = ClusterRecord(127, 262, 812.5, np.linspace(0.001, 0.2, J), np.linspace(0.3, 0.002, J))
    _, json_path = emit_results([_map(np.ones(300), [rec])], {"seed": 0}, tmp_path / "cl")
    table = json.loads(json_path.read_text())["results"][0]
    (cl,) = table["clusters"]
    assert (cl["start"], cl["end"], cl["length"]) == (128, 263, J)
    assert len(cl["p_head"]) == len(cl["p_tail"]) == J
    assert table["J_D"] == {"head": 3, "tail": 2}


def test_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        emit_results([_map(np.ones(3))], {}, blocker / "sub" / "out")


def test_config_precedence(tmp_path):
    cfg = _write(tmp_path / "run.cfg", [["alpha = 0.01"], ["permutations = 2000"], ["seed = 4"]])
    values = read_keyvalue(cfg)
    rc = build_config(values, {"seed": 9, "alpha": None})
    assert (rc.alpha, rc.n_perm, rc.seed) == (0.01, 2000, 9)
    defaults = build_config()
    assert (defaults.alpha, defaults.n_perm, defaults.scheme, defaults.tau_quantile,
            defaults.E, defaults.H) == (0.05, 5000, "terbraak", 0.95, 0.5, 1.0)
    with pytest.raises(ConfigError):
        build_config({"colour": "red"})
    with pytest.raises(ConfigError):
        build_config({}, {"alpha": 1.5})
    with pytest.raises(ConfigError):
        build_config({}, {"procedures": ["bonferroni"]})


# --------------------------------------------------------------------------- #
# command line


def test_cli_test_on_toy_data_is_deterministic(tmp_path):
    args = ["test", "--procedure", "clusterdepth", "--permutations", "5000", "--seed", "1"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert file_digest(tmp_path / "a.csv", tmp_path / "a.json") == \
        file_digest(tmp_path / "b.csv", tmp_path / "b.json")
    meta = json.loads((tmp_path / "a.json").read_text())
    assert meta["config"]["n_perm"] == 5000 and meta["seed"] == 1
    res = read_results(tmp_path / "a.csv")[("clusterdepth", "0")]
    # packaged toy data carry a 20-point effect at time points 41..60
    assert res["significant"][40:60].any() and not res["significant"][:30].any()


def test_cli_threads_give_identical_files(tmp_path):
    base = ["test", "--procedure", "all", "--permutations", "1500", "--seed", "2"]
    assert main(base + ["--threads", "1", "--out", str(tmp_path / "t1")]) == 0
    assert main(base + ["--threads", "8", "--out", str(tmp_path / "t8")]) == 0
    for ext in (".csv", ".json"):
        assert file_digest(tmp_path / f"t1{ext}") == file_digest(tmp_path / f"t8{ext}")


def test_cli_with_data_files(tmp_path, dataset):
    data, design, _ = dataset
    out = tmp_path / "res"
    assert main(["test", "--data", str(data), "--design", str(design), "--procedure",
                 "clusterdepth,maxt", "--permutations", "500", "--out", str(out)]) == 0
    res = read_results(out.with_suffix(".csv"))
    assert set(res) == {("clusterdepth", "0"), ("maxt", "0")}
    assert res[("clusterdepth", "0")]["significant"][180:220].any()


def test_cli_multichannel(tmp_path, dataset):
    _, design, Y = dataset
    paths = []
    for k in range(2):
        p = tmp_path / f"ch{k}.csv"
        np.savetxt(p, Y[:, :100] + k, delimiter=",")
        paths += ["--data", str(p)]
    out = tmp_path / "mc"
    assert main(["test", *paths, "--design", str(design), "--procedure", "clusterdepth,troendle",
                 "--permutations", "200", "--out", str(out)]) == 0
    res = read_results(out.with_suffix(".csv"))
    assert set(res) == {("clusterdepth", "ch0"), ("clusterdepth", "ch1"), ("troendle", "ch0"),
                        ("troendle", "ch1")}
    assert main(["test", *paths, "--design", str(design), "--procedure", "clustermass",
                 "--permutations", "200", "--out", str(out)]) == 2


def test_cli_enumerate(tmp_path):
    rng = np.random.default_rng(3)
    data = tmp_path / "tiny.csv"
    np.savetxt(data, rng.standard_normal((6, 12)), delimiter=",")
    design = _write(tmp_path / "x.csv", [["g"], ["a"], ["a"], ["a"], ["b"], ["b"], ["b"]])
    out = tmp_path / "enum"
    assert main(["enumerate", "--data", str(data), "--design", str(design), "--procedure",
                 "maxt", "--out", str(out)]) == 0
    meta = json.loads(out.with_suffix(".json").read_text())
    assert meta["config"]["n_perm_effective"] == 720 and meta["config"]["exhaustive"]
    assert main(["enumerate", "--data", str(data), "--design", str(design), "--cap", "100",
                 "--out", str(out)]) == 2


def test_cli_simulate_full_null(tmp_path, capsys):
    cfg = _write(tmp_path / "grid.cfg", [
        ["noise = independent"], ["regions = none"], ["m = 50"], ["replications = 6"],
        ["procedures = clusterdepth, maxt"], ["permutations = 100"], ["seed = 5"]])
    out = tmp_path / "sim"
    assert main(["simulate", "--config", str(cfg), "--out", str(out)]) == 0
    rows = list(csv.DictReader(l for l in open(f"{out}_metrics.csv") if not l.startswith("#")))
    assert [r["procedure"] for r in rows] == ["clusterdepth", "maxt"]
    for r in rows:
        assert 0 <= float(r["fwer"]) <= 1 and r["replications"] == "6"
    reps = list(csv.DictReader(l for l in open(f"{out}_replications.csv") if not l.startswith("#")))
    assert len(reps) == 12
    meta = json.loads(open(f"{out}_metadata.json").read())
    assert meta["seed"] == 5 and meta["rng"] == "numpy.random.PCG64"


@pytest.mark.parametrize("argv,needle", [
    (["test", "--alpha", "2"], "alpha"),
    (["test", "--procedure", "bogus"], "procedure"),
    (["test", "--data", "/nonexistent.csv", "--design", "/nonexistent.csv"], "not found"),
    (["test", "--data", "x.csv"], "--design"),
])
def test_cli_errors_exit_nonzero(argv, needle, capsys, tmp_path):
    assert main(argv + ["--out", str(tmp_path / "e")]) == 2
    assert needle in capsys.readouterr().err


def test_cli_unknown_simulation_key(tmp_path, capsys):
    cfg = _write(tmp_path / "g.cfg", [["flavour = mint"]])
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 2
    assert "flavour" in capsys.readouterr().err
