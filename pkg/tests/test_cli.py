import csv
import json

import numpy as np
import pytest

from netdr.cli import main, read_table, rows_equal, write_table
from netdr.simulate import DgpConfig, compute_truth, gen_network, gen_replicate, network_rng, replicate_rng

TREAT = "abs(X1),abs(X1):X2,H"
OUT = "abs(X1),X2,abs(X1):X2"


def _write_dataset(tmp_path, seed, m=30, ids=True):
    cfg = DgpConfig(m=m, seed=seed)
    g, H = gen_network(cfg, network_rng(seed))
    data, oracle = gen_replicate(cfg, g, H, replicate_rng(seed, 0))
    nodes = tmp_path / f"nodes{seed}.csv"
    edges = tmp_path / f"edges{seed}.csv"
    with open(nodes, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow((["id"] if ids else []) + ["Z", "Y", "X1", "X2", "H"])
        for i in range(data.n):
            w.writerow(([f"v{i}"] if ids else []) + [int(data.Z[i]), float(data.Y[i])]
                       + [float(v) for v in data.X[i]])
    with open(edges, "w") as fh:
        fh.write("src,dst\n")
        for a, b in g.edges:
            fh.write(f"v{a},v{b}\n" if ids else f"{a},{b}\n")
    return nodes, edges, g, oracle


def test_simulate_is_byte_deterministic(tmp_path):
    args = ["simulate", "--scheme", "balanced", "--scenario", "a", "--S", "3", "--seed", "7",
            "--m", "10", "--threads", "1"]
    assert main(args + ["--out", str(tmp_path / "r1")]) == 0
    assert main(args + ["--out", str(tmp_path / "r2")]) == 0
    for name in ("summary.csv", "replicates.csv"):
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()


def test_report_round_trip(tmp_path):
    assert main(["simulate", "--scenario", "a,b", "--S", "2", "--seed", "3", "--m", "10",
                 "--threads", "1", "--out", str(tmp_path)]) == 0
    config, rows = read_table(tmp_path / "summary.csv")
    assert config["seed"] == 3 and config["dgp"]["seed"] == 3
    assert config["scenarios"] == ["a", "b"]
    path = tmp_path / "again.csv"
    from netdr.simulate import SUMMARY_FIELDS
    write_table(path, SUMMARY_FIELDS, rows, config)
    assert path.read_bytes() == (tmp_path / "summary.csv").read_bytes()
    config2, rows2 = read_table(path)
    assert config2 == config and rows_equal(rows, rows2)


def test_round_trip_keeps_nan_and_full_precision(tmp_path):
    rows = [dict(a=0.1 + 0.2, b=np.nan, c="x", replicate=3), dict(a=1e-300, b=-2.5, c="y,z", replicate=4)]
    write_table(tmp_path / "t.csv", ("replicate", "a", "b", "c"), rows, {"seed": 1})
    from netdr import cli
    cli._FLOAT_FIELDS.update({"a", "b"})
    try:
        cfg, back = read_table(tmp_path / "t.csv")
    finally:
        cli._FLOAT_FIELDS.difference_update({"a", "b"})
    assert cfg == {"seed": 1}
    assert rows_equal(rows, back)
    assert back[0]["a"] == 0.1 + 0.2


def test_reference_estimand_rows_and_truth_dump(tmp_path):
    estimands = ["DE(0.2)", "DE(0.5)", "DE(0.8)", "IE(0.5,0.2)", "IE(0.8,0.2)", "IE(0.8,0.5)"]
    args = ["simulate", "--scenario", "a", "--S", "2", "--m", "8", "--seed", "2", "--no-se",
            "--estimators", "REG", "--dump-truth", "--threads", "1", "--out", str(tmp_path)]
    for e in estimands:
        args += ["--estimand", e]
    assert main(args) == 0
    _, rows = read_table(tmp_path / "summary.csv")
    assert sorted(r["estimand"] for r in rows) == sorted(estimands)
    _, truth = read_table(tmp_path / "truth.csv")
    val = {(r["replicate"], r["estimand"]): r["value"] for r in truth}
    for rep in (0, 1):
        for a, ap in [("0.5", "0.2"), ("0.8", "0.2"), ("0.8", "0.5")]:
            assert val[(rep, f"TE({a},{ap})")] == val[(rep, f"DE({a})")] + val[(rep, f"IE({a},{ap})")]


def test_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "sim.json"
    cfg.write_text(json.dumps({"scenarios": ["b"], "S": 2, "m": 8, "seed": 11, "se": False,
                               "estimators": ["REG"]}))
    assert main(["simulate", "--config", str(cfg), "--seed", "12", "--threads", "1",
                 "--out", str(tmp_path / "o")]) == 0
    config, rows = read_table(tmp_path / "o" / "summary.csv")
    assert config["seed"] == 12 and rows[0]["scenario"] == "b"


@pytest.mark.parametrize("args,code", [
    (["simulate", "--scenario", "zz", "--S", "2"], 2),
    (["simulate", "--scenario", "so-a", "--S", "2"], 2),
    (["simulate", "--estimand", "DE(0.2,0.3)", "--S", "2"], 2),
    (["simulate", "--S", "1"], 2),
    (["simulate", "--bogus"], 2),
])
def test_config_errors(args, code, tmp_path, capsys):
    assert main(args + ["--out", str(tmp_path)]) == code
    err = capsys.readouterr().err
    assert err


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"scenarioz": ["a"]}))
    assert main(["simulate", "--config", str(cfg)]) == 2
    assert json.loads(capsys.readouterr().err)["error"] == "config"


def _analyze_args(nodes, edges, out, *extra):
    return ["analyze", "--nodes", str(nodes), "--edges", str(edges), "--header", "--treatment", TREAT,
            "--outcome", OUT, "--out", str(out), *extra]


def test_analyze_outputs(tmp_path):
    nodes, edges, g, _ = _write_dataset(tmp_path, 5)
    assert main(_analyze_args(nodes, edges, tmp_path / "o", "--alphas", "0.4,0.6")) == 0
    config, rows = read_table(tmp_path / "o" / "estimates.csv")
    assert config["alphas"] == [0.4, 0.6]
    assert {r["estimator"] for r in rows} == {"IPW", "REG", "DRBC", "IPWLS"}
    same = [r for r in rows if r["alpha"] == 0.4 and r["estimand"] in ("IE(0.4,0.4)", "OE(0.4,0.4)")]
    assert len(same) == 8
    for r in same:
        assert r["point"] == 0.0 and r["se"] == pytest.approx(0.0, abs=1e-12)
    for r in rows:
        assert r["ci_lo"] <= r["point"] <= r["ci_hi"]
    _, ids = read_table(tmp_path / "o" / "node_ids.csv")
    assert ids[3] == {"index": "3", "id": "v3"}


def test_analyze_is_deterministic(tmp_path):
    nodes, edges, _, _ = _write_dataset(tmp_path, 6)
    args = ["--estimators", "IPW,DRBC", "--alphas", "0.5"]
    assert main(_analyze_args(nodes, edges, tmp_path / "a", *args)) == 0
    assert main(_analyze_args(nodes, edges, tmp_path / "b", *args)) == 0
    assert (tmp_path / "a" / "estimates.csv").read_bytes() == (tmp_path / "b" / "estimates.csv").read_bytes()


def test_analyze_multilevel_ipwls_flag(tmp_path):
    nodes, edges, _, _ = _write_dataset(tmp_path, 7)
    assert main(_analyze_args(nodes, edges, tmp_path / "o", "--estimators", "IPWLS,DRBC",
                              "--outcome-variant", "multilevel", "--alphas", "0.5")) == 0
    _, rows = read_table(tmp_path / "o" / "estimates.csv")
    for r in rows:
        assert ("no_DR_guarantee" in r["diagnostics"]) == (r["estimator"] == "IPWLS")


def test_analyze_drop_isolates_and_plain_ids(tmp_path):
    nodes, edges, g, _ = _write_dataset(tmp_path, 8, ids=False)
    assert main(_analyze_args(nodes, edges, tmp_path / "o", "--drop-isolates", "--estimators", "REG",
                              "--alphas", "0.5")) == 0
    _, rows = read_table(tmp_path / "o" / "estimates.csv")
    n_iso = int((g.degree == 0).sum())
    if n_iso:
        assert f"isolates_dropped={n_iso}" in rows[0]["diagnostics"]
    _, ids = read_table(tmp_path / "o" / "node_ids.csv")
    assert len(ids) == g.n_nodes - n_iso


def test_analyze_data_errors(tmp_path, capsys):
    nodes, edges, _, _ = _write_dataset(tmp_path, 9)
    assert main(_analyze_args(nodes, edges, tmp_path / "o", "--treatment", "X9")) == 3
    bad = tmp_path / "edges_bad.csv"
    bad.write_text("src,dst\nv0,zz\n")
    assert main(_analyze_args(nodes, bad, tmp_path / "o")) == 3
    assert main(_analyze_args(tmp_path / "missing.csv", edges, tmp_path / "o")) == 3
    assert main(["analyze", "--nodes", str(nodes)]) == 2
    assert main(_analyze_args(nodes, edges, tmp_path / "o", "--alphas", "1.5")) == 2


def test_analyze_numerical_error(tmp_path, capsys):
    # treatment perfectly separated by x: the bread matrix is singular
    rng = np.random.default_rng(0)
    x = rng.standard_normal(40)
    nodes = tmp_path / "n.csv"
    edges = tmp_path / "e.csv"
    with open(nodes, "w") as fh:
        fh.write("Z,Y,x\n")
        for i in range(40):
            fh.write(f"{int(x[i] > 0)},{rng.standard_normal()},{x[i]}\n")
    edges.write_text("".join(f"{i},{i + 1}\n" for i in range(0, 40, 2)))
    code = main(["analyze", "--nodes", str(nodes), "--edges", str(edges), "--treatment", "x",
                 "--outcome", "x", "--out", str(tmp_path / "o")])
    assert code == 4
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "numerical"


@pytest.mark.slow
def test_analyze_brackets_truth_at_nominal_rate(tmp_path):
    hits = 0
    n = 20
    for seed in range(n):
        nodes, edges, g, oracle = _write_dataset(tmp_path, 100 + seed, m=40)
        out = tmp_path / f"o{seed}"
        assert main(_analyze_args(nodes, edges, out, "--estimators", "DRBC", "--alphas", "0.6")) == 0
        _, rows = read_table(out / "estimates.csv")
        de = next(r for r in rows if r["estimand"] == "DE(0.6)")
        truth = compute_truth(oracle, g, (), [("DE", 0.6, None)]).value("DE", 0.6)
        hits += de["ci_lo"] <= truth <= de["ci_hi"]
    # 95% intervals; 20 seeds give at least 15 hits with probability above 0.999
    assert hits >= 15
