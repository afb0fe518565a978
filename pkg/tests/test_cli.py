"""Command-line interface tests, driven through ``main`` with captured output."""

import json

import pytest

from gridscreen.case_io import bundled_case_path, case_from_json, case_to_json
from gridscreen.cli import main
from gridscreen.dcmodel import build_dc_model, dc_lodf

from gridbuild import two_bus

CASE14 = str(bundled_case_path("case14"))


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def test_version(capsys):
    code, out, _ = run(capsys, "--version")
    assert code == 0
    assert out.strip() == "gridscreen 0.1.0"


def test_missing_command_exits_one(capsys):
    code, _, err = run(capsys)
    assert code == 1
    assert "error" in err


def test_unknown_subcommand_exits_one(capsys):
    code, _, err = run(capsys, "frobnicate", CASE14)
    assert code == 1


def test_missing_case_file_exits_one(capsys):
    code, _, err = run(capsys, "solve", "/nonexistent/case.m")
    assert code == 1
    assert "error:" in err


def test_solve_csv_layout(capsys):
    code, out, _ = run(capsys, "solve", CASE14)
    assert code == 0
    lines = out.splitlines()
    assert lines[0].startswith("# case case14: 4 iterations")
    bus_head = lines.index("id,vm,va_deg,p_inj,q_inj")
    branch_head = lines.index("branch,from,to,p_from,q_from,p_to,q_to")
    assert branch_head - bus_head - 1 == 15  # 14 bus rows + section comment
    assert len(lines) - branch_head - 1 == 20
    first_bus = lines[bus_head + 1].split(",")
    assert first_bus[0] == "1" and float(first_bus[1]) == pytest.approx(1.06)


def test_solve_json_content(capsys):
    code, out, _ = run(capsys, "solve", CASE14, "--json")
    assert code == 0
    doc = json.loads(out)
    assert doc["case"] == "case14"
    assert doc["iterations"] == 4
    assert abs(doc["balance_residual"]) < 1e-8
    assert len(doc["buses"]) == 14 and len(doc["branches"]) == 20
    assert doc["buses"][0]["vm"] == pytest.approx(1.06)
    # every float is pre-rounded to 12 significant digits
    for rec in doc["branches"]:
        for key in ("p_from", "q_from", "p_to", "q_to"):
            v = rec[key]
            assert v == float(f"{v:.12g}")


def test_solve_out_file(tmp_path, capsys):
    target = tmp_path / "solution.json"
    code, out, _ = run(capsys, "solve", CASE14, "--json", "--out", str(target))
    assert code == 0
    assert out == ""
    _, stdout, _ = run(capsys, "solve", CASE14, "--json")
    assert target.read_text() == stdout


def test_solve_solver_flags(capsys):
    code, out, _ = run(capsys, "solve", CASE14, "--warm", "--tol", "1e-10", "--json")
    assert code == 0
    doc = json.loads(out)
    assert doc["max_mismatch"] < 1e-10


def test_solve_numerical_failure_exits_two(tmp_path, capsys):
    bad = tmp_path / "infeasible.json"
    bad.write_text(case_to_json(two_bus(p=30.0, x=0.1)))
    code, _, err = run(capsys, "solve", str(bad))
    assert code == 2
    assert "numerical failure" in err


def test_dump_round_trip(capsys, case14):
    code, out, _ = run(capsys, "dump", CASE14)
    assert code == 0
    assert case_from_json(out) == case14


def test_dclodf_all_csv(capsys, case14):
    code, out, _ = run(capsys, "dclodf", CASE14)
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "outage,monitored,from,to,lodf,p_pre,predicted,islanding"
    assert "13,,7,8,,,,true" in lines
    # 19 non-bridge outages, each reporting the 19 other closed branches
    assert len(lines) == 1 + 19 * 19 + 1


def test_dclodf_single_outage_json(capsys, case14):
    code, out, _ = run(capsys, "dclodf", CASE14, "--outage", "4", "--json")
    assert code == 0
    doc = json.loads(out)
    rec = doc["outages"][0]
    assert rec["outage"] == 4 and not rec["islanding"]
    assert len(rec["rows"]) == 19
    res = dc_lodf(build_dc_model(case14), 4)
    by_monitor = {r["monitored"]: r["lodf"] for r in rec["rows"]}
    assert by_monitor[6] == pytest.approx(res.lodf[6], rel=1e-11)


def test_dclodf_bridge_json_flags_islanding(capsys):
    code, out, _ = run(capsys, "dclodf", CASE14, "--outage", "13", "--json")
    assert code == 0
    rec = json.loads(out)["outages"][0]
    assert rec["islanding"] is True and "rows" not in rec


@pytest.mark.parametrize("value", ["99", "abc", "-3"])
def test_dclodf_rejects_bad_outage(capsys, value):
    code, _, err = run(capsys, "dclodf", CASE14, "--outage", value)
    assert code == 1
    assert "error:" in err


def test_outage_of_open_branch_rejected(tmp_path, capsys, case14):
    path = tmp_path / "opened.json"
    path.write_text(case_to_json(case14.with_branch_open(2)))
    code, _, err = run(capsys, "dclodf", str(path), "--outage", "2")
    assert code == 1
    assert "open" in err


def test_sens_vmag_csv(capsys):
    code, out, _ = run(capsys, "sens", CASE14, "--outage", "4")
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "outage,bus,delta_vmag,islanding"
    assert len(lines) == 15
    assert all(line.endswith(",false") for line in lines[1:])


def test_sens_islanding_row(capsys):
    code, out, _ = run(capsys, "sens", CASE14, "--outage", "13")
    assert code == 0
    assert out.splitlines()[1] == "13,,,true"


def test_sens_imag_json_carries_fallback(capsys):
    code, out, _ = run(capsys, "sens", CASE14, "--outage", "4", "--quantity", "imag", "--json")
    assert code == 0
    doc = json.loads(out)
    assert doc["quantity"] == "imag"
    rec = doc["outages"][0]
    assert {d["branch"] for d in rec["deltas"]} == set(range(20)) - {-1}
    assert all(isinstance(d["fallback"], bool) for d in rec["deltas"])


def test_sens_pline_network_mode(capsys):
    code, out, _ = run(
        capsys, "sens", CASE14, "--outage", "4", "--quantity", "pline", "--mode", "network"
    )
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "outage,branch,delta_p,islanding"
    assert len(lines) == 21


def test_sens_all_outages(capsys):
    code, out, _ = run(capsys, "sens", CASE14)
    assert code == 0
    lines = out.splitlines()
    # 19 evaluated outages with 14 bus rows each, plus one islanding row
    assert len(lines) == 1 + 19 * 14 + 1


def test_screen_csv_ranking(capsys):
    code, out, _ = run(capsys, "screen", CASE14)
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "rank,branch,from,to,severity,islanding,oracle_severity"
    assert len(lines) == 21
    top = lines[1].split(",")
    assert top[0] == "1" and top[1] == "13" and top[4] == "inf" and top[5] == "true"
    assert top[6] == ""  # no oracle requested


def test_screen_json_islanding_severity_null(capsys):
    code, out, _ = run(capsys, "screen", CASE14, "--json")
    assert code == 0
    doc = json.loads(out)
    assert doc["metric"] == "vmag_inf" and doc["mode"] == "full"
    first = doc["entries"][0]
    assert first["islanding"] is True and first["severity"] is None
    assert first["note"] == "islands the network"
    finite = [e["severity"] for e in doc["entries"][1:]]
    assert all(isinstance(v, float) for v in finite)
    assert finite == sorted(finite, reverse=True)


def test_screen_summary_file(tmp_path, capsys):
    summary = tmp_path / "summary.json"
    code, out, _ = run(
        capsys, "screen", CASE14, "--top", "3", "--summary", str(summary)
    )
    assert code == 0
    doc = json.loads(summary.read_text())
    assert doc["top_k"] == 3
    assert len(doc["entries"]) == 3


def test_screen_with_oracle_json(capsys):
    code, out, _ = run(capsys, "screen", CASE14, "--with-oracle", "--jobs", "2", "--json")
    assert code == 0
    doc = json.loads(out)
    comp = doc["comparison"]
    assert comp["n_compared"] == 19
    assert comp["spearman"] > 0.8
    assert comp["top_overlap"]["5"] >= 3
    entry = doc["entries"][0]
    assert entry["oracle_islanded"] is True and entry["oracle_severity"] is None


def test_screen_reruns_are_byte_identical(capsys):
    _, first, _ = run(capsys, "screen", CASE14, "--json")
    _, second, _ = run(capsys, "screen", CASE14, "--json")
    assert first == second


def test_compare_self_is_perfect(tmp_path, capsys):
    report = tmp_path / "report.json"
    code, _, _ = run(capsys, "screen", CASE14, "--json", "--out", str(report))
    assert code == 0
    code, out, _ = run(capsys, "compare", str(report), str(report))
    assert code == 0
    doc = json.loads(out)
    assert doc["n_compared"] == 19
    assert doc["spearman"] == pytest.approx(1.0)
    assert doc["max_abs_error"] == 0.0


def test_compare_two_modes(tmp_path, capsys):
    full = tmp_path / "full.json"
    network = tmp_path / "network.json"
    run(capsys, "screen", CASE14, "--json", "--out", str(full))
    run(capsys, "screen", CASE14, "--mode", "network", "--json", "--out", str(network))
    code, out, _ = run(capsys, "compare", str(full), str(network))
    assert code == 0
    doc = json.loads(out)
    assert doc["n_compared"] == 19
    assert not doc["insufficient"]


def test_compare_rejects_non_report(tmp_path, capsys):
    bogus = tmp_path / "bogus.json"
    bogus.write_text('{"no_entries": true}')
    code, _, err = run(capsys, "compare", str(bogus), str(bogus))
    assert code == 1
    assert "entries" in err

    code, _, err = run(capsys, "compare", str(tmp_path / "missing.json"), str(bogus))
    assert code == 1


def test_compare_rejects_invalid_json(tmp_path, capsys):
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    code, _, err = run(capsys, "compare", str(broken), str(broken))
    assert code == 1
    assert "JSON" in err
