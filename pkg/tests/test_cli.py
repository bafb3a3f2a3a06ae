from pathlib import Path

import pytest

from daclab.cli import compare_traces, format_value, main, model_checksum
from daclab.config import parse_config

HEADER = ("iter,epoch,alpha,gamma,radius_sq,center_loss,mean_worker_loss,envelope_quad,"
          "envelope_residual,top_eig,diverged")

QUAD = """\
problem = quadratic
quadratic.dim = 8
quadratic.cond = 10
noise.sigma2 = 0.05
workers = 4
global_batch = 4
topology = one_peer_exp
epochs = 3
batches_per_epoch = 5
lr.peak = 0.05
"""


def write_cfg(tmp_path, text, name="exp.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def run_once(tmp_path, text, out, *extra):
    cfg = write_cfg(tmp_path, text)
    code = main(["run", cfg, "--output-dir", str(tmp_path / out), *extra])
    dirs = sorted(p for p in (tmp_path / out).iterdir())
    return code, dirs


def test_format_value():
    assert format_value(None) == ""
    assert format_value(True) == "1"
    assert format_value(0.1) == "0.10000000000000001"
    assert float(format_value(1 / 3)) == 1 / 3


def test_checksum_is_stable():
    assert model_checksum([1.0, 2.0]) == model_checksum([1.0, 2.0])
    assert model_checksum([1.0, 2.0]) != model_checksum([2.0, 1.0])


def test_run_writes_expected_files(tmp_path):
    code, dirs = run_once(tmp_path, QUAD + "repeat = 2\nmetrics.top_eig = true\nmetrics.modes = true\n", "out")
    assert code == 0 and len(dirs) == 1
    seeds = sorted(p.name for p in dirs[0].iterdir())
    assert seeds == ["seed-0", "seed-1"]
    s0 = dirs[0] / "seed-0"
    assert {p.name for p in s0.iterdir()} == {"resolved.cfg", "trace.csv", "modes.csv", "summary.txt"}
    lines = (s0 / "trace.csv").read_text().splitlines()
    assert lines[0] == HEADER and len(lines) == 16
    assert (s0 / "modes.csv").read_text().startswith("iter,basis,mode_index,eigenvalue,energy\n")
    summary = (s0 / "summary.txt").read_text()
    for key in ("final_center_loss", "final_radius_sq", "final_top_eig", "deployed_checksum"):
        assert key in summary
    resolved = parse_config((s0 / "resolved.cfg").read_text())
    assert resolved["seed"] == 0 and parse_config((dirs[0] / "seed-1" / "resolved.cfg").read_text())["seed"] == 1


def test_repeated_runs_are_byte_identical(tmp_path):
    _, dirs = run_once(tmp_path, QUAD + "repeat = 3\n", "a")
    _, again = run_once(tmp_path, QUAD + "repeat = 3\n", "b")
    for k in range(3):
        a = (dirs[0] / f"seed-{k}" / "trace.csv").read_bytes()
        b = (again[0] / f"seed-{k}" / "trace.csv").read_bytes()
        assert a == b


def test_runs_never_reuse_directories(tmp_path):
    cfg = write_cfg(tmp_path, QUAD)
    out = str(tmp_path / "runs")
    assert main(["run", cfg, "--output-dir", out]) == 0
    assert main(["run", cfg, "--output-dir", out]) == 0
    assert len(list(Path(out).iterdir())) == 2
    assert main(["run", cfg, "--output-dir", out, "--overwrite"]) == 0
    assert main(["run", cfg, "--output-dir", out, "--overwrite"]) == 0
    assert len(list(Path(out).iterdir())) == 3


def test_thread_count_does_not_change_trace(tmp_path, monkeypatch):
    _, a = run_once(tmp_path, QUAD, "t1", "--threads", "1")
    monkeypatch.setenv("DACLAB_THREADS", "4")
    _, b = run_once(tmp_path, QUAD, "t4")
    assert (a[0] / "seed-0" / "trace.csv").read_bytes() == (b[0] / "seed-0" / "trace.csv").read_bytes()


def test_single_row_cadence(tmp_path):
    _, dirs = run_once(tmp_path, QUAD + "metrics.every = 15\n", "out")
    lines = (dirs[0] / "seed-0" / "trace.csv").read_text().splitlines()
    assert len(lines) == 2 and lines[1].startswith("15,")


def test_p_zero_matches_dsgd_trace(tmp_path):
    _, a = run_once(tmp_path, QUAD + "algorithm = dsgd_ac\nac.p = 0\n", "ac")
    _, b = run_once(tmp_path, QUAD + "algorithm = dsgd\n", "dsgd")
    assert (a[0] / "seed-0" / "trace.csv").read_bytes() == (b[0] / "seed-0" / "trace.csv").read_bytes()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_code_keeps_outputs(tmp_path):
    text = QUAD.replace("lr.peak = 0.05", "lr.peak = 5").replace("epochs = 3", "epochs = 100")
    code, dirs = run_once(tmp_path, text + "lr.kind = constant\n", "out")
    assert code == 2
    seed_dir = dirs[0] / "seed-0"
    assert (seed_dir / "trace.csv").exists()
    assert "diverged = 1" in (seed_dir / "summary.txt").read_text()


def test_bad_config_exits_two(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "ac.p = -1\n")
    assert main(["run", cfg, "--output-dir", str(tmp_path)]) == 2
    assert "ac.p" in capsys.readouterr().err


# compare


def test_compare_identical(tmp_path, capsys):
    _, dirs = run_once(tmp_path, QUAD, "out")
    trace = str(dirs[0] / "seed-0" / "trace.csv")
    report = compare_traces(trace, trace)
    assert report.identical and all(v == 0 for v in report.max_abs_diff.values())
    assert main(["compare", trace, trace]) == 0
    assert "first_differing_iter none" in capsys.readouterr().out


def test_compare_reports_first_difference(tmp_path, capsys):
    _, dirs = run_once(tmp_path, QUAD, "out")
    trace = dirs[0] / "seed-0" / "trace.csv"
    lines = trace.read_text().splitlines()
    fields = lines[7].split(",")
    fields[5] = repr(float(fields[5]) + 0.5)
    lines[7] = ",".join(fields)
    other = tmp_path / "other.csv"
    other.write_text("\n".join(lines) + "\n")
    report = compare_traces(trace, other)
    assert report.first_differing_row == 6 and report.first_differing_iter == fields[0]
    assert report.max_abs_diff["center_loss"] == pytest.approx(0.5)
    assert report.max_abs_diff["radius_sq"] == 0.0
    assert main(["compare", str(trace), str(other)]) == 1
    assert f"first_differing_iter {fields[0]}" in capsys.readouterr().out


def test_compare_schema_mismatch(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    a.write_text(HEADER + "\n1,0,0.1,1,0,1,1,0,0,,0\n")
    b.write_text("iter,epoch\n1,0\n")
    assert main(["compare", str(a), str(b)]) == 2


def test_compare_dsgd_and_sync_on_complete_graph(tmp_path):
    base = QUAD.replace("one_peer_exp", "complete") + "momentum = 0.9\n"
    _, a = run_once(tmp_path, base + "algorithm = dsgd\n", "dsgd")
    _, b = run_once(tmp_path, base + "algorithm = sync_sgd\n", "sync")
    report = compare_traces(a[0] / "seed-0" / "trace.csv", b[0] / "seed-0" / "trace.csv")
    assert report.max_abs_diff["center_loss"] <= 1e-10


# verify and spectrum


def test_verify_exit_codes(tmp_path, capsys):
    passing = write_cfg(tmp_path, "workers = 4\nglobal_batch = 4\ntopology = complete\nverify.gammas = 0,1\n"
                                  "verify.lams = 2\nverify.steps = 1000\n", "pass.cfg")
    assert main(["verify", "stability", passing, "--output-dir", str(tmp_path / "v")]) == 0
    assert capsys.readouterr().out.startswith("PASS stability")
    assert list((tmp_path / "v").glob("verify-stability-*/report.csv"))
    # a zero-length run has no snapshots, so the envelope check cannot pass
    failing = write_cfg(tmp_path, "workers = 4\nglobal_batch = 4\ntopology = complete\nquadratic.dim = 4\n"
                                  "noise.sigma2 = 0.1\nlr.peak = 0.01\nepochs = 0\n", "fail.cfg")
    assert main(["verify", "envelope", failing, "--output-dir", str(tmp_path / "v")]) == 1
    assert capsys.readouterr().out.startswith("FAIL envelope")


def test_verify_mlp_rejected_for_quadratic_harness(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "problem = synthetic_mlp\nworkers = 4\nglobal_batch = 8\n")
    assert main(["verify", "tilt", cfg, "--output-dir", str(tmp_path)]) == 2
    assert "quadratic" in capsys.readouterr().err


def test_spectrum(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "workers = 4\nglobal_batch = 4\ntopology = complete\nquadratic.dim = 3\n"
                              "quadratic.cond = 4\n")
    assert main(["spectrum", cfg]) == 0
    out = capsys.readouterr().out.splitlines()
    assert [float(x) for x in out[0].split(": ")[1].split()] == pytest.approx([0, 1, 1, 1])
    assert [float(x) for x in out[2].split(": ")[1].split()] == pytest.approx([1, 2, 4])
