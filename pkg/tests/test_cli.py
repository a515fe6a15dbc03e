import inspect
import json
from pathlib import Path

import pytest

from tiltedwalk import cli, harness

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

EIGEN = """
[experiment]
tag = eigen-convergence
seed = 1
output = eig

[kernel]
kind = lazy-nn
a = 0.25

[potential]
kind = linear

[parameters]
lambdas = 1e-2, 1e-3
n_grid = 4000

[tolerances]
phi_dist = 0.1
"""

STAY = """
[experiment]
tag = stay-positive
seed = 0
output = stay

[kernel]
kind = lazy-nn

[parameters]
n_grid = 100, 400
x = 1
y = 1
eta = 2
"""


@pytest.fixture
def out_root(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path / "out"))
    return tmp_path / "out"


def write(tmp_path, text, name="run.ini"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_catalogue_covers_every_experiment_operation():
    ops = {name for name, fn in inspect.getmembers(harness, inspect.isfunction)
           if fn.__module__ == harness.__name__ and not name.startswith("_")
           and inspect.signature(fn).return_annotation in ("ExperimentReport",
                                                            harness.ExperimentReport)}
    reached = [e.harness_op for e in cli.CATALOGUE.values()]
    assert sorted(reached) == sorted(ops)
    assert len(set(reached)) == len(reached)


def test_every_shipped_config_parses():
    tags = set()
    for path in sorted(CONFIGS.glob("*.ini")):
        tags.add(cli.load_config(path).tag)
    assert tags == set(cli.CATALOGUE)


def test_list_and_run_list(capsys):
    assert cli.main(["list"]) == 0
    listed = capsys.readouterr().out
    assert cli.main(["run", "--list"]) == 0
    assert capsys.readouterr().out == listed
    assert all(tag in listed for tag in cli.CATALOGUE)


def test_describe_known_and_unknown(capsys):
    assert cli.main(["describe", "tv-window"]) == 0
    text = capsys.readouterr().out
    assert "tv_window" in text and "uniformity" in text
    assert cli.main(["describe", "bogus"]) == cli.EXIT_CONFIG
    err = capsys.readouterr().err
    assert all(tag in err for tag in cli.CATALOGUE)


def test_run_writes_tables_and_manifest(tmp_path, out_root, capsys):
    assert cli.main(["run", str(write(tmp_path, EIGEN))]) == cli.EXIT_OK
    out = out_root / "eig"
    header = (out / "e_lambda.csv").read_text().splitlines()[0]
    assert header == "lambda,H,E,e,err_vs_continuum"
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["experiment"] == "eigen-convergence" and manifest["passed"]
    assert set(manifest["metrics"]) == set(cli.CATALOGUE["eigen-convergence"].metrics)
    assert "PASS" in capsys.readouterr().out


def test_rerun_is_byte_identical(tmp_path, monkeypatch):
    cfg = write(tmp_path, STAY)
    blobs = []
    for k in range(2):
        monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path / f"run{k}"))
        assert cli.main(["run", str(cfg)]) == 0
        d = tmp_path / f"run{k}" / "stay"
        blobs.append({p.name: p.read_bytes() for p in sorted(d.iterdir())})
    assert blobs[0] == blobs[1]


def test_tolerance_failure_exit_code(tmp_path, out_root):
    cfg = write(tmp_path, EIGEN + "rel_err = 1e-12\n")
    assert cli.main(["run", str(cfg)]) == cli.EXIT_FAIL
    manifest = json.loads((out_root / "eig" / "manifest.json").read_text())
    assert not manifest["passed"]


@pytest.mark.parametrize("edit,needle", [
    (lambda t: t.replace("seed = 1\n", ""), "seed is required"),
    (lambda t: t.replace("eigen-convergence", "eigen-convergance"), "did you mean"),
    (lambda t: t.replace("n_grid = 4000", "n_grid = 4000\nsamples = 3"), "unknown field"),
    (lambda t: t.replace("lambdas = 1e-2, 1e-3", "lambdas = 1e-2, -1"), "positive"),
    (lambda t: t.replace("lambdas = 1e-2, 1e-3\n", ""), "lambdas is required"),
    (lambda t: t.replace("kind = linear", "kind = cubic"), "[potential]"),
    (lambda t: t.replace("kind = lazy-nn", "kind = hop"), "[kernel]"),
    (lambda t: t + "wobble = 1\n", "unknown tolerance"),
    (lambda t: t.replace("seed = 1", "seed = one"), "seed"),
])
def test_config_errors(tmp_path, out_root, capsys, edit, needle):
    assert cli.main(["run", str(write(tmp_path, edit(EIGEN)))]) == cli.EXIT_CONFIG
    assert needle in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    assert cli.main(["run", str(tmp_path / "nope.ini")]) == cli.EXIT_CONFIG


def test_harness_precondition_is_a_config_error(tmp_path, out_root, capsys):
    text = STAY.replace("x = 1", "x = 500")
    assert cli.main(["run", str(write(tmp_path, text))]) == cli.EXIT_CONFIG


def test_crash_exit_code(tmp_path, out_root, monkeypatch):
    def boom(*args, **kwargs):
        raise RuntimeError("boom")
    monkeypatch.setattr(cli.CATALOGUE["stay-positive"], "runner", boom)
    assert cli.main(["run", str(write(tmp_path, STAY))]) == cli.EXIT_CRASH


def test_dump_paths_for_eta_good(tmp_path, out_root):
    text = (CONFIGS / "eta-good.ini").read_text()
    text = text.replace("dump_paths = false", "dump_paths = true").replace("replicas = 5",
                                                                          "replicas = 1")
    text = text.replace("lambda = 1e-4", "lambda = 1e-3")
    assert cli.main(["run", str(write(tmp_path, text))]) == 0
    files = sorted((out_root / "eta-good" / "paths").iterdir())
    assert len(files) == 2
    assert files[0].read_text().startswith("# tiltedwalk-path v1")


def test_module_entry_point():
    import subprocess
    import sys
    res = subprocess.run([sys.executable, "-m", "tiltedwalk", "list"], capture_output=True,
                         text=True, check=True)
    assert "fdd" in res.stdout


def test_declared_metrics_follow_sources():
    entry = cli.CATALOGUE["fdd"]
    names = cli.declared_metrics(entry, {"sources": ("chain",)})
    assert "chain_ks_t0_smallest" in names and not any(n.startswith("bridge") for n in names)


def test_report_writer_formats_floats(tmp_path):
    rep = harness.ExperimentReport("t", {"x": 1})
    rep.add_metric("m", float("inf"))
    rep.tables["tab"] = (["a", "b"], [[0.1, True], [float("nan"), 3]])
    cfg = cli.RunConfig(tag="t", seed=0, output=tmp_path / "o", kernel=None, potential=None,
                        parameters={}, tolerances={}, source_text="")
    cli.write_report(rep, cfg)
    assert (tmp_path / "o" / "tab.csv").read_text() == "a,b\n0.1,true\nnan,3\n"
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["metrics"]["m"] == "inf"
    assert not list((tmp_path / "o").glob("*.tmp"))
