"""The eleven acceptance criteria at their stated tolerances.

Each test records a one-line verdict; the lines are printed together at the
end of the pytest run (see ``conftest.py``).  Run alone with
``pytest tests/test_acceptance.py -v``.
"""
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from tiltedwalk import cli
from tiltedwalk.bridge import make_bridge, sample_bridges
from tiltedwalk.chain import doob_transform, sample_stationary
from tiltedwalk.continuum import airy_ground_state, sl_solve
from tiltedwalk.harness import eigen_convergence
from tiltedwalk.model import make_kernel, make_potential, solve_scale
from tiltedwalk.spectral import compute_spectrum, dv_inner

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
LAZY = make_kernel({"kind": "lazy-nn", "a": 0.25})
LINEAR = make_potential("linear")
DETERMINISM: dict[str, bool] = {}


class Verdict:
    """Collect named conditions, record a single line, then assert."""

    def __init__(self, number, title):
        self.number, self.title = number, title
        self.items = []

    def expect(self, label, ok, detail=""):
        self.items.append((label, bool(ok), detail))

    def finish(self):
        ok = all(flag for _, flag, _ in self.items)
        failed = [f"{label} ({detail})" for label, flag, detail in self.items if not flag]
        summary = "; ".join(f"{label}={detail}" for label, _, detail in self.items if detail)
        status = "PASS" if ok else "FAIL"
        ACCEPTANCE_LINES[self.number] = f"criterion {self.number:2d} {status}  {self.title}: {summary}"
        assert ok, "failed: " + ", ".join(failed)


def run_config(path, root, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(root))
    code = cli.run_config(path)
    out = cli.load_config(path).output
    return code, json.loads((out / "manifest.json").read_text()), out


def check_value(manifest, name):
    return next(c for c in manifest["checks"] if c["name"] == name)


def test_criterion_01_airy_anchor():
    v = Verdict(1, "Airy anchor")
    t0 = time.perf_counter()
    s = sl_solve(2.0, lambda r: r, 30.0, 8000, 1)
    airy = airy_ground_state(2.0)
    diff = s.phi0 - airy.phi0(s.r)
    l2 = math.sqrt(s.inner(diff, diff))
    elapsed = time.perf_counter() - t0
    v.expect("e0", abs(s.eigenvalues[0] - 2.33811) < 1e-3, f"{s.eigenvalues[0]:.6f}")
    v.expect("L2(phi0)", l2 < 1e-3, f"{l2:.2e}")
    v.expect("runtime", elapsed < 10, f"{elapsed:.1f}s")
    v.finish()


def test_criterion_02_linear_scale_law():
    v = Verdict(2, "linear scale law")
    worst = max(abs(solve_scale(LINEAR, 10.0**-k).H / (10.0**-k) ** (-1 / 3) - 1)
                for k in range(2, 9))
    v.expect("max rel err", worst < 1e-9, f"{worst:.1e}")
    v.finish()


@pytest.fixture(scope="module")
def eigen_report():
    t0 = time.perf_counter()
    rep = eigen_convergence(LAZY, LINEAR, [1e-2, 1e-3, 1e-4, 1e-5], n_grid=8000)
    return rep, time.perf_counter() - t0


def test_criterion_03_eigenvalue_convergence(eigen_report):
    rep, elapsed = eigen_report
    v = Verdict(3, "eigenvalue convergence")
    _, rows = rep.tables["e_lambda"]
    errs = [r[4] for r in rows]
    rel = errs[-1] / rep.metrics["e0_continuum"]
    v.expect("decreasing", all(b < a for a, b in zip(errs, errs[1:])),
             "/".join(f"{e:.1e}" for e in errs))
    v.expect("rel err at 1e-5", rel < 0.05, f"{rel:.1e}")
    v.expect("runtime", elapsed < 120, f"{elapsed:.1f}s")
    v.finish()


def test_criterion_04_eigenfunction_convergence(eigen_report):
    rep, _ = eigen_report
    v = Verdict(4, "eigenfunction convergence")
    _, rows = rep.tables["phi_lambda"]
    dists = [r[2] for r in rows]
    ratio = rows[-1][3]
    v.expect("phi dist at 1e-5", dists[-1] < 0.05, f"{dists[-1]:.4f}")
    v.expect("decreasing", all(b < a for a, b in zip(dists, dists[1:])),
             "/".join(f"{d:.3f}" for d in dists))
    v.expect("c/h", abs(ratio - 1) < 0.05, f"{ratio:.6f}")
    v.finish()


def test_criterion_05_micro_oracle():
    import itertools
    v = Verdict(5, "bridge vs enumeration (N=4)")
    t0 = time.perf_counter()
    lam = 0.5
    ens = make_bridge(LAZY, LINEAR, lam, 1, 1, N=4)
    table = dict(zip(LAZY.support, LAZY.probs))
    exact = np.zeros((9, ens.M))
    total = 0.0
    for steps in itertools.product(LAZY.support, repeat=8):
        x = 1 + np.concatenate([[0], np.cumsum(steps)])
        if x[-1] != 1 or x.min() < 1:
            continue
        w = math.prod(table[s] for s in steps) * math.exp(-lam * x.sum())
        total += w
        exact[np.arange(9), x - 1] += w
    exact /= total
    err = abs(ens.log_Z - math.log(total))
    samples = sample_bridges(ens, 100_000, seed=2024)
    tv = max(0.5 * np.abs(np.bincount(samples[:, k] - 1, minlength=ens.M) / 1e5 - exact[k]).sum()
             for k in range(9))
    elapsed = time.perf_counter() - t0
    v.expect("log Z err", err < 1e-10, f"{err:.1e}")
    v.expect("max marginal TV", tv < 0.01, f"{tv:.4f}")
    v.expect("runtime", elapsed < 60, f"{elapsed:.1f}s")
    v.finish()


def test_criterion_06_chain_correctness():
    v = Verdict(6, "ground-state chain")
    chain = doob_transform(compute_spectrum(LAZY, LINEAR, 1e-3))
    pi, ps, mu = chain.pi.toarray(), chain.pi_star.toarray(), chain.mu
    stat = np.abs(mu @ pi - mu).sum()
    detailed = np.abs(mu[:, None] * pi - (mu[:, None] * ps).T).max()
    path = sample_stationary(chain, 5000.0, seed=6).values.astype(float)
    h, H = chain.scale.h, chain.scale.H
    zs = []
    for f in (lambda x: x * h, lambda x: (x <= H).astype(float)):
        vals = f(path)
        batches = vals[: len(vals) // 100 * 100].reshape(100, -1).mean(axis=1)
        se = batches.std(ddof=1) / 10
        zs.append(abs(vals.mean() - chain.stationary_mean(f)) / se)
    v.expect("|mu pi - mu|_1", stat < 1e-10, f"{stat:.1e}")
    v.expect("detailed relation", detailed < 1e-12, f"{detailed:.1e}")
    v.expect("ergodic z", max(zs) < 3, "/".join(f"{z:.2f}" for z in zs))
    v.finish()


def test_criterion_07_fdd_convergence(tmp_path, monkeypatch):
    v = Verdict(7, "FDD convergence")
    t0 = time.perf_counter()
    code, man, _ = run_config(CONFIGS / "fdd.ini", tmp_path, monkeypatch)
    elapsed = time.perf_counter() - t0
    m = man["metrics"]
    assert man["parameters"]["n_samples"] == 100_000
    v.expect("KS(chain, phi0^2) at 1e-5", m["chain_ks_t0_smallest"] < 0.02,
             f"{m['chain_ks_t0_smallest']:.4f}")
    v.expect("pair TV at 1e-5", m["chain_pair_tv_smallest"] < 0.08,
             f"{m['chain_pair_tv_smallest']:.4f}")
    v.expect("KS improves", m["chain_ks_improves"], str(m["chain_ks_improves"]))
    v.expect("TV improves", m["chain_tv_improves"], str(m["chain_tv_improves"]))
    v.expect("runtime", elapsed < 600, f"{elapsed:.0f}s")
    v.expect("exit", code == 0, str(code))
    v.finish()


def test_criterion_08_tv_window(tmp_path, monkeypatch):
    v = Verdict(8, "TV window decay")
    code, man, out = run_config(CONFIGS / "tv-window.ini", tmp_path, monkeypatch)
    p = man["parameters"]
    H2 = round(solve_scale(LINEAR, p["lambda"]).H ** 2)
    assert sorted(p["N_grid"]) == [4 * H2, 16 * H2] and p["T"] == 1 and p["C"] == 2
    rows = (out / "tv_window.csv").read_text().splitlines()[1:]
    tv11 = {int(r.split(",")[2]): float(r.split(",")[4]) for r in rows
            if r.startswith("1,1,")}
    v.expect("TV(16TH^2) < TV(4TH^2)", tv11[16 * H2] < tv11[4 * H2],
             f"{tv11[4 * H2]:.3g}->{tv11[16 * H2]:.3g}")
    uni = check_value(man, "uv_uniformity_tv")
    v.expect("u,v uniformity", uni["passed"], f"{uni['value']:.1e}")
    v.expect("exit", code == 0, str(code))
    v.finish()


def test_criterion_09_dv_sign_structure():
    v = Verdict(9, "Donsker-Varadhan sign structure")
    spec = compute_spectrum(LAZY, LINEAR, 1e-4)
    chain = doob_transform(spec)
    rng = np.random.default_rng(9)
    at_phi = abs(dv_inner(spec, spec.mu, spec.phi))
    worst = max(dv_inner(spec, spec.mu, spec.phi * np.exp(rng.uniform(-2, 2, spec.M)))
                for _ in range(100))
    P, Ps = chain.pi.tocoo(), chain.pi_star.tocoo()
    gaps = []
    for _ in range(20):
        g = rng.uniform(0.2, 3.0, spec.M)
        lhs = dv_inner(spec, g**2 * spec.mu, g * spec.phi)
        half = lambda Q: 0.5 * np.sum(chain.mu[Q.row] * Q.data * (g[Q.row] - g[Q.col]) ** 2)
        gaps.append(abs(lhs - 0.5 * (half(P) + half(Ps))))
    v.expect("at phi", at_phi < 1e-12, f"{at_phi:.1e}")
    v.expect("max over 100 u", worst <= 1e-12, f"{worst:.2e}")
    v.expect("quadratic identity", max(gaps) < 1e-10, f"{max(gaps):.1e}")
    v.finish()


def test_criterion_10_stay_positive_and_meeting(tmp_path, monkeypatch):
    v = Verdict(10, "stay-positive and meeting scaling")
    t0 = time.perf_counter()
    code1, stay, _ = run_config(CONFIGS / "stay-positive.ini", tmp_path, monkeypatch)
    code2, meet, _ = run_config(CONFIGS / "meeting.ini", tmp_path, monkeypatch)
    elapsed = time.perf_counter() - t0
    assert stay["parameters"]["n_grid"] == [400, 1600, 6400]
    assert meet["parameters"]["n_grid"] == [400, 1600, 6400]
    sm, mm = stay["metrics"], meet["metrics"]
    v.expect("stay-positive band", sm["ratio_band"] < 2, f"{sm['ratio_band']:.3f}")
    v.expect("E[N]/sqrt(n) band", mm["EN_band"] < 2, f"{mm['EN_band']:.3f}")
    v.expect("E[N^2]/n band", mm["EN2_band"] < 2, f"{mm['EN2_band']:.3f}")
    v.expect("meet >= PZ floor", mm["meet_minus_pz_min"] >= 0, f"{mm['meet_minus_pz_min']:.3f}")
    v.expect("runtime", elapsed < 900, f"{elapsed:.0f}s")
    v.expect("exit", code1 == code2 == 0, f"{code1},{code2}")
    v.finish()


@pytest.mark.parametrize("tag", ["tv-window", "meeting"])
def test_criterion_11_determinism(tmp_path, monkeypatch, tag):
    outs = []
    for k in range(2):
        code, _, out = run_config(CONFIGS / f"{tag}.ini", tmp_path / f"r{k}", monkeypatch)
        assert code == 0
        outs.append({p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))})
    DETERMINISM[tag] = bool(outs[0]) and outs[0] == outs[1]
    ok = all(DETERMINISM.values())
    status = "PASS" if ok else "FAIL"
    ACCEPTANCE_LINES[11] = (f"criterion 11 {status}  determinism: byte-identical CSVs for "
                            + ", ".join(DETERMINISM))
    assert DETERMINISM[tag]
