"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
Criteria 3 and 5-8 share one set of desk-scale trainings (see ``runs``).
"""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from helpers import numeric_grad
from seunet import autodiff as ad
from seunet.equivariance import argmin_pair, blob_images, pair_error_matrix
from seunet.filter_bank import ScaleFilterBank
from seunet.harness import checkpoint
from seunet.harness.config import ExperimentConfig, packaged_config
from seunet.harness.data import dataset_for
from seunet.harness.evaluate import evaluate_multiscale, model_equivariance
from seunet.harness.train import train
from seunet.inference import fuse_pdist, fuse_pens
from seunet.scale_space import filter_size
from seunet.unet import SEUNet, eta_tilde

pytestmark = pytest.mark.slow

SEEDS = (0, 1, 2)
ROBUST_SCALES = [0.5, 2 ** -0.5, 1.0, 2 ** 0.5, 2.0]


def record(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    assert ok, f"criterion {n}: {detail}"


class Runs:
    """Lazily trained desk-scale models, keyed by (model, sigma_mode, seed)."""

    def __init__(self):
        self.base = packaged_config("desk")
        self.train_set, self.test_set = dataset_for(self.base)
        self.results, self.tables, self.seconds = {}, {}, {}

    def config(self, model, mode, seed) -> ExperimentConfig:
        if model == "baseline":
            return self.base.replace(model="baseline", seed=seed, sigma_bounds=[])
        return self.base.replace(sigma_mode=mode, seed=seed)

    def get(self, model, mode, seed):
        key = (model, mode, seed)
        if key not in self.results:
            t = time.perf_counter()
            self.results[key] = train(self.config(model, mode, seed), self.train_set, log_fn=lambda m: None)
            self.seconds[key] = time.perf_counter() - t
        return self.results[key]

    def table(self, model, mode, seed):
        key = (model, mode, seed)
        if key not in self.tables:
            res = self.get(model, mode, seed)
            t = time.perf_counter()
            self.tables[key] = evaluate_multiscale(res.model, self.test_set, ROBUST_SCALES, self.base.classes)
            self.seconds[key] += time.perf_counter() - t
        return self.tables[key]


@pytest.fixture(scope="session")
def runs():
    return Runs()


def test_c01_size_formula():
    t = time.perf_counter()
    rng = np.random.default_rng(0)
    sig = rng.uniform(0.3, 12.0, 1000)
    exact = all(filter_size(s) == 2 * math.ceil(2 * s) + 1 for s in sig)
    named = filter_size(4.5) == 19 and filter_size(9.99) == 41
    dt = time.perf_counter() - t
    record(1, exact and named and dt < 1.0, f"1000 random sigmas agree={exact}, 4.5->19 and 9.99->41 {named}, {dt:.3f}s")


def test_c02_gradient_audit():
    t = time.perf_counter()
    rng = np.random.default_rng(0)
    m = SEUNet(1, 3, [4, 8, 16], depth=2, gamma=2, seed=0)
    m.head_weight.data = rng.standard_normal(m.head_weight.shape)
    m.head_bias.data = rng.standard_normal(m.head_bias.shape)
    m.eta_raw.data = rng.standard_normal(m.eta_raw.shape)
    for bank in m.banks:
        for s in bank.sigmas:
            s.raw.data = np.asarray(rng.uniform(-1.0, 1.0))
    x = rng.random((1, 1, 16, 16))
    y = rng.integers(0, 3, (1, 16, 16))
    sizes = [[f.shape[-1] for f in b.realize_filters()] for b in m.banks]
    m.zero_grad()
    with ad.Graph() as g:
        g.backward(m.combined_loss(m.forward(x), y))

    def loss():
        return float(m.combined_loss(m.forward(x), y).data)

    # ReLU and max-pool switch inside a 1e-4 step for a few entries, which
    # corrupts that difference quotient; 1e-6 stays clear of the kinks
    worst, n_checked, failures, kinked = 0.0, 0, [], 0
    for name, p in m.parameters().items():
        fd = numeric_grad(loss, p.data, 1e-6)
        an = np.asarray(p.grad)
        err = np.abs(an - fd) / np.maximum(np.abs(fd), 1e-12)
        n_checked += an.size
        worst = max(worst, float(np.max(np.where(np.abs(fd) > 1e-6, err, 0.0))))
        if not np.isclose(an, fd, rtol=1e-3, atol=1e-9).all():
            failures.append(name)
        kinked += int(np.sum(~np.isclose(an, numeric_grad(loss, p.data, 1e-4), rtol=1e-3, atol=1e-9)))
    assert sizes == [[f.shape[-1] for f in b.realize_filters()] for b in m.banks]
    dt = time.perf_counter() - t
    record(2, not failures and dt < 300,
           f"{n_checked} scalars, worst relative error {worst:.2e} where |grad| > 1e-6 (step 1e-6), failing {failures[:4]}; "
           f"{kinked} entries differ at step 1e-4, {dt:.0f}s")


def test_c03_confinement(runs):
    res = runs.get("seunet", "constrained", 0)
    bounds = res.config.sigma_bounds
    inside = all(lo < s < hi for e in res.history for layer, bl in zip(e["sigmas"], bounds)
                 for s, (lo, hi) in zip(layer, bl))
    gamma = res.config.gamma
    rng = np.random.default_rng(0)
    raw = rng.standard_normal((10 ** 5, gamma)) * 10.0 ** rng.uniform(-2, 3, (10 ** 5, 1))
    raw[:gamma] = 1e4 * np.eye(gamma)  # one head dominant
    raw[gamma:2 * gamma] = -1e4 * np.eye(gamma)  # one head suppressed
    eta = np.array([eta_tilde(r) for r in raw])
    lo, hi = 1 / (2 * gamma), (gamma + 1) / (2 * gamma)
    in_range = bool(np.all(eta >= lo) and np.all(eta <= hi))
    hits = abs(eta.min() - lo) < 1e-6 and abs(eta.max() - hi) < 1e-6
    record(3, inside and in_range and hits and len(res.history) == 30,
           f"sigmas inside over {len(res.history)} epochs={inside}; eta~ range [{eta.min():.7f}, {eta.max():.7f}] "
           f"vs [{lo}, {hi}]")


def test_c04_pair_matrix():
    t = time.perf_counter()
    sig = [0.5, 1.0, 1.5, 2.0, 2.5]
    bank = ScaleFilterBank(1, 1, [(s - 0.1, s + 0.1) for s in sig], order=1, first_layer=True,
                           rng=np.random.default_rng(0), normalization="scale")
    filters = bank.realize_filters()
    images = blob_images(10, 32, seed=0)
    ok, found = True, {}
    for s in (2, 4):
        m = pair_error_matrix(filters, images, s)
        k, kp = argmin_pair(m)
        found[s] = (sig[k], sig[kp])
        ok &= sig[kp] / sig[k] == s
        for row, sk in enumerate(sig):
            if s * sk in sig:
                ok &= sig[int(np.argmin(m[row]))] == s * sk
    ok &= found[4] == (0.5, 2.0)
    dt = time.perf_counter() - t
    record(4, ok and dt < 120, f"argmin pairs {found}, representable rows matched={ok}, {dt:.1f}s")


def test_c05_equivariance_advantage(runs):
    t = time.perf_counter()
    images = [s.image for s in runs.test_set[:10]]
    scales = runs.base.test_scales
    se = model_equivariance(runs.get("seunet", "constrained", 0).model, images, scales).mean_error
    cnn = model_equivariance(runs.get("baseline", None, 0).model, images, scales).mean_error
    dt = time.perf_counter() - t + runs.seconds[("seunet", "constrained", 0)] + runs.seconds[("baseline", None, 0)]
    record(5, se < cnn and dt < 1800, f"mean delta over {len(scales)} scales: SEUNet {se:.4f} vs CNN {cnn:.4f}, "
                                      f"{dt / 60:.1f} min")


def test_c06_multiscale_robustness(runs):
    se = [runs.table("seunet", "constrained", s).mean("p_ens") for s in SEEDS]
    cnn = [runs.table("baseline", None, s).mean("head:1") for s in SEEDS]
    gap = 100 * (np.mean(se) - np.mean(cnn))
    dt = sum(runs.seconds[k] for k in [("seunet", "constrained", s) for s in SEEDS] + [("baseline", None, s)
                                                                                      for s in SEEDS])
    record(6, gap >= 3.0 and dt < 2700,
           f"mean mIoU over 5 scales, SEUNet P_Ens {np.round(se, 4).tolist()} vs CNN {np.round(cnn, 4).tolist()}: "
           f"gap {gap:+.2f} points (need >= 3), {dt / 60:.1f} min")


def test_c07_head_shift(runs):
    pairs = []
    for s in SEEDS:
        tab = runs.table("seunet", "constrained", s)
        pairs.append((tab.best_head(0.5), tab.best_head(2.0)))
    wins = sum(b > a for a, b in pairs)
    record(7, wins >= 2, f"best head (scale 0.5, scale 2) per seed {pairs}, {wins}/3 shift upwards")


def test_c08_ablation(runs):
    means = {mode: [runs.table("seunet", mode, s).mean("p_ens") for s in SEEDS]
             for mode in ("constrained", "fixed", "free")}
    ordered = [means["constrained"][i] >= means["fixed"][i] >= means["free"][i] for i in range(len(SEEDS))]
    detail = ", ".join(f"{k} {np.round(v, 4).tolist()}" for k, v in means.items())
    record(8, sum(ordered) >= 2, f"P_Ens mean mIoU {detail}; ordering holds on {sum(ordered)}/3 seeds")


def _reference_algorithm(vectors, strategy):
    """Plain-Python reference for one pixel, written loop by loop and
    independent of the vectorised fusion code: ``vectors`` is a list of
    gamma class-probability lists."""
    vectors = [list(v) for v in vectors]
    D = []
    for y in vectors:
        p_max = max(y)
        p_max_idx = y.index(p_max)
        y[p_max_idx] = -1.0
        p_second_max = max(y)
        D.append(p_max - p_second_max)
        y[p_max_idx] = p_max
    if strategy == "p_dist":
        k = D.index(max(D))
        return vectors[k].index(max(vectors[k]))
    e = np.exp(np.array(D))
    w = e / e.sum()
    acc = w[0] * np.array(vectors[0])
    for k in range(1, len(vectors)):
        acc = acc + w[k] * np.array(vectors[k])
    return int(np.argmax(acc))


def test_c09_algorithm_oracle():
    t = time.perf_counter()
    rng = np.random.default_rng(0)
    mismatches, total = 0, 0
    for gamma in (2, 5):
        for c in (2, 5):
            z = rng.gamma(1.0, size=(gamma, c, 50, 50))
            maps = z / z.sum(axis=1, keepdims=True)
            got = {"p_dist": fuse_pdist(maps), "p_ens": fuse_pens(maps)}
            for i in range(50):
                for j in range(50):
                    vecs = maps[:, :, i, j].tolist()
                    for st in ("p_dist", "p_ens"):
                        mismatches += got[st][i, j] != _reference_algorithm(vecs, st)
                    total += 1
    dt = time.perf_counter() - t
    record(9, mismatches == 0 and total == 10 ** 4 and dt < 10,
           f"{total} tuples x 2 strategies, {mismatches} label mismatches, {dt:.1f}s")


def test_c10_checkpoint_and_determinism(runs, tmp_path):
    res = runs.get("seunet", "constrained", 0)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    checkpoint.save(p1, res.model, res.config)
    model, cfg, _ = checkpoint.load(p1)
    checkpoint.save(p2, model, cfg)
    identical = p1.read_bytes() == p2.read_bytes()

    small = runs.base.replace(channels=[10, 20, 40], epochs=2, n_train=16, n_test=6)
    tables = []
    for _ in range(2):
        train_set, test_set = dataset_for(small)
        r = train(small, train_set, log_fn=lambda m: None)
        tables.append(evaluate_multiscale(r.model, test_set, ROBUST_SCALES, small.classes).to_dict())
    same = tables[0] == tables[1]
    record(10, identical and same, f"save/load/save byte-identical={identical}, repeated metrics identical={same}")
