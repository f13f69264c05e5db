"""End-to-end acceptance checks, one PASS/FAIL line per criterion.

The training-based criteria share session fixtures, so every model is
trained once.  The whole module takes a few hours on one core.  A check
that fails for a reason that can be proven from the measured numbers (an
AUC above 1, a path longer than the feature count allows) is reported as
FAIL and then marked xfail with that proof; any other failure stays red.
"""

import time
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from scipy.stats import pearsonr, spearmanr

from treereg import autodiff as ad
from treereg.data import SequenceDataset, export_csv, ingest_csv
from treereg.models import GRU, GRUHMM, HMM, MLP, data_loss
from treereg.params import ParamVector
from treereg.regularizers import RegularizerSpec, penalty
from treereg.surrogate import SurrogateConfig, SurrogateSample, fit_surrogate, surrogate_penalty
from treereg.training import (DEFAULT_LAMBDAS, ModelSpec, evaluate_run, extract_proxy, load_dataset, make_model,
                              preset, residual_init, run_sweep, train_model)
from treereg.tree import TreeConfig, average_path_length, prune_tree, squared_error, train_tree

from conftest import ACCEPTANCE, fd_grad, gini_root_oracle, rel_err

pytestmark = pytest.mark.acceptance

# lambda used for "strong" tree regularization on signal-and-noise
STRONG_LAMBDA = 1e5
SN_LAMBDAS = DEFAULT_LAMBDAS
GRUHMM_LAMBDAS = (1000, 10000, 100000)


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def best_auc(records, kind, max_path):
    aucs = [r.auc[0] for r in records if r.kind == kind and r.status == "ok" and r.path_length_sum <= max_path]
    return max(aucs) if aucs else float("nan")


# -- shared runs ----------------------------------------------------------------------

@pytest.fixture(scope="session")
def parabola_sweep():
    t0 = time.perf_counter()
    records = run_sweep(preset("parabola"), DEFAULT_LAMBDAS, kinds=("l1", "l2", "tree"))
    return records, time.perf_counter() - t0


@pytest.fixture(scope="session")
def sn_config():
    return preset("signal-noise")


@pytest.fixture(scope="session")
def sn_data(sn_config):
    return load_dataset(sn_config.data)


@pytest.fixture(scope="session")
def sn_unregularized(sn_config, sn_data):
    return train_model(sn_config, sn_data)


@pytest.fixture(scope="session")
def sn_sweep(sn_config, sn_data):
    lams = sorted(set(SN_LAMBDAS) | {STRONG_LAMBDA})
    return run_sweep(sn_config, lams, kinds=("tree",), dataset=sn_data, keep_results=True)


@pytest.fixture(scope="session")
def sn_strong(sn_sweep):
    return sn_sweep[1][("tree", float(STRONG_LAMBDA))]


@pytest.fixture(scope="session")
def sn_strong_proxy(sn_strong):
    return extract_proxy(sn_strong.model, sn_strong.w, sn_strong.dataset, sn_strong.config.tree)


@pytest.fixture(scope="session")
def hmm_alone(sn_config, sn_data):
    cfg = replace(sn_config, model=ModelSpec(kind="hmm", num_states=5), epochs=100)
    return train_model(cfg, sn_data)


@pytest.fixture(scope="session")
def gruhmm_sweep(sn_config, sn_data, hmm_alone):
    # fine-tuning from the trained HMM: a smaller step keeps the residual
    # GRU from overfitting 70 training sequences
    cfg = replace(sn_config, model=ModelSpec(kind="gruhmm", num_states=5, state_dim=15),
                  epochs=100, learning_rate=1e-3)
    w0 = residual_init(make_model(cfg.model, sn_data), hmm_alone.w, np.random.default_rng(cfg.seed))
    return run_sweep(cfg, GRUHMM_LAMBDAS, kinds=("tree",), dataset=sn_data, init_w=w0)


# -- 1. parabola ---------------------------------------------------------------------------

def test_criterion_1_parabola_sweet_spot(parabola_sweep):
    records, secs = parabola_sweep
    tree, l1, l2 = (best_auc(records, k, 5.0) for k in ("tree", "l1", "l2"))
    margin = tree - max(l1, l2)
    ok = report(1, margin >= 0.02, f"best AUC at path<=5: tree {tree:.4f} l1 {l1:.4f} l2 {l2:.4f} "
                                   f"margin {margin:+.4f} (need >= 0.02); sweep {secs / 60:.1f} min (target < 30)")
    if not ok and max(l1, l2) + 0.02 > 1.0:
        pytest.xfail(f"a baseline already reaches {max(l1, l2):.4f} at path <= 5; beating it by 0.02 needs AUC > 1")
    assert ok


# -- 2-5. signal-and-noise GRU --------------------------------------------------------

def test_criterion_2_gru_accuracy_complexity(sn_unregularized, sn_strong):
    base, strong = evaluate_run(sn_unregularized), evaluate_run(sn_strong)
    a0, p0 = base["auc"][0], base["path_length_sum"]
    a1, p1 = strong["auc"][0], strong["path_length_sum"]
    parts = {"unreg AUC in [0.90, 0.96]": 0.90 <= a0 <= 0.96, "unreg path > 25": p0 > 25,
             "strong AUC >= 0.85": a1 >= 0.85, "strong path <= 12": p1 <= 12}
    ok = report(2, all(parts.values()),
                f"unreg AUC {a0:.4f} path {p0:.3f}; lambda={STRONG_LAMBDA:g} AUC {a1:.4f} path {p1:.3f}; "
                f"min {min(sn_unregularized.wall_time, sn_strong.wall_time) / 60:.1f}-"
                f"{max(sn_unregularized.wall_time, sn_strong.wall_time) / 60:.1f} min/run; "
                + ", ".join(k for k, v in parts.items() if not v) + (" failed" if not all(parts.values()) else ""))
    X, _ = sn_unregularized.dataset.timesteps("train")
    binary = np.all((X == 0) | (X == 1))
    only_path = [k for k, v in parts.items() if not v] == ["unreg path > 25"]
    if not ok and only_path and binary and X.shape[1] < 25:
        pytest.xfail(f"binary inputs: no root-to-leaf path can test more than {X.shape[1]} features")
    assert ok


def test_criterion_3_fidelity(sn_strong_proxy):
    fid = sn_strong_proxy.fidelity
    assert report(3, fid >= 0.83, f"proxy fidelity {fid:.4f} on test timesteps (need >= 0.83)")


def test_criterion_4_proxy_structure(sn_strong_proxy):
    tree = sn_strong_proxy.tree
    positive = [leaf for leaf in tree.leaves if tree.value[leaf] >= 0.5]
    bad = []
    for leaf in positive:
        steps = tree.root_to_leaf_paths()[leaf]
        if not any(tree.feature[n] == 0 and side == "right" for n, side in steps):
            bad.append(int(leaf))
    # a tree with no positive leaf would satisfy the rule vacuously
    ok = bool(positive) and not bad
    assert report(4, ok, f"{len(positive)} positive leaves, {len(bad)} without an x[0]-high test "
                         f"({tree.node_count} nodes, root tests x[{tree.feature[0]}])")


def test_criterion_5_surrogate_tracking(sn_strong):
    om = np.array([r.omega_true for r in sn_strong.trace])
    oh = np.array([r.omega_hat for r in sn_strong.trace])
    keep = np.isfinite(om) & np.isfinite(oh)
    r = pearsonr(oh[keep], om[keep])[0] if keep.sum() > 2 else float("nan")
    assert report(5, r >= 0.8, f"Pearson(omega_hat, omega) = {r:.4f} over {keep.sum()} epochs (need >= 0.8)")


# -- 6. tree oracles -----------------------------------------------------------------

def _count_path(tree, x):
    node, steps = 0, 0
    while tree.feature[node] >= 0:
        node = tree.left[node] if x[tree.feature[node]] <= tree.threshold[node] else tree.right[node]
        steps += 1
    return steps


def _gini_gain(X, y, f, thr):
    def gini(part):
        p = part.mean()
        return 1 - p * p - (1 - p) ** 2
    left = X[:, f] <= thr
    return gini(y) - left.mean() * gini(y[left]) - (1 - left.mean()) * gini(y[~left])


def _via_csv(X, y, tags, path):
    ds = SequenceDataset([x[None] for x in X], [[v] for v in y], split=tags, ids=[f"s{i}" for i in range(len(y))])
    back = ingest_csv(export_csv(ds, path, with_split=True))
    return back.timesteps("train"), back.timesteps("valid")


_oracle_stats = {"n": 0, "bad": 0}


@settings(max_examples=100, deadline=None, derandomize=True, suppress_health_check=list(HealthCheck))
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(4, 200), F=st.integers(1, 3),
       discrete=st.booleans(), min_leaf=st.integers(1, 5))
def test_criterion_6_oracles(tmp_path_factory, seed, n, F, discrete, min_leaf):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 4, size=(n, F)).astype(float) if discrete else rng.random((n, F))
    y = ((X[:, 0] > X[:, -1]) ^ (rng.random(n) < 0.25)).astype(int)
    tags = np.where(rng.random(n) < 0.3, "valid", "train")
    tags[0], tags[-1] = "train", "valid"
    (Xtr, ytr), (Xva, yva) = _via_csv(X, y, tags, tmp_path_factory.mktemp("c6") / "d.csv")
    ytr, yva = ytr[:, 0], yva[:, 0]
    tree = train_tree(Xtr, ytr, TreeConfig(min_leaf_samples=min_leaf))
    gain, f, thr = gini_root_oracle(Xtr, ytr, min_leaf)
    if f is None:
        root_ok = tree.feature[0] < 0
    elif tree.feature[0] == f and tree.threshold[0] == thr:
        root_ok = True
    else:
        # a different split is fine only if it ties the optimum
        root_ok = tree.feature[0] >= 0 and abs(_gini_gain(Xtr, ytr, tree.feature[0], tree.threshold[0]) - gain) < 1e-12
    if ytr.min() == ytr.max():
        root_ok = tree.feature[0] < 0
    counter = np.mean([_count_path(tree, x) for x in Xtr])
    path_ok = average_path_length(tree, Xtr) == counter
    prune_ok = squared_error(prune_tree(tree, Xva, yva), Xva, yva) <= squared_error(tree, Xva, yva)
    _oracle_stats["n"] += 1
    _oracle_stats["bad"] += not (root_ok and path_ok and prune_ok)
    assert root_ok and path_ok and prune_ok


def test_criterion_6_report():
    # runs after the property test in file order
    n, bad = _oracle_stats["n"], _oracle_stats["bad"]
    assert report(6, n >= 100 and bad == 0, f"{n} random datasets, {bad} mismatches "
                                            "(root split, path counter, pruning)")


# -- 7. gradients ------------------------------------------------------------------

def _flat(p):
    return p.flat if isinstance(p, ad.BlockVars) else p["w"]


def _gradient_cases(seed):
    rng = np.random.default_rng(seed)
    # keep coordinates away from the L1 kink
    v = rng.normal(size=8)
    v = np.where(np.abs(v) < 0.05, 0.05 * np.sign(v + 1e-12), v)
    flat = ParamVector.from_arrays({"w": v})
    samples = [SurrogateSample(rng.normal(size=8), float(3 * rng.random())) for _ in range(12)]
    sur = fit_surrogate(samples, SurrogateConfig(epochs=30), rng)
    cases = {}
    for kind in ("l1", "l2", "elastic", "tree"):
        spec = RegularizerSpec(kind, float(rng.uniform(0.1, 10)))
        cases[f"penalty-{kind}"] = (flat, lambda p, s=spec: s.lam * penalty(s, _flat(p), sur))
    cases["surrogate_penalty"] = (flat, lambda p: surrogate_penalty(sur, _flat(p)))
    X = (rng.random((2, 4, 3)) < 0.5).astype(float)
    Y = (rng.random((2, 4, 1)) < 0.5).astype(float)
    M = np.array([[1, 1, 1, 1], [1, 1, 1, 0]], dtype=float)
    for model in (MLP([3, 4, 1]), GRU(3, 3), HMM(3, 3), GRUHMM(3, 2, 3)):
        w = model.init(rng).with_values(0.5 * rng.normal(size=model.num_params))
        if model.kind == "mlp":
            cases["loss-mlp"] = (w, lambda p, m=model: data_loss(m, p, X[:, :1], Y[:, :1], M[:, :1]))
        else:
            cases[f"loss-{model.kind}"] = (w, lambda p, m=model: data_loss(m, p, X, Y, M))
    return cases


def test_criterion_7_gradient_suite():
    worst = {}
    for seed in range(50):
        for name, (w, f) in _gradient_cases(seed).items():
            _, g = ad.value_and_grad(f, w)
            worst[name] = max(worst.get(name, 0.0), rel_err(g, fd_grad(f, w)))
    top = max(worst, key=worst.get)
    ok = all(e < 1e-4 for e in worst.values())
    assert report(7, ok, f"{len(worst)} functions x 50 seeds, worst rel. err {worst[top]:.2e} ({top}); need < 1e-4")


# -- 8. lambda trend ---------------------------------------------------------------------

def test_criterion_8_lambda_trend(sn_sweep):
    recs = [r for r in sn_sweep[0] if r.status == "ok"]
    lams = [r.lam for r in recs]
    paths = [r.path_length_sum for r in recs]
    rho = spearmanr(lams, paths)[0] if len(recs) > 2 else float("nan")
    pairs = " ".join(f"{lam:g}:{p:.2f}" for lam, p in zip(lams, paths))
    assert report(8, rho <= -0.7, f"Spearman(lambda, path) = {rho:.3f} over {len(recs)} runs (need <= -0.7); {pairs}")


# -- 9. GRU-HMM ------------------------------------------------------------------------

def test_criterion_9_gruhmm_residual(hmm_alone, gruhmm_sweep):
    base = evaluate_run(hmm_alone)["auc"][0]
    recs = sorted((r for r in gruhmm_sweep if r.status == "ok"), key=lambda r: r.lam)
    every = len(recs) == len(GRUHMM_LAMBDAS) and all(r.auc[0] >= base for r in recs)
    top = recs[-1] if recs else None
    near_zero = top is not None and top.path_length_sum <= 0.1
    close = top is not None and abs(top.auc[0] - base) <= 0.02
    runs = " ".join(f"{r.lam:g}:AUC {r.auc[0]:.4f}/path {r.path_length_sum:.3f}" for r in recs)
    assert report(9, every and near_zero and close,
                  f"HMM alone AUC {base:.4f}; GRU-HMM {runs}; AUC >= HMM at every lambda: {every}; "
                  f"largest lambda path <= 0.1: {near_zero}, AUC within 0.02: {close}")
