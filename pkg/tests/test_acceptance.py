"""Acceptance suite: one test per criterion, each printing a pass/fail line.

The planted-benchmark criteria share one set of experiment runs (module
fixture) so pretraining and retraining are computed once per seed.
"""
import json
import time

import numpy as np
import pytest

from nfsgate.ensemble import (
    GatingEnsemble,
    aggregate,
    aggregate_avg,
    aggregate_voting,
)
from nfsgate.gating import (
    GateGroup,
    apply_gates,
    apply_gates_backward,
    binarize_gumbel,
    binarize_gumbel_backward,
    binarize_ste,
    binarize_ste_backward,
)
from nfsgate.harness import PipelineCache, emit_report, run_experiment
from nfsgate.metrics import auc
from nfsgate.models import MODEL_KINDS, CrossLayer, CTRModel, training_objective
from nfsgate.tensor_core import MLP, Linear, Parameters, ReLU, Sigmoid, grad_check
from nfsgate.training import PipelineConfig, run_pipeline, split_for

TOL = 1e-3
SEEDS = (0, 1, 2)
BATCHES = 5
RUNS = 5


# criterion 1 ---------------------------------------------------------------

def _subset(params, prefix):
    sub = Parameters()
    for name in params:
        if name.startswith(prefix):
            sub.values[name] = params.values[name]
            sub.grads[name] = params.grads[name]
    return sub


def _layer_cases(seed):
    """(name, forward, backward, x, params) for every differentiable building block."""
    rng = np.random.default_rng(seed)
    cases = []

    p = Parameters()
    lin = Linear(p, "lin", 5, 3, rng)
    cases.append(("Linear", lin.forward, lin.backward, rng.standard_normal((4, 5)), p))

    relu = ReLU()
    x = rng.standard_normal((4, 5))
    x[np.abs(x) < 1e-2] = 0.5  # keep clear of the kink
    cases.append(("ReLU", relu.forward, relu.backward, x, None))

    sig = Sigmoid()
    cases.append(("Sigmoid", sig.forward, sig.backward, rng.standard_normal((4, 5)), None))

    p = Parameters()
    mlp = MLP(p, "mlp", [6, 5, 3], rng)
    cases.append(("MLP", mlp.forward, mlp.backward, rng.standard_normal((4, 6)), p))

    p = Parameters()
    cross = CrossLayer(p, "cross", 6, rng)
    cases.append(("CrossLayer",
                  lambda z: cross.forward(z[0], z[1]),
                  lambda d: np.stack(cross.backward(d)),
                  rng.standard_normal((2, 4, 6)), p))

    for kind in MODEL_KINDS:
        model = CTRModel(kind, [7] * 5, 8, seed=seed)
        cases.append((f"{kind} interaction", model.forward, model.backward,
                      rng.standard_normal((4, 5, 8)),
                      _subset(model.params, kind)))

    model = CTRModel("dcn", [7] * 5, 8, seed=seed)
    idx = rng.integers(0, 7, size=(4, 5))
    cases.append(("Embedding", lambda _: model.embed(idx),
                  lambda d: (model.embedding.backward(d), np.zeros(1))[1],
                  np.zeros(1), _subset(model.params, "emb.")))

    for kind in MODEL_KINDS:
        model = CTRModel(kind, [7] * 5, 8, seed=seed)
        # moderate scale: clear of ReLU kinks, small enough for clean differences
        for name in model.embedding_names:
            model.params[name][...] = 0.3 * rng.standard_normal(model.params[name].shape)
        labels = (rng.random(4) < 0.5).astype(float)
        idx = rng.integers(0, 7, size=(4, 5))
        store = {}

        def loss_fwd(_, model=model, idx=idx, labels=labels, store=store):
            logits = model.forward(model.embed(idx))
            loss, store["dlogit"] = training_objective(logits, labels, Parameters(), 0.0)
            return np.array([loss])

        def loss_bwd(d, model=model, store=store):
            model.embedding.backward(model.backward(store["dlogit"] * d[0]))
            return np.zeros(1)

        cases.append((f"{kind} end-to-end loss", loss_fwd, loss_bwd, np.zeros(1),
                      model.params))

    u = (rng.random(6), rng.random(6))
    cache = {}

    def gumbel_fwd(a):
        cache["g"] = binarize_gumbel(a, 0.7, u=u)
        return cache["g"]

    cases.append(("Gumbel-Sigmoid binarize", gumbel_fwd,
                  lambda d: binarize_gumbel_backward(cache["g"], 0.7, d),
                  rng.standard_normal(6) * 0.5, None))

    emb = rng.standard_normal((3, 4, 2))
    group = GateGroup(np.zeros(4), "gumbel", 0.9)
    u4 = (rng.random(4), rng.random(4))

    def masked_fwd(a):
        out, cache["ctx"] = apply_gates(emb, group, gates=binarize_gumbel(a, 0.9, u=u4))
        return out

    cases.append(("Gumbel gate masking", masked_fwd,
                  lambda d: apply_gates_backward(cache["ctx"], d)[1],
                  rng.standard_normal(4) * 0.5, None))
    return cases


def test_c01_gradient_correctness(acceptance):
    start = time.perf_counter()
    failures, worst, count = [], 0.0, 0
    for seed in SEEDS:
        for name, fwd, bwd, x, params in _layer_cases(seed):
            report = grad_check(fwd, bwd, x, TOL, params=params, seed=seed)
            worst = max(worst, report.max_rel_error)
            count += 1
            if not report.passed:
                failures.append(f"{name}/seed{seed}")
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 30
    acceptance(1, "gradient correctness", ok,
               f"{count} checks, worst rel err {worst:.2e} (tol {TOL}), {elapsed:.1f} s"
               + (f", failed {failures}" if failures else ""))
    assert ok


# criterion 2 ---------------------------------------------------------------

def test_c02_ste_contract(acceptance):
    alpha = np.linspace(-1, 1, 1001)
    assert 0.0 in alpha
    forward_ok = all(binarize_ste(a) == (1.0 if a > 0 else 0.0) for a in alpha)
    vec_ok = np.array_equal(binarize_ste(alpha), (alpha > 0).astype(float))
    up = np.random.default_rng(0).standard_normal(alpha.shape)
    backward_ok = np.array_equal(binarize_ste_backward(up), up)
    zero_ok = binarize_ste(0.0) == 0.0
    ok = forward_ok and vec_ok and backward_ok and zero_ok
    acceptance(2, "STE contract", ok,
               f"1001-point grid forward {forward_ok}, alpha=0 -> 0 {zero_ok}, "
               f"identity backward {backward_ok}")
    assert ok


# shared planted experiments -------------------------------------------------

@pytest.fixture(scope="module")
def planted_runs(desk_data):
    """All planted-benchmark cells used by criteria 3, 4, 5, 6 and 11."""
    base = PipelineConfig()
    cache = PipelineCache()
    out = {"base": base, "cache": cache}
    seeds0 = list(range(RUNS))
    start = time.perf_counter()
    out["core"] = run_experiment(base, ["ensemble", "random"], seeds0, desk_data, cache=cache)
    out["core_seconds"] = time.perf_counter() - start
    out["extra"] = run_experiment(base, ["gating", "gating:gate_lr_scale=0.1", "gumbel"],
                                  seeds0, desk_data, cache=cache)
    out["batches"] = []
    for b in range(BATCHES):
        if b == 0:
            ens, gat = out["core"].cells_for("ensemble"), out["extra"].cells_for("gating")
        else:
            seeds = list(range(b * RUNS, (b + 1) * RUNS))
            rep = run_experiment(base, ["gating", "ensemble"], seeds, desk_data, cache=cache)
            ens, gat = rep.cells_for("ensemble"), rep.cells_for("gating")
        out["batches"].append((ens, gat))
    return out


def _mean(xs):
    return float(np.mean(xs))


def _std(xs):
    return float(np.std(xs, ddof=1))


def test_c03_planted_recovery(planted_runs, acceptance):
    core = planted_runs["core"]
    assert all(c.ok for c in core.cells), [c.error for c in core.cells if not c.ok]
    ens = [c.recovery for c in core.cells_for("ensemble")]
    rnd = [c.recovery for c in core.cells_for("random")]
    secs = planted_runs["core_seconds"]
    ok = _mean(ens) >= 5.0 and _mean(rnd) <= 3.0 and secs < 600
    acceptance(3, "planted recovery", ok,
               f"ensemble-avg mean {_mean(ens):.2f} {ens} (need >= 5.0), "
               f"random mean {_mean(rnd):.2f} {rnd} (need <= 3.0), {secs:.0f} s")
    assert ok


def test_c04_ensemble_beats_gating(planted_runs, acceptance):
    ens0, gat0 = planted_runs["batches"][0]
    ens_auc, gat_auc = [c.test_auc for c in ens0], [c.test_auc for c in gat0]
    mean_ok = _mean(ens_auc) >= _mean(gat_auc)
    std_wins = []
    for ens, gat in planted_runs["batches"]:
        std_wins.append(_std([c.test_auc for c in ens]) <= _std([c.test_auc for c in gat]))
    std_ok = sum(std_wins) >= 4
    ok = mean_ok and std_ok
    stds = [(round(_std([c.test_auc for c in e]), 5), round(_std([c.test_auc for c in g]), 5))
            for e, g in planted_runs["batches"]]
    acceptance(4, "ensemble >= gating", ok,
               f"mean AUC ensemble {_mean(ens_auc):.5f} vs gating {_mean(gat_auc):.5f}; "
               f"std (ensemble, gating) per batch {stds}, ensemble smaller in "
               f"{sum(std_wins)}/5 (need 4)")
    assert ok


def test_c05_gating_overfitting(planted_runs, acceptance):
    extra = planted_runs["extra"]
    full = extra.aucs("gating")
    small = extra.aucs("gating:gate_lr_scale=0.1")
    assert len(full) == len(small) == RUNS
    gap = _mean(full) - _mean(small)
    ok = _mean(small) < _mean(full)
    rec_full = _mean([c.recovery for c in extra.cells_for("gating")])
    rec_small = _mean([c.recovery for c in extra.cells_for("gating:gate_lr_scale=0.1")])
    acceptance(5, "gating overfitting", ok,
               f"mean AUC scale 1.0 {_mean(full):.5f}, scale 0.1 {_mean(small):.5f}, "
               f"gap {gap:.5f}; recovery {rec_full:.1f} vs {rec_small:.1f}")
    assert ok


def test_c06_convergence(planted_runs, acceptance):
    target = planted_runs["base"].target_N
    in_band, ratios = [], []
    for cell in planted_runs["core"].cells_for("ensemble"):
        logs = [r for r in cell.logs if r["phase"] in ("search", "search_epoch_end")]
        ends = {r["epoch"]: r for r in logs if r["phase"] == "search_epoch_end"}
        in_band.append(all(abs(c - target) <= 2 for c in ends[1]["open_gates"]))
        first = max(r["intergroup_diff"] for r in logs if r["epoch"] == 0)
        ratios.append(ends[max(ends)]["intergroup_diff"] / first if first else 0.0)
    ok = all(in_band) and all(r <= 0.2 for r in ratios)
    acceptance(6, "convergence", ok,
               f"groups within {target}+-2 at end of epoch 2: {in_band}; "
               f"final/epoch-0 inter-group difference {[round(r, 2) for r in ratios]} "
               f"(need <= 0.2)")
    assert ok


def test_c11_gumbel_vs_ensemble(planted_runs, acceptance):
    ens = [c.recovery for c in planted_runs["core"].cells_for("ensemble")]
    gum = [c.recovery for c in planted_runs["extra"].cells_for("gumbel")]
    ok = _mean(ens) >= _mean(gum)
    acceptance(11, "gumbel vs ensemble", ok,
               f"mean recovery ensemble {_mean(ens):.2f} {ens}, gumbel {_mean(gum):.2f} {gum}")
    assert ok


# criterion 7 ---------------------------------------------------------------

def test_c07_single_group_equivalence(desk_data, acceptance):
    cache = PipelineCache()
    gat = PipelineConfig(method="gating", seed=3)
    ens = gat.replace(method="ensemble", K=1, init_mode="constant")
    pre = cache.pretrain_for(gat, split_for(gat, desk_data)[0])
    a = run_pipeline(gat, desk_data, pretrained=pre)
    b = run_pipeline(ens, desk_data, pretrained=pre)
    same_sel = a.selected == b.selected and a.selection == b.selection
    same_log = json.dumps(a.logs, sort_keys=True) == json.dumps(b.logs, sort_keys=True)
    same_auc = a.test_auc == b.test_auc
    ok = same_sel and same_log and same_auc
    acceptance(7, "degenerate ensemble", ok,
               f"selection identical {same_sel}, log identical {same_log} "
               f"({len(a.logs)} records), AUC identical {same_auc}")
    assert ok


# criterion 8 ---------------------------------------------------------------

def pairwise_oracle(scores, labels):
    pos, neg = scores[labels == 1], scores[labels == 0]
    gt = (pos[:, None] > neg[None, :]).sum()
    eq = (pos[:, None] == neg[None, :]).sum()
    return (gt + 0.5 * eq) / (len(pos) * len(neg))


def test_c08_auc_oracle(acceptance):
    rng = np.random.default_rng(2024)
    worst, tied_instances = 0.0, 0
    for i in range(200):
        n = int(rng.integers(2, 1001))
        labels = rng.integers(0, 2, n)
        labels[rng.choice(n, 2, replace=False)] = [0, 1]
        if i % 2:
            scores = rng.integers(0, int(rng.integers(2, 20)), n).astype(float)
            tied_instances += 1
        else:
            scores = rng.standard_normal(n)
        worst = max(worst, abs(auc(scores, labels) - pairwise_oracle(scores, labels)))
    ok = worst <= 1e-12
    acceptance(8, "AUC oracle equivalence", ok,
               f"200 instances ({tied_instances} with ties), max |diff| {worst:.1e}")
    assert ok


# criterion 9 ---------------------------------------------------------------

def test_c09_aggregation_contracts(acceptance):
    rng = np.random.default_rng(9)
    bad_count, bad_perm = 0, 0
    for trial in range(1000):
        k = (1, 2, 5, 10)[trial % 4]
        m = int(rng.integers(2, 16))
        n = int(rng.integers(1, m + 1))
        alphas = rng.standard_normal((k, m)) * 10.0 ** rng.integers(-4, 1)
        alphas[rng.random((k, m)) < 0.15] = 0.0
        ens = GatingEnsemble([GateGroup(a) for a in alphas])
        losses = rng.random(k)
        for method in ("voting", "avg", "min"):
            res = aggregate(ens, n, method, lambda sel, g: losses[g])
            if len(res.selected) != n or not set(res.selected) <= set(range(m)):
                bad_count += 1
        shuffled = GatingEnsemble([GateGroup(a) for a in alphas[rng.permutation(k)]])
        if (aggregate_voting(shuffled, n).selected != aggregate_voting(ens, n).selected
                or aggregate_avg(shuffled, n).selected != aggregate_avg(ens, n).selected):
            bad_perm += 1
    ok = bad_count == 0 and bad_perm == 0
    acceptance(9, "aggregation contracts", ok,
               f"1000 fuzzed ensembles x 3 methods: {bad_count} wrong sizes, "
               f"{bad_perm} permutation mismatches")
    assert ok


# criterion 10 --------------------------------------------------------------

def test_c10_determinism(desk_data, tmp_path, acceptance):
    outputs = []
    for run in ("a", "b"):
        rep = run_experiment(PipelineConfig(), ["ensemble"], [7], desk_data,
                             cache=PipelineCache())
        out = tmp_path / run
        emit_report(rep, out)
        logs = "\n".join(json.dumps(r, sort_keys=True) for r in rep.cells[0].logs)
        outputs.append((logs, rep.to_json(),
                        {p.name: p.read_bytes() for p in sorted(out.iterdir())}))
    (la, ja, fa), (lb, jb, fb) = outputs
    ok = la == lb and ja == jb and fa == fb
    acceptance(10, "determinism", ok,
               f"JSON-lines logs identical {la == lb}, report JSON identical {ja == jb}, "
               f"{len(fa)} emitted files byte-identical {fa == fb}")
    assert ok
