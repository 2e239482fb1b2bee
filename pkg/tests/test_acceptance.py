"""Acceptance criteria 1-12.

Each test records one pass/fail line in ``conftest.ACCEPTANCE_LINES``; the
lines are printed in the terminal summary.
"""

import itertools
import json
import time

import numpy as np
import pytest

import conftest
from oracles import ap_step, deformable_ref, fuse_enumerate, mmd2_loops
from prompt_evolve import tensor as T
from prompt_evolve.analysis import MMDConfig, a_mmd, median_bandwidth, mmd2
from prompt_evolve.cli import main
from prompt_evolve.detector import (
    Detection,
    average_precision,
    compute_ap50,
    default_task_specs,
    pseudo_label,
)
from prompt_evolve.incremental import (
    ABLATIONS,
    SlotTargets,
    TrainingConfig,
    ablation_config,
    detection_loss,
    final_old_task_ap,
    make_context,
    run_incremental,
)
from prompt_evolve.params import FusionConfig, fuse_flat, sparse_loss, sparsity_report
from prompt_evolve.prompting import (
    AttentionWeights,
    Prompt,
    PromptGenerator,
    bilinear_sample,
    deformable_attention,
    deformable_sampling,
    generate_prompt,
    prompted_attention,
    query_function,
)
from prompt_evolve.tensor import GradTape, Tensor, check_gradients

SEEDS = range(5)


def record(n: int, ok: bool, detail: str) -> None:
    conftest.ACCEPTANCE_LINES[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    assert ok, detail


# ---------------------------------------------------------------------------
# 1-2 fusion


def test_01_fusion_oracle_equivalence():
    values = [-1.0, -0.5, 0.0, 0.5, 1.0]
    fracs = [0.0, 0.25, 0.5, 1.0]
    cfgs = {(k, l): FusionConfig(k, l) for k in fracs for l in fracs}
    t0 = time.perf_counter()
    cases = mismatches = 0

    def check(c, p, i):
        nonlocal cases, mismatches
        ca, pa, ia = np.array(c), np.array(p), np.array(i)
        for (k, l), cfg in cfgs.items():
            out, audit = fuse_flat(ca, pa, ia, cfg)
            ref, branch = fuse_enumerate(c, p, i, k, l)
            cases += 1
            if not (np.array_equal(out, ref) and np.array_equal(audit.branch, branch)):
                mismatches += 1

    # every (curr, prev, init) triple for lengths 1 and 2
    for n in (1, 2):
        for flat in itertools.product(values, repeat=3 * n):
            check(list(flat[:n]), list(flat[n:2 * n]), list(flat[2 * n:]))
    # lengths 3..8 are sampled from the same value lattice
    rng = np.random.default_rng(0)
    for n in range(3, 9):
        for _ in range(300):
            c, p, i = (list(rng.choice(values, size=n)) for _ in range(3))
            check(c, p, i)
    elapsed = time.perf_counter() - t0
    record(1, mismatches == 0 and cases >= 100_000 and elapsed < 60,
           f"{cases} cases, {mismatches} mismatches, {elapsed:.1f}s")


def test_02_fusion_identities():
    rng = np.random.default_rng(1)
    bad = 0
    for trial in range(2000):
        n = int(rng.integers(1, 40))
        theta, prev, init = (rng.normal(size=n) for _ in range(3))
        if trial % 3 == 0:  # include exact zeros and ties
            theta = np.round(theta)
        k, l = (float(x) for x in rng.choice([0.0, 0.1, 0.3, 0.5, 0.7, 1.0], size=2))
        out, audit = fuse_flat(theta, theta, init, FusionConfig(k, l))
        bad += not np.array_equal(out, theta)
        out, audit = fuse_flat(theta, prev, init, FusionConfig(1.0, l))
        bad += not np.array_equal(out, prev)
        out, audit = fuse_flat(theta, prev, init, FusionConfig(k, l))
        counts = audit.preserved_prev + audit.preserved_curr + audit.averaged + audit.fallback
        bad += counts != n or audit.total != n
    record(2, bad == 0, f"6000 identity checks, {bad} violations")


# ---------------------------------------------------------------------------
# 3 gradients


def _away(rng, shape, lo=0.2):
    return rng.uniform(lo, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _grad_cases():
    """name -> (tolerance, builder(rng) -> (f, inputs))."""

    def matmul(rng):
        w = Tensor(rng.normal(size=(3, 2)))
        return (lambda a, b: T.tensor_sum((a @ b) * w)), [Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(4, 2)))]

    def softmax(rng):
        w = Tensor(rng.normal(size=(3, 5)))
        return (lambda x: T.tensor_sum(T.softmax(x) * w)), [Tensor(rng.normal(size=(3, 5)))]

    def relu(rng):
        w = Tensor(rng.normal(size=(4, 3)))
        return (lambda x: T.tensor_sum(T.relu(x) * w)), [Tensor(_away(rng, (4, 3)))]

    def generator(rng):
        D, d, Lp = 6, 3, 4
        g = PromptGenerator.random(D, d, Lp, rng, up_scale=1.0)
        w = Tensor(rng.normal(size=(Lp, D)))
        props = rng.normal(size=(5, D))

        def f(W1, W2, x):
            return T.tensor_sum(generate_prompt(PromptGenerator(W1, W2, Lp), query_function(x)).p * w)
        return f, [g.W1, g.W2, Tensor(props)]

    def attention(rng):
        w = AttentionWeights.random(4, 2, rng)
        wt = Tensor(rng.normal(size=(3, 4)))

        def f(U, V, Wp, W, q, p):
            return T.tensor_sum(prompted_attention(AttentionWeights(U, V, Wp, W), q, Prompt(p)) * wt)
        return f, [*w.tensors(), Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(4, 4)))]

    def focal_box(rng):
        n, K1 = 4, 5
        cls = rng.integers(0, K1, size=n)
        matched = cls < K1 - 1
        tg = SlotTargets(cls, rng.uniform(0.1, 0.9, size=(n, 4)), matched)
        boxes = np.clip(tg.boxes + _away(rng, (n, 4), 0.05) * 0.2, 0.01, 0.99)
        return (lambda lg, bx: detection_loss(lg, bx, tg)), [Tensor(rng.normal(size=(n, K1))), Tensor(boxes)]

    def sparse(rng):
        return (lambda a, b: sparse_loss([[a], [b]], 0.37)), [Tensor(_away(rng, (3, 4))), Tensor(_away(rng, (5,)))]

    return {
        "matmul": (1e-6, matmul), "softmax": (1e-6, softmax), "relu": (1e-6, relu),
        "prompt_generator": (1e-4, generator), "prompted_attention": (1e-4, attention),
        "focal_box_loss": (1e-4, focal_box), "sparse_loss": (1e-4, sparse),
    }


def test_03_gradient_suite():
    t0 = time.perf_counter()
    worst = {}
    for k, (name, (tol, build)) in enumerate(_grad_cases().items()):
        rng = np.random.default_rng(300 + k)
        errs = []
        for _ in range(20):
            f, inputs = build(rng)
            errs.append(check_gradients(f, inputs, tol=tol).max_rel_error)
        worst[name] = (max(errs), tol)
    elapsed = time.perf_counter() - t0
    failing = [n for n, (e, tol) in worst.items() if not e < tol]
    detail = ", ".join(f"{n}={e:.1e}" for n, (e, _) in worst.items())
    record(3, not failing and elapsed < 120, f"20 points/op, {elapsed:.1f}s; max rel err {detail}")


# ---------------------------------------------------------------------------
# 4-5 attention


def test_04_prompted_attention_contracts():
    rng = np.random.default_rng(4)
    C, M = 8, 2
    w = AttentionWeights.random(C, M, rng)
    g = PromptGenerator.random(C, 3, 4, rng)
    problems = []
    max_dev = 0.0
    for n_q in (1, 2, 7, 16, 64):
        for L_p in (2, 4, 8, 16, 32):
            q = Tensor(rng.normal(size=(n_q, C)))
            p = Prompt(Tensor(rng.normal(size=(L_p, C))))
            for project in (False, True):
                y, tr = prompted_attention(w, q, p, project_prompt_keys=project, return_trace=True)
                if y.shape != (n_q, C):
                    problems.append(f"shape {y.shape} for n_q={n_q}")
                max_dev = max(max_dev, float(np.abs(tr.weights.data.sum(axis=-1) - 1.0).max()))
    nonzero = 0
    for n_q in (1, 5, 64):
        q = Tensor(rng.normal(size=(n_q, C)))
        with GradTape() as tape:
            prompt = generate_prompt(g, query_function(q))
            _, tr = prompted_attention(w, q, prompt, return_trace=True)
            target = T.tensor_sum(tr.queries * Tensor(rng.normal(size=tr.queries.shape)))
        nonzero += sum(int(np.count_nonzero(gr)) for gr in tape.gradient(target, g.tensors()))
    ok = not problems and max_dev <= 1e-12 and nonzero == 0
    record(4, ok, f"50 grid cells, max |row sum - 1| = {max_dev:.1e}, nonzero query-logit grads = {nonzero}")


def test_05_deformable_attention():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(100):
        M = int(rng.choice([1, 2, 4]))
        C = M * int(rng.integers(1, 8 // M + 1))
        K = int(rng.integers(1, 5))
        H, W, n_q = int(rng.integers(1, 9)), int(rng.integers(1, 9)), int(rng.integers(1, 5))
        w = AttentionWeights.random(C, M, rng)
        z = rng.normal(size=(n_q, C))
        off, A = deformable_sampling(z, rng.normal(size=(C, M * K * 2)), rng.normal(size=(C, M * K)), M, K)
        ref = np.stack([rng.uniform(-1, W, n_q), rng.uniform(-1, H, n_q)], axis=1)
        fm = rng.normal(size=(C, H, W))
        got = deformable_attention(z, ref, fm, off, A, w, K)
        worst = max(worst, float(np.abs(got - deformable_ref(z, ref, fm, off, A, w.Wp.data, w.W.data)).max()))
    lattice_ok = True
    for _ in range(20):
        C, H, W = 4, int(rng.integers(1, 9)), int(rng.integers(1, 9))
        fm = rng.normal(size=(C, H, W))
        xs, ys = rng.integers(0, W, 10).astype(float), rng.integers(0, H, 10).astype(float)
        direct = fm[:, ys.astype(int), xs.astype(int)].T
        lattice_ok &= np.array_equal(bilinear_sample(fm, xs, ys), direct)
        # zero offsets with one point per head and unit weight reduce to W_m W'_m of the looked-up feature
        w = AttentionWeights.random(C, 2, rng)
        n_q = 10
        got = deformable_attention(np.zeros((n_q, C)), np.stack([xs, ys], 1), fm, np.zeros((n_q, 2, 1, 2)),
                                   np.ones((n_q, 2, 1)), w, 1)
        expect = sum(direct @ w.Wp.data[m].T @ w.W.data[m].T for m in range(2))
        lattice_ok &= bool(np.allclose(got, expect, rtol=0, atol=1e-12))
    record(5, worst <= 1e-10 and lattice_ok,
           f"100 instances, max |err| = {worst:.1e}; lattice lookup exact = {lattice_ok}")


# ---------------------------------------------------------------------------
# 6-8 labels, AP, MMD


def test_06_pseudo_labeling():
    rng = np.random.default_rng(6)
    taus = [0.0, 0.25, 0.5, 0.65, 0.9, 1.0]
    monotone = True
    for _ in range(500):
        scores = np.concatenate([rng.uniform(0, 1, 15), rng.choice(taus, 5)])
        # the box centre encodes the detection index
        dets = [Detection(float(s), int(rng.integers(0, 5)), (0.01 * (i + 1), 0.5, 0.01, 0.1), i)
                for i, s in enumerate(scores)]
        kept = [{round(p.box[0] * 100) - 1 for p in pseudo_label(dets, t)} for t in taus]
        monotone &= all(b <= a for a, b in zip(kept, kept[1:]))
        monotone &= all(all(scores[i] > t for i in k) and all(i in k for i, s in enumerate(scores) if s > t)
                        for t, k in zip(taus, kept))
    box = (0.5, 0.5, 0.1, 0.1)
    strict = (len(pseudo_label([Detection(0.70, 1, box)])) == 1 and not pseudo_label([Detection(0.65, 1, box)])
              and not pseudo_label([Detection(1.0, 1, box)], 1.0))
    wired = TrainingConfig().tau_pseudo == 0.65
    record(6, monotone and strict and wired, f"subset property {monotone}, strict boundary {strict}, default 0.65 {wired}")


def test_07_ap50():
    hand = average_precision(np.array([1, 0, 1]), 2)
    gts = [[(0, (0.3, 0.3, 0.2, 0.2)), (1, (0.7, 0.7, 0.2, 0.2))], [(0, (0.5, 0.5, 0.3, 0.3))]]
    perfect = compute_ap50([[Detection(0.9, c, b) for c, b in g] for g in gts], gts, [0, 1]).mean
    rng = np.random.default_rng(7)
    tp_ok = fp_ok = oracle_ok = True
    for _ in range(2000):
        flags = list(rng.integers(0, 2, size=int(rng.integers(0, 12))))
        n_gt = sum(flags) + 1 + int(rng.integers(0, 3))
        base = average_precision(np.array(flags), n_gt)
        oracle_ok &= abs(base - ap_step(flags, n_gt)) <= 1e-12
        pos = int(rng.integers(0, len(flags) + 1))
        with_tp = flags[:pos] + [1] + flags[pos:]
        tp_ok &= average_precision(np.array(with_tp), n_gt) >= base - 1e-15
        fp_ok &= average_precision(np.array([0] + flags), n_gt) <= base + 1e-15
    ok = abs(hand - 5 / 6) <= 1e-9 and perfect == 1.0 and tp_ok and fp_ok and oracle_ok
    record(7, ok, f"hand example {hand:.10f}, perfect {perfect}, added-TP {tp_ok}, dominating-FP {fp_ok}")


def test_08_mmd():
    rng = np.random.default_rng(8)
    zero = all(mmd2(x, x) == 0.0 and mmd2(x, x[rng.permutation(len(x))]) == 0.0
               for x in (rng.normal(size=(n, 3)) for n in (1, 5, 50)))
    a = rng.normal(size=(200, 4))
    b = rng.normal(size=(200, 4)) + 3.0
    bw = median_bandwidth(a, b)
    err = abs(mmd2(a, b) - mmd2_loops(a, b, bw))
    err = max(err, abs(mmd2(a, b, MMDConfig(1.7)) - mmd2_loops(a, b, 1.7)))
    tasks = [rng.normal(size=(20, 3)) * (1 + 0.3 * i) + i for i in range(4)]
    ref = a_mmd(tasks)
    perm_ok = all(a_mmd([tasks[i] for i in p]) == ref for p in itertools.permutations(range(4)))
    record(8, zero and err <= 1e-12 and perm_ok, f"identity zero {zero}, oracle err {err:.1e}, permutation {perm_ok}")


# ---------------------------------------------------------------------------
# 9-12 end to end


@pytest.fixture(scope="module")
def ablation_grid():
    specs = default_task_specs()
    t0 = time.perf_counter()
    old_ap = {name: [] for name in ABLATIONS}
    for seed in SEEDS:
        for name in ABLATIONS:
            state, _ = run_incremental(specs, ablation_config(TrainingConfig(seed=seed), name))
            old_ap[name].append(final_old_task_ap(state))
    means = {k: float(np.mean(v)) for k, v in old_ap.items()}
    return means, old_ap, time.perf_counter() - t0


def _grid_summary(means):
    return " ".join(f"{k}={v:.3f}" for k, v in means.items())


def test_09a_full_method_beats_sequential_prompt_finetune(ablation_grid):
    means, _, elapsed = ablation_grid
    margin = means["f"] - means["prompts_only"]
    ok = margin >= 0.05 and elapsed <= 30 * 60
    conftest.ACCEPTANCE_LINES[9] = (f"criterion  9: {'PASS' if ok else 'FAIL'}  (a) margin f - prompts_only = "
                                    f"{margin:.3f}; grid {elapsed / 60:.1f} min; {_grid_summary(means)}")
    assert ok


def test_09b_fusion_does_not_hurt_old_tasks(ablation_grid):
    means, per_seed, _ = ablation_grid
    ok = means["d"] >= means["c"]
    prev = conftest.ACCEPTANCE_LINES.get(9, "criterion  9:")
    part = f"(b) fusion on (d) {means['d']:.3f} vs off (c) {means['c']:.3f}: {'ok' if ok else 'VIOLATED'}"
    if not ok:
        prev = prev.replace("PASS", "FAIL", 1)
    conftest.ACCEPTANCE_LINES[9] = prev + " | " + part
    assert ok, f"fusion lowers old-task AP: d={per_seed['d']} c={per_seed['c']}"


@pytest.fixture(scope="module")
def sparsity_runs():
    specs = default_task_specs()
    out = {}
    for lam in (0.0, 1e-4):
        cfg = TrainingConfig(seed=0, lambda_sparse=lam)
        ctx = make_context(specs, cfg)
        before = ctx.detector.frozen_hash()
        state, _ = run_incremental(specs, cfg, ctx=ctx)
        out[lam] = (state, before, ctx.detector.frozen_hash())
    return out


def test_10_sparsity_effect(sparsity_runs):
    last = default_task_specs()[-1].task_id
    frac = {lam: sparsity_report(s.trained[last].flat(), eps=1e-4) for lam, (s, _, _) in sparsity_runs.items()}
    ok = frac[1e-4] >= 2 * frac[0.0] and frac[1e-4] > 0
    record(10, ok, f"near-zero fraction lambda=1e-4: {frac[1e-4]:.3f}, lambda=0: {frac[0.0]:.3f}")


def _small_manifest(path):
    tasks = [t.to_dict() for t in default_task_specs(scene_count=40, test_scene_count=20)]
    path.write_text(json.dumps({"training": {"epochs_per_task": 8, "lr_drop_epoch": 6}, "tasks": tasks}))
    return str(path)


def test_11_determinism(tmp_path):
    cfg = _small_manifest(tmp_path / "m.json")
    runs = []
    for i in range(2):
        assert main(["train", "--config", cfg, "--seed", "3", "--out", str(tmp_path / f"t{i}")]) == 0
        runs.append((tmp_path / f"t{i}" / "metrics.csv").read_bytes())
    sweeps = []
    for i in range(2):
        out = tmp_path / f"s{i}"
        assert main(["sweep", "--config", cfg, "--seed", "3", "--parameter", "top_k", "--values", "0.3,0.7",
                     "--out", str(out)]) == 0
        sweeps.append((out / "sweep_top_k.csv").read_bytes())
    ok = runs[0] == runs[1] and sweeps[0] == sweeps[1]
    record(11, ok, f"train metrics.csv identical {runs[0] == runs[1]}, sweep csv identical {sweeps[0] == sweeps[1]}")


def test_12_frozen_backbone(sparsity_runs):
    ok = True
    for state, before, after in sparsity_runs.values():
        ok &= before == after and len(set(state.frozen_hashes)) == 1 and state.frozen_hashes[0] == before
    record(12, ok, f"backbone hash unchanged across two full 4-task runs: {ok}")
