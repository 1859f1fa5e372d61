"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run `pytest tests/test_acceptance.py -v -s` to watch the lines as they
complete. The trend-reproduction criterion trains dozens of small models and
dominates the runtime (a few minutes); everything else finishes in seconds.
"""

import hashlib
import math
import time

import numpy as np
import yaml

import corediff as cd
from corediff.cli import main as cli_main
from corediff.dataset import subset
from corediff.diffusion import checkpoint_bytes
from corediff.numerics import round_half_up
from corediff.pruning import METHOD_GAUSSIAN, METHOD_MODERATE
from corediff.reweighting import DroConfig, run_dro, update_weights

from conftest import denoiser_grad_check


def report(num, name, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    print(f"[criterion {num:02d}] {name}: {status}  {detail}")
    assert ok, f"criterion {num} ({name}) failed: {detail}"


def embedding_set(vectors):
    return cd.EmbeddingSet(vectors=vectors, source_encoder="test")


# ---------------------------------------------------------------------------
# 1. scoring oracle equivalence
# ---------------------------------------------------------------------------

def test_criterion_01_scoring_oracles():
    start = time.monotonic()
    rng = np.random.default_rng(101)
    worst_rel = 0.0
    moderate_exact = True
    for _ in range(50):
        n = int(rng.integers(20, 201))
        e = int(rng.integers(2, 9))
        z = rng.standard_normal((n, e)) @ rng.standard_normal((e, e))
        z += rng.standard_normal(e) * 2.0
        labels = rng.integers(0, int(rng.integers(2, 5)), size=n)

        got = cd.score_gaussian(embedding_set(z), reg=1e-6).scores
        mu = z.mean(axis=0)
        cov = np.cov(z, rowvar=False, ddof=1)
        cov = cov + (1e-6 * np.trace(cov) / e) * np.eye(e)
        inv = np.linalg.inv(cov)
        _, logdet = np.linalg.slogdet(cov)
        diffs = z - mu
        quad = np.einsum("ij,jk,ik->i", diffs, inv, diffs)
        oracle = -0.5 * (quad + logdet + e * math.log(2 * math.pi))
        worst_rel = max(worst_rel, float(np.max(np.abs(got - oracle) / np.abs(oracle))))

        got_m = cd.score_moderate(embedding_set(z), labels).scores
        oracle_m = np.empty(n)
        for cls in np.unique(labels):
            sel = labels == cls
            med = np.median(z[sel], axis=0)
            oracle_m[sel] = np.einsum("ij,ij->i", z[sel] - med, z[sel] - med)
        moderate_exact = moderate_exact and np.array_equal(got_m, oracle_m)
    elapsed = time.monotonic() - start
    report(
        1, "scoring oracle equivalence",
        worst_rel < 1e-9 and moderate_exact and elapsed < 10.0,
        f"gaussian rel err {worst_rel:.2e}, moderate exact {moderate_exact}, {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# 2. selection correctness
# ---------------------------------------------------------------------------

def test_criterion_02_selection_correctness():
    start = time.monotonic()
    rng = np.random.default_rng(202)
    ok_counts = ok_nesting = ok_shift = True
    for _ in range(200):
        n = int(rng.integers(5, 120))
        k = int(rng.integers(2, 5))
        labels = rng.integers(0, k, size=n)
        method = METHOD_GAUSSIAN if rng.random() < 0.5 else METHOD_MODERATE
        table = cd.ScoreTable(rng.standard_normal(n) * 3.0, method, "t")
        ratio = float(rng.uniform(0.02, 1.0))
        coreset = cd.select(table, labels, ratio, K=k)
        if method == METHOD_GAUSSIAN:
            ok_counts &= coreset.size == min(n, max(1, round_half_up(ratio * n)))
        else:
            counts = np.bincount(labels, minlength=k)
            for j in range(k):
                if counts[j]:
                    expect = min(counts[j], max(1, round_half_up(ratio * counts[j])))
                    ok_counts &= int(coreset.per_class_counts[j]) == expect
        previous = set()
        for r in (0.1, 0.4, 0.7, 1.0):
            kept = set(cd.select(table, labels, r, K=k).indices.tolist())
            ok_nesting &= previous <= kept
            previous = kept
        shifted = cd.ScoreTable(table.scores + 11.5, method, "t")
        ok_shift &= np.array_equal(
            cd.select(table, labels, ratio, K=k).indices,
            cd.select(shifted, labels, ratio, K=k).indices,
        )
    elapsed = time.monotonic() - start
    report(
        2, "selection correctness",
        ok_counts and ok_nesting and ok_shift and elapsed < 5.0,
        f"counts {ok_counts}, nesting {ok_nesting}, shift {ok_shift}, {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# 3. gradient exactness
# ---------------------------------------------------------------------------

def test_criterion_03_gradient_exactness():
    start = time.monotonic()
    worst = 0.0
    for seed in range(20):
        worst = max(worst, denoiser_grad_check(seed, h=1e-5, tol=1e-4))
    elapsed = time.monotonic() - start
    report(
        3, "gradient exactness",
        worst < 1e-4 and elapsed < 30.0,
        f"worst relative error {worst:.2e} over 20 instances, {elapsed:.1f}s",
    )


# ---------------------------------------------------------------------------
# 4. forward-process moments
# ---------------------------------------------------------------------------

def test_criterion_04_forward_moments():
    start = time.monotonic()
    sched = cd.make_schedule(100, 1e-3, 0.2)
    rng = np.random.default_rng(404)
    n = 100_000
    x0 = np.array([1.5, -0.5])
    ok = True
    details = []
    for t in (1, 50, 100):
        eps = rng.standard_normal((n, 2))
        out = cd.q_sample(np.tile(x0, (n, 1)), np.full(n, t), eps, sched)
        ab = sched.alpha_bars[t - 1]
        se_mean = math.sqrt(1.0 - ab) / math.sqrt(n)
        se_var = (1.0 - ab) * math.sqrt(2.0 / (n - 1))
        mean_err = np.max(np.abs(out.mean(axis=0) - math.sqrt(ab) * x0))
        var_err = np.max(np.abs(out.var(axis=0, ddof=1) - (1.0 - ab)))
        ok &= mean_err < 3 * se_mean and var_err < 3 * se_var
        details.append(f"t={t}: mean {mean_err / se_mean:.2f}se var {var_err / se_var:.2f}se")
    elapsed = time.monotonic() - start
    report(4, "forward-process moments", ok and elapsed < 10.0,
           "; ".join(details) + f", {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 5. DRO algebra
# ---------------------------------------------------------------------------

def test_criterion_05_dro_algebra():
    # hand example evaluated from its own closed form e^0.1 / (e^0.1 + 2)
    w0 = cd.ClassWeights.uniform(3)
    out = update_weights(w0, np.array([1.0, 0.0, 0.0]), eta=0.1, smoothing=0.0)
    expected = math.exp(0.1) / (math.exp(0.1) + 2.0)
    hand_ok = abs(out.alpha[0] - expected) <= 1e-6

    # 500-step run: simplex and smoothing floor at every step
    rng = np.random.default_rng(505)
    eta, smoothing, k = 0.1, 1e-3, 4
    alpha = cd.ClassWeights.uniform(k)
    run_ok = True
    for _ in range(500):
        margins = rng.random(k) * rng.choice([0.0, 0.5, 3.0])
        alpha = update_weights(alpha, margins, eta=eta, smoothing=smoothing)
        run_ok &= bool(np.all(alpha.alpha > 0))
        run_ok &= abs(float(alpha.alpha.sum()) - 1.0) <= 1e-9
        run_ok &= bool(np.all(alpha.alpha >= smoothing / k))

    # all-zero margins: bitwise fixed point
    arbitrary = cd.ClassWeights(np.array([0.55, 0.2, 0.25]))
    fixed_a = update_weights(arbitrary, np.zeros(3), eta=0.7, smoothing=0.0)
    fixed_u = update_weights(cd.ClassWeights.uniform(3), np.zeros(3), eta=0.7,
                             smoothing=1e-3)
    fixed_ok = (np.array_equal(fixed_a.alpha, arbitrary.alpha)
                and np.array_equal(fixed_u.alpha, cd.ClassWeights.uniform(3).alpha))
    report(
        5, "DRO algebra",
        hand_ok and run_ok and fixed_ok,
        f"hand alpha1 {out.alpha[0]:.9f} vs {expected:.9f}, 500-step invariants {run_ok}, "
        f"fixed point {fixed_ok}",
    )


# ---------------------------------------------------------------------------
# 6. baseline identity
# ---------------------------------------------------------------------------

def test_criterion_06_baseline_identity():
    ds = cd.generate(cd.DatasetSpec("gaussian_mixture", K=3, per_class=40, d=2, seed=606))
    sched = cd.make_schedule(50, 1e-3, 0.2)
    cfg = dict(epochs=20, batch_size=32, lr=0.03, seed=77, p_uncond=0.1)

    plain = cd.DenoiserModel(2, 3, (16, 16), 8, 4, seed=5)
    cd.train(plain, ds, cd.TrainConfig(**cfg), sched)

    coreset = cd.select_uniform_random(ds, 1.0, seed=1)
    coreset_ds, _ = subset(ds, coreset.indices)
    weighted = cd.DenoiserModel(2, 3, (16, 16), 8, 4, seed=5)
    cd.train(weighted, coreset_ds,
             cd.TrainConfig(**cfg, class_weights=np.full(3, 1.0 / 3.0)), sched)

    hash_plain = hashlib.sha256(checkpoint_bytes(plain, sched)).hexdigest()
    hash_weighted = hashlib.sha256(checkpoint_bytes(weighted, sched)).hexdigest()
    report(6, "baseline identity", hash_plain == hash_weighted,
           f"checkpoint sha256 {hash_plain[:16]} == {hash_weighted[:16]}")


# ---------------------------------------------------------------------------
# 7. metric sanity
# ---------------------------------------------------------------------------

def test_criterion_07_metric_sanity():
    rng = np.random.default_rng(707)

    def random_fit(d):
        data = rng.standard_normal((60, d)) @ rng.standard_normal((d, d))
        return cd.fit_gaussian(data + rng.standard_normal(d), reg=1e-6)

    self_fit = random_fit(3)
    self_ok = cd.frechet_distance(self_fit, self_fit) <= 1e-9

    ds = cd.generate(cd.DatasetSpec("gaussian_mixture", K=3, per_class=60, d=2, seed=71))
    grid = np.round(ds.samples * 64.0) / 64.0
    base = cd.LabeledDataset(grid.astype(np.float32), ds.labels, 3, 2, "grid")
    v = np.array([1.25, -0.5], dtype=np.float32)
    shifted = cd.LabeledDataset(base.samples + v, base.labels, 3, 2, "shifted")
    rep = cd.evaluate(base, shifted, cd.IdentityEncoder(2))
    shift_ok = abs(rep.frechet - float(v[0]) ** 2 - float(v[1]) ** 2) <= 1e-9

    x = rng.standard_normal((30, 4))
    mmd_ok = abs(cd.mmd_sq_gaussian(x, x.copy())) <= 1e-12

    from test_metrics import frechet_oracle
    worst = 0.0
    for _ in range(20):
        a, b = random_fit(4), random_fit(4)
        ours, oracle = cd.frechet_distance(a, b), frechet_oracle(a, b)
        worst = max(worst, abs(ours - oracle) / max(abs(oracle), 1e-9))
    oracle_ok = worst < 1e-6
    report(
        7, "metric sanity",
        self_ok and shift_ok and mmd_ok and oracle_ok,
        f"self {self_ok}, shift {shift_ok}, mmd {mmd_ok}, oracle rel {worst:.2e}",
    )


# ---------------------------------------------------------------------------
# 8. trend reproduction
# ---------------------------------------------------------------------------

TREND_EPOCHS = 2000
TREND_RATIO = 0.1
TREND_REPS = 4
TREND_EVAL_PER_CLASS = 1500


def _trend_frechet(model, sched, real, w=0.3, seed0=1000):
    gen, labels = [], []
    for c in range(real.K):
        xs = cd.sample_ddim(model, sched, c=c, w=w, n=TREND_EVAL_PER_CLASS,
                            steps=50, seed=seed0 + c)
        gen.append(xs)
        labels.append(np.full(TREND_EVAL_PER_CLASS, c))
    gds = cd.LabeledDataset(np.concatenate(gen).astype(np.float32),
                            np.concatenate(labels), K=real.K, d=real.d, name="g")
    return cd.evaluate(real, gds, cd.IdentityEncoder(real.d)).frechet


def _trend_train(ds_train, seed, rep, weights=None):
    sched = cd.make_schedule(100, 1e-3, 0.2)
    model = cd.DenoiserModel(2, 3, (128, 128), 16, 8, seed=seed * 17 + rep)
    cd.train(model, ds_train,
             cd.TrainConfig(epochs=TREND_EPOCHS, batch_size=64, lr=0.02,
                            seed=seed * 31 + 1000 * rep, p_uncond=0.1,
                            class_weights=weights), sched)
    return model, sched


def test_criterion_08_trend_reproduction():
    start = time.monotonic()
    acc = {key: [] for key in ("full", "mod", "rnd", "rw")}
    diagnostics = []
    for seed in (1, 2, 3):
        ds = cd.generate(cd.DatasetSpec("gaussian_mixture", K=3, per_class=100,
                                        d=2, seed=seed))
        emb = cd.embed(cd.IdentityEncoder(2), ds)
        mod_table = cd.score_moderate(emb, ds.labels)
        ds_mod, _ = subset(ds, cd.select(mod_table, ds.labels, TREND_RATIO, K=3).indices)
        ds_rnd, _ = subset(ds, cd.select_uniform_random(ds, TREND_RATIO,
                                                        seed=seed * 7).indices)
        reference, sched = _trend_train(ds, seed, rep=0)
        dro = run_dro(ds_mod, reference,
                      DroConfig(proxy_epochs=TREND_EPOCHS // 10, eta=0.01,
                                smoothing=0.01, proxy_seed=seed * 13, batch_size=32),
                      sched)
        per_seed = {}
        for name, data, weights in (("full", ds, None), ("mod", ds_mod, None),
                                    ("rnd", ds_rnd, None),
                                    ("rw", ds_mod, dro.weights.alpha)):
            fids = []
            for rep in range(TREND_REPS):
                if name == "full" and rep == 0:
                    model, sch = reference, sched
                else:
                    model, sch = _trend_train(data, seed, rep, weights)
                fids.append(_trend_frechet(model, sch, ds))
            per_seed[name] = float(np.mean(fids))
            acc[name].append(per_seed[name])
        diagnostics.append(
            f"  seed {seed}: " + " ".join(f"{k}={v:.4f}" for k, v in per_seed.items())
            + f" | alpha_bar={np.round(dro.weights.alpha, 4).tolist()}"
            + f" clipped={dro.clipped_fraction:.3f}"
            + f" mean_margins={np.round(dro.margins_trace.mean(axis=0), 3).tolist()}"
        )
    elapsed = time.monotonic() - start
    avg = {key: float(np.mean(vals)) for key, vals in acc.items()}
    cond_a = avg["full"] < avg["mod"]
    cond_b = avg["mod"] <= 1.1 * avg["rnd"]
    cond_c = avg["rw"] <= avg["mod"]
    print("[criterion 08] trend reproduction diagnostics:")
    for line in diagnostics:
        print(line)
    print(f"  averages: " + " ".join(f"{k}={v:.4f}" for k, v in avg.items())
          + f" ({elapsed:.0f}s)")
    print(f"  (a) full < pruned-10%:            {'PASS' if cond_a else 'FAIL'} "
          f"({avg['full']:.4f} vs {avg['mod']:.4f})")
    print(f"  (b) moderate <= 1.1 * random:     {'PASS' if cond_b else 'FAIL'} "
          f"({avg['mod']:.4f} vs 1.1*{avg['rnd']:.4f})")
    print(f"  (c) reweighted <= unweighted:     {'PASS' if cond_c else 'FAIL'} "
          f"({avg['rw']:.4f} vs {avg['mod']:.4f})")
    report(8, "trend reproduction",
           cond_a and cond_b and cond_c and elapsed < 900.0,
           f"a={cond_a} b={cond_b} c={cond_c}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 9. speed-up accounting
# ---------------------------------------------------------------------------

def _speedup_ratio(tmp_path, config, baseline, tag):
    cfg_path = tmp_path / f"{tag}.yaml"
    base_path = tmp_path / f"{tag}-baseline.yaml"
    cfg_path.write_text(yaml.safe_dump(config), encoding="utf-8")
    base_path.write_text(yaml.safe_dump(baseline), encoding="utf-8")
    out = tmp_path / f"{tag}-out"
    code = cli_main(["speedup", "--config", str(cfg_path), "--baseline",
                     str(base_path), "--out", str(out)])
    assert code == 0
    for row in (out / "speedup.csv").read_text().splitlines():
        if row.startswith("step_count_ratio,"):
            return float(row.split(",")[1])
    raise AssertionError("missing step_count_ratio row")


def test_criterion_09_speedup_accounting(tmp_path):
    base = {
        "seed": 5,
        "dataset": {"generator": "gaussian_mixture", "K": 3, "per_class": 100, "d": 2},
        "pruning": {"method": "moderate_ds", "data_ratio": 1.0},
        "train": {"epochs": 8, "batch_size": 32},
    }
    pruned = {**base, "pruning": {"method": "moderate_ds", "data_ratio": 0.1}}
    annealed = {**base,
                "pruning": {"method": "moderate_ds", "data_ratio": 0.1},
                "train": {"epochs": 8, "batch_size": 32, "anneal_ratio": 0.875}}
    plain_ratio = _speedup_ratio(tmp_path, pruned, base, "plain")
    anneal_ratio = _speedup_ratio(tmp_path, annealed, base, "anneal")
    expected_anneal = (8 * 300) / (7 * 30 + 1 * 300)
    ok = plain_ratio == 10.0 and anneal_ratio == expected_anneal
    report(
        9, "speed-up accounting", ok,
        f"plain {plain_ratio} (want 10.0), annealed {anneal_ratio:.6f} "
        f"(want 1/0.2125 = {expected_anneal:.6f})",
    )


# ---------------------------------------------------------------------------
# 10. determinism
# ---------------------------------------------------------------------------

ARTIFACTS = ("dataset.lds", "encoder.enc", "scores.csv", "coreset.csv",
             "reference.dmc", "weights.csv", "weights_trajectory.csv",
             "model.dmc", "loss_trace.csv", "loss_trace_ref.csv",
             "samples.lds", "report.csv", "report_per_class.csv", "report.svg")

STAGES = ("gen-data", "train-ref", "prune", "reweight", "train", "sample", "eval")


def test_criterion_10_determinism(tmp_path):
    out = tmp_path / "run"
    config = {
        "seed": 1010,
        "out_dir": str(out),
        "dataset": {"generator": "gaussian_mixture", "K": 3, "per_class": 20, "d": 2},
        "encoder": {"kind": "classifier", "hidden_widths": [16, 8], "epochs": 5},
        "pruning": {"method": "moderate_ds", "data_ratio": 0.5},
        "dro": {"enabled": True, "proxy_epochs": 2, "batch_size": 8},
        "train": {"epochs": 5, "batch_size": 16, "widths": [16, 16],
                  "time_dim": 4, "cond_dim": 3},
        "schedule": {"T": 10, "beta_start": 0.001, "beta_end": 0.2},
        "sample": {"per_class": 8, "sampler": "ddim", "steps": 5},
    }
    cfg_path = tmp_path / "config.yaml"
    cfg_path.write_text(yaml.safe_dump(config), encoding="utf-8")

    def run_all():
        for stage in STAGES:
            assert cli_main([stage, "--config", str(cfg_path)]) == 0, stage
        return {name: (out / name).read_bytes() for name in ARTIFACTS}

    first = run_all()
    second = run_all()
    mismatched = [name for name in ARTIFACTS if first[name] != second[name]]
    report(10, "determinism", not mismatched,
           f"{len(ARTIFACTS)} artifacts byte-compared, mismatches: {mismatched or 'none'}")
