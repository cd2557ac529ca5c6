"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the pytest terminal
summary. The benchmark fixtures train the full-size classifier and agent
once per session, so this module dominates the suite's runtime.
"""

import shutil
import time

import numpy as np
import pytest

from afa.agent import AgentConfig, QNetwork, QNetworkPair, ddqn_target, rollout_all, train_agent
from afa.classifier import (
    ClassifierConfig,
    ClassifierModel,
    MaskLabelCache,
    full_acquisition_bacc,
    sample_train_masks,
    train_classifier,
)
from afa.cli import main
from afa.core import Action, StudyRecord, ViewSlot, apply_mask, code_to_mask, split_dataset
from afa.env import RewardSpec, action_mask, reset, step
from afa.metrics import (
    balanced_accuracy,
    balanced_mae,
    evaluate_episodes,
    lambda_sweep,
    pathway_tree,
    weighted_f1,
)
from afa.neural import MultiHeadAttention, grad_check, multi_head_attention
from afa.synthgen import GeneratorSpec, bayes_oracle, generate

BENCH = GeneratorSpec(n_studies=2000, d=16, noise_sigma=0.3, seed=1)
SWEEP_DATA = GeneratorSpec(n_studies=300, d=16, noise_sigma=0.3, seed=2)
SWEEP_LAMBDAS = (0.001, 0.01, 0.1, 0.25)
# benchmark agent: small weight-decayed Q-net that also sees the acquisition mask
BENCH_AGENT = AgentConfig(hidden=(64, 64), append_mask=True, weight_decay=0.3)


# ---------------------------------------------------------------------------
# 1. metric oracles


def _loop_metrics(preds, labels):
    cm = [[0] * 3 for _ in range(3)]
    for p, t in zip(preds, labels):
        cm[t][p] += 1
    present = [c for c in range(3) if sum(cm[c])]
    bacc = sum(cm[c][c] / sum(cm[c]) for c in present) / len(present)
    wf1 = 0.0
    for c in present:
        tp = cm[c][c]
        denom = 2 * tp + (sum(cm[r][c] for r in range(3)) - tp) + (sum(cm[c]) - tp)
        wf1 += (2 * tp / denom if tp else 0.0) * sum(cm[c]) / len(labels)
    bmae = sum(sum(abs(p - t) for p, t in zip(preds, labels) if t == c) / sum(cm[c]) for c in present)
    return bacc, wf1, bmae / len(present)


def test_criterion_1_metric_oracles(criterion):
    hand = [
        (([0, 1, 2, 1], [0, 1, 2, 1]), (1.0, 1.0, 0.0)),
        (([0, 1, 1, 2], [0, 0, 1, 2]), (2.5 / 3, 0.75, 1 / 6)),
        (([1] * 6, [0, 0, 1, 1, 2, 2]), (1 / 3, 1 / 6, 2 / 3)),
    ]
    worst = 0.0
    for (p, t), expected in hand:
        got = (balanced_accuracy(p, t), weighted_f1(p, t), balanced_mae(p, t))
        worst = max(worst, *(abs(a - b) for a, b in zip(got, expected)))
    rng = np.random.default_rng(2024)
    for _ in range(100):
        n = int(rng.integers(1, 50))
        t = rng.integers(0, 3, n).tolist()
        p = rng.integers(0, 3, n).tolist()
        got = (balanced_accuracy(p, t), weighted_f1(p, t), balanced_mae(p, t))
        worst = max(worst, *(abs(a - b) for a, b in zip(got, _loop_metrics(p, t))))
    ok = criterion("1", worst <= 1e-9, f"max abs error {worst:.2e} over 3 hand + 100 random cases")
    assert ok


# ---------------------------------------------------------------------------
# 2. gradient integrity


def test_criterion_2_gradient_integrity(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    clf = ClassifierModel(ClassifierConfig(), 4, 16, rng, dtype=np.float64)
    mask = rng.random((4, 4)) < 0.6
    mask[:, 0] = True
    batch = (rng.standard_normal((4, 4, 16)) * mask[:, :, None], mask, rng.integers(0, 3, 4))
    rep_c = grad_check(clf, batch, max_entries=64)
    pair = QNetworkPair.create(4, 16, AgentConfig(), np.random.default_rng(1))
    qb = (rng.standard_normal((8, 64)), rng.integers(0, 5, 8), rng.standard_normal(8))
    reps_q = [grad_check(net.astype(np.float64), qb, max_entries=512) for net in (pair.online, pair.target)]
    elapsed = time.perf_counter() - t0
    errs = [rep_c.max_rel_error] + [r.max_rel_error for r in reps_q]
    ok = all(r.passed for r in [rep_c, *reps_q]) and max(errs) < 1e-4 and elapsed < 120
    criterion("2", ok, f"max rel error classifier {errs[0]:.2e} ({rep_c.n_checked} entries), "
                       f"Q online {errs[1]:.2e}, Q target {errs[2]:.2e}; {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# 3. masking contracts


def test_criterion_3_masking(criterion):
    rng = np.random.default_rng(3)
    mha = MultiHeadAttention("fuzz", 64, 8, rng)
    leaks = 0
    for _ in range(1000):
        B, S = int(rng.integers(1, 5)), int(rng.integers(1, 6))
        km = rng.random((B, S)) < rng.uniform(0.1, 0.9)
        km[np.arange(B), rng.integers(0, S, B)] = True
        x = (rng.standard_normal((B, S, 64)) * rng.uniform(0.01, 1e3)).astype(np.float32)
        _, w = multi_head_attention(x, x, x, km, 8, mha)
        leaks += int(np.count_nonzero(w[np.broadcast_to(~km[:, None, None, :], w.shape)]))
    ok_a = criterion("3a", leaks == 0, f"{leaks} nonzero weights on masked keys in 1000 cases")

    model = ClassifierModel(ClassifierConfig(), 4, 16, np.random.default_rng(4))
    mismatched = 0
    for _ in range(1000):
        mask = code_to_mask(int(rng.integers(0, 16)), 4)
        x = rng.standard_normal((4, 16)).astype(np.float32) * mask[:, None]
        noisy = x + (rng.standard_normal((4, 16)) * 100).astype(np.float32) * ~mask[:, None]
        a, _ = model.forward(x[None], mask[None])
        b, _ = model.forward((noisy * mask[:, None])[None], mask[None])
        mismatched += int(not np.array_equal(a, b))
    ok_b = criterion("3b", mismatched == 0, f"{mismatched}/1000 logit mismatches after perturb+zero")

    masks = sample_train_masks(np.random.default_rng(5), 1000, 4, 0.5)
    rate = float((~masks).mean())
    ok_c = criterion("3c", abs(rate - 0.5) <= 0.03, f"training mask rate {rate:.4f}")
    assert ok_a and ok_b and ok_c


# ---------------------------------------------------------------------------
# 4. DDQN target oracle


def _const_net(values):
    net = QNetwork(3, len(values), hidden=(4, 4), rng=np.random.default_rng(0))
    net.layers[-1].W.value[:] = 0.0
    net.layers[-1].b.value[:] = values
    return net


def test_criterion_4_ddqn_target(criterion):
    online, target = _const_net([0.1, 0.5, 0.2]), _const_net([1.0, 2.0, 3.0])
    y = ddqn_target([0.98, 0.0, 0.0], np.zeros((3, 3), np.float32),
                    np.array([[True] * 3, [True] * 3, [True, False, True]]),
                    [True, False, False], online, target, 1.0)
    ok = criterion("4", y.tolist() == [0.98, 2.0, 3.0], f"targets {y.tolist()} (expected [0.98, 2.0, 3.0])")
    assert ok


# ---------------------------------------------------------------------------
# 5. environment contract


def test_criterion_5_environment(criterion):
    rng = np.random.default_rng(6)
    s = StudyRecord("e", 1, tuple(ViewSlot("V", rng.standard_normal(4)) for _ in range(4)))
    right, wrong = (lambda *_: 1), (lambda *_: 0)
    st_ = reset(s)
    for i in (0, 2):
        st_, _, _ = step(s, st_, Action.acquire(i), RewardSpec(0.01), right)
    r1 = step(s, st_, Action.terminate(), RewardSpec(0.01), right)[1]
    st_ = reset(s)
    for i in (0, 1, 3):
        st_, _, _ = step(s, st_, Action.acquire(i), RewardSpec(0.1), wrong)
    r2 = step(s, st_, Action.terminate(), RewardSpec(0.1), wrong)[1]
    problems = 0
    for trial in range(10_000):
        reselect = trial % 2 == 1
        st_, done, n, rewards = reset(s), False, 0, []
        while not done:
            a = Action.from_index(int(rng.choice(np.flatnonzero(action_mask(st_, reselect)))))
            st_, r, done = step(s, st_, a, RewardSpec(0.1), right, reselect)
            rewards.append(r)
            n += 1
        problems += int(n > 5 or any(r != 0.0 for r in rewards[:-1])
                        or (not a.is_terminate and rewards[-1] != 0.0))
    ok = abs(r1 - 0.98) < 1e-12 and abs(r2 + 0.3) < 1e-12 and problems == 0
    criterion("5", ok, f"rewards {r1:.2f} / {r2:.2f}; {problems} violations in 10^4 random episodes")
    assert ok


# ---------------------------------------------------------------------------
# 6. overfit


def test_criterion_6_overfit(criterion):
    t0 = time.perf_counter()
    toy = generate(GeneratorSpec(n_studies=16, noise_sigma=0.0, seed=0))
    model = train_classifier(toy, toy, ClassifierConfig(epochs=200), seed=0)
    bacc = full_acquisition_bacc(model, toy)
    elapsed = time.perf_counter() - t0
    first = next((r["epoch"] for r in model.train_history if r["val_bacc"] == 1.0), None)
    ok = criterion("6", bacc == 1.0 and elapsed < 60,
                   f"train bACC {bacc:.3f}, first reached at epoch {first}, {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# 7 / 9. synthetic benchmark


@pytest.fixture(scope="module")
def bench():
    t0 = time.perf_counter()
    records = generate(BENCH)
    train, val, test = split_dataset(records, seed=0)
    clf = train_classifier(train, val, ClassifierConfig(), seed=0)
    cache = MaskLabelCache.build(clf, train + val + test)
    cfg = BENCH_AGENT.replace(seed=0)
    pair, rows = train_agent(train, val, cache, RewardSpec(0.05), cfg)
    episodes = rollout_all(pair.online, cache, test, RewardSpec(0.05), cfg)
    return dict(train=train, val=val, test=test, clf=clf, cache=cache, pair=pair, rows=rows,
                episodes=episodes, seconds=time.perf_counter() - t0)


def test_criterion_7_benchmark(bench, criterion):
    test = bench["test"]
    full = (1 << 4) - 1
    clf_bacc = balanced_accuracy([bench["cache"].label_for(s.study_id, full) for s in test],
                                 [s.label for s in test])
    bayes_bacc = balanced_accuracy([bayes_oracle(apply_mask(s, [1] * 4), BENCH) for s in test],
                                   [s.label for s in test])
    ok_a = criterion("7a", clf_bacc >= 0.92 and bayes_bacc >= 0.97,
                     f"classifier full-acquisition test bACC {clf_bacc:.4f}, Bayes oracle {bayes_bacc:.4f}")
    rep = evaluate_episodes(bench["episodes"], 4)
    ok_b = criterion("7b", rep.bacc >= clf_bacc - 0.03 and rep.acquired_count_mean <= 2.4,
                     f"agent test bACC {rep.bacc:.4f} (gap {clf_bacc - rep.bacc:+.4f}), mean count "
                     f"{rep.acquired_count_mean:.3f}, ratio {rep.acquired_ratio:.3f}; "
                     f"benchmark {bench['seconds'] / 60:.1f} min")
    assert ok_a and ok_b


def test_criterion_9_pathways(bench, criterion):
    tree = pathway_tree(bench["episodes"], bench["test"][0].slot_names())
    violations = tree.conservation_violations()
    one_each = [sum(e.terminal_mask[:2]) == 1 and sum(e.terminal_mask[2:]) == 1 and not e.timeout
                for e in bench["episodes"]]
    frac = float(np.mean(one_each))
    ok = criterion("9", not violations and frac >= 0.6,
                   f"{len(violations)} conservation violations; {frac:.3f} of test episodes take "
                   f"exactly one PLAX and one PSAX clip")
    assert ok


# ---------------------------------------------------------------------------
# 8. lambda monotonicity


def test_criterion_8_lambda_monotonicity(criterion):
    records = generate(SWEEP_DATA)
    train, val, test = split_dataset(records, seed=0)
    clf = train_classifier(train, val, ClassifierConfig(), seed=0)
    cache = MaskLabelCache.build(clf, train + val + test)
    rows = lambda_sweep(SWEEP_LAMBDAS + (5.0,), train, val, test, cache, BENCH_AGENT, seeds=(0, 1, 2))
    by_lam = {r.lam: r for r in rows}
    counts = [by_lam[lam].count for lam in SWEEP_LAMBDAS]
    steps_ok = all(b <= a + 0.15 for a, b in zip(counts, counts[1:]))
    top = by_lam[5.0].count
    failed = [r.lam for r in rows if r.failed]
    ok = criterion("8", steps_ok and top <= 0.2 and not failed,
                   "mean counts " + ", ".join(f"{lam}:{c:.3f}" for lam, c in zip(SWEEP_LAMBDAS, counts))
                   + f", 5.0:{top:.3f}")
    assert ok


# ---------------------------------------------------------------------------
# 10. determinism


def _outputs(out):
    return {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.name != "meta.json"}


def test_criterion_10_determinism(tmp_path, criterion, capsys):
    cfg = "configs/toy.json"

    def pipeline(root):
        d, c, a = root / "d", root / "c", root / "a"
        data = str(d / "dataset.jsonl")
        cmds = [
            ["gen-data", "--config", cfg, "--out", str(d)],
            ["train-classifier", "--config", cfg, "--data", data, "--out", str(c)],
            ["train-agent", "--config", cfg, "--data", data, "--classifier-ckpt", str(c / "classifier.json"),
             "--out", str(a)],
            ["eval", "--config", cfg, "--data", data, "--classifier-ckpt", str(c / "classifier.json"),
             "--agent-ckpt", str(a / "agent.json"), "--out", str(root / "e")],
            ["sweep", "--config", cfg, "--data", data, "--classifier-ckpt", str(c / "classifier.json"),
             "--out", str(root / "s")],
            ["pathway", "--config", cfg, "--data", data, "--classifier-ckpt", str(c / "classifier.json"),
             "--agent-ckpt", str(a / "agent.json"), "--out", str(root / "p")],
        ]
        for args in cmds:
            assert main(args) == 0, capsys.readouterr().err
        return {sub: _outputs(root / sub) for sub in "dcaesp"}

    first = pipeline(tmp_path / "run")
    shutil.move(str(tmp_path / "run"), str(tmp_path / "run1"))
    second = pipeline(tmp_path / "run")
    diffs = [f"{k}/{n}" for k in first for n in first[k] | second[k]
             if first[k].get(n) != second[k].get(n)]
    n_files = sum(len(v) for v in first.values())
    ok = criterion("10", not diffs, f"{n_files} artifacts compared across 6 commands; differing: {diffs or 'none'}")
    assert ok
