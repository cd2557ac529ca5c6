"""Evaluation: classification scores, acquisition statistics, lambda sweeps,
F1-versus-budget curves and pathway trees."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

CLASSES = (0, 1, 2)


def _as_arrays(preds, labels):
    preds = np.asarray(list(preds), dtype=np.int64)
    labels = np.asarray(list(labels), dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError(f"preds and labels differ in length ({preds.size} vs {labels.size})")
    if labels.size == 0:
        raise ValueError("cannot score an empty evaluation set")
    return preds, labels


def confusion_matrix(preds, labels, n_classes: int = 3) -> np.ndarray:
    """Rows are true labels, columns predictions."""
    preds, labels = _as_arrays(preds, labels)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def balanced_accuracy(preds, labels) -> float:
    """Mean within-class recall over classes present in ``labels``."""
    preds, labels = _as_arrays(preds, labels)
    recalls = [np.mean(preds[labels == c] == c) for c in np.unique(labels)]
    return float(np.mean(recalls))


def weighted_f1(preds, labels) -> float:
    """Per-class F1 averaged with weights proportional to class support."""
    preds, labels = _as_arrays(preds, labels)
    total = 0.0
    for c in np.unique(labels):
        tp = np.sum((preds == c) & (labels == c))
        fp = np.sum((preds == c) & (labels != c))
        fn = np.sum((preds != c) & (labels == c))
        f1 = 2 * tp / (2 * tp + fp + fn) if tp else 0.0
        total += f1 * np.sum(labels == c)
    return float(total / labels.size)


def balanced_mae(preds, labels) -> float:
    """Mean absolute error per true class, averaged over present classes."""
    preds, labels = _as_arrays(preds, labels)
    errs = [np.mean(np.abs(preds[labels == c] - c)) for c in np.unique(labels)]
    return float(np.mean(errs))


def acquisition_stats(episodes, n_slots: int):
    """Returns ``(ratio, count_mean)`` over the episodes' terminal masks."""
    counts = [int(np.sum(e.terminal_mask)) for e in episodes]
    if not counts:
        raise ValueError("no episodes")
    count_mean = float(np.mean(counts))
    return count_mean / n_slots, count_mean


@dataclass
class EvalReport:
    bacc: float
    weighted_f1: float
    bmae: float
    acquired_ratio: float
    acquired_count_mean: float
    confusion: list[list[int]]
    n_studies: int
    absent_classes: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "bacc": self.bacc,
            "weighted_f1": self.weighted_f1,
            "bmae": self.bmae,
            "acquired_ratio": self.acquired_ratio,
            "acquired_count_mean": self.acquired_count_mean,
            "confusion": self.confusion,
            "n_studies": self.n_studies,
            "absent_classes": self.absent_classes,
        }


def make_report(preds, labels, counts, n_slots: int) -> EvalReport:
    preds, labels = _as_arrays(preds, labels)
    count_mean = float(np.mean(counts))
    return EvalReport(
        bacc=balanced_accuracy(preds, labels),
        weighted_f1=weighted_f1(preds, labels),
        bmae=balanced_mae(preds, labels),
        acquired_ratio=count_mean / n_slots,
        acquired_count_mean=count_mean,
        confusion=confusion_matrix(preds, labels).tolist(),
        n_studies=int(labels.size),
        absent_classes=[c for c in CLASSES if not np.any(labels == c)],
    )


def evaluate_episodes(episodes, n_slots: int) -> EvalReport:
    return make_report(
        [e.predicted for e in episodes],
        [e.true_label for e in episodes],
        [int(np.sum(e.terminal_mask)) for e in episodes],
        n_slots,
    )


# ---------------------------------------------------------------------------
# Lambda sweep

SWEEP_HEADER = ["lambda", "bacc_mean", "bacc_std", "f1_mean", "f1_std",
                "bmae_mean", "bmae_std", "ratio", "count"]


@dataclass
class SweepRow:
    lam: float
    bacc_mean: float
    bacc_std: float
    f1_mean: float
    f1_std: float
    bmae_mean: float
    bmae_std: float
    ratio: float
    count: float
    count_std: float = 0.0
    per_seed: list[dict] = field(default_factory=list)
    failed: bool = False

    def csv_fields(self) -> list[str]:
        if self.failed:
            return [repr(self.lam)] + ["FAILED"] * (len(SWEEP_HEADER) - 1)
        vals = [self.lam, self.bacc_mean, self.bacc_std, self.f1_mean, self.f1_std,
                self.bmae_mean, self.bmae_std, self.ratio, self.count]
        return [repr(float(v)) for v in vals]


def _std(xs) -> float:
    return float(np.std(xs, ddof=1)) if len(xs) > 1 else 0.0


def _sweep_job(args):
    from .agent import rollout_all, train_agent
    from .env import RewardSpec

    lam, seed, train, val, test, predictor, agent_config = args
    cfg = agent_config.replace(seed=seed)
    try:
        pair, _ = train_agent(train, val, predictor, RewardSpec(lam), cfg)
        episodes = rollout_all(pair.online, predictor, test, RewardSpec(lam), cfg)
    except Exception as e:  # a failed run becomes a marked row, not a crashed sweep
        log.warning("sweep run lambda=%s seed=%s failed: %s", lam, seed, e)
        return lam, seed, None
    rep = evaluate_episodes(episodes, test[0].n_slots)
    return lam, seed, rep


def lambda_sweep(lambdas: Iterable[float], train, val, test, classifier, agent_config,
                 seeds: Sequence[int] = (0, 1, 2), workers: int | None = None) -> list[SweepRow]:
    """Train one agent per (lambda, seed) and report mean/std of test metrics per lambda.

    ``workers`` defaults to ``$AFA_THREADS`` (1 when unset).
    """
    from .classifier import ClassifierModel, MaskLabelCache

    predictor = classifier
    if isinstance(classifier, ClassifierModel):
        predictor = MaskLabelCache.build(classifier, list(train) + list(val) + list(test))
    jobs = [(float(lam), int(s), train, val, test, predictor, agent_config)
            for lam in lambdas for s in seeds]
    if workers is None:
        workers = int(os.environ.get("AFA_THREADS", "1"))
    if workers > 1 and len(jobs) > 1:
        from multiprocessing import get_context

        with get_context("spawn").Pool(min(workers, len(jobs))) as pool:
            results = pool.map(_sweep_job, jobs)
    else:
        results = [_sweep_job(j) for j in jobs]

    by_lam: dict[float, list] = {}
    for lam, seed, rep in results:
        by_lam.setdefault(lam, []).append((seed, rep))
    rows = []
    for lam in sorted(by_lam):
        runs = by_lam[lam]
        if any(rep is None for _, rep in runs):
            rows.append(SweepRow(lam, *([float("nan")] * 8), failed=True))
            continue
        reps = [rep for _, rep in runs]
        counts = [r.acquired_count_mean for r in reps]
        rows.append(SweepRow(
            lam=lam,
            bacc_mean=float(np.mean([r.bacc for r in reps])),
            bacc_std=_std([r.bacc for r in reps]),
            f1_mean=float(np.mean([r.weighted_f1 for r in reps])),
            f1_std=_std([r.weighted_f1 for r in reps]),
            bmae_mean=float(np.mean([r.bmae for r in reps])),
            bmae_std=_std([r.bmae for r in reps]),
            ratio=float(np.mean([r.acquired_ratio for r in reps])),
            count=float(np.mean(counts)),
            count_std=_std(counts),
            per_seed=[{"seed": s, **r.to_dict()} for s, r in runs],
        ))
    return rows


def write_sweep_csv(rows: Sequence[SweepRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for r in sorted(rows, key=lambda r: r.lam):
            w.writerow(r.csv_fields())


# ---------------------------------------------------------------------------
# F1 versus acquired-count curves

CURVE_HEADER = ["series", "count", "f1_mean", "f1_std"]


@dataclass(frozen=True, order=True)
class CurvePoint:
    series: str
    count: float
    f1_mean: float
    f1_std: float


def random_budget_masks(rng: np.random.Generator, n_studies: int, n_slots: int, budget: float):
    """Uniformly random subsets whose sizes average ``budget``.

    Each study gets ``floor(budget)`` or ``floor(budget) + 1`` slots, the
    latter with probability equal to the fractional part.
    """
    if not 0 <= budget <= n_slots:
        raise ValueError(f"budget {budget} outside [0, {n_slots}]")
    base = int(np.floor(budget))
    frac = budget - base
    masks = np.zeros((n_studies, n_slots), dtype=bool)
    for i in range(n_studies):
        k = base + int(rng.random() < frac) if base < n_slots else base
        masks[i, rng.choice(n_slots, size=k, replace=False)] = True
    return masks


def random_mask_baseline(predictor, studies, budgets: Iterable[float], seeds=(0, 1, 2)) -> list[CurvePoint]:
    """Weighted F1 of the classifier on random subsets at each budget (no agent)."""
    from .core import mask_to_code

    labels = [s.label for s in studies]
    n_slots = studies[0].n_slots
    points = []
    for budget in budgets:
        f1s = []
        for seed in seeds:
            rng = np.random.default_rng([int(seed), int(round(budget * 1000))])
            masks = random_budget_masks(rng, len(studies), n_slots, budget)
            preds = [predictor.label_for(s.study_id, mask_to_code(m)) for s, m in zip(studies, masks)]
            f1s.append(weighted_f1(preds, labels))
        points.append(CurvePoint("without_rl", float(budget), float(np.mean(f1s)), _std(f1s)))
    return points


def f1_vs_count_curve(sweep_rows: Sequence[SweepRow], baseline: Sequence[CurvePoint]) -> list[CurvePoint]:
    pts = [CurvePoint("with_rl", r.count, r.f1_mean, r.f1_std) for r in sweep_rows if not r.failed]
    pts += list(baseline)
    return sorted(pts)


def write_curve_csv(points: Sequence[CurvePoint], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for p in sorted(points):
            w.writerow([p.series, repr(float(p.count)), repr(float(p.f1_mean)), repr(float(p.f1_std))])


def read_curve_csv(path) -> list[CurvePoint]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [CurvePoint(r["series"], float(r["count"]), float(r["f1_mean"]), float(r["f1_std"])) for r in rows]


# ---------------------------------------------------------------------------
# Pathway trees


@dataclass
class PathwayTree:
    """Greedy-rollout paths aggregated by acquired-slot set.

    ``nodes`` maps a frozenset of slot indices to ``{"count", "terminal"}``;
    ``edges`` maps ``(parent, child)`` to ``{"slot", "count"}``.
    """

    slot_names: list[str]
    nodes: dict[frozenset, dict] = field(default_factory=dict)
    edges: dict[tuple, dict] = field(default_factory=dict)

    @property
    def root(self) -> frozenset:
        return frozenset()

    def node_label(self, key: frozenset) -> str:
        if not key:
            return "{}"
        return "{" + ", ".join(self.slot_names[i] for i in sorted(key)) + "}"

    def out_count(self, key: frozenset) -> int:
        return sum(e["count"] for (p, _), e in self.edges.items() if p == key)

    def conservation_violations(self) -> list[frozenset]:
        return [k for k, n in self.nodes.items() if n["terminal"] + self.out_count(k) != n["count"]]

    def to_dict(self) -> dict:
        key = lambda s: sorted(s)
        return {
            "slot_names": self.slot_names,
            "nodes": [
                {"acquired": sorted(k), "label": self.node_label(k), **self.nodes[k]}
                for k in sorted(self.nodes, key=lambda s: (len(s), key(s)))
            ],
            "edges": [
                {"from": sorted(p), "to": sorted(c), **e}
                for (p, c), e in sorted(self.edges.items(),
                                        key=lambda kv: (len(kv[0][0]), key(kv[0][0]), key(kv[0][1])))
            ],
        }

    def to_dot(self) -> str:
        ids = {k: f"n{i}" for i, k in enumerate(sorted(self.nodes, key=lambda s: (len(s), sorted(s))))}
        lines = ["digraph pathways {", "\trankdir=TB;", "\tnode [shape=box];"]
        for k, nid in ids.items():
            n = self.nodes[k]
            lines.append(f'\t{nid} [label="{self.node_label(k)}\\nn={n["count"]}, stop={n["terminal"]}"];')
        for (p, c), e in sorted(self.edges.items(), key=lambda kv: (ids[kv[0][0]], ids[kv[0][1]])):
            lines.append(f'\t{ids[p]} -> {ids[c]} [label="{self.slot_names[e["slot"]]} ({e["count"]})"];')
        lines.append("}")
        return "\n".join(lines) + "\n"


def pathway_tree(episodes, slot_names: Sequence[str]) -> PathwayTree:
    tree = PathwayTree(slot_names=list(slot_names))
    tree.nodes[frozenset()] = {"count": 0, "terminal": 0}
    for ep in episodes:
        cur = frozenset()
        tree.nodes[cur]["count"] += 1
        for act in ep.actions:
            if act.is_terminate:
                break
            nxt = cur | {act.slot}
            if nxt == cur:  # re-acquisition leaves the set unchanged
                continue
            tree.nodes.setdefault(nxt, {"count": 0, "terminal": 0})["count"] += 1
            edge = tree.edges.setdefault((cur, nxt), {"slot": act.slot, "count": 0})
            edge["count"] += 1
            cur = nxt
        tree.nodes[cur]["terminal"] += 1
    return tree
