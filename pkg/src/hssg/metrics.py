"""Evaluation metrics: top-k node accuracy, macro predicate recall,
top-k triple recall without graph constraints, and unseen-node accuracy.

Per-frame results are pooled as counts so aggregation over frames is
order-independent; fractions are formed once at report time.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

PREDICATE_THRESHOLD = 0.5
NG_RECALL_KS = (50, 100)


def _topk_hits(node_logits: np.ndarray, targets: np.ndarray, k: int) -> np.ndarray:
    """Boolean per node: true class among the k highest logits.

    Ties prefer the lower class index (stable sort on descending logits).
    """
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    order = np.argsort(-node_logits, axis=1, kind="stable")
    return (order[:, :k] == np.asarray(targets)[:, None]).any(axis=1)


def accuracy_at_k(node_logits, targets, k: int) -> float:
    logits = np.asarray(node_logits, dtype=np.float64)
    if logits.shape[0] == 0:
        return 0.0
    return float(_topk_hits(logits, targets, k).mean())


def unseen_accuracy(node_logits, targets, unseen_mask, k: int) -> float:
    mask = np.asarray(unseen_mask, dtype=bool)
    if not mask.any():
        return 0.0
    logits = np.asarray(node_logits, dtype=np.float64)[mask]
    return float(_topk_hits(logits, np.asarray(targets)[mask], k).mean())


def _recall_counts(edge_logits: np.ndarray, targets: np.ndarray, num_predicates: int,
                   cutoff: float = 0.0):
    """(tp, fn) per predicate class; positive iff sigmoid(logit) >= threshold,
    expressed as logit >= cutoff."""
    tp = np.zeros(num_predicates, dtype=np.int64)
    fn = np.zeros(num_predicates, dtype=np.int64)
    if edge_logits.shape[0]:
        positive = edge_logits >= cutoff
        actual = targets > 0.5
        tp += (positive & actual).sum(axis=0)
        fn += (~positive & actual).sum(axis=0)
    return tp, fn


def mean_predicate_recall(edge_logits, targets, threshold: float = PREDICATE_THRESHOLD) -> float:
    """Macro-mean recall over predicate classes with at least one positive."""
    logits = np.asarray(edge_logits, dtype=np.float64)
    targets = np.asarray(targets)
    cutoff = float(np.log(threshold / (1.0 - threshold)))
    tp, fn = _recall_counts(logits, targets, targets.shape[1] if targets.ndim == 2 else 0, cutoff)
    present = (tp + fn) > 0
    if not present.any():
        return 0.0
    return float((tp[present] / (tp[present] + fn[present])).mean())


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def _softmax(x):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _ng_counts(node_logits, edge_logits, edges, node_targets, gt_triples, k: int):
    """(detected, total) ground-truth triples for top-k candidate scoring.

    Candidates are every (directed edge, predicate) pair; a candidate's
    score is subject top-1 confidence x predicate sigmoid x object top-1
    confidence. A ground-truth triple counts as detected only if its
    candidate ranks in the top k and both endpoint argmax classes are
    correct. Score ties rank by (edge index, predicate index).
    """
    if k <= 0:
        raise ConfigError(f"ng-recall k must be positive, got {k}")
    total = len(gt_triples)
    if total == 0:
        return 0, 0
    node_logits = np.asarray(node_logits, dtype=np.float64)
    edge_logits = np.asarray(edge_logits, dtype=np.float64)
    if edge_logits.shape[0] == 0:
        return 0, total

    prob = _softmax(node_logits)
    node_conf = prob.max(axis=1)
    node_pred = prob.argmax(axis=1)
    sig = _sigmoid(edge_logits)

    n_e, n_p = sig.shape
    src = np.array([e[0] for e in edges])
    dst = np.array([e[1] for e in edges])
    scores = (node_conf[src] * node_conf[dst])[:, None] * sig  # [e, p]

    flat = scores.reshape(-1)  # index e * n_p + p keeps the required tie order
    k_eff = min(k, flat.size)
    top = np.argsort(-flat, kind="stable")[:k_eff]
    top_set = set(int(v) for v in top)

    pair_to_edge = {(int(s), int(d)): idx for idx, (s, d) in enumerate(edges)}
    detected = 0
    for i, p, j in gt_triples:
        e = pair_to_edge.get((i, j))
        if e is None:
            continue
        if e * n_p + p not in top_set:
            continue
        if node_pred[i] == node_targets[i] and node_pred[j] == node_targets[j]:
            detected += 1
    return detected, total


def ng_recall_at_k(node_logits, edge_logits, edges, node_targets, gt_triples, k: int) -> float:
    detected, total = _ng_counts(node_logits, edge_logits, edges, node_targets, gt_triples, k)
    if total == 0:
        return 0.0
    return detected / total


@dataclass
class MetricReport:
    acc1: float
    acc5: float
    mean_recall: float
    ng_recall: dict            # k -> fraction
    unseen_acc1: float
    unseen_acc5: float
    counts: dict               # nodes, edges, triples, unseen_nodes

    def to_json(self) -> str:
        payload = {
            "acc1": self.acc1,
            "acc5": self.acc5,
            "mean_recall": self.mean_recall,
            "ng_recall": {str(k): v for k, v in sorted(self.ng_recall.items())},
            "unseen_acc1": self.unseen_acc1,
            "unseen_acc5": self.unseen_acc5,
            "counts": {k: int(v) for k, v in sorted(self.counts.items())},
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        obj = json.loads(text)
        return cls(
            acc1=obj["acc1"], acc5=obj["acc5"], mean_recall=obj["mean_recall"],
            ng_recall={int(k): v for k, v in obj["ng_recall"].items()},
            unseen_acc1=obj["unseen_acc1"], unseen_acc5=obj["unseen_acc5"],
            counts=obj["counts"],
        )


class MetricAccumulator:
    """Pools frame-level counts; all pooling is order-independent."""

    def __init__(self, num_predicates: int, ks=NG_RECALL_KS):
        self.num_predicates = num_predicates
        self.ks = tuple(ks)
        self.top1 = 0
        self.top5 = 0
        self.nodes = 0
        self.unseen_top1 = 0
        self.unseen_top5 = 0
        self.unseen_nodes = 0
        self.tp = np.zeros(num_predicates, dtype=np.int64)
        self.fn = np.zeros(num_predicates, dtype=np.int64)
        self.edges = 0
        self.ng_detected = {k: 0 for k in self.ks}
        self.ng_total = {k: 0 for k in self.ks}

    def update(self, node_logits, node_targets, edge_logits, edge_targets,
               edges, gt_triples, unseen_mask):
        node_logits = np.asarray(node_logits, dtype=np.float64)
        node_targets = np.asarray(node_targets)
        n = node_logits.shape[0]
        if n:
            hits1 = _topk_hits(node_logits, node_targets, 1)
            hits5 = _topk_hits(node_logits, node_targets, 5)
            self.top1 += int(hits1.sum())
            self.top5 += int(hits5.sum())
            self.nodes += n
            mask = np.asarray(unseen_mask, dtype=bool)
            self.unseen_top1 += int(hits1[mask].sum())
            self.unseen_top5 += int(hits5[mask].sum())
            self.unseen_nodes += int(mask.sum())
        edge_logits = np.asarray(edge_logits, dtype=np.float64)
        if edge_logits.shape[0]:
            tp, fn = _recall_counts(edge_logits, np.asarray(edge_targets), self.num_predicates)
            self.tp += tp
            self.fn += fn
        self.edges += edge_logits.shape[0]
        for k in self.ks:
            det, tot = _ng_counts(node_logits, edge_logits, edges, node_targets, gt_triples, k)
            self.ng_detected[k] += det
            self.ng_total[k] += tot

    def report(self) -> MetricReport:
        def frac(num, den):
            return float(num / den) if den else 0.0

        present = (self.tp + self.fn) > 0
        mean_recall = (
            float((self.tp[present] / (self.tp[present] + self.fn[present])).mean())
            if present.any() else 0.0
        )
        return MetricReport(
            acc1=frac(self.top1, self.nodes),
            acc5=frac(self.top5, self.nodes),
            mean_recall=mean_recall,
            ng_recall={k: frac(self.ng_detected[k], self.ng_total[k]) for k in self.ks},
            unseen_acc1=frac(self.unseen_top1, self.unseen_nodes),
            unseen_acc5=frac(self.unseen_top5, self.unseen_nodes),
            counts={
                "nodes": self.nodes,
                "edges": self.edges,
                "triples": self.ng_total[self.ks[0]] if self.ks else 0,
                "unseen_nodes": self.unseen_nodes,
            },
        )
