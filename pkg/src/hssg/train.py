"""Loss, optimization schedule, early stopping, and the incremental
evaluation protocol.

The node term is class-weighted cross-entropy (one true class per node);
the edge term is predicate-weighted binary cross-entropy (multi-label)
whose positive half is scaled by alpha. Class weights follow the inverse
log-frequency rule with the denominator clamped at 0.5 so absent classes
stay finite. Only local nodes and local near edges enter the loss.

Training consumes one frame graph per optimizer step. By default the
global layers of training graphs carry ground-truth label features
(teacher forcing); evaluation always feeds the model its own previous
predictions, merging frame by frame.
"""

import json
from dataclasses import dataclass, field, replace

import numpy as np

from .datagen import LabelSpace
from .errors import ConfigError, ContractError, NumericError
from .metrics import MetricAccumulator, MetricReport
from .model import ModelConfig, forward, init_params
from .optim import AdamState, adam_step, clear_grads, clone_params, collect_grads
from .rng import derive_seed, stream_rng
from .scene import (
    FramePredictions,
    LabelFeatureBuilder,
    build_collision_layer,
    build_local_graph,
    empty_graph,
    falsify_labels,
    match_instances,
    merge_local_into_global,
)
from .tensor import (
    Tensor,
    add,
    backward,
    clamp,
    log,
    matmul,
    mean_all,
    mul,
    neg,
    recording,
    scale,
    sigmoid,
    softmax_rows,
    sub,
    Tape,
)

SIGMOID_CLAMP = 1e-7
WEIGHT_LOG_FLOOR = 0.5


@dataclass(frozen=True)
class LossWeights:
    node: np.ndarray       # (num_object_classes,)
    edge: np.ndarray       # (num_predicate_classes,)
    alpha: float = 40.0

    def validate(self):
        if not (np.all(np.isfinite(self.node)) and np.all(self.node > 0)):
            raise ConfigError("node weights must be finite and positive")
        if not (np.all(np.isfinite(self.edge)) and np.all(self.edge > 0)):
            raise ConfigError("edge weights must be finite and positive")


def class_weights(node_counts, edge_counts, alpha: float = 40.0) -> LossWeights:
    """Inverse log-frequency weights: 10/log(n) for nodes, 10/log(n) + 1
    for predicates, natural log, denominator clamped at 0.5."""
    node_counts = np.asarray(node_counts, dtype=np.float64)
    edge_counts = np.asarray(edge_counts, dtype=np.float64)
    if np.any(node_counts < 0) or np.any(edge_counts < 0):
        raise ConfigError("class counts must be non-negative")
    with np.errstate(divide="ignore", invalid="ignore"):
        n_log = np.where(node_counts > 0, np.log(np.maximum(node_counts, 1e-12)), 0.0)
        e_log = np.where(edge_counts > 0, np.log(np.maximum(edge_counts, 1e-12)), 0.0)
    w_n = 10.0 / np.maximum(n_log, WEIGHT_LOG_FLOOR)
    w_e = 10.0 / np.maximum(e_log, WEIGHT_LOG_FLOOR) + 1.0
    return LossWeights(node=w_n.astype(np.float32), edge=w_e.astype(np.float32), alpha=alpha)


def composite_loss(node_logits: Tensor, node_targets, edge_logits: Tensor, edge_targets,
                   weights: LossWeights, alpha_mode: str = "positive") -> Tensor:
    """Weighted node cross-entropy plus alpha-scaled edge binary
    cross-entropy, both mean-reduced, summed.

    alpha_mode "positive" multiplies only the positive-label term inside
    the edge loss; "global" scales the whole edge term instead.
    """
    if alpha_mode not in ("positive", "global"):
        raise ConfigError(f"alpha_mode must be 'positive' or 'global', got {alpha_mode!r}")
    node_targets = np.asarray(node_targets, dtype=np.int64)
    n, n_classes = node_logits.data.shape
    if n == 0:
        raise ContractError("composite_loss needs at least one node")
    if node_targets.shape != (n,):
        raise ContractError(
            f"node targets shape {node_targets.shape} does not match logits {node_logits.data.shape}"
        )
    one_hot = np.zeros((n, n_classes), dtype=np.float32)
    one_hot[np.arange(n), node_targets] = 1.0
    picked = matmul(mul(softmax_rows(node_logits), Tensor(one_hot)),
                    Tensor(np.ones((n_classes, 1), dtype=np.float32)))
    ce = neg(log(clamp(picked, SIGMOID_CLAMP, 1.0)))
    node_w = weights.node[node_targets].reshape(n, 1)
    loss_n = mean_all(mul(ce, Tensor(node_w)))

    e = edge_logits.data.shape[0]
    if e == 0:
        return loss_n

    y = np.asarray(edge_targets, dtype=np.float32)
    if y.shape != edge_logits.data.shape:
        raise ContractError(
            f"edge targets shape {y.shape} does not match logits {edge_logits.data.shape}"
        )
    s = clamp(sigmoid(edge_logits), SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP)
    ones = Tensor(np.ones_like(y))
    pos = mul(Tensor(y), log(s))
    negt = mul(sub(ones, Tensor(y)), log(sub(ones, s)))
    if alpha_mode == "positive":
        inner = add(scale(pos, weights.alpha), negt)
    else:
        inner = add(pos, negt)
    w_mat = np.broadcast_to(weights.edge[None, :], y.shape).astype(np.float32).copy()
    loss_e = mean_all(neg(mul(inner, Tensor(w_mat))))
    if alpha_mode == "global":
        loss_e = scale(loss_e, weights.alpha)
    return add(loss_n, loss_e)


# ---------------------------------------------------------------------------
# schedules and stopping
# ---------------------------------------------------------------------------

VARIANT_DEFAULTS = {
    "homo_sage": (0.0001498, 30),
    "het_sage": (0.0001498, 30),
    "hgt": (0.0001, 20),
}


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 100
    patience: int = 5
    lr: float = None          # variant default when None
    gamma: float = 0.05
    step_size: int = None     # variant default when None
    seed: int = 0
    falsify: float = 0.0
    teacher_forcing: bool = True
    alpha: float = 40.0
    alpha_mode: str = "positive"

    def validate(self):
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError("gamma must be in (0, 1]")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if not 0.0 <= self.falsify <= 1.0:
            raise ConfigError("falsify must be in [0, 1]")

    def resolved(self, variant: str) -> "TrainConfig":
        lr, step = VARIANT_DEFAULTS[variant]
        return replace(
            self,
            lr=self.lr if self.lr is not None else lr,
            step_size=self.step_size if self.step_size is not None else step,
        )


def learning_rate(cfg: TrainConfig, epoch: int) -> float:
    """Step schedule: multiply by gamma once per step_size epochs (epoch is 1-based)."""
    return cfg.lr * cfg.gamma ** ((epoch - 1) // cfg.step_size)


class EarlyStopper:
    """Stop after `patience` consecutive epochs without strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("inf")
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, value: float) -> bool:
        if value < self.best:
            self.best = value
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


# ---------------------------------------------------------------------------
# training examples
# ---------------------------------------------------------------------------


@dataclass
class FrameExample:
    scene_id: str
    frame_index: int
    graph: object                 # HeteroSceneGraph with local + match layers set
    node_targets: np.ndarray      # (n,)
    edge_targets: np.ndarray      # (e, num_predicates)
    gt_triples: tuple             # (i, predicate, j) on local near edges
    unseen_mask: np.ndarray


def frame_targets(graph, num_predicates: int):
    node_targets = np.array([n.gt_class for n in graph.local_nodes], dtype=np.int64)
    edge_targets = np.zeros((len(graph.local_near), num_predicates), dtype=np.float32)
    triples = []
    for e, ((i, j), preds) in enumerate(zip(graph.local_near, graph.local_near_gt)):
        for p in preds:
            edge_targets[e, p] = 1.0
            triples.append((i, p, j))
    return node_targets, edge_targets, tuple(sorted(triples))


def gt_predictions(graph) -> FramePredictions:
    return FramePredictions(
        node_classes=tuple(n.gt_class for n in graph.local_nodes),
        edge_predicates=tuple(frozenset(s) for s in graph.local_near_gt),
    )


def build_training_examples(sequences, features: LabelFeatureBuilder, model_cfg: ModelConfig,
                            run_seed: int, falsify_fraction: float = 0.0):
    """Teacher-forced frame graphs: the global layer at frame t is built
    from ground truth merged over frames 0..t-1. Returns (examples,
    falsified-label count summed over all snapshots)."""
    examples = []
    falsified = 0
    need_collision = model_cfg.collision_layer != "none"
    for s_idx, seq in enumerate(sequences):
        graph = empty_graph(seq.label_space, features.mode)
        local_seed = derive_seed(run_seed, "local", seq.scene_id)
        falsify_seed = derive_seed(run_seed, "falsify", seq.scene_id)
        for frame in seq.frames:
            build_local_graph(graph, frame, local_seed)
            if not graph.local_nodes:
                continue
            match_instances(graph, "ground_truth")
            snap = graph.snapshot()
            if falsify_fraction > 0:
                falsified += falsify_labels(snap, falsify_fraction, falsify_seed, features)
            if need_collision:
                build_collision_layer(snap)
            node_t, edge_t, triples = frame_targets(snap, seq.label_space.num_predicates)
            examples.append(FrameExample(
                scene_id=seq.scene_id,
                frame_index=frame.frame_index,
                graph=snap,
                node_targets=node_t,
                edge_targets=edge_t,
                gt_triples=triples,
                unseen_mask=snap.unseen_local_mask(),
            ))
            merge_local_into_global(
                graph, gt_predictions(graph), frame.frame_index, local_seed, features,
                label_source="ground_truth",
            )
    return examples, falsified


def build_prediction_examples(sequences, features: LabelFeatureBuilder, model_cfg: ModelConfig,
                              params, run_seed: int, falsify_fraction: float = 0.0):
    """Like build_training_examples, but global label features come from the
    model's own predictions (no teacher forcing)."""
    examples = []
    need_collision = model_cfg.collision_layer != "none"
    for seq in sequences:
        graph = empty_graph(seq.label_space, features.mode)
        local_seed = derive_seed(run_seed, "local", seq.scene_id)
        falsify_seed = derive_seed(run_seed, "falsify", seq.scene_id)
        for frame in seq.frames:
            build_local_graph(graph, frame, local_seed)
            if not graph.local_nodes:
                continue
            match_instances(graph, "ground_truth")
            snap = graph.snapshot()
            if falsify_fraction > 0:
                falsify_labels(snap, falsify_fraction, falsify_seed, features)
            if need_collision:
                build_collision_layer(snap)
            node_t, edge_t, triples = frame_targets(snap, seq.label_space.num_predicates)
            examples.append(FrameExample(
                scene_id=seq.scene_id,
                frame_index=frame.frame_index,
                graph=snap,
                node_targets=node_t,
                edge_targets=edge_t,
                gt_triples=triples,
                unseen_mask=snap.unseen_local_mask(),
            ))
            node_logits, edge_logits = forward(snap, model_cfg, params, training=False)
            merge_local_into_global(
                graph, predictions_from_logits(node_logits, edge_logits),
                frame.frame_index, local_seed, features, label_source="prediction",
            )
    return examples


def count_classes(examples, label_space: LabelSpace):
    node_counts = np.zeros(label_space.num_objects, dtype=np.int64)
    edge_counts = np.zeros(label_space.num_predicates, dtype=np.int64)
    for ex in examples:
        np.add.at(node_counts, ex.node_targets, 1)
        edge_counts += ex.edge_targets.astype(np.int64).sum(axis=0)
    return node_counts, edge_counts


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: dict              # best parameters by validation loss
    last_params: dict
    best_epoch: int
    best_val: float
    history: list = field(default_factory=list)
    adam: AdamState = None
    weights: LossWeights = None


def _example_loss(example: FrameExample, model_cfg, params, weights, train_cfg,
                  training: bool, drop_stream=(0,)):
    node_logits, edge_logits = forward(example.graph, model_cfg, params,
                                       training=training, drop_stream=drop_stream)
    loss = composite_loss(node_logits, example.node_targets, edge_logits,
                          example.edge_targets, weights, train_cfg.alpha_mode)
    return loss


def _param_norms(params) -> str:
    worst = sorted(params, key=lambda k: -float(np.abs(params[k].data).max()))[:5]
    return ", ".join(f"{k}={float(np.linalg.norm(params[k].data)):.3g}" for k in worst)


def validation_loss(examples, model_cfg, params, weights, train_cfg) -> float:
    if not examples:
        return float("nan")
    total = 0.0
    for ex in examples:
        total += _example_loss(ex, model_cfg, params, weights, train_cfg, training=False).item()
    return total / len(examples)


def train(train_examples, val_examples, model_cfg: ModelConfig, train_cfg: TrainConfig,
          label_space: LabelSpace, params=None, adam: AdamState = None,
          start_epoch: int = 1, stopper: EarlyStopper = None, weights: LossWeights = None,
          on_epoch=None, refresh_examples=None) -> TrainResult:
    """Run up to max_epochs over shuffled frame graphs, one graph per step.

    Uses validation loss for early stopping and checkpoint selection; when
    the validation split is empty the epoch's mean training loss stands in
    (recorded as such in the history). `refresh_examples(params, epoch)`,
    when given, rebuilds the training set each epoch (used when global
    label features come from the model's own predictions).
    """
    model_cfg.validate()
    train_cfg = train_cfg.resolved(model_cfg.variant)
    train_cfg.validate()
    if not train_examples and refresh_examples is None:
        raise ContractError("no training examples")

    if weights is None:
        node_counts, edge_counts = count_classes(train_examples, label_space)
        weights = class_weights(node_counts, edge_counts, alpha=train_cfg.alpha)
    weights.validate()
    if params is None:
        params = init_params(model_cfg, train_cfg.seed)
    if adam is None:
        adam = AdamState(params)
    if stopper is None:
        stopper = EarlyStopper(train_cfg.patience)

    # None until an epoch improves; resumed runs keep their on-disk best
    # checkpoint unless this happens.
    best_params = None
    history = []
    seed = train_cfg.seed

    for epoch in range(start_epoch, train_cfg.max_epochs + 1):
        if refresh_examples is not None:
            train_examples = refresh_examples(params, epoch)
            if not train_examples:
                raise ContractError("refresh_examples produced no training examples")
        lr = learning_rate(train_cfg, epoch)
        order = np.arange(len(train_examples))
        stream_rng(seed, "epoch_order", epoch).shuffle(order)
        epoch_loss = 0.0
        for step, idx in enumerate(order):
            ex = train_examples[int(idx)]
            tape = Tape()
            with recording(tape):
                loss = _example_loss(ex, model_cfg, params, weights, train_cfg,
                                     training=True, drop_stream=(seed, "drop", epoch, step))
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(
                    f"non-finite loss at scene {ex.scene_id} frame {ex.frame_index} "
                    f"(epoch {epoch}, step {step}); largest parameter norms: {_param_norms(params)}"
                )
            epoch_loss += value
            clear_grads(params)
            backward(loss, params=params.values())
            adam_step(params, collect_grads(params), adam, lr)
        train_loss = epoch_loss / len(order)

        val_loss = validation_loss(val_examples, model_cfg, params, weights, train_cfg)
        stopping_value = train_loss if np.isnan(val_loss) else val_loss
        improved = stopper.update(epoch, stopping_value)
        if improved:
            best_params = clone_params(params)
        history.append({
            "epoch": epoch,
            "train_loss": train_loss,
            "val_loss": None if np.isnan(val_loss) else val_loss,
            "lr": lr,
        })
        if on_epoch is not None:
            on_epoch(epoch, history[-1], params, adam, stopper, best_params)
        if stopper.should_stop:
            break

    return TrainResult(
        params=best_params,
        last_params=params,
        best_epoch=stopper.best_epoch,
        best_val=stopper.best,
        history=history,
        adam=adam,
        weights=weights,
    )


# ---------------------------------------------------------------------------
# incremental evaluation
# ---------------------------------------------------------------------------


def predictions_from_logits(node_logits, edge_logits) -> FramePredictions:
    node_classes = tuple(int(c) for c in np.asarray(node_logits.data).argmax(axis=1))
    edge_sets = []
    for row in np.asarray(edge_logits.data):
        edge_sets.append(frozenset(int(p) for p in np.nonzero(row >= 0.0)[0]))
    return FramePredictions(node_classes=node_classes, edge_predicates=tuple(edge_sets))


def evaluate(sequences, model_cfg: ModelConfig, params, features: LabelFeatureBuilder,
             run_seed: int = 0, falsify_eval: float = 0.0, on_merged=None) -> MetricReport:
    """Stream each scene, predicting every frame against the global graph
    built from the model's own previous predictions, then merging.

    `falsify_eval` corrupts the label features the model sees at each
    frame without touching the underlying predicted graph. `on_merged`
    runs once per frame after its merge (graph export hook).
    """
    model_cfg.validate()
    space = sequences[0].label_space if sequences else None
    if space is not None and (space.num_objects != model_cfg.num_object_classes
                              or space.num_predicates != model_cfg.num_predicate_classes):
        raise ConfigError(
            f"label space ({space.num_objects} objects, {space.num_predicates} predicates) "
            f"does not match the model ({model_cfg.num_object_classes}, "
            f"{model_cfg.num_predicate_classes})"
        )
    acc = MetricAccumulator(model_cfg.num_predicate_classes)
    need_collision = model_cfg.collision_layer != "none"
    for seq in sequences:
        graph = empty_graph(seq.label_space, features.mode)
        local_seed = derive_seed(run_seed, "local", seq.scene_id)
        falsify_seed = derive_seed(run_seed, "falsify_eval", seq.scene_id)
        for frame in seq.frames:
            build_local_graph(graph, frame, local_seed)
            if graph.local_nodes:
                match_instances(graph, "tracker")
                view = graph
                if falsify_eval > 0:
                    view = graph.snapshot()
                    falsify_labels(view, falsify_eval, falsify_seed, features)
                if need_collision:
                    build_collision_layer(view)
                node_logits, edge_logits = forward(view, model_cfg, params, training=False)
                node_t, edge_t, triples = frame_targets(graph, seq.label_space.num_predicates)
                acc.update(node_logits.data, node_t, edge_logits.data, edge_t,
                           list(graph.local_near), triples, graph.unseen_local_mask())
                preds = predictions_from_logits(node_logits, edge_logits)
                merge_local_into_global(graph, preds, frame.frame_index, local_seed, features,
                                        label_source="prediction")
            if on_merged is not None:
                on_merged(seq, frame, graph)
    return acc.report()


def history_to_jsonl(history, header: dict = None) -> str:
    lines = []
    if header:
        lines.append(json.dumps({"event": "start", **header}, sort_keys=True))
    for row in history:
        lines.append(json.dumps(row, sort_keys=True))
    return "\n".join(lines) + "\n"
