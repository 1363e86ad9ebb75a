"""Two-layer heterogeneous scene graph.

The local layer holds one frame's instances; the global layer accumulates
everything merged so far. Relations:

  local  -near->  local     proximity edges within the frame (bidirectional)
  global -near->  global    proximity edges among merged nodes, carrying the
                            latest positive predicate predictions
  global -match-> local     one edge per matched instance pair
  global -collides-> global optional layer from box overlaps, carrying
                            8-number edge features

Global node indices are append-only and therefore stable; the local layer
is rebuilt every frame and cleared by merge.
"""

import copy
import json
from dataclasses import dataclass, field

import numpy as np

from .datagen import EmbeddingTable, FrameObservation, LabelSpace
from .errors import ConfigError, ContractError
from .geometry import (
    SAMPLE_SIZE,
    AxisAlignedBox,
    Descriptor,
    box_distance,
    compute_descriptor,
    harmonic_centrality,
    overlap_volume,
    proximity_edges,
    sample_points,
)
from .rng import stream_rng

FEATURE_MODES = ("plain", "label", "embedding")


@dataclass(frozen=True)
class LabelFeatureBuilder:
    """Turns a class index into the label feature stored on global nodes."""

    mode: str
    label_space: LabelSpace
    table: EmbeddingTable = None

    def __post_init__(self):
        if self.mode not in FEATURE_MODES:
            raise ConfigError(f"feature mode must be one of {FEATURE_MODES}, got {self.mode!r}")
        if self.mode == "embedding" and self.table is None:
            raise ConfigError("embedding feature mode needs an embedding table")

    @property
    def dim(self) -> int:
        if self.mode == "plain":
            return 0
        if self.mode == "label":
            return self.label_space.num_objects
        return self.table.dim

    def build(self, class_index):
        if self.mode == "plain" or class_index is None:
            return None
        if self.mode == "label":
            v = np.zeros(self.label_space.num_objects, dtype=np.float32)
            v[class_index] = 1.0
            return v
        return self.table.lookup(self.label_space.object_classes[class_index]).copy()


@dataclass
class LocalNode:
    instance_id: int
    points: np.ndarray        # (256, 3)
    descriptor: Descriptor
    gt_class: int = None

    @property
    def box(self) -> AxisAlignedBox:
        return AxisAlignedBox.of_points(self.points)


@dataclass
class GlobalNode:
    instance_id: int
    points: np.ndarray        # (256, 3)
    descriptor: Descriptor
    first_seen_frame: int
    predicted_class: int = None
    label_class: int = None   # class the label feature is derived from
    label_feature: np.ndarray = None
    gt_class: int = None      # never changed by merging

    @property
    def box(self) -> AxisAlignedBox:
        return AxisAlignedBox.of_points(self.points)


@dataclass
class HeteroSceneGraph:
    label_space: LabelSpace
    feature_mode: str = "plain"
    global_nodes: list = field(default_factory=list)
    local_nodes: list = field(default_factory=list)
    local_near: list = field(default_factory=list)      # directed (i, j) local indices
    local_near_gt: list = field(default_factory=list)   # frozenset of predicate indices per edge
    global_near: dict = field(default_factory=dict)     # (gi, gj) -> frozenset of predicates
    match_edges: list = field(default_factory=list)     # (global_idx, local_idx)
    collision_edges: list = field(default_factory=list) # directed (gi, gj)
    collision_features: np.ndarray = None               # (E, 8)
    warnings: list = field(default_factory=list)

    def global_index(self) -> dict:
        return {node.instance_id: i for i, node in enumerate(self.global_nodes)}

    def unseen_local_mask(self) -> np.ndarray:
        """True for local nodes without a match edge."""
        matched = {li for _, li in self.match_edges}
        return np.array([i not in matched for i in range(len(self.local_nodes))], dtype=bool)

    def snapshot(self) -> "HeteroSceneGraph":
        return copy.deepcopy(self)


def empty_graph(label_space: LabelSpace, feature_mode: str = "plain") -> HeteroSceneGraph:
    if feature_mode not in FEATURE_MODES:
        raise ConfigError(f"feature mode must be one of {FEATURE_MODES}, got {feature_mode!r}")
    return HeteroSceneGraph(label_space=label_space, feature_mode=feature_mode)


# ---------------------------------------------------------------------------
# local layer
# ---------------------------------------------------------------------------


def build_local_graph(graph: HeteroSceneGraph, frame: FrameObservation, seed: int):
    """Populate the local layer from one frame.

    Instances with empty point clouds are skipped with a warning record.
    Ground-truth predicate sets are attached to the near edges that carry
    them; edges without ground truth get empty sets.
    """
    if graph.local_nodes:
        raise ContractError("local layer already populated; merge before the next frame")
    nodes = []
    for inst in frame.instances:
        if inst.points.shape[0] == 0:
            graph.warnings.append(
                f"frame {frame.frame_index}: instance {inst.instance_id} has no points; skipped"
            )
            continue
        pts = sample_points(inst.points, SAMPLE_SIZE, seed, frame.frame_index, inst.instance_id)
        nodes.append(LocalNode(
            instance_id=inst.instance_id,
            points=pts,
            descriptor=compute_descriptor(pts),
            gt_class=inst.class_index,
        ))
    graph.local_nodes = nodes

    boxes = [n.box for n in nodes]
    graph.local_near = proximity_edges(boxes)

    gt_pairs = {}
    kept = {n.instance_id: i for i, n in enumerate(nodes)}
    for inst in frame.instances:
        if inst.instance_id not in kept:
            continue
        si = kept[inst.instance_id]
        for target, pred in inst.relations:
            if target in kept:
                gt_pairs.setdefault((si, kept[target]), set()).add(pred)
    graph.local_near_gt = [frozenset(gt_pairs.get(edge, ())) for edge in graph.local_near]
    graph.match_edges = []
    return graph


# ---------------------------------------------------------------------------
# matching
# ---------------------------------------------------------------------------


def match_by_instance_id(graph: HeteroSceneGraph):
    """Default matcher: segmentation provides persistent instance ids."""
    gidx = graph.global_index()
    return [
        (gidx[node.instance_id], li)
        for li, node in enumerate(graph.local_nodes)
        if node.instance_id in gidx
    ]


def match_instances(graph: HeteroSceneGraph, mode: str = "ground_truth", matcher=None):
    """Set graph.match_edges. `tracker` mode accepts a pluggable matcher."""
    if mode not in ("ground_truth", "tracker"):
        raise ConfigError(f"match mode must be 'ground_truth' or 'tracker', got {mode!r}")
    if mode == "ground_truth" or matcher is None:
        matcher = match_by_instance_id
    edges = list(matcher(graph))
    locals_seen = [li for _, li in edges]
    if len(set(locals_seen)) != len(locals_seen):
        raise ContractError("matcher produced more than one match for a local node")
    n_g, n_l = len(graph.global_nodes), len(graph.local_nodes)
    for gi, li in edges:
        if not (0 <= gi < n_g and 0 <= li < n_l):
            raise ContractError(f"match edge ({gi}, {li}) out of range")
    graph.match_edges = sorted(edges)
    return graph.match_edges


# ---------------------------------------------------------------------------
# merging
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FramePredictions:
    """Per-local-node classes and per-local-edge positive predicate sets."""

    node_classes: tuple
    edge_predicates: tuple  # aligned with graph.local_near


def merge_local_into_global(graph: HeteroSceneGraph, predictions: FramePredictions,
                            frame_index: int, seed: int, features: LabelFeatureBuilder,
                            label_source: str = "prediction"):
    """Fold the predicted local layer into the global layer.

    Matched nodes pool their stored and fresh points, resample to 256 and
    recompute the descriptor; unmatched nodes become new global nodes.
    Label features come from the predicted class, or from ground truth
    when label_source == "ground_truth" (teacher forcing). Proximity among
    global nodes is re-evaluated for every node the frame touched, and
    edges with positive predicted predicates refresh the stored sets.
    The local layer is cleared.
    """
    if label_source not in ("prediction", "ground_truth"):
        raise ConfigError(f"label_source must be 'prediction' or 'ground_truth', got {label_source!r}")
    if features.mode != graph.feature_mode:
        raise ConfigError(
            f"feature builder mode {features.mode!r} does not match graph mode {graph.feature_mode!r}"
        )
    n_local = len(graph.local_nodes)
    if len(predictions.node_classes) != n_local:
        raise ContractError(
            f"predictions cover {len(predictions.node_classes)} nodes, graph has {n_local}"
        )
    if len(predictions.edge_predicates) != len(graph.local_near):
        raise ContractError(
            f"predictions cover {len(predictions.edge_predicates)} edges, "
            f"graph has {len(graph.local_near)}"
        )

    matched = {li: gi for gi, li in graph.match_edges}
    touched = []
    local_to_global = {}
    for li, node in enumerate(graph.local_nodes):
        cls = int(predictions.node_classes[li])
        if li in matched:
            gi = matched[li]
            gnode = graph.global_nodes[gi]
            pooled = np.concatenate([gnode.points, node.points], axis=0)
            gnode.points = sample_points(pooled, SAMPLE_SIZE, seed, "merge", frame_index,
                                         node.instance_id)
            gnode.descriptor = compute_descriptor(gnode.points)
            gnode.predicted_class = cls
        else:
            gi = len(graph.global_nodes)
            gnode = GlobalNode(
                instance_id=node.instance_id,
                points=node.points.copy(),
                descriptor=node.descriptor,
                first_seen_frame=frame_index,
                predicted_class=cls,
                gt_class=node.gt_class,
            )
            graph.global_nodes.append(gnode)
        gnode.label_class = gnode.gt_class if label_source == "ground_truth" else cls
        gnode.label_feature = features.build(gnode.label_class)
        touched.append(gi)
        local_to_global[li] = gi

    _refresh_global_proximity(graph, touched)

    for edge, preds in zip(graph.local_near, predictions.edge_predicates):
        preds = frozenset(int(p) for p in preds)
        if not preds:
            continue
        key = (local_to_global[edge[0]], local_to_global[edge[1]])
        graph.global_near[key] = preds

    graph.local_nodes = []
    graph.local_near = []
    graph.local_near_gt = []
    graph.match_edges = []
    return graph


def _refresh_global_proximity(graph: HeteroSceneGraph, touched):
    boxes = [n.box for n in graph.global_nodes]
    for u in sorted(set(touched)):
        for v in range(len(boxes)):
            if u == v:
                continue
            near = box_distance(boxes[u], boxes[v]) < 0.5
            for key in ((u, v), (v, u)):
                if near:
                    graph.global_near.setdefault(key, frozenset())
                else:
                    graph.global_near.pop(key, None)


# ---------------------------------------------------------------------------
# label falsification
# ---------------------------------------------------------------------------


def falsify_labels(graph: HeteroSceneGraph, fraction: float, seed: int,
                   features: LabelFeatureBuilder):
    """Corrupt exactly round(fraction * N) of the label-carrying global nodes.

    Selection order is a seeded random permutation realized as per-instance
    hash priorities, so the chosen set stays nearly stable while the graph
    grows, and a corrupted instance always receives the same false class.
    Returns the number of corrupted nodes.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ConfigError(f"falsify fraction must be in [0, 1], got {fraction}")
    labeled = [n for n in graph.global_nodes if n.label_class is not None]
    count = int(np.floor(fraction * len(labeled) + 0.5))
    if count == 0:
        return 0
    prioritized = sorted(
        labeled,
        key=lambda n: (stream_priority(seed, n.instance_id), n.instance_id),
    )
    n_classes = graph.label_space.num_objects
    for node in prioritized[:count]:
        rng_cls = _false_class_rng(seed, node.instance_id)
        offset = 1 + int(rng_cls.integers(n_classes - 1))
        node.label_class = (node.label_class + offset) % n_classes
        node.label_feature = features.build(node.label_class)
    return count


def stream_priority(seed: int, instance_id: int) -> float:
    return float(stream_rng(seed, "falsify_pick", instance_id).random())


def _false_class_rng(seed: int, instance_id: int):
    return stream_rng(seed, "falsify_class", instance_id)


# ---------------------------------------------------------------------------
# collision layer
# ---------------------------------------------------------------------------


def build_collision_layer(graph: HeteroSceneGraph):
    """Directed edges between overlapping global boxes with 8-number features:
    [overlap volume, extents of src, extents of dst, H(src) - H(dst)]."""
    n = len(graph.global_nodes)
    boxes = [node.box for node in graph.global_nodes]
    pairs = []
    adjacency = [[] for _ in range(n)]
    for i in range(n):
        for j in range(i + 1, n):
            ov = overlap_volume(boxes[i], boxes[j])
            if ov > 0.0:
                pairs.append((i, j, ov))
                adjacency[i].append(j)
                adjacency[j].append(i)
    centrality = harmonic_centrality(adjacency)

    edges = []
    feats = []
    for i, j, ov in pairs:
        for src, dst in ((i, j), (j, i)):
            edges.append((src, dst))
            feats.append(np.concatenate([
                [ov],
                boxes[src].extents,
                boxes[dst].extents,
                [centrality[src] - centrality[dst]],
            ]))
    order = sorted(range(len(edges)), key=lambda k: edges[k])
    graph.collision_edges = [edges[k] for k in order]
    graph.collision_features = (
        np.array([feats[k] for k in order], dtype=np.float32)
        if feats else np.zeros((0, 8), dtype=np.float32)
    )
    return centrality


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def export_global_graph(graph: HeteroSceneGraph, frame_index: int = None):
    """JSON-line records of the global layer: nodes then edges."""
    lines = []
    if frame_index is not None:
        lines.append(json.dumps({"type": "graph", "frame_index": frame_index,
                                 "num_nodes": len(graph.global_nodes)}))
    for node in graph.global_nodes:
        lines.append(json.dumps({
            "type": "node",
            "id": node.instance_id,
            "class": node.predicted_class,
            "descriptor": [float(v) for v in node.descriptor.to_array()],
        }))
    nodes = graph.global_nodes
    for (gi, gj), preds in sorted(graph.global_near.items()):
        lines.append(json.dumps({
            "type": "edge",
            "src": nodes[gi].instance_id,
            "dst": nodes[gj].instance_id,
            "relation": "near",
            "predicates": sorted(preds),
        }))
    for k, (gi, gj) in enumerate(graph.collision_edges):
        lines.append(json.dumps({
            "type": "edge",
            "src": nodes[gi].instance_id,
            "dst": nodes[gj].instance_id,
            "relation": "collides",
            "predicates": [],
        }))
    return lines
