"""The prediction network.

Node inputs concatenate, in this fixed order, a point-set encoding of the
stored 256-point sample, the 11-number geometric descriptor, and (for
global nodes) a label feature. Message passing runs two layers of either
relation-typed mean aggregation (SAGE style), multi-head attention with
per-type projections and per-relation transforms (HGT style), or their
homogeneous collapse where local nodes pad the label slots with -1
(one-hot) or zeros (embedding). Collision edges, when enabled, update
global nodes purely from their 8-number edge features. Classification
heads read only local nodes and local near edges.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .geometry import edge_raw_feature
from .rng import stream_rng
from .scene import HeteroSceneGraph
from .tensor import (
    Tensor,
    add,
    add_bias,
    concat,
    dropout,
    gather_rows,
    layer_norm,
    matmul,
    max_pool_rows,
    mul,
    mul_scalar,
    relu,
    repeat_cols,
    scale,
    segment_aggregate,
    segment_softmax,
    slice_cols,
    slice_rows,
    stack_rows,
)

VARIANTS = ("homo_sage", "het_sage", "hgt")
COLLISION_MODES = ("none", "add", "add_only")
DESC_DIM = 11
COLLISION_FEATURE_DIM = 8


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "het_sage"
    feature_mode: str = "embedding"
    collision_layer: str = "none"
    hidden_dim: int = 128
    encoder_dims: tuple = (32, 64, 128)
    edge_mlp_dims: tuple = (32, 64)
    heads: int = 4
    dropout: float = 0.5
    embedding_dim: int = 16
    num_object_classes: int = 27
    num_predicate_classes: int = 16

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.feature_mode not in ("plain", "label", "embedding"):
            raise ConfigError(f"unknown feature mode {self.feature_mode!r}")
        if self.collision_layer not in COLLISION_MODES:
            raise ConfigError(f"collision_layer must be one of {COLLISION_MODES}")
        if any(d <= 0 for d in self.encoder_dims) or any(d <= 0 for d in self.edge_mlp_dims):
            raise ConfigError("layer widths must be positive")
        if self.hidden_dim <= 0 or self.heads <= 0:
            raise ConfigError("hidden_dim and heads must be positive")
        if self.hidden_dim % self.heads != 0:
            raise ConfigError(f"heads ({self.heads}) must divide hidden_dim ({self.hidden_dim})")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    def label_dim(self) -> int:
        if self.feature_mode == "plain":
            return 0
        if self.feature_mode == "label":
            return self.num_object_classes
        return self.embedding_dim

    def node_types(self):
        return ("node",) if self.variant == "homo_sage" else ("local", "global")

    def relations(self):
        """(key, src_type, dst_type) triples handled by message passing."""
        if self.variant == "homo_sage":
            return (("near", "node", "node"),)
        rels = [("lnl", "local", "local"), ("gng", "global", "global")]
        if self.collision_layer != "add_only":
            rels.append(("gml", "global", "local"))
        return tuple(rels)

    def input_dim(self, node_type: str) -> int:
        base = self.encoder_dims[-1] + DESC_DIM
        if self.variant == "homo_sage" or node_type == "global":
            return base + self.label_dim()
        return base


# ---------------------------------------------------------------------------
# parameter initialization
# ---------------------------------------------------------------------------


def _uniform_init(rng, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)


def init_params(config: ModelConfig, seed: int) -> dict:
    """Seeded fan-in uniform weights; each tensor has its own stream, so
    the values of one parameter never depend on which others exist."""
    config.validate()
    shapes = {}

    def linear(prefix, fan_in, fan_out, bias=True):
        shapes[f"{prefix}.w"] = ("uniform", fan_in, fan_out)
        if bias:
            shapes[f"{prefix}.b"] = ("zeros", fan_out)

    def norm(prefix, dim):
        shapes[f"{prefix}.g"] = ("ones", dim)
        shapes[f"{prefix}.b"] = ("zeros", dim)

    dims = (3,) + tuple(config.encoder_dims)
    for i in range(len(config.encoder_dims)):
        linear(f"enc.l{i}", dims[i], dims[i + 1])
        if i < len(config.encoder_dims) - 1:
            norm(f"enc.ln{i}", dims[i + 1])

    e_dims = (DESC_DIM,) + tuple(config.edge_mlp_dims)
    linear("edge_mlp.l0", e_dims[0], e_dims[1])
    norm("edge_mlp.ln0", e_dims[1])
    linear("edge_mlp.l1", e_dims[1], e_dims[2])

    hid = config.hidden_dim
    linear("node_head.l0", hid, 64)
    norm("node_head.ln0", 64)
    linear("node_head.l1", 64, config.num_object_classes)

    edge_in = 2 * hid + config.edge_mlp_dims[-1]
    linear("edge_head.l0", edge_in, 128)
    norm("edge_head.ln0", 128)
    linear("edge_head.l1", 128, config.num_predicate_classes)

    types = config.node_types()
    rels = config.relations()
    if config.variant in ("homo_sage", "het_sage"):
        for layer in range(2):
            for t in types:
                d_in = config.input_dim(t) if layer == 0 else hid
                linear(f"sage{layer}.self.{t}", d_in, hid)
                norm(f"sage{layer}.ln.{t}", hid)
            for key, src, _dst in rels:
                d_src = config.input_dim(src) if layer == 0 else hid
                linear(f"sage{layer}.rel.{key}", d_src, hid, bias=False)
            if config.collision_layer != "none":
                linear(f"sage{layer}.phi", COLLISION_FEATURE_DIM, hid)
    else:
        dh = hid // config.heads
        for t in types:
            linear(f"hgt_in.{t}", config.input_dim(t), hid)
        for layer in range(2):
            for t in types:
                for proj in ("k", "q", "v"):
                    linear(f"hgt{layer}.{proj}.{t}", hid, hid)
                linear(f"hgt{layer}.out.{t}", hid, hid, bias=False)
                norm(f"hgt{layer}.ln.{t}", hid)
            for key, _src, _dst in rels:
                for h in range(config.heads):
                    shapes[f"hgt{layer}.att.{key}.h{h}.w"] = ("uniform", dh, dh)
                    shapes[f"hgt{layer}.msg.{key}.h{h}.w"] = ("uniform", dh, dh)
                shapes[f"hgt{layer}.mu.{key}"] = ("ones", 1)
            if config.collision_layer != "none":
                linear(f"hgt{layer}.phi", COLLISION_FEATURE_DIM, hid)

    params = {}
    for name in sorted(shapes):
        spec = shapes[name]
        if spec[0] == "uniform":
            rng = stream_rng(seed, "init", name)
            data = _uniform_init(rng, spec[1], spec[2])
        elif spec[0] == "zeros":
            data = np.zeros(spec[1], dtype=np.float32)
        else:
            data = np.ones(spec[1], dtype=np.float32)
        params[name] = Tensor(data, requires_grad=True)
    return params


# ---------------------------------------------------------------------------
# point-set encoder
# ---------------------------------------------------------------------------


def shared_point_mlp(x: Tensor, params, config: ModelConfig) -> Tensor:
    """Per-point MLP applied to stacked point rows; no pooling here."""
    n_layers = len(config.encoder_dims)
    for i in range(n_layers):
        x = add_bias(matmul(x, params[f"enc.l{i}.w"]), params[f"enc.l{i}.b"])
        if i < n_layers - 1:
            x = relu(x)
            x = layer_norm(x, params[f"enc.ln{i}.g"], params[f"enc.ln{i}.b"])
    return x


def encode_points(points, params, config: ModelConfig = None) -> Tensor:
    """Encode one 256-point sample to a single feature vector.

    Callers are expected to center the points first; location is carried
    by the descriptor, not the encoding.
    """
    config = config or ModelConfig()
    pts = points.data if isinstance(points, Tensor) else np.asarray(points, dtype=np.float32)
    if pts.shape != (256, 3):
        raise DimensionError(f"encode_points expects (256, 3), got {pts.shape}")
    x = points if isinstance(points, Tensor) else Tensor(pts)
    return max_pool_rows(shared_point_mlp(x, params, config))


def _encode_node_sets(points_stacked: np.ndarray, n_nodes: int, params,
                      config: ModelConfig) -> Tensor:
    """Encode n_nodes stacked 256-point samples in one shared-MLP pass."""
    if n_nodes == 0:
        return Tensor(np.zeros((0, config.encoder_dims[-1]), dtype=np.float32))
    per_point = shared_point_mlp(Tensor(points_stacked), params, config)
    pooled = [max_pool_rows(slice_rows(per_point, k * 256, (k + 1) * 256)) for k in range(n_nodes)]
    return stack_rows(pooled)


# ---------------------------------------------------------------------------
# graph tensors
# ---------------------------------------------------------------------------


@dataclass
class GraphTensors:
    """Numeric view of a graph, ready for the network."""

    n_local: int
    n_global: int
    points: dict          # node type -> stacked centered points [(n*256), 3]
    descriptors: dict     # node type -> [n, 11]
    labels: dict          # node type -> [n, label_dim] or None
    edges: dict           # relation key -> (src_idx, dst_idx) int arrays
    local_edge_raw: np.ndarray     # [e_local, 11]
    collision_edges: tuple         # (src_idx, dst_idx) into global/unified nodes
    collision_features: np.ndarray


def _centered_points(nodes) -> np.ndarray:
    if not nodes:
        return np.zeros((0, 3), dtype=np.float32)
    blocks = [n.points - n.descriptor.centroid[None, :] for n in nodes]
    return np.concatenate(blocks, axis=0).astype(np.float32)


def _label_matrix(graph: HeteroSceneGraph, config: ModelConfig):
    """Label features for global nodes; missing labels take the pad value."""
    dim = config.label_dim()
    if dim == 0:
        return None
    pad = -1.0 if config.feature_mode == "label" else 0.0
    rows = np.full((len(graph.global_nodes), dim), pad, dtype=np.float32)
    for i, node in enumerate(graph.global_nodes):
        if node.label_feature is not None:
            if node.label_feature.shape != (dim,):
                raise ConfigError(
                    f"stored label feature of node {node.instance_id} has shape "
                    f"{node.label_feature.shape}, expected ({dim},)"
                )
            rows[i] = node.label_feature
    return rows


def build_graph_tensors(graph: HeteroSceneGraph, config: ModelConfig) -> GraphTensors:
    if graph.feature_mode != config.feature_mode:
        raise ConfigError(
            f"graph carries {graph.feature_mode!r} features but the model expects "
            f"{config.feature_mode!r}"
        )
    n_l, n_g = len(graph.local_nodes), len(graph.global_nodes)
    if n_l == 0:
        raise ContractError("forward needs at least one local node")

    local_desc = np.stack([n.descriptor.to_array() for n in graph.local_nodes])
    global_desc = (
        np.stack([n.descriptor.to_array() for n in graph.global_nodes])
        if n_g else np.zeros((0, DESC_DIM), dtype=np.float32)
    )
    global_labels = _label_matrix(graph, config)

    lnl = _edge_arrays(graph.local_near)
    gng = _edge_arrays(sorted(graph.global_near.keys()))
    gml = _edge_arrays(graph.match_edges)
    coll = _edge_arrays(graph.collision_edges)
    coll_feat = (
        graph.collision_features
        if graph.collision_features is not None else np.zeros((0, COLLISION_FEATURE_DIM), np.float32)
    )

    raw = (
        np.stack([
            edge_raw_feature(graph.local_nodes[i].descriptor, graph.local_nodes[j].descriptor)
            for i, j in graph.local_near
        ])
        if graph.local_near else np.zeros((0, DESC_DIM), dtype=np.float32)
    )

    if config.variant == "homo_sage":
        pad_dim = config.label_dim()
        if pad_dim:
            pad = -1.0 if config.feature_mode == "label" else 0.0
            local_labels = np.full((n_l, pad_dim), pad, dtype=np.float32)
            labels = {"node": np.concatenate([local_labels, global_labels], axis=0)}
        else:
            labels = {"node": None}
        if config.collision_layer == "add_only":
            near_src = np.concatenate([lnl[0], gng[0] + n_l])
            near_dst = np.concatenate([lnl[1], gng[1] + n_l])
        else:
            near_src = np.concatenate([lnl[0], gng[0] + n_l, gml[0] + n_l])
            near_dst = np.concatenate([lnl[1], gng[1] + n_l, gml[1]])
        points = {"node": np.concatenate(
            [_centered_points(graph.local_nodes), _centered_points(graph.global_nodes)], axis=0)}
        return GraphTensors(
            n_local=n_l, n_global=n_g,
            points=points,
            descriptors={"node": np.concatenate([local_desc, global_desc], axis=0)},
            labels=labels,
            edges={"near": (near_src, near_dst)},
            local_edge_raw=raw,
            collision_edges=(coll[0] + n_l, coll[1] + n_l),
            collision_features=coll_feat,
        )

    edges = {"lnl": lnl, "gng": gng}
    if config.collision_layer != "add_only":
        edges["gml"] = gml
    return GraphTensors(
        n_local=n_l, n_global=n_g,
        points={"local": _centered_points(graph.local_nodes),
                "global": _centered_points(graph.global_nodes)},
        descriptors={"local": local_desc, "global": global_desc},
        labels={"local": None, "global": global_labels},
        edges=edges,
        local_edge_raw=raw,
        collision_edges=coll,
        collision_features=coll_feat,
    )


def _edge_arrays(pairs):
    if not pairs:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    arr = np.asarray(list(pairs), dtype=np.int64)
    return arr[:, 0], arr[:, 1]


# ---------------------------------------------------------------------------
# message passing
# ---------------------------------------------------------------------------


def _collision_term(gt: GraphTensors, phi_w, phi_b, n_targets: int):
    """Sum of transformed collision-edge features per target node."""
    _src, dst = gt.collision_edges
    if len(dst) == 0:
        return None
    phi = add_bias(matmul(Tensor(gt.collision_features), phi_w), phi_b)
    return segment_aggregate(phi, dst, n_targets, mode="sum")


def edge_info_layer(node_feats: Tensor, edge_features: Tensor, dst_index,
                    gamma_w: Tensor, gamma_b: Tensor, phi_w: Tensor, phi_b: Tensor) -> Tensor:
    """Update nodes from edge features alone: gamma(x) plus the sum of
    phi(edge feature) over incoming edges."""
    out = add_bias(matmul(node_feats, gamma_w), gamma_b)
    if edge_features.data.shape[0]:
        phi = add_bias(matmul(edge_features, phi_w), phi_b)
        out = add(out, segment_aggregate(phi, dst_index, node_feats.data.shape[0], mode="sum"))
    return out


def het_sage_layer(feats: dict, gt: GraphTensors, config: ModelConfig, params,
                   layer: int, counts: dict, training: bool, drop_stream) -> dict:
    """Relation-typed mean aggregation plus a per-type self map, then
    ReLU, layer norm and dropout. Collision edges contribute their
    feature transform as an extra additive term on global nodes."""
    prefix = f"sage{layer}"
    out = {}
    coll_type = "node" if config.variant == "homo_sage" else "global"
    for t in config.node_types():
        h = add_bias(matmul(feats[t], params[f"{prefix}.self.{t}.w"]),
                     params[f"{prefix}.self.{t}.b"])
        for key, src_t, dst_t in config.relations():
            if dst_t != t:
                continue
            src_idx, dst_idx = gt.edges[key]
            if len(src_idx) == 0:
                continue
            agg = segment_aggregate(gather_rows(feats[src_t], src_idx), dst_idx,
                                    counts[t], mode="mean")
            h = add(h, matmul(agg, params[f"{prefix}.rel.{key}.w"]))
        if config.collision_layer != "none" and t == coll_type:
            term = _collision_term(gt, params[f"{prefix}.phi.w"],
                                   params[f"{prefix}.phi.b"], counts[t])
            if term is not None:
                h = add(h, term)
        h = relu(h)
        h = layer_norm(h, params[f"{prefix}.ln.{t}.g"], params[f"{prefix}.ln.{t}.b"])
        h = dropout(h, config.dropout, training, *drop_stream, f"{prefix}.{t}")
        out[t] = h
    return out


def hgt_layer(feats: dict, gt: GraphTensors, config: ModelConfig, params,
              layer: int, counts: dict, training: bool, drop_stream,
              return_attention: bool = False):
    """Per-type key/query/value projections, per-relation per-head attention
    and message transforms, softmax over each target's full in-neighborhood,
    output projection with a residual, then ReLU, layer norm, dropout."""
    prefix = f"hgt{layer}"
    heads = config.heads
    dh = config.hidden_dim // heads
    scale_factor = 1.0 / np.sqrt(dh)

    proj = {}
    for t in config.node_types():
        proj[t] = {
            p: add_bias(matmul(feats[t], params[f"{prefix}.{p}.{t}.w"]),
                        params[f"{prefix}.{p}.{t}.b"])
            for p in ("k", "q", "v")
        }

    ones_dh = Tensor(np.ones((dh, 1), dtype=np.float32))
    by_target = {t: {"scores": [], "messages": [], "dst": []} for t in config.node_types()}
    for key, src_t, dst_t in config.relations():
        src_idx, dst_idx = gt.edges[key]
        if len(src_idx) == 0:
            continue
        k_e = gather_rows(proj[src_t]["k"], src_idx)
        q_e = gather_rows(proj[dst_t]["q"], dst_idx)
        v_e = gather_rows(proj[src_t]["v"], src_idx)
        score_cols = []
        msg_cols = []
        for h in range(heads):
            lo, hi = h * dh, (h + 1) * dh
            a = matmul(slice_cols(k_e, lo, hi), params[f"{prefix}.att.{key}.h{h}.w"])
            score_cols.append(matmul(mul(a, slice_cols(q_e, lo, hi)), ones_dh))
            msg_cols.append(matmul(slice_cols(v_e, lo, hi), params[f"{prefix}.msg.{key}.h{h}.w"]))
        scores = mul_scalar(scale(concat(score_cols, axis=1), scale_factor),
                            params[f"{prefix}.mu.{key}"])
        by_target[dst_t]["scores"].append(scores)
        by_target[dst_t]["messages"].append(concat(msg_cols, axis=1))
        by_target[dst_t]["dst"].append(dst_idx)

    coll_type = "global"
    out = {}
    attention = {}
    for t in config.node_types():
        bucket = by_target[t]
        if bucket["scores"]:
            scores = concat(bucket["scores"], axis=0) if len(bucket["scores"]) > 1 else bucket["scores"][0]
            messages = concat(bucket["messages"], axis=0) if len(bucket["messages"]) > 1 else bucket["messages"][0]
            dst_all = np.concatenate(bucket["dst"])
            attn = segment_softmax(scores, dst_all, counts[t])
            weighted = mul(messages, repeat_cols(attn, dh))
            agg = segment_aggregate(weighted, dst_all, counts[t], mode="sum")
            h = add(matmul(agg, params[f"{prefix}.out.{t}.w"]), feats[t])
            if return_attention:
                attention[t] = (attn.data.copy(), dst_all.copy())
        else:
            h = feats[t]
        if config.collision_layer != "none" and t == coll_type:
            term = _collision_term(gt, params[f"{prefix}.phi.w"],
                                   params[f"{prefix}.phi.b"], counts[t])
            if term is not None:
                h = add(h, term)
        h = relu(h)
        h = layer_norm(h, params[f"{prefix}.ln.{t}.g"], params[f"{prefix}.ln.{t}.b"])
        h = dropout(h, config.dropout, training, *drop_stream, f"{prefix}.{t}")
        out[t] = h
    if return_attention:
        return out, attention
    return out


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------


def embed_edges(raw: Tensor, params, config: ModelConfig, training: bool, drop_stream) -> Tensor:
    h = add_bias(matmul(raw, params["edge_mlp.l0.w"]), params["edge_mlp.l0.b"])
    h = relu(h)
    h = layer_norm(h, params["edge_mlp.ln0.g"], params["edge_mlp.ln0.b"])
    h = dropout(h, config.dropout, training, *drop_stream, "edge_mlp")
    return add_bias(matmul(h, params["edge_mlp.l1.w"]), params["edge_mlp.l1.b"])


def node_head(h: Tensor, params, config: ModelConfig, training: bool, drop_stream) -> Tensor:
    h = add_bias(matmul(h, params["node_head.l0.w"]), params["node_head.l0.b"])
    h = relu(h)
    h = layer_norm(h, params["node_head.ln0.g"], params["node_head.ln0.b"])
    h = dropout(h, config.dropout, training, *drop_stream, "node_head")
    return add_bias(matmul(h, params["node_head.l1.w"]), params["node_head.l1.b"])


def edge_head(src_h: Tensor, dst_h: Tensor, edge_emb: Tensor, params, config: ModelConfig,
              training: bool, drop_stream) -> Tensor:
    h = concat([src_h, dst_h, edge_emb], axis=1)
    h = add_bias(matmul(h, params["edge_head.l0.w"]), params["edge_head.l0.b"])
    h = relu(h)
    h = layer_norm(h, params["edge_head.ln0.g"], params["edge_head.ln0.b"])
    h = dropout(h, config.dropout, training, *drop_stream, "edge_head")
    return add_bias(matmul(h, params["edge_head.l1.w"]), params["edge_head.l1.b"])


# ---------------------------------------------------------------------------
# full forward pass
# ---------------------------------------------------------------------------


def forward(graph: HeteroSceneGraph, config: ModelConfig, params,
            training: bool = False, drop_stream=(0,)):
    """Logits for every local node and every local near edge."""
    config.validate()
    gt = build_graph_tensors(graph, config)
    counts = (
        {"node": gt.n_local + gt.n_global}
        if config.variant == "homo_sage" else {"local": gt.n_local, "global": gt.n_global}
    )

    feats = {}
    for t in config.node_types():
        n = counts[t]
        point_feat = _encode_node_sets(gt.points[t], n, params, config)
        parts = [point_feat, Tensor(gt.descriptors[t])]
        if gt.labels[t] is not None:
            parts.append(Tensor(gt.labels[t]))
        feats[t] = concat(parts, axis=1) if n else Tensor(
            np.zeros((0, config.input_dim(t)), dtype=np.float32))

    if config.variant == "hgt":
        for t in config.node_types():
            if counts[t]:
                feats[t] = add_bias(matmul(feats[t], params[f"hgt_in.{t}.w"]),
                                    params[f"hgt_in.{t}.b"])
            else:
                feats[t] = Tensor(np.zeros((0, config.hidden_dim), dtype=np.float32))
        for layer in range(2):
            feats = hgt_layer(feats, gt, config, params, layer, counts, training, drop_stream)
    else:
        for layer in range(2):
            feats = het_sage_layer(feats, gt, config, params, layer, counts, training, drop_stream)

    if config.variant == "homo_sage":
        local_h = slice_rows(feats["node"], 0, gt.n_local)
    else:
        local_h = feats["local"]

    node_logits = node_head(local_h, params, config, training, drop_stream)

    n_edges = gt.local_edge_raw.shape[0]
    if n_edges:
        src_idx = np.array([e[0] for e in graph.local_near], dtype=np.int64)
        dst_idx = np.array([e[1] for e in graph.local_near], dtype=np.int64)
        edge_emb = embed_edges(Tensor(gt.local_edge_raw), params, config, training, drop_stream)
        edge_logits = edge_head(
            gather_rows(local_h, src_idx), gather_rows(local_h, dst_idx),
            edge_emb, params, config, training, drop_stream,
        )
    else:
        edge_logits = Tensor(np.zeros((0, config.num_predicate_classes), dtype=np.float32))

    return node_logits, edge_logits
