"""Independent float64 re-implementation of the forward pass and loss.

Written as explicit per-node / per-edge loops over the same numeric view
(GraphTensors) the network consumes, with no tape and no shared layer
code. Serves two purposes: a brute-force reference for layer outputs and
a smooth, high-precision function for finite-difference gradient checks,
where f32 rounding and kink proximity would otherwise drown the signal.
"""

import numpy as np

from .model import GraphTensors, ModelConfig


def _relu(x):
    return np.maximum(x, 0.0)


def _layer_norm_rows(x, gain, bias, eps=1e-5):
    mean = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    return (x - mean) / np.sqrt(var + eps) * gain[None, :] + bias[None, :]


def _softmax_vec(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def params_to_f64(params) -> dict:
    return {k: np.asarray(p.data, dtype=np.float64) for k, p in params.items()}


def _encode_nodes(points_stacked, n_nodes, params, config):
    feats = np.zeros((n_nodes, config.encoder_dims[-1]), dtype=np.float64)
    n_layers = len(config.encoder_dims)
    for node in range(n_nodes):
        h = np.asarray(points_stacked[node * 256:(node + 1) * 256], dtype=np.float64)
        for i in range(n_layers):
            h = h @ params[f"enc.l{i}.w"] + params[f"enc.l{i}.b"]
            if i < n_layers - 1:
                h = _relu(h)
                h = _layer_norm_rows(h, params[f"enc.ln{i}.g"], params[f"enc.ln{i}.b"])
        feats[node] = h.max(axis=0)
    return feats


def _node_inputs(gt: GraphTensors, config: ModelConfig, params):
    counts = (
        {"node": gt.n_local + gt.n_global}
        if config.variant == "homo_sage" else {"local": gt.n_local, "global": gt.n_global}
    )
    feats = {}
    for t in counts:
        parts = [_encode_nodes(gt.points[t], counts[t], params, config),
                 np.asarray(gt.descriptors[t], dtype=np.float64)]
        if gt.labels[t] is not None:
            parts.append(np.asarray(gt.labels[t], dtype=np.float64))
        feats[t] = (
            np.concatenate(parts, axis=1)
            if counts[t] else np.zeros((0, config.input_dim(t)), dtype=np.float64)
        )
    return feats, counts


def _collision_sums(gt: GraphTensors, params, prefix, n_targets):
    out = np.zeros((n_targets, params[f"{prefix}.phi.w"].shape[1]), dtype=np.float64)
    _src, dst = gt.collision_edges
    feats = np.asarray(gt.collision_features, dtype=np.float64)
    for e, d in enumerate(dst):
        out[d] += feats[e] @ params[f"{prefix}.phi.w"] + params[f"{prefix}.phi.b"]
    return out


def _sage_layer(feats, gt, config, params, layer, counts):
    prefix = f"sage{layer}"
    coll_type = "node" if config.variant == "homo_sage" else "global"
    out = {}
    for t, n in counts.items():
        h = np.zeros((n, config.hidden_dim), dtype=np.float64)
        for i in range(n):
            acc = feats[t][i] @ params[f"{prefix}.self.{t}.w"] + params[f"{prefix}.self.{t}.b"]
            for key, src_t, dst_t in config.relations():
                if dst_t != t:
                    continue
                src_idx, dst_idx = gt.edges[key]
                incoming = [int(s) for s, d in zip(src_idx, dst_idx) if int(d) == i]
                if incoming:
                    mean_feat = np.mean([feats[src_t][s] for s in incoming], axis=0)
                    acc = acc + mean_feat @ params[f"{prefix}.rel.{key}.w"]
            h[i] = acc
        if config.collision_layer != "none" and t == coll_type:
            h = h + _collision_sums(gt, params, prefix, n)
        h = _relu(h)
        h = _layer_norm_rows(h, params[f"{prefix}.ln.{t}.g"], params[f"{prefix}.ln.{t}.b"])
        out[t] = h
    return out


def _hgt_layer(feats, gt, config, params, layer, counts):
    prefix = f"hgt{layer}"
    heads = config.heads
    dh = config.hidden_dim // heads
    proj = {
        t: {p: feats[t] @ params[f"{prefix}.{p}.{t}.w"] + params[f"{prefix}.{p}.{t}.b"]
            for p in ("k", "q", "v")}
        for t in counts
    }
    out = {}
    for t, n in counts.items():
        h = np.array(feats[t], dtype=np.float64, copy=True)
        for i in range(n):
            incoming = []  # (src_type, src_index, relation)
            for key, src_t, dst_t in config.relations():
                if dst_t != t:
                    continue
                src_idx, dst_idx = gt.edges[key]
                incoming.extend(
                    (src_t, int(s), key) for s, d in zip(src_idx, dst_idx) if int(d) == i
                )
            if not incoming:
                continue
            agg = np.zeros(config.hidden_dim, dtype=np.float64)
            for hd in range(heads):
                lo, hi = hd * dh, (hd + 1) * dh
                scores = []
                messages = []
                for src_t, s, key in incoming:
                    k_vec = proj[src_t]["k"][s, lo:hi] @ params[f"{prefix}.att.{key}.h{hd}.w"]
                    mu = params[f"{prefix}.mu.{key}"][0]
                    scores.append(
                        float(k_vec @ proj[t]["q"][i, lo:hi]) / np.sqrt(dh) * mu
                    )
                    messages.append(
                        proj[src_t]["v"][s, lo:hi] @ params[f"{prefix}.msg.{key}.h{hd}.w"]
                    )
                attn = _softmax_vec(np.array(scores))
                for w, m in zip(attn, messages):
                    agg[lo:hi] += w * m
            h[i] = agg @ params[f"{prefix}.out.{t}.w"] + feats[t][i]
        if config.collision_layer != "none" and t == "global":
            h = h + _collision_sums(gt, params, prefix, n)
        h = _relu(h)
        h = _layer_norm_rows(h, params[f"{prefix}.ln.{t}.g"], params[f"{prefix}.ln.{t}.b"])
        out[t] = h
    return out


def _head(x, params, prefix):
    h = x @ params[f"{prefix}.l0.w"] + params[f"{prefix}.l0.b"]
    h = _relu(h)
    h = _layer_norm_rows(h, params[f"{prefix}.ln0.g"], params[f"{prefix}.ln0.b"])
    return h @ params[f"{prefix}.l1.w"] + params[f"{prefix}.l1.b"]


def oracle_forward(gt: GraphTensors, config: ModelConfig, params, local_near):
    """(node logits, edge logits) in f64; params map names to f64 arrays."""
    feats, counts = _node_inputs(gt, config, params)
    if config.variant == "hgt":
        feats = {
            t: (feats[t] @ params[f"hgt_in.{t}.w"] + params[f"hgt_in.{t}.b"]
                if counts[t] else np.zeros((0, config.hidden_dim)))
            for t in counts
        }
        for layer in range(2):
            feats = _hgt_layer(feats, gt, config, params, layer, counts)
    else:
        for layer in range(2):
            feats = _sage_layer(feats, gt, config, params, layer, counts)

    local_h = feats["node"][:gt.n_local] if config.variant == "homo_sage" else feats["local"]
    node_logits = _head(local_h, params, "node_head")

    if gt.local_edge_raw.shape[0] == 0:
        return node_logits, np.zeros((0, config.num_predicate_classes), dtype=np.float64)
    raw = np.asarray(gt.local_edge_raw, dtype=np.float64)
    h = raw @ params["edge_mlp.l0.w"] + params["edge_mlp.l0.b"]
    h = _relu(h)
    h = _layer_norm_rows(h, params["edge_mlp.ln0.g"], params["edge_mlp.ln0.b"])
    emb = h @ params["edge_mlp.l1.w"] + params["edge_mlp.l1.b"]
    rows = []
    for e, (i, j) in enumerate(local_near):
        rows.append(np.concatenate([local_h[i], local_h[j], emb[e]]))
    edge_logits = _head(np.stack(rows), params, "edge_head")
    return node_logits, edge_logits


def oracle_loss(gt: GraphTensors, config: ModelConfig, params, local_near,
                node_targets, edge_targets, node_w, edge_w, alpha: float,
                alpha_mode: str = "positive") -> float:
    """Composite loss on oracle logits, mirroring the engine's clamps."""
    node_logits, edge_logits = oracle_forward(gt, config, params, local_near)
    n = node_logits.shape[0]
    probs = np.stack([_softmax_vec(node_logits[i]) for i in range(n)])
    picked = np.clip(probs[np.arange(n), np.asarray(node_targets)], 1e-7, 1.0)
    loss_n = float(np.mean(-np.log(picked) * np.asarray(node_w, dtype=np.float64)[node_targets]))

    if edge_logits.shape[0] == 0:
        return loss_n
    y = np.asarray(edge_targets, dtype=np.float64)
    s = np.clip(1.0 / (1.0 + np.exp(-edge_logits)), 1e-7, 1.0 - 1e-7)
    pos = y * np.log(s)
    neg = (1.0 - y) * np.log(1.0 - s)
    inner = alpha * pos + neg if alpha_mode == "positive" else pos + neg
    per = -(inner * np.asarray(edge_w, dtype=np.float64)[None, :])
    loss_e = float(per.mean())
    if alpha_mode == "global":
        loss_e *= alpha
    return loss_n + loss_e
