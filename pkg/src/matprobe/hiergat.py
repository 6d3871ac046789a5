"""Hierarchical graph-attention classifier over the taxonomy graph.

Node states start from prototype embeddings (mean encoder features of every
image whose label path contains the node). Classification of an image inserts
a global node carrying its features, with outgoing edges to every taxonomy
node, runs K attention layers with residual connections, and reads one scalar
logit per taxonomy node. Training minimizes max(BCE over the multi-hot label
path, mean per-level CE).
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import numerics as nm
from .taxonomy import DirectedTaxonomyGraph, HierarchicalLabel, Taxonomy, to_graph

__all__ = [
    "GatConfig",
    "TrainingConfig",
    "GatLayerParams",
    "HierGatModel",
    "ModelError",
    "init_prototypes",
    "group_features_by_node",
    "forward",
    "level_distributions",
    "hierarchical_loss",
    "fit",
    "predict_flat",
    "predict_levels",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"MPCK"


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class GatConfig:
    input_dim: int = 1024
    hidden_dim: int = 512
    output_dim: int = 256
    layers: int = 2
    heads: int = 1  # single-head scoring only
    attention_slope: float = 0.2
    add_reverse_edges: bool = False
    pool: str = "global_average"  # applied inside the encoder adapter

    def __post_init__(self):
        if self.layers < 1:
            raise ModelError("layer count must be >= 1")
        if self.heads != 1:
            raise ModelError("only single-head attention is supported")


@dataclass(frozen=True)
class TrainingConfig:
    batch_size: int = 400
    epochs: int = 100
    learning_rate: float = 1e-4
    weight_decay: float = 5e-4
    schedule: str = "cosine"
    sampling: str = "stratified"
    seed: int = 0

    def __post_init__(self):
        if self.batch_size <= 0 or self.epochs < 0:
            raise ModelError("batch_size must be positive and epochs non-negative")
        if min(self.learning_rate, self.weight_decay) < 0:
            raise ModelError("learning_rate and weight_decay must be non-negative")


@dataclass
class GatLayerParams:
    """One message-passing layer.

    The pair perceptrons take logically concatenated inputs; their first-layer
    matrices are stored row-partitioned (dst block, src block) so the edge
    concatenation never has to be materialized.
    """

    score_proj: nm.Parameter  # (d_in, d_out) shared projection for scoring
    att_dst: nm.Parameter  # (d_out,)
    att_src: nm.Parameter  # (d_out,)
    msg_w1_dst: nm.Parameter  # (d_in, hidden)
    msg_w1_src: nm.Parameter  # (d_in, hidden)
    msg_b1: nm.Parameter
    msg_w2: nm.Parameter  # (hidden, d_out)
    msg_b2: nm.Parameter
    upd_w1_state: nm.Parameter  # (d_in, hidden)
    upd_w1_agg: nm.Parameter  # (d_out, hidden)
    upd_b1: nm.Parameter
    upd_w2: nm.Parameter  # (hidden, d_out)
    upd_b2: nm.Parameter
    res_proj: Optional[nm.Parameter]  # (d_in, d_out) when dims differ, else identity

    def parameters(self) -> list[nm.Parameter]:
        ps = [
            self.score_proj, self.att_dst, self.att_src,
            self.msg_w1_dst, self.msg_w1_src, self.msg_b1, self.msg_w2, self.msg_b2,
            self.upd_w1_state, self.upd_w1_agg, self.upd_b1, self.upd_w2, self.upd_b2,
        ]
        if self.res_proj is not None:
            ps.append(self.res_proj)
        return ps


def _glorot(rng, shape):
    limit = np.sqrt(6.0 / (shape[0] + shape[-1]))
    return rng.uniform(-limit, limit, size=shape)


def _make_layer(rng, d_in: int, hidden: int, d_out: int, tag: str) -> GatLayerParams:
    P = nm.Parameter
    return GatLayerParams(
        score_proj=P(_glorot(rng, (d_in, d_out)), f"{tag}.score_proj"),
        att_dst=P(rng.normal(0, 0.1, d_out), f"{tag}.att_dst"),
        att_src=P(rng.normal(0, 0.1, d_out), f"{tag}.att_src"),
        msg_w1_dst=P(_glorot(rng, (d_in, hidden)), f"{tag}.msg_w1_dst"),
        msg_w1_src=P(_glorot(rng, (d_in, hidden)), f"{tag}.msg_w1_src"),
        msg_b1=P(np.zeros(hidden), f"{tag}.msg_b1"),
        msg_w2=P(_glorot(rng, (hidden, d_out)), f"{tag}.msg_w2"),
        msg_b2=P(np.zeros(d_out), f"{tag}.msg_b2"),
        upd_w1_state=P(_glorot(rng, (d_in, hidden)), f"{tag}.upd_w1_state"),
        upd_w1_agg=P(_glorot(rng, (d_out, hidden)), f"{tag}.upd_w1_agg"),
        upd_b1=P(np.zeros(hidden), f"{tag}.upd_b1"),
        upd_w2=P(_glorot(rng, (hidden, d_out)), f"{tag}.upd_w2"),
        upd_b2=P(np.zeros(d_out), f"{tag}.upd_b2"),
        res_proj=None if d_in == d_out else P(_glorot(rng, (d_in, d_out)), f"{tag}.res_proj"),
    )


class HierGatModel:
    """Prototype embeddings + K attention layers + per-node scalar readout."""

    def __init__(
        self,
        graph: DirectedTaxonomyGraph,
        config: GatConfig,
        taxonomy_hash: str,
        encoder_name: str = "trivial",
        seed: int = 0,
    ):
        self.graph = graph
        self.config = config
        self.taxonomy_hash = taxonomy_hash
        self.encoder_name = encoder_name
        rng = np.random.default_rng(seed)
        n = graph.num_nodes
        self.prototypes = nm.Parameter(
            rng.normal(0, 0.02, (n, config.input_dim)), "prototypes"
        )
        dims = [config.input_dim] + [config.output_dim] * config.layers
        self.layers = [
            _make_layer(rng, dims[k], config.hidden_dim, dims[k + 1], f"layer{k}")
            for k in range(config.layers)
        ]
        self.readout = nm.Parameter(
            rng.normal(0, 0.01, config.output_dim), "readout"
        )
        self._global_state: Optional[np.ndarray] = None
        self._edges = self._build_edges()

    @classmethod
    def create(
        cls,
        taxonomy: Taxonomy,
        config: GatConfig = GatConfig(),
        encoder_name: str = "trivial",
        seed: int = 0,
    ) -> "HierGatModel":
        return cls(to_graph(taxonomy), config, taxonomy.content_hash(), encoder_name, seed)

    def _build_edges(self):
        n = self.graph.num_nodes
        pairs = list(self.graph.edges)
        if self.config.add_reverse_edges:
            pairs += [(c, p) for p, c in self.graph.edges]
        # global node at index n with outgoing edges to every taxonomy node
        pairs += [(n, t) for t in range(n)]
        src = np.array([p for p, _ in pairs], dtype=np.intp)
        dst = np.array([c for _, c in pairs], dtype=np.intp)
        segments = []
        for node in range(n + 1):
            idx = np.nonzero(dst == node)[0]
            if idx.size:
                segments.append((node, idx))
        return src, dst, segments

    def parameters(self) -> list[nm.Parameter]:
        ps = [self.prototypes]
        for layer in self.layers:
            ps.extend(layer.parameters())
        ps.append(self.readout)
        return ps

    def insert_global_node(self, h_g: np.ndarray) -> None:
        """Attach per-image features as the global node state."""
        h_g = np.asarray(h_g, dtype=np.float64)
        if h_g.shape[-1] != self.config.input_dim:
            raise ModelError(
                f"global node dim {h_g.shape[-1]} != input_dim {self.config.input_dim}"
            )
        if self._global_state is not None:
            raise ModelError("global node already inserted; remove it first")
        self._global_state = h_g

    def remove_global_node(self) -> None:
        self._global_state = None

    @property
    def global_out_degree(self) -> int:
        return self.graph.num_nodes


def group_features_by_node(
    features: np.ndarray, leaf_ids: Sequence[str], taxonomy: Taxonomy
) -> dict[str, list[np.ndarray]]:
    """Assign each sample's features to every node on its label path."""
    groups: dict[str, list[np.ndarray]] = {nid: [] for nid in taxonomy.preorder}
    for vec, leaf in zip(features, leaf_ids):
        for nid in taxonomy.ancestors(leaf):
            groups[nid].append(np.asarray(vec, dtype=np.float64))
    return groups


def init_prototypes(
    features_by_node: dict[str, list[np.ndarray]], strict: bool = True
) -> dict[str, np.ndarray]:
    """Per-node arithmetic mean of the grouped feature vectors.

    With strict=False, empty groups are filled from the nearest ancestor with
    data (used when a class is held out of training).
    """
    means: dict[str, Optional[np.ndarray]] = {}
    for nid, vecs in features_by_node.items():
        if vecs:
            means[nid] = np.mean(np.stack(vecs), axis=0)
        elif strict:
            raise ModelError(f"node {nid!r} has no associated training images")
        else:
            means[nid] = None
    return means


def apply_prototypes(model: HierGatModel, means: dict[str, Optional[np.ndarray]]) -> None:
    fallback = None
    for i, nid in enumerate(model.graph.node_ids):
        vec = means.get(nid)
        if vec is not None:
            model.prototypes.data[i] = vec
            fallback = vec
        elif fallback is not None:
            model.prototypes.data[i] = fallback


def _mlp_pair(xa, xb, wa, wb, b1, w2, b2, slope):
    h = nm.leaky_rect(nm.add(nm.add(nm.matmul(xa, wa), nm.matmul(xb, wb)), b1), slope)
    return nm.add(nm.matmul(h, w2), b2)


def _layer_forward(model: HierGatModel, layer: GatLayerParams, states):
    src, dst, segments = model._edges
    slope = model.config.attention_slope
    n_total = model.graph.num_nodes + 1

    proj = nm.matmul(states, layer.score_proj)
    score_dst = nm.matvec(proj, layer.att_dst)
    score_src = nm.matvec(proj, layer.att_src)
    e = nm.leaky_rect(
        nm.add(nm.gather(score_dst, dst, axis=-1), nm.gather(score_src, src, axis=-1)),
        slope,
    )
    alpha = None
    for _node, edge_idx in segments:
        part = nm.masked_softmax(e, edge_idx)
        alpha = part if alpha is None else nm.add(alpha, part)

    h_dst = nm.gather(states, dst, axis=-2)
    h_src = nm.gather(states, src, axis=-2)
    messages = _mlp_pair(
        h_dst, h_src,
        layer.msg_w1_dst, layer.msg_w1_src, layer.msg_b1, layer.msg_w2, layer.msg_b2,
        slope,
    )
    weighted = nm.mul(messages, nm.expand_dims(alpha, -1))
    # nodes with no in-edges receive the empty sum: a zero aggregate
    aggregate = nm.scatter_sum(weighted, dst, n_total)
    updated = _mlp_pair(
        states, aggregate,
        layer.upd_w1_state, layer.upd_w1_agg, layer.upd_b1, layer.upd_w2, layer.upd_b2,
        slope,
    )
    residual = states if layer.res_proj is None else nm.matmul(states, layer.res_proj)
    return nm.add(updated, residual)


def forward(
    model: HierGatModel,
    features: np.ndarray,
    dropout_rate: float = 0.0,
    dropout_seed: int = 0,
):
    """Per-node logits for a batch of encoder features.

    Returns a Tensor of shape (batch, num_nodes); the global node is excluded
    from the output. Recorded on the active tape when one is open.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[None, :]
    if feats.shape[-1] != model.config.input_dim:
        raise ModelError(
            f"feature dim {feats.shape[-1]} != input_dim {model.config.input_dim}"
        )
    n = model.graph.num_nodes
    batch = feats.shape[0]

    model.insert_global_node(feats)
    try:
        protos = nm.broadcast_batch(model.prototypes, batch)
        h_g = nm.expand_dims(nm.Tensor(feats), -2)  # (B, 1, d)
        states = nm.concat([protos, h_g], axis=-2)  # (B, n+1, d)
        for k, layer in enumerate(model.layers):
            states = _layer_forward(model, layer, states)
            if dropout_rate > 0.0:
                states = nm.dropout(states, dropout_rate, seed=dropout_seed * 7919 + k)
        taxa = nm.gather(states, np.arange(n), axis=-2)
        logits = nm.matvec(taxa, model.readout)  # (B, n)
    finally:
        model.remove_global_node()
    return logits


def level_distributions(logits: np.ndarray, graph: DirectedTaxonomyGraph):
    """Softmax over each level's nodes; list of arrays aligned with level_members."""
    z = np.asarray(logits, dtype=np.float64)
    out = []
    for members in graph.level_members:
        lv = z[..., list(members)]
        m = lv.max(axis=-1, keepdims=True)
        e = np.exp(lv - m)
        out.append(e / e.sum(axis=-1, keepdims=True))
    return out


def _label_targets(
    labels: Sequence[HierarchicalLabel], graph: DirectedTaxonomyGraph
):
    batch = len(labels)
    n = graph.num_nodes
    multihot = np.zeros((batch, n))
    depth = len(graph.level_names)
    level_pos: list[np.ndarray] = [np.zeros(batch, dtype=np.intp) for _ in range(depth)]
    level_known: list[np.ndarray] = [np.zeros(batch, dtype=bool) for _ in range(depth)]
    member_rank = [
        {node: j for j, node in enumerate(members)} for members in graph.level_members
    ]
    for b, label in enumerate(labels):
        for d, nid in enumerate(label.path):
            i = graph.index_of(nid)
            if graph.level_of[i] != d:
                raise ModelError(f"label path entry {nid!r} is not at level {d}")
            multihot[b, i] = 1.0
            level_pos[d][b] = member_rank[d][i]
            level_known[d][b] = True
    return multihot, level_pos, level_known


def hierarchical_loss(
    logits, labels: Sequence[HierarchicalLabel] | HierarchicalLabel, graph: DirectedTaxonomyGraph
):
    """max(BCE over the multi-hot path, mean per-level CE), averaged over the batch."""
    if isinstance(labels, HierarchicalLabel):
        labels = [labels]
    z = logits if isinstance(logits, nm.Tensor) else nm.Tensor(logits)
    if z.data.ndim == 1:
        z = nm.expand_dims(z, 0)
    if z.data.shape[-1] != graph.num_nodes:
        raise ModelError("logit width does not match the taxonomy node count")
    if z.data.shape[0] != len(labels):
        raise ModelError("batch size and label count disagree")
    multihot, level_pos, level_known = _label_targets(labels, graph)
    depth = len(graph.level_names)

    bce = nm.mean(nm.bce_elements(z, multihot), axis=-1)  # (B,)
    ce_total = None
    for d, members in enumerate(graph.level_members):
        if not level_known[d].all():
            # partial-depth labels contribute zero CE at their missing levels
            continue
        lv = nm.gather(z, np.array(members, dtype=np.intp), axis=-1)
        ce = nm.cross_entropy(lv, level_pos[d])
        ce_total = ce if ce_total is None else nm.add(ce_total, ce)
    mean_ce = nm.mul(ce_total, 1.0 / depth)
    return nm.mean(nm.maximum(bce, mean_ce))


@dataclass
class LabeledFeatures:
    """Encoder features plus leaf labels, the unit the trainer consumes."""

    features: np.ndarray  # (M, input_dim)
    leaf_ids: list[str]
    taxonomy: Taxonomy

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] != len(self.leaf_ids):
            raise ModelError("features and labels disagree in length")

    def __len__(self):
        return self.features.shape[0]

    def labels(self) -> list[HierarchicalLabel]:
        from .taxonomy import label_of

        return [label_of(self.taxonomy, leaf) for leaf in self.leaf_ids]


def _stratified_order(leaf_ids: Sequence[str], rng: np.random.Generator) -> np.ndarray:
    """Interleave classes evenly: sort by within-class quantile with jitter."""
    leaf_arr = np.asarray(leaf_ids)
    keys = np.empty(len(leaf_arr))
    for leaf in np.unique(leaf_arr):
        idx = np.nonzero(leaf_arr == leaf)[0]
        perm = rng.permutation(idx.size)
        keys[idx] = (perm + rng.random(idx.size)) / idx.size
    return np.argsort(keys, kind="stable")


def fit(
    model: HierGatModel,
    dataset: LabeledFeatures,
    cfg: TrainingConfig = TrainingConfig(),
    dropout_rate: float = 0.0,
) -> list[float]:
    """Train in place; returns the per-epoch mean loss curve."""
    counts: dict[str, int] = {}
    for leaf in dataset.leaf_ids:
        counts[leaf] = counts.get(leaf, 0) + 1
    for leaf in {l for l in dataset.leaf_ids}:
        if counts[leaf] < 1:
            raise ModelError(f"class {leaf!r} has no training samples")
    if len(dataset) == 0:
        raise ModelError("empty training set")

    labels = dataset.labels()
    params = model.parameters()
    opt = nm.AdamW(
        params,
        learning_rate=cfg.learning_rate,
        weight_decay=cfg.weight_decay,
    )
    rng = np.random.default_rng(cfg.seed)
    batch_size = min(cfg.batch_size, len(dataset))
    curve: list[float] = []
    for epoch in range(cfg.epochs):
        lr = (
            nm.cosine_lr(cfg.learning_rate, epoch, cfg.epochs)
            if cfg.schedule == "cosine"
            else cfg.learning_rate
        )
        order = (
            _stratified_order(dataset.leaf_ids, rng)
            if cfg.sampling == "stratified"
            else rng.permutation(len(dataset))
        )
        epoch_losses = []
        for start in range(0, len(order), batch_size):
            sel = order[start : start + batch_size]
            opt.zero_grad()
            with nm.Tape() as tape:
                logits = forward(
                    model,
                    dataset.features[sel],
                    dropout_rate=dropout_rate,
                    dropout_seed=cfg.seed + 1009 * epoch + start,
                )
                loss = hierarchical_loss(logits, [labels[i] for i in sel], model.graph)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericsAbort(epoch, start // batch_size, value)
            tape.backward(loss)
            opt.step(lr)
            epoch_losses.append(value)
        curve.append(float(np.mean(epoch_losses)))
    return curve


class NumericsAbort(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch = epoch, batch


def predict_flat(model: HierGatModel, features: np.ndarray) -> str:
    """Material-level argmax leaf id; ties break toward earlier preorder nodes."""
    logits = forward(model, features).data
    if logits.ndim == 2:
        logits = logits[0]
    members = model.graph.level_members[-1]
    best = members[int(np.argmax(logits[list(members)]))]
    return model.graph.node_ids[best]


def predict_levels(model: HierGatModel, features: np.ndarray):
    """Per-level argmax node ids (independent per level) for a feature batch."""
    logits = forward(model, features).data
    if logits.ndim == 1:
        logits = logits[None]
    dists = level_distributions(logits, model.graph)
    out = []
    for members, dist in zip(model.graph.level_members, dists):
        picks = np.argmax(dist, axis=-1)
        out.append([model.graph.node_ids[members[p]] for p in picks])
    return out


def save_checkpoint(model: HierGatModel, path) -> None:
    """Manifest (name, shape, offset) + float32 little-endian payload."""
    params = model.parameters()
    entries = []
    payload = io.BytesIO()
    offset = 0
    for p in params:
        data = p.data.astype("<f4")
        entries.append({"name": p.name, "shape": list(p.data.shape), "offset": offset})
        payload.write(data.tobytes())
        offset += data.nbytes
    manifest = {
        "format": "matprobe-checkpoint",
        "version": 1,
        "taxonomy_hash": model.taxonomy_hash,
        "encoder": model.encoder_name,
        "config": asdict(model.config),
        "parameters": entries,
    }
    blob = json.dumps(manifest).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<BQ", 1, len(blob)))
        f.write(blob)
        f.write(payload.getvalue())


def load_checkpoint(path, taxonomy: Taxonomy) -> HierGatModel:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ModelError(f"bad checkpoint magic {magic!r}")
        _version, mlen = struct.unpack("<BQ", f.read(9))
        manifest = json.loads(f.read(mlen))
        payload = f.read()
    if manifest["taxonomy_hash"] != taxonomy.content_hash():
        raise ModelError(
            "checkpoint was trained against a different taxonomy "
            f"(hash {manifest['taxonomy_hash'][:12]}.. != {taxonomy.content_hash()[:12]}..)"
        )
    config = GatConfig(**manifest["config"])
    model = HierGatModel.create(taxonomy, config, manifest["encoder"])
    by_name = {p.name: p for p in model.parameters()}
    for entry in manifest["parameters"]:
        p = by_name[entry["name"]]
        shape = tuple(entry["shape"])
        if shape != p.data.shape:
            raise ModelError(f"parameter {entry['name']!r} shape mismatch")
        count = int(np.prod(shape)) if shape else 1
        raw = np.frombuffer(
            payload, dtype="<f4", count=count, offset=entry["offset"]
        )
        p.data[...] = raw.reshape(shape).astype(np.float64)
    return model
