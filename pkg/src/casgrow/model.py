"""Dual-branch graph network for cascade growth prediction.

One branch stacks attention-weighted neighbor aggregation (GAT) layers,
the other stacks spectral propagation (GCN) layers followed by
multi-head scaled dot-product attention. Sinusoidal encodings of each
node's activation rank are re-concatenated at every layer so position
information survives the stacking. Each branch mean-pools its node
states and maps them through an MLP to a log2-domain growth prediction;
a trained two-weight fusion combines the heads.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .autodiff import NodeRef, Tape
from .errors import ConfigError, DataError

PE_BASE = 1000.0

VARIANTS = ("full", "gat_only", "gcn_only", "no_pe")

CHECKPOINT_FORMAT = 1


# -- configuration -----------------------------------------------------------


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int
    pe_dim: int = 16
    gnn_layers: int = 2
    gat_hidden: tuple[int, ...] = (32, 32)
    gcn_hidden: tuple[int, ...] = (32, 32)
    heads: int = 4
    head_dim: int = 16  # shared query/key/value width per head
    mlp_hidden: tuple[int, ...] = (32, 16)
    leaky_slope: float = 0.2
    gat_activation: str = "elu"
    gcn_activation: str = "relu"
    variant: str = "full"

    def problems(self) -> list[str]:
        issues = []
        if self.feature_dim <= 0:
            issues.append(f"feature_dim must be positive, got {self.feature_dim}")
        if self.pe_dim <= 0 or self.pe_dim % 2:
            issues.append(f"pe_dim must be a positive even number, got {self.pe_dim}")
        if self.gnn_layers <= 0:
            issues.append(f"gnn_layers must be positive, got {self.gnn_layers}")
        for name in ("gat_hidden", "gcn_hidden"):
            widths = getattr(self, name)
            if len(widths) != self.gnn_layers:
                issues.append(f"{name} must list {self.gnn_layers} widths, got {widths}")
            if any(w <= 0 for w in widths):
                issues.append(f"{name} widths must be positive, got {widths}")
        if self.heads <= 0:
            issues.append(f"heads must be positive, got {self.heads}")
        if self.head_dim <= 0:
            issues.append(f"head_dim must be positive, got {self.head_dim}")
        if any(w <= 0 for w in self.mlp_hidden):
            issues.append(f"mlp_hidden widths must be positive, got {self.mlp_hidden}")
        if not 0.0 < self.leaky_slope < 1.0:
            issues.append(f"leaky_slope must lie in (0, 1), got {self.leaky_slope}")
        for name in ("gat_activation", "gcn_activation"):
            if getattr(self, name) not in _ACTIVATIONS:
                issues.append(f"{name} must be one of {sorted(_ACTIVATIONS)}")
        if self.variant not in VARIANTS:
            issues.append(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        return issues

    def validated(self) -> "ModelConfig":
        issues = self.problems()
        if issues:
            raise ConfigError("; ".join(issues))
        return self

    @property
    def uses_pe(self) -> bool:
        return self.variant != "no_pe"

    def with_variant(self, variant: str) -> "ModelConfig":
        return replace(self, variant=variant)


@dataclass
class ModelParams:
    """Every trainable weight, keyed by stable names like ``gat.0.W``."""

    values: dict[str, np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.values.items()})

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]


@dataclass
class ForwardOutput:
    pred_gat: float
    pred_att: float
    pred_combined: float
    node_gat: NodeRef | None
    node_att: NodeRef | None
    node_combined: NodeRef
    fusion_nodes: tuple[NodeRef, NodeRef]
    tape: Tape


def _activation(tape: Tape, x: NodeRef, name: str) -> NodeRef:
    fn = _ACTIVATIONS[name]
    return x if fn is None else fn(tape, x)


_ACTIVATIONS = {
    "relu": Tape.relu,
    "elu": Tape.elu,
    "identity": None,
}


# -- graph preprocessing -----------------------------------------------------


def positional_encoding(positions, pe_dim: int) -> np.ndarray:
    """Sinusoidal encoding of activation ranks, one row per node.

    Column 2i holds sin(p / PE_BASE^(2i/pe_dim)), column 2i+1 the cosine
    at the same frequency.
    """
    if pe_dim <= 0 or pe_dim % 2:
        raise ConfigError(f"pe_dim must be a positive even number, got {pe_dim}")
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    pair = np.arange(pe_dim // 2, dtype=np.float64)
    angles = pos * PE_BASE ** (-2.0 * pair / pe_dim)
    pe = np.empty((pos.shape[0], pe_dim))
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe


def symmetrize_edges(edges, n: int) -> list[tuple[int, int]]:
    """Both directions of every edge, deduplicated, self-loops dropped."""
    out = set()
    for src, dst in edges:
        if not (0 <= src < n and 0 <= dst < n):
            raise DataError(f"edge ({src}, {dst}) outside 0..{n - 1}")
        if src == dst:
            continue
        out.add((src, dst))
        out.add((dst, src))
    return sorted(out)


def neighbor_mask(sym_edges, n: int) -> np.ndarray:
    """Boolean n x n adjacency including self-loops (every node attends to itself)."""
    mask = np.zeros((n, n), dtype=bool)
    np.fill_diagonal(mask, True)
    for src, dst in sym_edges:
        mask[src, dst] = True
    return mask


def normalized_laplacian(sym_edges, n: int) -> np.ndarray:
    """Symmetric-normalized Laplacian I - D^(-1/2) A D^(-1/2).

    Expects symmetrized edges without self-loops. Zero-degree nodes use
    the convention 0^(-1/2) := 0, leaving the identity row in place.
    """
    adj = np.zeros((n, n))
    for src, dst in sym_edges:
        if src == dst:
            raise DataError(f"self-loop ({src}, {src}) not allowed in Laplacian input")
        adj[src, dst] = 1.0
    degree = adj.sum(axis=1)
    with np.errstate(divide="ignore"):
        dinv = np.where(degree > 0, degree, 1.0) ** -0.5
    dinv[degree == 0] = 0.0
    return np.eye(n) - dinv[:, None] * adj * dinv[None, :]


# -- layers ------------------------------------------------------------------


def gat_layer(
    tape: Tape,
    h: NodeRef,
    pe: NodeRef | None,
    mask: np.ndarray,
    weight: NodeRef,
    attn: NodeRef,
    slope: float,
    activation: str = "elu",
) -> NodeRef:
    """One attention-aggregation layer.

    ``weight`` is (d_out, d_in [+ pe_dim]) applied to each node's
    (state || positional encoding); ``attn`` is a 1 x 2*d_out score
    vector whose halves weight the aggregating node and the neighbor.
    Coefficients are a masked softmax over the neighborhood (self
    included), so every row sums to 1.
    """
    n = h.shape[0]
    x = tape.concat_cols(h, pe) if pe is not None else h
    z = tape.matmul(x, tape.transpose(weight))
    d_out = z.shape[1]
    if attn.shape != (1, 2 * d_out):
        raise ConfigError(f"attention vector shape {attn.shape} != (1, {2 * d_out})")
    score_self = tape.matmul(z, tape.transpose(tape.slice_cols(attn, 0, d_out)))
    score_neigh = tape.matmul(z, tape.transpose(tape.slice_cols(attn, d_out, 2 * d_out)))
    ones_row = tape.constant(np.ones((1, n)))
    ones_col = tape.constant(np.ones((n, 1)))
    scores = tape.add(
        tape.matmul(score_self, ones_row),
        tape.matmul(ones_col, tape.transpose(score_neigh)),
    )
    alpha = tape.masked_row_softmax(tape.leaky_relu(scores, slope), mask)
    return _activation(tape, tape.matmul(alpha, z), activation)


def gat_coefficients(
    tape: Tape,
    h: NodeRef,
    pe: NodeRef | None,
    mask: np.ndarray,
    weight: NodeRef,
    attn: NodeRef,
    slope: float,
) -> NodeRef:
    """The layer's attention coefficient matrix alone (rows sum to 1)."""
    x = tape.concat_cols(h, pe) if pe is not None else h
    z = tape.matmul(x, tape.transpose(weight))
    d_out = z.shape[1]
    n = h.shape[0]
    score_self = tape.matmul(z, tape.transpose(tape.slice_cols(attn, 0, d_out)))
    score_neigh = tape.matmul(z, tape.transpose(tape.slice_cols(attn, d_out, 2 * d_out)))
    scores = tape.add(
        tape.matmul(score_self, tape.constant(np.ones((1, n)))),
        tape.matmul(tape.constant(np.ones((n, 1))), tape.transpose(score_neigh)),
    )
    return tape.masked_row_softmax(tape.leaky_relu(scores, slope), mask)


def gcn_layer(
    tape: Tape,
    h: NodeRef,
    pe: NodeRef | None,
    lap: NodeRef,
    weight: NodeRef,
    bias: NodeRef,
    activation: str = "relu",
) -> NodeRef:
    """Spectral propagation: act(L (h || pe) W^T + b)."""
    x = tape.concat_cols(h, pe) if pe is not None else h
    propagated = tape.matmul(tape.matmul(lap, x), tape.transpose(weight))
    return _activation(tape, tape.add(propagated, bias), activation)


def multi_head_attention(
    tape: Tape,
    h: NodeRef,
    projections: list[tuple[NodeRef, NodeRef, NodeRef]],
) -> NodeRef:
    """Scaled dot-product attention per head, heads combined by averaging.

    Each projection triple (Wq, Wk, Wv) is (d_in, head_dim); the 1/sqrt(d_k)
    scaling is applied to the query-key scores before the row softmax.
    """
    heads = []
    for wq, wk, wv in projections:
        q = tape.matmul(h, wq)
        k = tape.matmul(h, wk)
        v = tape.matmul(h, wv)
        d_k = k.shape[1]
        scores = tape.scale(tape.matmul(q, tape.transpose(k)), 1.0 / math.sqrt(d_k))
        heads.append(tape.matmul(tape.row_softmax(scores), v))
    combined = heads[0]
    for head in heads[1:]:
        combined = tape.add(combined, head)
    return tape.scale(combined, 1.0 / len(heads))


def _mlp(tape: Tape, x: NodeRef, layers: list[tuple[NodeRef, NodeRef]]) -> NodeRef:
    """ReLU MLP with a linear final layer; output stays in the log2 domain."""
    out = x
    for i, (w, b) in enumerate(layers):
        out = tape.add(tape.matmul(out, tape.transpose(w)), b)
        if i < len(layers) - 1:
            out = tape.relu(out)
    return out


# -- parameters --------------------------------------------------------------


def _glorot(rng: np.random.Generator, rows: int, cols: int, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(rows, cols))


def _gat_input_dims(config: ModelConfig) -> list[int]:
    dims = [config.feature_dim, *config.gat_hidden[:-1]]
    extra = config.pe_dim if config.uses_pe else 0
    return [d + extra for d in dims]


def _gcn_input_dims(config: ModelConfig) -> list[int]:
    dims = [config.feature_dim, *config.gcn_hidden[:-1]]
    extra = config.pe_dim if config.uses_pe else 0
    return [d + extra for d in dims]


def _mlp_dims(d_in: int, config: ModelConfig) -> list[tuple[int, int]]:
    widths = [d_in, *config.mlp_hidden, 1]
    return list(zip(widths[1:], widths[:-1]))  # (d_out, d_in) per layer


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases, fusion weights at (0.5, 0.5)."""
    config.validated()
    rng = np.random.default_rng(seed)
    values: dict[str, np.ndarray] = {}

    if config.variant != "gcn_only":
        for layer, d_in in enumerate(_gat_input_dims(config)):
            d_out = config.gat_hidden[layer]
            values[f"gat.{layer}.W"] = _glorot(rng, d_out, d_in, d_in, d_out)
            values[f"gat.{layer}.a"] = _glorot(rng, 1, 2 * d_out, 2 * d_out, 1)
        for layer, (d_out, d_in) in enumerate(_mlp_dims(config.gat_hidden[-1], config)):
            values[f"mlp_gat.{layer}.W"] = _glorot(rng, d_out, d_in, d_in, d_out)
            values[f"mlp_gat.{layer}.b"] = np.zeros((1, d_out))

    if config.variant != "gat_only":
        for layer, d_in in enumerate(_gcn_input_dims(config)):
            d_out = config.gcn_hidden[layer]
            values[f"gcn.{layer}.W"] = _glorot(rng, d_out, d_in, d_in, d_out)
            values[f"gcn.{layer}.b"] = np.zeros((1, d_out))
        d_att_in = config.gcn_hidden[-1]
        for head in range(config.heads):
            for tag in ("Wq", "Wk", "Wv"):
                values[f"head.{head}.{tag}"] = _glorot(
                    rng, d_att_in, config.head_dim, d_att_in, config.head_dim
                )
        for layer, (d_out, d_in) in enumerate(_mlp_dims(config.head_dim, config)):
            values[f"mlp_att.{layer}.W"] = _glorot(rng, d_out, d_in, d_in, d_out)
            values[f"mlp_att.{layer}.b"] = np.zeros((1, d_out))

    if config.variant == "gat_only":
        w1, w2 = 1.0, 0.0
    elif config.variant == "gcn_only":
        w1, w2 = 0.0, 1.0
    else:
        w1 = w2 = 0.5
    values["fusion.w1"] = np.array([[w1]])
    values["fusion.w2"] = np.array([[w2]])
    return ModelParams(values)


def fusion_trainable(config: ModelConfig) -> bool:
    return config.variant in ("full", "no_pe")


def trainable_names(params: ModelParams, config: ModelConfig) -> list[str]:
    names = sorted(params.values)
    if not fusion_trainable(config):
        names = [n for n in names if not n.startswith("fusion.")]
    return names


# -- the bound network -------------------------------------------------------


class BoundModel:
    """Model parameters registered on one tape, ready to run cascades.

    One binding serves a whole mini-batch: call :meth:`forward` per
    cascade, combine with :func:`batch_loss`, run ``tape.backward`` once.
    """

    def __init__(self, tape: Tape, params: ModelParams, config: ModelConfig):
        config.validated()
        self.tape = tape
        self.config = config
        self.nodes: dict[str, NodeRef] = {}
        fusion_is_param = fusion_trainable(config)
        for name in sorted(params.values):
            value = params.values[name]
            if name.startswith("fusion.") and not fusion_is_param:
                self.nodes[name] = tape.constant(value)
            else:
                self.nodes[name] = tape.param(value)

    def forward(self, cascade) -> ForwardOutput:
        tape, config = self.tape, self.config
        n = len(cascade.node_ids)
        features = np.asarray(cascade.features, dtype=np.float64)
        if features.shape != (n, config.feature_dim):
            raise ConfigError(
                f"cascade features {features.shape} do not match "
                f"(n={n}, feature_dim={config.feature_dim})"
            )
        sym_edges = symmetrize_edges(cascade.edges, n)
        h0 = tape.constant(features)
        pe = None
        if config.uses_pe:
            pe = tape.constant(positional_encoding(cascade.positions, config.pe_dim))

        node_gat = node_att = None
        if config.variant != "gcn_only":
            mask = neighbor_mask(sym_edges, n)
            h = h0
            for layer in range(config.gnn_layers):
                h = gat_layer(
                    tape, h, pe, mask,
                    self.nodes[f"gat.{layer}.W"], self.nodes[f"gat.{layer}.a"],
                    config.leaky_slope, config.gat_activation,
                )
            node_gat = _mlp(tape, tape.mean_rows(h), self._mlp_nodes("mlp_gat"))

        if config.variant != "gat_only":
            lap = tape.constant(normalized_laplacian(sym_edges, n))
            h = h0
            for layer in range(config.gnn_layers):
                h = gcn_layer(
                    tape, h, pe, lap,
                    self.nodes[f"gcn.{layer}.W"], self.nodes[f"gcn.{layer}.b"],
                    config.gcn_activation,
                )
            projections = [
                (self.nodes[f"head.{i}.Wq"], self.nodes[f"head.{i}.Wk"], self.nodes[f"head.{i}.Wv"])
                for i in range(config.heads)
            ]
            h = multi_head_attention(tape, h, projections)
            node_att = _mlp(tape, tape.mean_rows(h), self._mlp_nodes("mlp_att"))

        w1, w2 = self.nodes["fusion.w1"], self.nodes["fusion.w2"]
        gat_term = node_gat if node_gat is not None else tape.constant([[0.0]])
        att_term = node_att if node_att is not None else tape.constant([[0.0]])
        node_combined = tape.add(tape.mul(w1, gat_term), tape.mul(w2, att_term))

        return ForwardOutput(
            pred_gat=float(gat_term.value[0, 0]),
            pred_att=float(att_term.value[0, 0]),
            pred_combined=float(node_combined.value[0, 0]),
            node_gat=node_gat,
            node_att=node_att,
            node_combined=node_combined,
            fusion_nodes=(w1, w2),
            tape=tape,
        )

    def _mlp_nodes(self, prefix: str) -> list[tuple[NodeRef, NodeRef]]:
        count = len(self.config.mlp_hidden) + 1
        return [(self.nodes[f"{prefix}.{i}.W"], self.nodes[f"{prefix}.{i}.b"]) for i in range(count)]


def log_growth(label: int | float) -> float:
    """log2(growth + 1); the +1 shift keeps zero growth representable."""
    if label < 0:
        raise DataError(f"growth label must not be negative, got {label}")
    return math.log2(label + 1.0)


def batch_loss(outputs: list[ForwardOutput], labels) -> NodeRef:
    """Mean over the batch of w1 * (gat error)^2 + w2 * (att error)^2.

    Head predictions and labels are both in the log2 domain.
    """
    if not outputs:
        raise ConfigError("batch_loss requires a nonempty batch")
    if len(outputs) != len(labels):
        raise ConfigError(f"{len(outputs)} outputs vs {len(labels)} labels")
    tape = outputs[0].tape
    total = None
    for out, label in zip(outputs, labels):
        if out.tape is not tape:
            raise ConfigError("all batch outputs must share one tape")
        w1, w2 = out.fusion_nodes
        target = tape.constant([[log_growth(label)]])
        term = None
        if out.node_gat is not None:
            err = tape.sub(out.node_gat, target)
            term = tape.mul(w1, tape.mul(err, err))
        if out.node_att is not None:
            err = tape.sub(out.node_att, target)
            att_term = tape.mul(w2, tape.mul(err, err))
            term = att_term if term is None else tape.add(term, att_term)
        total = term if total is None else tape.add(total, term)
    return tape.scale(total, 1.0 / len(outputs))


def predict(params: ModelParams, config: ModelConfig, cascade) -> ForwardOutput:
    """Inference on a fresh gradient-free tape."""
    return BoundModel(Tape(grad_enabled=False), params, config).forward(cascade)


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path, params: ModelParams, config: ModelConfig) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(config),
        "params": {
            name: {"rows": v.shape[0], "cols": v.shape[1], "data": v.ravel().tolist()}
            for name, v in sorted(params.values.items())
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    with open(path, encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"checkpoint {path} is not valid JSON: {exc}") from exc
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"unsupported checkpoint format {payload.get('format')!r}")
    raw = payload.get("config", {})
    for key in ("gat_hidden", "gcn_hidden", "mlp_hidden"):
        if key in raw:
            raw[key] = tuple(raw[key])
    config = ModelConfig(**raw).validated()
    values = {}
    for name, entry in payload.get("params", {}).items():
        rows, cols, data = entry["rows"], entry["cols"], entry["data"]
        if len(data) != rows * cols:
            raise DataError(f"checkpoint entry {name}: {len(data)} values for {rows}x{cols}")
        values[name] = np.array(data, dtype=np.float64).reshape(rows, cols)
    return ModelParams(values), config
