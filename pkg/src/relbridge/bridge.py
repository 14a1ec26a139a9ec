"""BRIDGE: a table encoder co-trained with a GCN over the foreign-key graph.

Target-table rows are embedded by the table encoder; rows of every other
entity table get a learned linear projection of their encoded features into
the same space.  The GCN runs over the union of all node sets, the target
block of its output is joined with the table embeddings, and a linear head
produces class logits.  Training is full-batch with masked cross-entropy and
Adam, keeping the parameters of the best validation epoch.
"""
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, IntegrityError, InvalidArgumentError, TrainingDivergedError
from .gnn import GCN, GcnConfig
from .graph import SparseMatrix, build_fk_graph, gcn_normalize, to_homogeneous
from .nn import Linear, Module, component_rng
from .table import encode_features
from .tensor import Parameter
from .tnn import TableEncoder, TnnConfig

log = logging.getLogger(__name__)


@dataclass
class BridgeConfig:
    d: int = 32
    heads: int = 4
    n_blocks: int = 2
    d_table: int = 64
    graph_layers: list = field(default_factory=lambda: [64, 64])
    dropout_p: float = 0.5
    lr: float = 0.01
    epochs: int = 200
    patience: int = 40
    seed: int = 0
    integrate: str = "concat"
    use_graph: bool = True
    identity_adjacency: bool = False
    use_edge_weights: bool = False

    def __post_init__(self):
        self.graph_layers = [int(d) for d in self.graph_layers]
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.integrate not in ("concat", "add"):
            raise ConfigurationError(f"integrate must be concat or add, not {self.integrate!r}")
        if self.integrate == "add" and self.graph_layers and self.graph_layers[-1] != self.d_table:
            raise ConfigurationError("integrate='add' needs the last graph layer to have width d_table")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigurationError("dropout_p must be in [0, 1)")
        self.tnn_config()
        if self.graph_layers:
            self.gcn_config()

    def tnn_config(self):
        return TnnConfig(d=self.d, heads=self.heads, n_blocks=self.n_blocks, d_table=self.d_table)

    def gcn_config(self):
        return GcnConfig(layer_dims=list(self.graph_layers), dropout_p=self.dropout_p)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown model settings {sorted(unknown)}")
        return cls(**d)


# Smaller encoder, faster optimizer: the defaults above target the released
# datasets; this preset trains the 1000-row synthetic benchmark in seconds.
COMPACT_PRESET = {
    "d": 16,
    "heads": 2,
    "n_blocks": 1,
    "d_table": 32,
    "graph_layers": [32, 32],
    "lr": 0.05,
    "dropout_p": 0.5,
    "epochs": 150,
    "patience": 50,
}


def compact_config(**overrides):
    return BridgeConfig(**{**COMPACT_PRESET, **overrides})


@dataclass
class PreparedData:
    """Everything a forward pass needs, computed once per dataset."""

    features: dict
    type_order: list
    offsets: dict
    a_hat: SparseMatrix
    labels: np.ndarray
    split: object
    n_classes: int
    target: str

    @property
    def n_nodes(self):
        return self.a_hat.n_rows

    def block_sizes(self):
        return {t: self.features[t].n_rows for t in self.type_order}


def prepare(dataset, cfg=None):
    cfg = cfg or BridgeConfig()
    if dataset.split is None:
        raise ConfigurationError(f"dataset {dataset.name!r} has no split")
    graph = build_fk_graph(dataset.tables, dataset.fk_specs)
    target = dataset.target_table
    type_order = [target] + sorted(t for t in graph.node_types if t != target)
    features = {}
    for name in type_order:
        features[name] = encode_features(
            dataset.tables[name],
            exclude=dataset.feature_exclusions(name),
            prefix_chars=dataset.prefix_chars,
            allow_empty=name != target,
        )
    adj, offsets = to_homogeneous(graph, type_order, use_weights=cfg.use_edge_weights)
    a_hat = SparseMatrix.identity(adj.n_rows) if cfg.identity_adjacency else gcn_normalize(adj)
    return PreparedData(
        features=features,
        type_order=type_order,
        offsets=offsets,
        a_hat=a_hat,
        labels=dataset.labels(),
        split=dataset.split,
        n_classes=dataset.n_classes,
        target=target,
    )


class AuxProjection(Module):
    """Linear map from an entity table's encoded features into the shared space.

    Categorical codes act as one-hot inputs (an embedding sum); numerical
    columns go through a dense weight.  A table without usable columns gets a
    single learned vector shared by all its rows.
    """

    def __init__(self, features, d_out, rng):
        self.d_out = d_out
        self.embeddings = [
            Parameter(rng.normal(0.0, 1.0 / np.sqrt(d_out), size=(card, d_out)), f"col{j}")
            for j, card in enumerate(features.cardinalities)
        ]
        m = features.n_numerical
        self.weight = Parameter(rng.normal(0.0, 1.0 / np.sqrt(max(m, 1)), size=(m, d_out)), "weight") if m else None
        featureless = not features.cardinalities and not m
        init = rng.normal(0.0, 1.0 / np.sqrt(d_out), size=d_out) if featureless else np.zeros(d_out)
        self.bias = Parameter(init, "bias")

    def forward(self, features):
        n = features.n_rows
        out = T.Tensor(np.zeros((n, self.d_out)))
        for j, emb in enumerate(self.embeddings):
            out = T.add(out, T.embedding(emb, features.categorical[:, j]))
        if self.weight is not None:
            out = T.add(out, T.matmul(T.Tensor(features.numerical), self.weight))
        return T.add(out, self.bias)


class BridgeModel(Module):
    def __init__(self, prepared, cfg):
        self.cfg = cfg
        self.target = prepared.target
        tf = prepared.features[prepared.target]
        self.table_encoder = TableEncoder(tf.n_numerical, tf.cardinalities, cfg.tnn_config(), cfg.seed)
        self.projections = {}
        self.gcn = None
        graph_out = cfg.d_table
        if cfg.use_graph:
            for name in prepared.type_order[1:]:
                rng = component_rng(cfg.seed, f"aux:{name}")
                self.projections[name] = AuxProjection(prepared.features[name], cfg.d_table, rng)
            if cfg.graph_layers:
                self.gcn = GCN(cfg.d_table, cfg.gcn_config(), component_rng(cfg.seed, "gcn"))
                graph_out = cfg.graph_layers[-1]
        head_in = cfg.d_table + graph_out if cfg.integrate == "concat" else cfg.d_table
        # small head weights and zero bias: near-uniform logits before the first step
        self.head = Linear(head_in, prepared.n_classes, component_rng(cfg.seed, "head"), init_scale=0.01)

    def assemble_node_features(self, prepared, table_embedding=None):
        """Stack per-table node features in the adjacency's block order."""
        if table_embedding is None:
            table_embedding = self.table_encoder(prepared.features[self.target])
        blocks = []
        for name in prepared.type_order:
            if prepared.offsets[name] != sum(b.shape[0] for b in blocks):
                raise IntegrityError(f"node block {name!r} does not start at offset {prepared.offsets[name]}")
            block = table_embedding if name == self.target else self.projections[name](prepared.features[name])
            if block.shape[0] != prepared.features[name].n_rows:
                raise IntegrityError(f"node block {name!r} has {block.shape[0]} rows")
            blocks.append(block)
        x = blocks[0] if len(blocks) == 1 else T.concat(blocks, axis=0)
        if x.shape[0] != prepared.n_nodes:
            raise IntegrityError(f"assembled {x.shape[0]} node rows for a {prepared.n_nodes}-node graph")
        return x

    def forward(self, prepared, rng=None):
        emb = self.table_encoder(prepared.features[self.target])
        if self.cfg.use_graph:
            h = self.assemble_node_features(prepared, emb)
            if self.gcn is not None:
                self.gcn.train(self.training)
                h = self.gcn(h, prepared.a_hat, rng)
            start = prepared.offsets[self.target]
            h = T.narrow(h, 0, start, start + emb.shape[0])
        else:
            h = emb
        z = T.concat([emb, h], axis=-1) if self.cfg.integrate == "concat" else T.add(emb, h)
        if self.training:
            z = T.dropout(z, self.cfg.dropout_p, rng)
        return self.head(z)


def bridge_forward(model, prepared, rng=None):
    return model(prepared, rng)


def predict(model, prepared):
    model.eval()
    return model(prepared).data.argmax(axis=1)


def accuracy(predictions, labels, index):
    index = np.asarray(index, dtype=np.int64)
    if index.size == 0:
        raise InvalidArgumentError("accuracy over an empty split part")
    return float(np.mean(predictions[index] == labels[index]))


def evaluate(model, prepared, part="test"):
    """Accuracy of argmax predictions (ties -> lowest class) on a split part."""
    index = prepared.split.part(part)
    return accuracy(predict(model, prepared), prepared.labels, index)


@dataclass
class TrainResult:
    model: BridgeModel
    history: list
    best_epoch: int
    best_val_acc: float
    prepared: PreparedData

    def evaluate(self, part="test"):
        return evaluate(self.model, self.prepared, part)


def train(dataset, cfg=None, prepared=None):
    """Full-batch training; returns the model restored to its best validation epoch."""
    cfg = cfg or BridgeConfig()
    prepared = prepared or prepare(dataset, cfg)
    train_idx = prepared.split.train
    if train_idx.size == 0:
        raise InvalidArgumentError("train split is empty")
    model = BridgeModel(prepared, cfg)
    params = model.parameters()
    opt = T.Adam(params, lr=cfg.lr)
    dropout_rng = component_rng(cfg.seed, "dropout")
    history = []
    best_acc, best_epoch, best_state = -1.0, -1, None
    for epoch in range(cfg.epochs):
        model.train()
        logits = model(prepared, dropout_rng)
        loss = T.softmax_cross_entropy(logits, prepared.labels, train_idx)
        T.backward(loss, params)
        if not math.isfinite(loss.item()):
            norms = {name: float(np.linalg.norm(p.grad)) for name, p in model.named_parameters()}
            raise TrainingDivergedError(
                f"non-finite loss {loss.item()} at epoch {epoch}", epoch=epoch, loss=loss.item(), grad_norms=norms
            )
        opt.step()
        val_acc = evaluate(model, prepared, "val")
        history.append({"epoch": epoch, "train_loss": loss.item(), "val_acc": val_acc})
        if val_acc > best_acc:
            best_acc, best_epoch, best_state = val_acc, epoch, model.state_dict()
        elif epoch - best_epoch >= cfg.patience:
            break
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, history, best_epoch, best_acc, prepared)


def random_accuracy(labels, index, n_classes, rng):
    """Accuracy of a uniform random guess on ``labels[index]``."""
    index = np.asarray(index, dtype=np.int64)
    if index.size == 0:
        raise InvalidArgumentError("accuracy over an empty split part")
    guesses = rng.integers(0, n_classes, size=index.size)
    return float(np.mean(guesses == np.asarray(labels)[index]))


def save_checkpoint(model, path):
    """Named parameter arrays (with shapes) in one ``.npz`` file."""
    np.savez(path, **model.state_dict())


def load_checkpoint(model, path):
    with np.load(path) as blob:
        model.load_state_dict({k: blob[k] for k in blob.files})
    return model


def write_history(history, path):
    with Path(path).open("w", encoding="utf-8") as fh:
        for row in history:
            fh.write(json.dumps(row) + "\n")
