"""GCN graph encoder: ``act(A_hat @ X @ W)`` layers with dropout in between."""
from dataclasses import dataclass, field

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .nn import Module, glorot_uniform
from .tensor import Parameter

ACTIVATIONS = ("relu", "none")


@dataclass
class GcnConfig:
    layer_dims: list = field(default_factory=lambda: [64, 64])
    dropout_p: float = 0.5
    activations: list = None

    def __post_init__(self):
        self.layer_dims = [int(d) for d in self.layer_dims]
        if self.activations is None:
            self.activations = ["relu"] * (len(self.layer_dims) - 1) + ["none"] if self.layer_dims else []
        self.validate()

    def validate(self):
        if not self.layer_dims:
            raise ConfigurationError("a GCN needs at least one layer")
        if len(self.activations) != len(self.layer_dims):
            raise ConfigurationError("one activation per layer is required")
        if any(a not in ACTIVATIONS for a in self.activations):
            raise ConfigurationError(f"activations must be among {ACTIVATIONS}")
        if self.activations[-1] != "none":
            raise ConfigurationError("the final GCN layer must have no activation")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigurationError("dropout_p must be in [0, 1)")

    @property
    def out_dim(self):
        return self.layer_dims[-1]


def gcn_layer(x, a_hat, weight, activation="none"):
    """One propagation step: sparse product, dense product, activation."""
    x = T.as_tensor(x)
    if x.ndim != 2 or a_hat.shape != (x.shape[0], x.shape[0]) or weight.shape[0] != x.shape[1]:
        raise DimensionError(
            f"gcn_layer: X {x.shape}, A_hat {a_hat.shape} and W {weight.shape} do not agree"
        )
    h = T.matmul(T.spmm(a_hat, x), weight)
    return T.relu(h) if activation == "relu" else h


class GCN(Module):
    """Stack of bias-free GCN layers; dropout between layers while training."""

    def __init__(self, in_dim, cfg, rng):
        self.cfg = cfg
        dims = [in_dim] + cfg.layer_dims
        self.weights = [
            Parameter(glorot_uniform(rng, dims[i], dims[i + 1]), f"w{i}") for i in range(len(cfg.layer_dims))
        ]

    def forward(self, x, a_hat, rng=None):
        h = x
        last = len(self.weights) - 1
        for i, (w, act) in enumerate(zip(self.weights, self.cfg.activations)):
            h = gcn_layer(h, a_hat, w, act)
            if i < last and self.training:
                h = T.dropout(h, self.cfg.dropout_p, rng)
        return h


def gcn_encode(x, a_hat, cfg, rng, encoder=None, training=False, dropout_rng=None):
    """Encode node features; builds a fresh GCN from ``rng`` unless one is given."""
    encoder = encoder or GCN(T.as_tensor(x).shape[1], cfg, rng)
    encoder.train(training)
    return encoder(x, a_hat, dropout_rng if dropout_rng is not None else rng)
