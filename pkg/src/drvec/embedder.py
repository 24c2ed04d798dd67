"""Speaker embedding network: stacked LSTM layers, each with a
dimension-reducing linear projection and tanh on the output, followed by a
final-frame linear map to the embedding.

The recurrent input of each layer is its own projected post-tanh output,
so hidden state is ``hidden_dim`` wide while the recurrence and the
emitted sequence are ``proj_dim`` wide. Initial state is zero. Everything
runs on the autodiff tape, so BPTT falls out of ``backward``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError, DimensionError


@dataclass(frozen=True)
class EmbedderConfig:
    num_layers: int = 2
    hidden_dim: int = 64
    proj_dim: int = 32
    embedding_dim: int = 32
    feature_dim: int = 40

    def __post_init__(self):
        if self.num_layers < 1:
            raise DataError("embedder needs at least one layer")
        if self.proj_dim > self.hidden_dim:
            raise DataError(f"proj_dim {self.proj_dim} must not exceed hidden_dim {self.hidden_dim}")

    def layer_input_dim(self, layer: int) -> int:
        return self.feature_dim if layer == 0 else self.proj_dim


#: desk preset: full training runs finish in minutes on a laptop
DESK_EMBEDDER = EmbedderConfig()
#: full-size preset: 3 x LSTM(768) with 256-dim projection and embedding
FULL_EMBEDDER = EmbedderConfig(num_layers=3, hidden_dim=768, proj_dim=256,
                                embedding_dim=256, feature_dim=40)

_GATES = ("i", "f", "g", "o")


@dataclass
class LstmPLayerParams:
    """One layer: four gate weight matrices (input, forget, cell, output),
    their biases, and the recurrent projection."""

    weights: dict  # gate -> Tensor of (input_dim + proj_dim, hidden_dim)
    biases: dict  # gate -> Tensor of (hidden_dim,)
    proj: Tensor  # (hidden_dim, proj_dim)

    @property
    def hidden_dim(self) -> int:
        return self.proj.shape[0]

    @property
    def proj_dim(self) -> int:
        return self.proj.shape[1]

    @property
    def input_dim(self) -> int:
        return self.weights["i"].shape[0] - self.proj_dim

    def tensors(self) -> list:
        out = []
        for gate in _GATES:
            out.append((f"w_{gate}", self.weights[gate]))
        for gate in _GATES:
            out.append((f"b_{gate}", self.biases[gate]))
        out.append(("proj", self.proj))
        return out


@dataclass
class EmbedderParams:
    layers: list
    out_weight: Tensor  # (proj_dim, embedding_dim)
    out_bias: Tensor  # (embedding_dim,)

    def tensors(self) -> list:
        out = []
        for k, layer in enumerate(self.layers):
            out.extend((f"embedder.layer{k}.{name}", t) for name, t in layer.tensors())
        out.append(("embedder.out.weight", self.out_weight))
        out.append(("embedder.out.bias", self.out_bias))
        return out


@dataclass
class DrVector:
    """Speaker embedding whose first ``d`` dims feed the cosine path and
    whose full length feeds the decision network."""

    vec: Tensor  # 1-d, embedding_dim
    d: int

    def __post_init__(self):
        if self.vec.ndim != 1:
            raise DimensionError(f"DrVector expects a 1-d tensor, got shape {self.vec.shape}")
        if not 0 <= self.d <= self.dim:
            raise DataError(f"cosine dims d={self.d} outside [0, {self.dim}]")

    @property
    def dim(self) -> int:
        return self.vec.shape[0]

    @property
    def s(self) -> int:
        return self.dim - self.d

    @property
    def values(self) -> np.ndarray:
        return self.vec.data


def _uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def init_embedder(config: EmbedderConfig, rng: np.random.Generator,
                  dtype=np.float32) -> EmbedderParams:
    """Uniform +-1/sqrt(fan_in) weights; forget-gate bias 1, others 0."""
    layers = []
    for k in range(config.num_layers):
        in_dim = config.layer_input_dim(k) + config.proj_dim
        weights = {g: _uniform(rng, (in_dim, config.hidden_dim), in_dim, dtype) for g in _GATES}
        biases = {}
        for g in _GATES:
            init = np.ones(config.hidden_dim) if g == "f" else np.zeros(config.hidden_dim)
            biases[g] = Tensor(init.astype(dtype), requires_grad=True)
        proj = _uniform(rng, (config.hidden_dim, config.proj_dim), config.hidden_dim, dtype)
        layers.append(LstmPLayerParams(weights, biases, proj))
    out_weight = _uniform(rng, (config.proj_dim, config.embedding_dim), config.proj_dim, dtype)
    out_bias = Tensor(np.zeros(config.embedding_dim, dtype=dtype), requires_grad=True)
    return EmbedderParams(layers, out_weight, out_bias)


def embedder_param_count(config: EmbedderConfig) -> int:
    """Closed-form parameter total; asserted against allocation in tests."""
    total = 0
    for k in range(config.num_layers):
        in_dim = config.layer_input_dim(k) + config.proj_dim
        total += 4 * (in_dim * config.hidden_dim + config.hidden_dim)
        total += config.hidden_dim * config.proj_dim
    total += config.proj_dim * config.embedding_dim + config.embedding_dim
    return total


def count_tensors(tensors) -> int:
    return sum(t.size for _, t in tensors)


# ---------------------------------------------------------------------------
# forward passes

def _cell_step(layer: LstmPLayerParams, x_t: Tensor, r_prev: Tensor, c_prev: Tensor):
    """One recurrence step on a (batch x input_dim) slice; returns (r, c)."""
    z = ad.concat([x_t, r_prev], axis=1)
    gi = ad.sigmoid(ad.add(ad.matmul(z, layer.weights["i"]), layer.biases["i"]))
    gf = ad.sigmoid(ad.add(ad.matmul(z, layer.weights["f"]), layer.biases["f"]))
    gg = ad.tanh(ad.add(ad.matmul(z, layer.weights["g"]), layer.biases["g"]))
    go = ad.sigmoid(ad.add(ad.matmul(z, layer.weights["o"]), layer.biases["o"]))
    c = ad.add(ad.mul(gf, c_prev), ad.mul(gi, gg))
    r = ad.tanh(ad.matmul(ad.mul(go, ad.tanh(c)), layer.proj))
    return r, c


def _layer_forward(layer: LstmPLayerParams, steps: list) -> list:
    """Run one layer over a list of (batch x input_dim) step tensors."""
    batch = steps[0].shape[0]
    dtype = layer.proj.dtype
    r = Tensor(np.zeros((batch, layer.proj_dim), dtype=dtype))
    c = Tensor(np.zeros((batch, layer.hidden_dim), dtype=dtype))
    outs = []
    for x_t in steps:
        r, c = _cell_step(layer, x_t, r, c)
        outs.append(r)
    return outs


def lstm_p_forward(layer: LstmPLayerParams, seq) -> Tensor:
    """Apply one projected-LSTM layer to a (T x input_dim) sequence,
    returning the (T x proj_dim) projected output sequence."""
    seq = seq if isinstance(seq, Tensor) else Tensor(np.asarray(seq, dtype=layer.proj.dtype))
    if seq.ndim != 2:
        raise DimensionError(f"sequence must be 2-d (T x input_dim), got shape {seq.shape}")
    if seq.shape[1] != layer.input_dim:
        raise DimensionError(f"sequence feature dim {seq.shape[1]} != layer input dim {layer.input_dim}")
    steps = [ad.narrow(seq, 0, t, 1) for t in range(seq.shape[0])]
    return ad.concat(_layer_forward(layer, steps), axis=0)


def embed_batch(config: EmbedderConfig, params: EmbedderParams, feature_seqs) -> Tensor:
    """Embed several variable-length sequences in lockstep.

    Sequences are zero-padded to the longest length; each embedding reads
    the layer output at that sequence's own final frame, so padding never
    leaks into results. Returns a (batch x embedding_dim) tensor.
    """
    if not feature_seqs:
        raise DataError("embed_batch needs at least one sequence")
    dtype = params.out_weight.dtype
    arrs = []
    for seq in feature_seqs:
        arr = np.asarray(seq, dtype=dtype)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise DataError(f"feature sequence must be non-empty T x dim, got shape {arr.shape}")
        if arr.shape[1] != config.feature_dim:
            raise DimensionError(f"feature dim {arr.shape[1]} != configured {config.feature_dim}")
        arrs.append(arr)
    lengths = [a.shape[0] for a in arrs]
    t_max, batch = max(lengths), len(arrs)
    padded = np.zeros((t_max, batch, config.feature_dim), dtype=dtype)
    for i, a in enumerate(arrs):
        padded[:a.shape[0], i, :] = a

    steps = [Tensor(padded[t]) for t in range(t_max)]
    for layer in params.layers:
        steps = _layer_forward(layer, steps)
    stacked = ad.concat(steps, axis=0)  # (t_max*batch, proj_dim)
    final_rows = [(lengths[i] - 1) * batch + i for i in range(batch)]
    last = ad.gather_rows(stacked, final_rows)
    return ad.add(ad.matmul(last, params.out_weight), params.out_bias)


def embed(config: EmbedderConfig, params: EmbedderParams, features,
          d: int | None = None) -> DrVector:
    """Embed one utterance (T x feature_dim) into a DrVector."""
    feats = np.asarray(features)
    if feats.ndim != 2 or feats.shape[0] < 1:
        raise DataError(f"cannot embed an empty feature sequence (shape {feats.shape})")
    out = embed_batch(config, params, [feats])
    vec = ad.reshape(out, (config.embedding_dim,))
    return DrVector(vec, config.embedding_dim if d is None else d)


def enroll_average(embeddings) -> DrVector:
    """Arithmetic per-dimension mean of enrollment embeddings."""
    if not embeddings:
        raise DataError("enroll_average of an empty embedding list")
    dim, d = embeddings[0].dim, embeddings[0].d
    for e in embeddings[1:]:
        if e.dim != dim or e.d != d:
            raise DataError("enrollment embeddings disagree on dimensions or d split")
    if len(embeddings) == 1:
        return embeddings[0]
    rows = [ad.reshape(e.vec, (1, dim)) for e in embeddings]
    mean = ad.reduce(ad.concat(rows, axis=0), "mean", axis=0)
    return DrVector(ad.reshape(mean, (dim,)), d)
