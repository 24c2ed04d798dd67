"""Decision-residual scoring head.

Two paths over a pair of DrVectors: a cosine score over the first ``d``
dimensions, and a decision network over the concatenated full embeddings
(optionally fed the cosine score). Switches select which paths reach the
output sum; a learned affine transform conditions the combined score.

Switch semantics (validated at construction, never at scoring time):
  A - cosine score added to the output sum
  B - cosine score appended to the decision-network input (requires C)
  C - decision network active
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .embedder import DrVector
from .errors import ConfigError, DataError

COSINE_EPS = 1e-12
LEAKY_ALPHA = 0.2
AFFINE_INIT_W = 10.0  # places cosine-range scores in a useful softmax range
AFFINE_INIT_B = -5.0


@dataclass(frozen=True)
class SwitchConfig:
    A: bool
    B: bool
    C: bool
    d: int

    def __post_init__(self):
        if not (self.A or self.C):
            raise ConfigError("switch config leaves no score path: need A or C on")
        if self.B and not self.C:
            raise ConfigError("switch B (cosine into decision net) requires C on")
        if self.A and self.d < 1:
            raise ConfigError("switch A (cosine path) requires d >= 1")
        if self.d < 0:
            raise ConfigError(f"cosine dims d must be >= 0, got {self.d}")

    def validate_for(self, embedding_dim: int) -> None:
        if self.d > embedding_dim:
            raise ConfigError(f"cosine dims d={self.d} exceed embedding_dim {embedding_dim}")

    def label(self) -> str:
        def onoff(v):
            return "ON" if v else "OFF"
        return f"A={onoff(self.A)},B={onoff(self.B)},C={onoff(self.C)},d={self.d}"


#: plain cosine scoring over the full embedding (d-vector style system)
COSINE_ONLY = SwitchConfig(A=True, B=False, C=False, d=32)


@dataclass
class DecisionNetParams:
    """Three leaky-ReLU dense layers plus a weighted-sum read-out."""

    layers: list  # [(W, b), ...] with W: (in, width), b: (width,)
    out_weight: Tensor  # (width, 1)
    out_bias: Tensor  # scalar

    @property
    def input_dim(self) -> int:
        return self.layers[0][0].shape[0]

    def tensors(self) -> list:
        out = []
        for k, (w, b) in enumerate(self.layers):
            out.append((f"dnn.layer{k}.weight", w))
            out.append((f"dnn.layer{k}.bias", b))
        out.append(("dnn.out.weight", self.out_weight))
        out.append(("dnn.out.bias", self.out_bias))
        return out


@dataclass
class AffineOutput:
    """Trainable scale/offset applied to the combined score."""

    w: Tensor  # scalar, initialized > 0
    b: Tensor  # scalar

    def tensors(self) -> list:
        return [("affine.w", self.w), ("affine.b", self.b)]


def decision_net_input_dim(embedding_dim: int, cosine_input: bool) -> int:
    return 2 * embedding_dim + (1 if cosine_input else 0)


def init_decision_net(embedding_dim: int, width: int, cosine_input: bool,
                      rng: np.random.Generator, dtype=np.float32) -> DecisionNetParams:
    """Uniform +-1/sqrt(fan_in) weights, zero biases."""
    dims = [decision_net_input_dim(embedding_dim, cosine_input), width, width, width]
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        w = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype), requires_grad=True)
        b = Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True)
        layers.append((w, b))
    bound = 1.0 / np.sqrt(width)
    out_w = Tensor(rng.uniform(-bound, bound, size=(width, 1)).astype(dtype), requires_grad=True)
    out_b = Tensor(np.asarray(0.0, dtype=dtype), requires_grad=True)
    return DecisionNetParams(layers, out_w, out_b)


def init_affine(dtype=np.float32) -> AffineOutput:
    return AffineOutput(Tensor(np.asarray(AFFINE_INIT_W, dtype=dtype), requires_grad=True),
                        Tensor(np.asarray(AFFINE_INIT_B, dtype=dtype), requires_grad=True))


def head_param_count(embedding_dim: int, width: int, cosine_input: bool) -> int:
    """Decision net + affine parameter total (closed form)."""
    in_dim = decision_net_input_dim(embedding_dim, cosine_input)
    total = in_dim * width + width
    total += 2 * (width * width + width)
    total += width + 1  # read-out
    total += 2  # affine
    return total


# ---------------------------------------------------------------------------
# scoring paths

def cosine_score(enroll: DrVector, test: DrVector, d: int) -> Tensor:
    """Cosine similarity over the first ``d`` dims, epsilon-guarded so it
    stays total and differentiable on degenerate embeddings. ``d`` = 0
    contributes a constant zero."""
    if enroll.dim != test.dim:
        raise DataError(f"embedding dims disagree: {enroll.dim} vs {test.dim}")
    if d > enroll.dim:
        raise DataError(f"cosine dims d={d} exceed embedding dim {enroll.dim}")
    if d == 0:
        return Tensor(np.asarray(0.0, dtype=enroll.vec.dtype))
    eb = ad.narrow(enroll.vec, 0, 0, d)
    tb = ad.narrow(test.vec, 0, 0, d)
    num = ad.sum_all(ad.mul(eb, tb))
    e_norm = ad.add(ad.sqrt(ad.sum_all(ad.mul(eb, eb))), COSINE_EPS)
    t_norm = ad.add(ad.sqrt(ad.sum_all(ad.mul(tb, tb))), COSINE_EPS)
    return ad.div(num, ad.mul(e_norm, t_norm))


def decision_net_score(enroll: DrVector, test: DrVector, cos_opt,
                       params: DecisionNetParams) -> Tensor:
    """Concatenate [enroll, test, cosine?] and run the 3-layer network plus
    read-out; returns the scalar intermediate score."""
    parts = [enroll.vec, test.vec]
    if cos_opt is not None:
        parts.append(ad.reshape(cos_opt, (1,)))
    x = ad.reshape(ad.concat(parts, axis=0), (1, sum(p.shape[0] for p in parts)))
    for w, b in params.layers:
        x = ad.leaky_relu(ad.add(ad.matmul(x, w), b), LEAKY_ALPHA)
    out = ad.add(ad.matmul(x, params.out_weight), params.out_bias)
    return ad.reshape(out, ())


def score_trial(enroll_model: DrVector, test_emb: DrVector, switches: SwitchConfig,
                dnn: DecisionNetParams | None, out: AffineOutput) -> Tensor:
    """Switched sum of the active paths followed by the affine transform."""
    cos = cosine_score(enroll_model, test_emb, switches.d) if (switches.A or switches.B) else None
    raw = None
    if switches.A:
        raw = cos
    if switches.C:
        if dnn is None:
            raise ConfigError("switch C is on but no decision network parameters were given")
        dnn_score = decision_net_score(enroll_model, test_emb, cos if switches.B else None, dnn)
        raw = dnn_score if raw is None else ad.add(raw, dnn_score)
    return ad.add(ad.mul(out.w, raw), out.b)


def make_scorer(switches: SwitchConfig, dnn: DecisionNetParams | None,
                out: AffineOutput):
    """Bind parameters into a (enroll_model, test) -> scalar Tensor closure."""
    if switches.C and dnn is None:
        raise ConfigError("switch C is on but no decision network parameters were given")

    def scorer(enroll_model: DrVector, test_emb: DrVector) -> Tensor:
        return score_trial(enroll_model, test_emb, switches, dnn, out)

    return scorer
