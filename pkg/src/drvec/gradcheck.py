"""Finite-difference verification suite over every differentiable operation.

Each entry compares analytic gradients against 64-bit central differences
at a fixed seed. Inputs feeding leaky-ReLU units are arranged so no
pre-activation sits within 1e-3 of the kink, where the two-sided estimate
is meaningless. Large parameter tensors are probed on a deterministic
coordinate subsample; everything else is probed exhaustively.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check, param_grad_check
from .embedder import EmbedderConfig, embed, enroll_average, init_embedder, lstm_p_forward
from .head import SwitchConfig, cosine_score, decision_net_score, init_affine, init_decision_net, score_trial
from .losses import ecw_bce_loss, ge2e_softmax_loss, ge2e_xs_loss
from .model import DrVectorModel, ModelConfig
from .synth import stream

DEFAULT_TOL = 1e-4


@dataclass
class OpCheck:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def _check_simple_ops() -> list:
    rng = np.random.default_rng(1000)
    checks = []

    b = Tensor(rng.standard_normal((5, 4)))
    a0 = Tensor(rng.standard_normal((3, 5)))
    checks.append(OpCheck("matmul", max(
        grad_check(lambda a: ad.sum_all(ad.matmul(a, b)), a0),
        grad_check(lambda t: ad.sum_all(ad.matmul(a0, t)), Tensor(rng.standard_normal((5, 4)))),
    ), 1e-6))

    x = Tensor(rng.standard_normal(40))
    for kind, tol in (("tanh", 1e-7), ("sigmoid", 1e-7), ("softplus", 1e-7)):
        checks.append(OpCheck(f"activation[{kind}]", grad_check(
            lambda t, k=kind: ad.sum_all(ad.activation(t, k)), x), tol))
    off_kink = rng.standard_normal(40)
    off_kink = off_kink[np.abs(off_kink) > 1e-2]
    checks.append(OpCheck("activation[leaky_relu]", grad_check(
        lambda t: ad.sum_all(ad.leaky_relu(t)), Tensor(off_kink)), 1e-7))

    w = Tensor(rng.standard_normal((7, 3)))
    head = Tensor(rng.standard_normal((4, 3)))
    checks.append(OpCheck("concat", grad_check(
        lambda t: ad.sum_all(ad.mul(ad.concat([head, t], axis=0), w)), Tensor(rng.standard_normal((3, 3)))), 1e-6))

    weights = Tensor(rng.standard_normal((4, 1)))
    checks.append(OpCheck("reduce[sum]", grad_check(
        lambda t: ad.sum_all(ad.mul(ad.reduce(t, "sum", axis=1), weights)), Tensor(rng.standard_normal((4, 6)))), 1e-10))
    checks.append(OpCheck("reduce[mean]", grad_check(
        lambda t: ad.sum_all(ad.mul(ad.reduce(t, "mean", axis=1), weights)), Tensor(rng.standard_normal((4, 6)))), 1e-10))
    return checks


def _check_lstm_layer() -> OpCheck:
    config = EmbedderConfig(num_layers=1, hidden_dim=5, proj_dim=3, embedding_dim=3, feature_dim=4)
    params = init_embedder(config, stream(1001, "gradcheck"), dtype=np.float64)
    layer = params.layers[0]
    seq = np.random.default_rng(1001).standard_normal((4, 4))
    loss = lambda: ad.sum_all(lstm_p_forward(layer, seq))
    worst = max(param_grad_check(loss, t) for _, t in layer.tensors())
    return OpCheck("lstm_p_layer", worst, DEFAULT_TOL)


def _check_embed(config: EmbedderConfig, max_coords: int, frames: int) -> OpCheck:
    params = init_embedder(config, stream(1002, "gradcheck"), dtype=np.float64)
    rng = np.random.default_rng(1002)
    feats = rng.standard_normal((frames, config.feature_dim))
    readout = Tensor(rng.standard_normal(config.embedding_dim))
    loss = lambda: ad.sum_all(ad.mul(embed(config, params, feats).vec, readout))
    worst = max(param_grad_check(loss, t, max_coords=max_coords) for _, t in params.tensors())
    return OpCheck("embed", worst, DEFAULT_TOL)


def _check_head_ops() -> list:
    from .embedder import DrVector

    rng = np.random.default_rng(1003)
    checks = []
    t_fixed = DrVector(Tensor(rng.standard_normal(6)), 4)

    def cos_f(x):
        return cosine_score(DrVector(ad.reshape(x, (6,)), 4), t_fixed, 4)

    checks.append(OpCheck("cosine_score", grad_check(cos_f, Tensor(rng.standard_normal(6))), 1e-6))

    dnn = init_decision_net(6, 8, cosine_input=False, rng=stream(1003, "gradcheck"), dtype=np.float64)
    e = DrVector(Tensor(1.0 + rng.standard_normal(6)), 4)
    t = DrVector(Tensor(1.0 + rng.standard_normal(6)), 4)
    loss = lambda: decision_net_score(e, t, None, dnn)
    checks.append(OpCheck("decision_net", max(
        param_grad_check(loss, tensor) for _, tensor in dnn.tensors()), DEFAULT_TOL))

    switches = SwitchConfig(A=True, B=True, C=True, d=4)
    dnn_b = init_decision_net(6, 8, cosine_input=True, rng=stream(1004, "gradcheck"), dtype=np.float64)
    affine = init_affine(dtype=np.float64)
    trial = lambda: score_trial(e, t, switches, dnn_b, affine)
    checks.append(OpCheck("affine", max(
        param_grad_check(trial, tensor) for _, tensor in affine.tensors()), DEFAULT_TOL))
    return checks


def _check_losses() -> list:
    rng = np.random.default_rng(1005)
    y = Tensor(rng.standard_normal((6, 6)))
    labels = rng.uniform(size=14) < 0.5
    labels[0], labels[1] = True, False
    scores = Tensor(rng.standard_normal(14))
    return [
        OpCheck("ge2e_softmax_loss", grad_check(ge2e_softmax_loss, y), 1e-6),
        OpCheck("ge2e_xs_loss", grad_check(ge2e_xs_loss, y), 1e-6),
        OpCheck("ecw_bce_loss", grad_check(lambda t: ecw_bce_loss(t, labels), scores), 1e-6),
    ]


def _min_leaky_clearance(model: DrVectorModel, enroll, test) -> float:
    """Smallest |pre-activation| hitting a leaky-ReLU in the decision net."""
    from .head import cosine_score

    cos = cosine_score(enroll, test, model.config.switches.d).item()
    parts = [enroll.vec.data, test.vec.data]
    if model.config.switches.B:
        parts.append(np.array([cos]))
    x = np.concatenate(parts)[None, :]
    worst = np.inf
    for w, b in model.dnn.layers:
        pre = x @ w.data + b.data
        worst = min(worst, float(np.min(np.abs(pre))))
        x = np.where(pre > 0, pre, 0.2 * pre)
    return worst


def _condition_for_fd(model: DrVectorModel, seed: int) -> None:
    """Put the check model at a well-conditioned point: decision-net biases
    clear of the leaky kink, embedding norms of order one so the cosine's
    1/norm curvature cannot swamp the central-difference estimate."""
    bias_rng = np.random.default_rng(seed + 1)
    for _, b in model.dnn.layers:
        b.data[...] = np.where(bias_rng.uniform(size=b.shape) < 0.5, -0.35, 0.35)
    out_bias = model.embedder.out_bias
    signs = np.where(bias_rng.uniform(size=out_bias.shape) < 0.5, -0.5, 0.5)
    out_bias.data[...] = signs


def _check_full_trial(config: ModelConfig, max_coords: int, frames: int, seed: int = 1005) -> OpCheck:
    """End-to-end: enrollment embeddings -> average -> full switched score.

    Decision-net biases are moved off zero so no leaky-ReLU pre-activation
    sits near the kink, where central differences straddle the slope change
    and measure nothing; the clearance is asserted, not assumed.
    """
    model = DrVectorModel.init(config, seed=seed, dtype=np.float64)
    _condition_for_fd(model, seed)
    rng = np.random.default_rng(seed)
    enroll_feats = [rng.standard_normal((frames, config.embedder.feature_dim)) for _ in range(2)]
    test_feats = rng.standard_normal((frames, config.embedder.feature_dim))

    def loss():
        enroll = enroll_average([model.embed_utterance(f) for f in enroll_feats])
        return model.score(enroll, model.embed_utterance(test_feats))

    enroll0 = enroll_average([model.embed_utterance(f) for f in enroll_feats])
    clearance = _min_leaky_clearance(model, enroll0, model.embed_utterance(test_feats))
    if clearance < 1e-3:
        raise AssertionError(f"leaky-ReLU pre-activation within {clearance:.2e} of the kink; "
                             f"pick a different seed for the end-to-end check")

    worst = max(param_grad_check(loss, t, max_coords=max_coords)
                for _, t in model.trainable_tensors())
    return OpCheck("score_trial[end_to_end]", worst, DEFAULT_TOL)


def _check_full_loss(config: ModelConfig, max_coords: int, seed: int = 1008) -> OpCheck:
    """Whole training objective: batched embeddings -> stacked score blocks
    -> extended-set loss, differentiated against every trainable tensor."""
    from .embedder import embed_batch
    from .losses import MiniBatchSpec, batch_loss, build_batch_scores_fast

    spec = MiniBatchSpec(n_speakers=2, utts_per_speaker=2, n_enroll=1, n_test=1)
    model = DrVectorModel.init(config, seed=seed, dtype=np.float64)
    _condition_for_fd(model, seed)
    rng = np.random.default_rng(seed)
    feats = [rng.standard_normal((3, config.embedder.feature_dim)) for _ in range(4)]

    def loss():
        emb = embed_batch(config.embedder, model.embedder, feats)
        matrix = build_batch_scores_fast(emb, spec, config.switches, model.dnn, model.affine)
        return batch_loss(matrix, "ge2e_xs")

    worst = max(param_grad_check(loss, t, max_coords=max_coords)
                for _, t in model.trainable_tensors())
    return OpCheck("batch_loss[end_to_end]", worst, DEFAULT_TOL)


def run_suite(desk_dims: bool = True) -> list:
    """The full finite-difference suite; ``desk_dims`` runs the composite
    checks at the desk preset (subsampled), else at tiny dims (exhaustive)."""
    checks = _check_simple_ops()
    checks.append(_check_lstm_layer())
    if desk_dims:
        embed_config = EmbedderConfig()  # desk preset
        model_config = ModelConfig(embedder=embed_config,
                                   switches=SwitchConfig(A=True, B=True, C=True, d=24))
        checks.append(_check_embed(embed_config, max_coords=12, frames=5))
        checks.extend(_check_head_ops())
        checks.extend(_check_losses())
        checks.append(_check_full_trial(model_config, max_coords=8, frames=4))
        checks.append(_check_full_loss(model_config, max_coords=6))
    else:
        embed_config = EmbedderConfig(num_layers=2, hidden_dim=6, proj_dim=4,
                                      embedding_dim=4, feature_dim=3)
        model_config = ModelConfig(embedder=embed_config,
                                   switches=SwitchConfig(A=True, B=True, C=True, d=3),
                                   dnn_width=6)
        checks.append(_check_embed(embed_config, max_coords=None, frames=4))
        checks.extend(_check_head_ops())
        checks.extend(_check_losses())
        checks.append(_check_full_trial(model_config, max_coords=None, frames=3))
        checks.append(_check_full_loss(model_config, max_coords=None))
    return checks
