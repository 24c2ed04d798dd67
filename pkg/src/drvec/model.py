"""Model bundle: embedding network plus decision-residual head.

Owns parameter initialization order (embedder, then decision net, then
affine) so a seed fully determines every tensor, and exposes the named
parameter list used by checkpoints and the trainer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import head as head_mod
from .embedder import (DrVector, EmbedderConfig, EmbedderParams, embed,
                       embed_batch, init_embedder)
from .errors import ConfigError
from .head import (AffineOutput, DecisionNetParams, SwitchConfig, init_affine,
                   init_decision_net, make_scorer)
from .synth import stream


@dataclass(frozen=True)
class ModelConfig:
    embedder: EmbedderConfig
    switches: SwitchConfig
    dnn_width: int = 64

    def __post_init__(self):
        self.switches.validate_for(self.embedder.embedding_dim)

    def to_dict(self) -> dict:
        return {
            "embedder": {
                "num_layers": self.embedder.num_layers,
                "hidden_dim": self.embedder.hidden_dim,
                "proj_dim": self.embedder.proj_dim,
                "embedding_dim": self.embedder.embedding_dim,
                "feature_dim": self.embedder.feature_dim,
            },
            "switches": {"A": self.switches.A, "B": self.switches.B,
                         "C": self.switches.C, "d": self.switches.d},
            "dnn_width": self.dnn_width,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        from .config import dataclass_from_dict  # deferred: config imports model types
        return dataclass_from_dict(cls, data)


@dataclass
class DrVectorModel:
    config: ModelConfig
    embedder: EmbedderParams
    dnn: DecisionNetParams
    affine: AffineOutput

    @classmethod
    def init(cls, config: ModelConfig, seed: int, dtype=np.float32) -> "DrVectorModel":
        embedder = init_embedder(config.embedder, stream(seed, "init:embedder"), dtype)
        dnn = init_decision_net(config.embedder.embedding_dim, config.dnn_width,
                                config.switches.B, stream(seed, "init:dnn"), dtype)
        return cls(config, embedder, dnn, init_affine(dtype))

    # -- parameters ---------------------------------------------------------

    def named_tensors(self) -> list:
        out = list(self.embedder.tensors())
        out.extend((f"head.{name}", t) for name, t in self.dnn.tensors())
        out.extend((f"head.{name}", t) for name, t in self.affine.tensors())
        return out

    def trainable_tensors(self) -> list:
        """Tensors the optimizer updates; decision-net tensors only count
        when switch C routes them into the score."""
        out = list(self.embedder.tensors())
        if self.config.switches.C:
            out.extend((f"head.{name}", t) for name, t in self.dnn.tensors())
        out.extend((f"head.{name}", t) for name, t in self.affine.tensors())
        return out

    def param_counts(self) -> dict:
        embedder = sum(t.size for _, t in self.embedder.tensors())
        head = sum(t.size for _, t in self.dnn.tensors()) \
            + sum(t.size for _, t in self.affine.tensors())
        return {"embedder": embedder, "head": head, "total": embedder + head}

    # -- forward paths ------------------------------------------------------

    def embed_utterance(self, features) -> DrVector:
        return embed(self.config.embedder, self.embedder, features, d=self.config.switches.d)

    def embed_utterances(self, feature_seqs) -> list:
        """Lockstep batched embedding (training path); one DrVector per input."""
        from . import autodiff as ad
        out = embed_batch(self.config.embedder, self.embedder, feature_seqs)
        dim, d = self.config.embedder.embedding_dim, self.config.switches.d
        return [DrVector(ad.reshape(ad.gather_rows(out, [i]), (dim,)), d)
                for i in range(len(feature_seqs))]

    def scorer(self):
        switches = self.config.switches
        return make_scorer(switches, self.dnn if switches.C else None, self.affine)

    def score(self, enroll_model: DrVector, test_emb: DrVector):
        return self.scorer()(enroll_model, test_emb)

    def config_echo(self) -> dict:
        sw = self.config.switches
        return {"switches": {"A": sw.A, "B": sw.B, "C": sw.C}, "d": sw.d,
                "dnn_width": self.config.dnn_width,
                "embedding_dim": self.config.embedder.embedding_dim}
