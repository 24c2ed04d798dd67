"""Desk-scale decision-residual speaker verification.

Speaker embeddings from a projected-LSTM network are scored by a switched
combination of a cosine path and a small decision network, trained end to
end with GE2E-family losses and evaluated by per-condition EER.
"""

from .artifacts import __version__, build_version

__all__ = ["__version__", "build_version"]
