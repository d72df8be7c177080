"""Desk-scale zero-shot multimodal machine translation.

A frozen toy translation transformer is adapted to images using only
monolingual multimodal data: a visually conditioned masked-LM loss forces
the model to use the image, a KL penalty against the frozen base preserves
translation quality, and classifier-free guidance trades the two off at
decoding time.
"""

__version__ = "0.1.0"

from . import autodiff, decoding, evaluation, model, objectives, synthcorpus, training

__all__ = [
    "__version__",
    "autodiff",
    "decoding",
    "evaluation",
    "model",
    "objectives",
    "synthcorpus",
    "training",
]
