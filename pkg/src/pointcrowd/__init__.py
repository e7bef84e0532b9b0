"""Point-proposal crowd counting and localization on synthetic scenes.

Submodules:
    scenes    -- synthetic scene generation and annotation I/O
    model     -- encoder, continuous feature interpolation, prediction head
    matching  -- cost matrix, optimal assignment, stability diagnostics
    losses    -- point losses, auxiliary point sampling and guidance losses
    metrics   -- counting MAE/MSE and localization P/R/F1
    training  -- augmentation, strategies, training loop, evaluation
    cli       -- pointcrowd command-line interface
"""

from . import losses, matching, metrics, model, scenes, training

__all__ = ["losses", "matching", "metrics", "model", "scenes", "training"]
__version__ = "0.1.0"
