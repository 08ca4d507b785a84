"""Targeted physical adversarial patch attacks on a learned driving agent.

The package is organized around one pipeline:

1. ``sim`` — deterministic top-down 2D driving environment.
2. ``policy`` — scripted expert, behavior cloning, and the benign policy.
3. ``world_model`` — data collection, VAE, and mixture-density RNN giving
   a differentiable one-step predictor of the environment.
4. ``compositor`` — projecting a world-fixed patch into the agent view and
   compositing it into observations.
5. ``attack`` — the projected-gradient patch optimizer.
6. ``evaluation`` — metrics, baselines, and sweep runners.
7. ``store`` / ``cli`` — artifact formats and the command-line pipeline.

All differentiable computation runs on the minimal reverse-mode autodiff
library in ``autodiff``.
"""

__version__ = "0.1.0"
