"""Dataset distillation by matching expert (MTT) or convexified (MCT) trajectories."""

__version__ = "0.1.0"
