"""Continual neural mapping with a sinusoidal signed-distance network.

Modules:

- :mod:`cnm.field` - network, loss, Adam, checkpoints
- :mod:`cnm.geometry` - camera model, back-projection, sign labeling
- :mod:`cnm.replay` - reservoir buffer and off-surface sampling
- :mod:`cnm.trainer` - per-frame continual training and baselines
- :mod:`cnm.evaluation` - heatmaps, forgetting curves, meshes, slices
- :mod:`cnm.scene` - synthetic scenes, trajectories, depth sequences on disk
- :mod:`cnm.cli` - command-line entry points
"""

__version__ = "0.1.0"
