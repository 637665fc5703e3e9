"""scenediff: joint continuous-discrete diffusion over multi-agent scenes.

Generates 2D agent trajectories together with a synchronous per-timestep
possession event channel, supports completion (future / imputation) and
guided generation (possessor sequences or text embeddings), and ships the
full data-preparation, training, sampling and evaluation pipeline.
"""

__version__ = "0.1.0"
