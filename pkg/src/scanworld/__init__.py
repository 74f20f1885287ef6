"""scanworld: toy-scale long-memory video world model.

Block-wise SSM scanning hybridized with frame-local causal attention,
trained with per-frame noise levels plus a clean-prefix scheme, and served
through a constant-per-frame-cost streaming engine.
"""

__version__ = "0.1.0"
