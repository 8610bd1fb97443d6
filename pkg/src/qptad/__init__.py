"""Query-point temporal action detection on per-frame features.

A set-prediction decoder whose queries carry learnable temporal points,
Mamba-plus-attention query blocks, sliding-window inference and detection F1
evaluation, all on a small numpy autodiff engine.
"""

__version__ = "0.1.0"
