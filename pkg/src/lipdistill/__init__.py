"""Audio-to-visual knowledge distillation on synthetic word-level data.

A pretrained audio classifier (teacher) guides a visual classifier
(student) through sequence-level and frame-level hidden-state losses,
with a fixed Gaussian sliding-window map bridging the two time scales.
All differentiable pieces run on the float64 tape engine in
``lipdistill.tensor`` and are verified against finite differences.
"""

from .tensor import Tensor, Tape, finite_diff_check

__version__ = "0.1.0"

__all__ = ["Tensor", "Tape", "finite_diff_check", "__version__"]
