"""Step-wise distillation engine for non-differentiable visual-program
frameworks, at desk scale: synthetic scene worlds, a small program DSL,
pluggable sub-module backends, teacher-input adaptation, pseudo-label
harvesting, and an evaluation harness."""

__version__ = "0.1.0"
