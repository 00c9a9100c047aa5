"""Contrastive graph learning for skeleton action recognition.

A desk-scale trainer: an adaptive-graph GCN encoder whose per-sequence
graphs are embedded by a projection head and pulled together / pushed apart
across sequences via class-labelled memory banks, on top of a self-contained
reverse-mode autodiff core.
"""

__version__ = "0.1.0"
