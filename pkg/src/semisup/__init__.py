"""Desk-scale semi-supervised learning lab.

Core pieces: a from-scratch reverse-mode autodiff engine, a small
convolutional classifier with an auxiliary rotation head, the loss zoo
(supervised CE, rotation prediction, exemplar triplet, virtual adversarial
smoothing, entropy minimization), training pipelines that combine them, and
sweep/evaluation tooling built around tiny validation sets.
"""

__version__ = "0.1.0"
