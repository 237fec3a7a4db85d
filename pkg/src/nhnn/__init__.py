"""Nonparametric hierarchical neural network for speech valence recognition.

A Dirichlet-process Gaussian mixture over utterance-level summary features
routes each utterance to per-cluster classifier heads that share a dilated
convolutional encoder; head outputs are mixed by cluster responsibilities.
"""

__version__ = "0.1.0"
