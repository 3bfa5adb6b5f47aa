"""Graph classification of synthetic cortical-thickness connectomes.

Submodules: ``autodiff`` (reverse-mode tape), ``graph`` (graph types and the
ADGR file format), ``synthgen`` (planted-signal generator), ``model``
(GraphSAGE + differentiable pooling), ``train`` and ``cli``.
"""

__version__ = "0.1.0"
