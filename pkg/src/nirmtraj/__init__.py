"""Domain-generalized trajectory generation via invariant-risk-style training.

Desk-scale stack: a second-order autodiff engine, continuous trajectory
decoder / observation encoder / critic models, environment-wise objectives
with gradient-norm penalties, a synthetic multi-environment benchmark with a
controllable spurious correlation, staged training pipelines with ablation
variants, and evaluation/reporting tools.
"""

__version__ = "0.1.0"
