"""Skill-concept separation for VQA, end to end on a synthetic benchmark.

Subpackages build on each other roughly in this order: autodiff/optim ->
data/annotate -> mining -> encoder -> losses -> training -> evaluation -> cli.
"""

__version__ = "0.1.0"
