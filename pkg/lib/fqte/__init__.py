"""Fused quantile treatment effect (FQTE) estimation.

Combines a validation sample that observes all confounders (X, S) with a
larger auxiliary sample that observes only X, and reports the doubly robust
quantile treatment effect with a variance no larger than the validation-only
estimator's. The end-to-end entry point is :func:`lib.fqte.pipeline.estimate`.
"""

__version__ = "0.1.0"
