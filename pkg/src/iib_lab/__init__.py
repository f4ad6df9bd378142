"""iib_lab: a desk-scale laboratory for invariant-information-bottleneck training.

Subpackages cover the full pipeline: a scratch reverse-mode engine
(:mod:`iib_lab.autodiff`), procedural failure-mode dataset generators
(:mod:`iib_lab.envgen`), the stochastic encoder / twin predictors
(:mod:`iib_lab.models`), loss kernels and composite objectives
(:mod:`iib_lab.objectives`), the alternating min-max trainer
(:mod:`iib_lab.trainer`), independent brute-force verifiers
(:mod:`iib_lab.oracles`), and the experiment CLI (:mod:`iib_lab.harness`).
"""

__version__ = "0.1.0"
