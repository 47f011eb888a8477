"""flowtune: a desk-scale laboratory for RL fine-tuning of flow samplers.

The package cross-validates policy-gradient objectives, likelihood
estimators, and reverse-process samplers on low-dimensional synthetic
distributions where the optimal tilted policy has a closed form.
"""

__version__ = "0.1.0"
