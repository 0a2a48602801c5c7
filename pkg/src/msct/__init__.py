"""Multi-source CT benchmark pipeline.

Synthetic multi-source scan generation, lung-extraction preprocessing,
kernel-density slice sampling, a dual-head model trained with a
logit-adjusted auxiliary source loss, and a per-source evaluation harness.
"""

__version__ = "0.1.0"

N_SOURCES = 4
