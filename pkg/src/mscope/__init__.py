"""mscope: a desk-scale multi-view screening classifier pipeline.

Procedural phantom exams in, trained patch/breast classifiers, heatmaps,
and evaluation reports out. Everything is seeded and reproducible.
"""

__version__ = "0.1.0"
