"""Hierarchy-guided multi-exit transformer training for multi-label text
classification: specific encoder layers are wired to predict specific
label-hierarchy levels, with training, ranking-based evaluation, and
parameter-utilization introspection."""

__version__ = "0.1.0"
