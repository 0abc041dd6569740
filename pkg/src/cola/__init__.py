"""COLA: coarse-label pre-training toolkit for LiDAR semantic segmentation.

Unifies heterogeneous fine label sets into a small coarse vocabulary,
pre-trains a per-voxel classifier on the unified corpus, and finetunes it on
a target dataset by replacing only the classification head. Ships a
synthetic multi-dataset benchmark on which the transfer-learning effect is a
measurable, reproducible property.
"""

__version__ = "0.1.0"
