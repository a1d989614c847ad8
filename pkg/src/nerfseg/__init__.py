"""Radiance-field orchard segmentation.

Pipeline stages: synthetic scene generation, RGB field training, mask
fine-tuning (plus back-projection and joint-head baselines), density-grid
extraction, clustering/counting, and evaluation. Everything runs on CPU
with numpy; no GPU or autodiff framework involved.
"""

__version__ = "0.1.0"
