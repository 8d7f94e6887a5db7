"""Cross-user wearable activity recognition with unsupervised domain adaptation.

A 1-D CNN trained on labeled source-user windows is adapted to unlabeled
target-user windows with temporal-ensemble pseudo-labels, a class-conditional
kernel MMD alignment term and an augmentation consistency term.
"""

__version__ = "0.1.0"
