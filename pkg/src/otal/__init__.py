"""Open-set temporal action localization on synthetic sequence benchmarks.

Evidential classification with momentum importance-balanced re-weighting,
positive-unlabeled actionness, temporal localization with IoU-aware
uncertainty calibration, two-level open-set inference, and an open-set
detection-rate evaluation suite, trainable end to end at desk scale.
"""

__version__ = "0.1.0"
