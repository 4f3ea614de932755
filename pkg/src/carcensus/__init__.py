"""Visual census from street-level car detections.

Detections with raw scores and top-k class distributions go in; calibrated
car probabilities, per-region car statistics, spatial segregation measures
and ridge-regression demographic predictions come out.
"""

__version__ = "0.1.0"
