"""Metric-learning re-identification engine.

Pipeline: synthetic capture data -> frozen featurizer -> unit-hypersphere
embedding head trained with online hard triplet mining -> nearest-neighbor
gallery retrieval, two-view rank fusion, open-set thresholding, and an HTTP
review service where confirmed matches extend the gallery.
"""

__version__ = "0.1.0"
