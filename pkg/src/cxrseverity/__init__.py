"""Severity-score analysis toolkit for chest X-ray classifier features.

Works from flat text files of pre-extracted network features and
radiologist labels: fits linear probes, evaluates them on repeated
patient-grouped splits, measures inter-rater agreement, embeds feature
vectors in 2-D, and composes gradient saliency maps.
"""

__version__ = "0.1.0"
