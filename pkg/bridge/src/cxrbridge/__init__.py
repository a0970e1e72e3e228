"""Bridge from a chest X-ray image collection to the severity toolkit.

Runs the published frozen 18-task classifier over the images and writes
the toolkit's two input artifacts: the feature file (18 pre-sigmoid
outputs plus the 1024-dim pooled trunk vector per image) and XGRD
input-gradient rasters for the pneumonia-related outputs. No training
happens here; weights are loaded from a digest-pinned file.
"""

__version__ = "0.1.0"
