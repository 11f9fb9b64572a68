"""Camera-aware retrieval evaluation for re-identification.

CMC, AP/mAP and the cross-camera generalization measure (CGM/mCGM) over
ranked galleries, plus reference kernels for center pooling and graph
relation fusion.
"""

__version__ = "0.1.0"
