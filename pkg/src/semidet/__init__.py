"""Semi-supervised object detection at desk scale.

Teacher training, pseudo-label generation (NMS + confidence thresholding),
box-aware strong augmentation, joint supervised/unsupervised training, a
COCO-style evaluator, and a consistency-regularization zoo for
classification, all on a synthetic shapes benchmark.
"""

__version__ = "0.1.0"
