"""Self-supervised pretraining for event-sequence user models.

A small numpy-based stack: reverse-mode autodiff core, event-sequence data
handling, sequence augmentations, GRU and transformer encoders, pretext-task
losses (histogram prediction, masked sequence modeling, Barlow Twins,
next-event and future-histogram baselines), multi-task pretraining and
finetuning loops, and ROC-AUC evaluation with multi-seed aggregation.
"""

__version__ = "0.1.0"
