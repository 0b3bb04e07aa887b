"""Ranking and threshold metrics for multi-label predictions."""

import numpy as np

from csranet.metrics import average_precision, evaluate

# %% average precision only cares about the order of scores
print(average_precision([0.9, 0.8, 0.7], [1, 1, 0]))      # 1.0, positives first
print(average_precision([0.9, 0.1], [0, 1]))              # 0.5, positive at rank 2
print(average_precision(np.exp([0.9, 0.1]), [0, 1]))      # unchanged by a monotone map

# %% a two-image, three-class batch
probs = np.array([[0.9, 0.2, 0.6], [0.3, 0.7, 0.4]])
truth = np.array([[1, 0, 0], [0, 1, 1]])
report = evaluate(probs, truth, threshold=0.5, class_names=["road", "tree", "pool"])
print(report.to_text())
# predictions at 0.5 hit two of three true labels and two of three predicted ones: OP = OR = 2/3

# %% a class nobody has is left out of mAP and flagged
report = evaluate([[0.9, 0.1], [0.2, 0.3]], [[1, 0], [0, 0]], class_names=["water", "vehicle"])
print(report.mAP, report.warnings)
