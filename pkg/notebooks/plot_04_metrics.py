"""
Metrics from a confusion matrix
===============================
"""

import numpy as np

from plantxvit.metrics import classification_metrics, cohen_kappa, confusion_matrix, roc_auc

y_true = [0] * 10 + [1] * 10
y_pred = [0] * 8 + [1] * 2 + [0] + [1] * 9
cm = confusion_matrix(y_true, y_pred, 2)
print(cm.counts)
rep = classification_metrics(cm)
print(rep.accuracy, rep.precision, rep.recall, rep.f1, cohen_kappa(cm))

# %%
# F1 here is the harmonic mean of macro precision and macro recall; the mean
# of per-class F1 scores is kept alongside.
print(rep.f1, rep.f1_per_class_mean)

# %%
scores = np.array([[0.1, 0.9], [0.2, 0.8], [0.7, 0.3], [0.8, 0.2]])
res = roc_auc(scores, [1, 0, 1, 0])
print(res.aucs, res.macro_auc)
