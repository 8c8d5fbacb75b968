"""The OOD scores and metrics on hand-made logits."""

import numpy as np

from gvdoc.ood import auroc, confidences, energy, evaluate_logits, fpr_at_95_tpr, msp

print(msp([2.0, 1.0, 0.0]))        # 0.66524
print(energy([0.0, 0.0]))          # -ln 2
print(energy([1.0, 2.0, 3.0]))     # -3.4076

# confident in-distribution logits vs flat OOD logits
rng = np.random.default_rng(0)
labels = rng.integers(0, 3, size=100)
in_logits = rng.normal(0, 1, size=(100, 3))
in_logits[np.arange(100), labels] += 4
ood_logits = rng.normal(0, 1, size=(80, 3))

conf_in, conf_ood = confidences(in_logits), confidences(ood_logits)
for k in conf_in:
    print(k, round(auroc(conf_in[k], conf_ood[k]), 4), fpr_at_95_tpr(conf_in[k], conf_ood[k]))

report = evaluate_logits(in_logits, labels, ood_logits, num_classes=3)
print(report.to_json())
