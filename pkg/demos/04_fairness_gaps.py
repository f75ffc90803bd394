"""Group fairness gaps from prediction logs: what the three metrics measure.

Run:  python demos/04_fairness_gaps.py
"""

from dermdiff.metrics import fairness_metrics


def confusion_rows(group, tp, fn, fp, tn):
    rows = []
    rows += [{"group": group, "true_label": "malignant", "predicted_label": "malignant"}] * tp
    rows += [{"group": group, "true_label": "malignant", "predicted_label": "benign"}] * fn
    rows += [{"group": group, "true_label": "benign", "predicted_label": "malignant"}] * fp
    rows += [{"group": group, "true_label": "benign", "predicted_label": "benign"}] * tn
    return rows


def show(title, report):
    print(f"\n{title}")
    for group, rates in report.per_group.items():
        print(f"  group {group}: n={rates.n:3d} acc={rates.accuracy:.2f} "
              f"tpr={rates.tpr:.2f} fpr={rates.fpr:.2f}")
    print(f"  accuracy parity gap  {report.accuracy_parity_gap:.2f}")
    print(f"  equal opportunity    {report.equal_opportunity_gap:.2f}")
    print(f"  equalized odds       {report.equalized_odds_gap:.2f}")


# a classifier that treats all groups the same: every gap is zero
rows = (confusion_rows("A", 18, 2, 3, 17) + confusion_rows("B", 18, 2, 3, 17)
        + confusion_rows("C", 18, 2, 3, 17))
show("identical behavior across groups", fairness_metrics(rows))

# a biased classifier: misses most positives in group C
rows = (confusion_rows("A", 18, 2, 3, 17) + confusion_rows("B", 16, 4, 3, 17)
        + confusion_rows("C", 8, 12, 2, 18))
show("under-detecting in group C", fairness_metrics(rows))
