"""Reference implementations that count directly from their definitions."""
from fractions import Fraction


def counting_metrics(y_true, y_pred, classes):
    n = len(y_true)
    prec, rec, f1 = [], [], []
    for c in range(classes):
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        fp = sum(1 for t, p in zip(y_true, y_pred) if t != c and p == c)
        fn = sum(1 for t, p in zip(y_true, y_pred) if t == c and p != c)
        pc = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
        rc = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
        prec.append(pc)
        rec.append(rc)
        f1.append(2 * pc * rc / (pc + rc) if pc + rc else Fraction(0))
    macro_p = sum(prec) / classes
    macro_r = sum(rec) / classes
    agree = sum(1 for t, p in zip(y_true, y_pred) if t == p)
    p_o = Fraction(agree, n)
    p_e = sum(Fraction(sum(1 for t in y_true if t == c) * sum(1 for p in y_pred if p == c), n * n)
              for c in range(classes))
    return {
        "accuracy": p_o,
        "precision": macro_p,
        "recall": macro_r,
        "f1": 2 * macro_p * macro_r / (macro_p + macro_r) if macro_p + macro_r else Fraction(0),
        "f1_per_class_mean": sum(f1) / classes,
        "kappa": (p_o - p_e) / (1 - p_e) if p_e != 1 else Fraction(0),
    }


def mann_whitney_auc(scores, positive):
    """Probability a random positive outscores a random negative, ties counted half."""
    pos = [s for s, y in zip(scores, positive) if y]
    neg = [s for s, y in zip(scores, positive) if not y]
    wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
    return wins / (len(pos) * len(neg))
