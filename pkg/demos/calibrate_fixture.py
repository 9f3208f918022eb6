"""Threshold calibration on the bundled 63-sample probability fixture."""

from datxai import golden, metrics

_, p, y = golden.probability_fixture()
for criterion in ("g_mean", "f_measure"):
    res = metrics.calibrate(p, y, criterion)
    print(f"{criterion:>9}: threshold {res.optimal_threshold}  value {res.optimal_value:.4f}")

res = metrics.calibrate(p, y, "g_mean")
for name, s in (("at 0.5", res.before), (f"at {res.optimal_threshold}", res.after)):
    print(f"{name:>10}: acc {s.accuracy:.4f}  spec {s.specificity:.4f}  sens {s.sensitivity:.4f}  "
          f"kappa {s.cohen_kappa:.4f}  f1 {s.f1:.4f}")
print(f"AUC {metrics.roc_auc(p, y):.4f}")
