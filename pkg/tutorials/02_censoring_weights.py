"""
Evaluating risk scores when follow-up is censored
=================================================

We simulate a two-group cohort where censoring depends on a feature that
also drives risk. Dropping people censored before the horizon then biases
the observed incidence upwards, since those who stay in follow-up are more
often the ones who had the event. Inverse probability of censoring weights
(IPCW), built from a discrete-time censoring hazard model, correct it.

Run with ``python tutorials/02_censoring_weights.py``.
"""

import numpy as np

from fairnb.censoring import composite_outcomes, fit_censoring_model, ipcw_weights
from fairnb.cohort import SynthConfig, generate_synthetic_cohort
from fairnb.metrics import (fit_calibration_curve, ipcw_auc, ipcw_log_loss, ipcw_rate,
                            stratified_bootstrap, strata_labels)

cfg = SynthConfig(counts={"A": 8000, "B": 8000}, base_risk={"A": 0.08, "B": 0.2},
                  censoring_rate={"A": 0.06, "B": 0.06}, feature_dim=2, seed=3,
                  coef=(0.7, 0.3), censor_coef=(0.9, 0.0))
cohort = generate_synthetic_cohort(cfg)

y, u, delta = composite_outcomes(cohort.time, cohort.event, cohort.horizon)
print(f"{len(cohort)} people, {np.mean(delta == 0):.1%} censored before the horizon")

model = fit_censoring_model(cohort, n_intervals=20)
weights = ipcw_weights(model, cohort)
print("censoring hazard coefficients:", np.round(model.coef, 3))
print("weights clipped at the survival floor:", weights.n_clipped)

# Incidence per group: truth, complete cases, weighted
for k, g in enumerate(cohort.groups):
    m = cohort.group_index == k
    truth = cohort.true_risk[m].mean()
    naive = y[m & (delta == 1)].mean()
    w = weights.weights[m]
    weighted = np.sum(w * y[m]) / w.sum()
    print(f"group {g}: true {truth:.4f}  complete-case {naive:.4f}  weighted {weighted:.4f}")

# A score to evaluate: the true risk plus some noise on the logit scale
rng = np.random.default_rng(0)
logit = np.log(cohort.true_risk / (1 - cohort.true_risk)) + rng.normal(0, 0.5, len(cohort))
score = 1 / (1 + np.exp(-logit))

w = weights.weights
print("\nweighted AUC       ", round(ipcw_auc(score, y, w), 4))
print("weighted log-loss  ", round(ipcw_log_loss(score, y, w), 4))
print("TPR / FPR at 0.075 ", round(ipcw_rate(score, y, w, 0.075, "tpr"), 4),
      round(ipcw_rate(score, y, w, 0.075, "fpr"), 4))
cal = fit_calibration_curve(score, y, w)
print("calibration intercept / slope", round(cal.intercept, 3), round(cal.slope, 3))

# Percentile interval for the AUC, resampling within outcome-by-group strata
ci = stratified_bootstrap(lambda ix: ipcw_auc(score[ix], y[ix], w[ix]),
                          strata_labels(y, cohort.group_index), n_replicates=200, seed=1)
print(f"AUC 95% interval: [{ci.lower:.4f}, {ci.upper:.4f}]")
