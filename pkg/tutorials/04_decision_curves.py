"""
Decision curves for a miscalibrated score
=========================================

A score that under-estimates risk in one group looks worse on a standard
decision curve than it really is, because the threshold is applied to the
wrong scale. Re-evaluating at the calibration-adjusted threshold
(calibrated net benefit) separates discrimination from calibration.

Run with ``python tutorials/04_decision_curves.py``.
"""

import numpy as np

from fairnb.decision import RiskReductionUtility, decision_curve, relative_risk_reduction

rng = np.random.default_rng(11)
n = 20000
group = np.where(rng.random(n) < 0.5, "A", "B")
risk = rng.beta(2.0, 12.0, n)
y = (rng.random(n) < risk).astype(int)

# group B's scores are shrunk towards zero: its risk is under-estimated
odds = risk / (1 - risk)
score = np.where(group == "B", (0.5 * odds) / (1 + 0.5 * odds), risk)

curve = decision_curve(score, y, None, grid=np.round(np.arange(0.025, 0.301, 0.025), 3),
                       groups=group)
print("standard decision curve (tau_star = tau)")
print(f"{'tau':>6s} {'NB B':>8s} {'cNB B':>8s} {'treat all B':>12s}")
ser = curve.series["B"]
for i, tau in enumerate(curve.grid):
    print(f"{tau:6.3f} {ser['nb'][i]:8.4f} {ser['cnb'][i]:8.4f} {ser['treat_all'][i]:12.4f}")

# Parameterized mode: keep the trade-off fixed at 7.5% and vary only the
# threshold. With a risk-reduction treatment the curve peaks where the score
# crosses 7.5% risk in each group.
util = RiskReductionUtility(0.075, relative_risk_reduction(3.01 * 0.43))
grid = np.round(np.arange(0.01, 0.2, 0.005), 3)
para = decision_curve(score, y, None, grid=grid, mode="parameterized", utility=util, groups=group)
for g in ("A", "B"):
    nb = para.series[g]["nb"]
    print(f"group {g}: best threshold {grid[int(np.argmax(nb))]:.3f}  (NB {nb.max():.5f})")

# The CSV export holds every series for plotting elsewhere
print("\n" + "\n".join(para.to_csv().splitlines()[:3]))
