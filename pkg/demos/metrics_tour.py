"""Agreement metrics on a few hand-made prediction sets."""

import numpy as np

from ordigrade import metrics

truth = np.array([0, 0, 1, 2, 2, 3, 4, 4, 1, 0])
cases = {
    "perfect": truth.copy(),
    "off by one": np.clip(truth + 1, 0, 4),
    "reversed": 4 - truth,
    "all zero": np.zeros_like(truth),
}

print(f"{'case':<12} {'qwk':>7} {'f1':>7} {'acc':>6}")
for name, pred in cases.items():
    r = metrics.report(truth, pred)
    print(f"{name:<12} {r.qwk:7.3f} {r.macro_f1:7.3f} {r.accuracy:6.2f}")

# near misses cost little under quadratic weights, far misses a lot
print("\nquadratic weights:\n", metrics.quadratic_weights(5))
s = metrics.report(truth, cases["off by one"], mode=metrics.BINARY_SCREENING)
print(f"\nscreening (grade >= 2) for off-by-one: sens={s.sensitivity:.2f} spec={s.specificity:.2f}")
