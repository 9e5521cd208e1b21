"""One-off calibration of the accuracy margin used by the end-to-end acceptance check.

Runs plain CE on the acceptance data set (fixed data and noise draw) with five
model seeds and reports twice the sample standard deviation of the
last-10-epoch test accuracy.  The value printed here is frozen in
``tests/test_acceptance.py``.
"""
import numpy as np

from ogclab.verify import e2e_config
from ogclab.harness import train


def main():
    accs = []
    for seed in range(5):
        r = train(e2e_config(strategy="none", seed=seed))
        accs.append(r.last_mean_test_acc())
        print(f"seed {seed}: plain CE last-10 test acc {accs[-1]:.4f}", flush=True)
    sd = float(np.std(accs, ddof=1))
    print(f"mean {np.mean(accs):.4f}  sd {sd:.4f}  margin (2 sd) {2 * sd:.4f}")


if __name__ == "__main__":
    main()
