"""Small end-to-end run: synthetic domains, three training stages, ensemble on the holdout.

Runs in a minute or two at 32 px. Pass --full for the 64 px desk configuration (several minutes).
"""

import sys
import time

import numpy as np

from ordigrade import data as D
from ordigrade import train as T

full = "--full" in sys.argv
size = 64 if full else 32
source = D.generate_synthetic(D.domain_a(n=2000 if full else 1000, seed=0, image_size=size))
target = D.generate_synthetic(D.domain_b(n=1000 if full else 600, seed=1, image_size=size))
split = D.split_folds(target, 5, 0.2, seed=0)
print("target grades:", D.class_distribution(target), "holdout size:", len(split.holdout_ids))

epochs = (20, 30) if full else (10, 20)
cfgs = T.StageConfigs(T.pretrain_config(epochs=epochs[0]), T.main_config(epochs=epochs[1]), T.posttrain_config())
model_cfg = T.ModelConfig(input_shape=(3, size, size))
start = time.perf_counter()
res = T.run_cv((source, target), split, cfgs, model_cfg)
hold = res.summary["holdout"]

print(f"trained 5 folds in {time.perf_counter() - start:.0f}s")
for fold, rep in hold["folds"].items():
    w = res.fold_models[fold].fusion_w
    print(f"fold {fold}: holdout qwk {rep.qwk:.3f}  fusion weights {np.round(w, 3).tolist()}")
print(f"ensemble qwk {hold['ensemble'].qwk:.3f} (without TTA {hold['ensemble_no_tta'].qwk:.3f})")
s = hold["ensemble_screening"]
print(f"screening: sensitivity {s.sensitivity:.3f} specificity {s.specificity:.3f}")
