"""Write a synthetic image, a few training augmentations and the TTA views as PNGs."""

import sys
from pathlib import Path

import numpy as np

from ordigrade import augment as A
from ordigrade import data as D

out = Path(sys.argv[1] if len(sys.argv) > 1 else "augment_gallery")
out.mkdir(parents=True, exist_ok=True)
sample = max(D.generate_synthetic(D.domain_b(n=10, seed=3)).samples, key=lambda s: s.grade)
D.write_png(sample.pixels, out / "original.png")

policy = A.AugmentPolicy(seed=7)
for call in range(6):
    kinds = [t.kind for t in policy.draw(call, sample.pixels.shape[-1])]
    D.write_png(np.clip(A.sample_augmentation(policy, sample.pixels, call), 0, 1), out / f"train_{call}.png")
    print(f"train_{call}: {', '.join(kinds)}")

for i, t in enumerate(A.tta_set()):
    D.write_png(A.apply(t, sample.pixels), out / f"tta_{i}_{t.kind}.png")
print(f"grade {sample.grade}; images in {out}/")
