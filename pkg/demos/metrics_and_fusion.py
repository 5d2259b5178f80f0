"""How CCC differs from Pearson correlation, and how CCC-weighted decision fusion behaves."""
import numpy as np

from mtaffect.fusion import calibrate_weights, decision_fuse
from mtaffect.metrics import ccc, mse, pcc

rng = np.random.default_rng(0)
labels = rng.uniform(-1, 1, size=200)

# a prediction that tracks the labels but is shifted and squashed
shifted = 0.5 * labels + 0.3
print(f"shifted+squashed: pcc={pcc(labels, shifted):.3f}  ccc={ccc(labels, shifted):.3f}  mse={mse(labels, shifted):.3f}")

noisy = labels + rng.normal(0, 0.4, size=labels.shape)
print(f"unbiased noisy:   pcc={pcc(labels, noisy):.3f}  ccc={ccc(labels, noisy):.3f}  mse={mse(labels, noisy):.3f}")

# constant predictions carry no information
print(f"constant:         ccc={ccc(labels, np.full_like(labels, 0.2)):.3f}")

# three members of different quality, two dimensions each
truth = np.stack([labels, rng.uniform(0, 1, size=200)], axis=1)
members = np.stack([truth + rng.normal(0, s, truth.shape) for s in (0.2, 0.5, 1.0)])
weights = calibrate_weights(members, truth)
print("\nper-member CCC weights (valence, arousal):")
for k, w in enumerate(weights):
    print(f"  member {k}: {w[0]:.3f}  {w[1]:.3f}")

fused = np.stack([decision_fuse(members[:, i], weights) for i in range(len(truth))])
for d, name in enumerate(("valence", "arousal")):
    best = max(ccc(truth[:, d], members[k, :, d]) for k in range(3))
    print(f"{name}: best member {best:.3f}, fused {ccc(truth[:, d], fused[:, d]):.3f}")
