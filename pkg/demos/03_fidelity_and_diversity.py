"""FID and MS-SSIM on controlled inputs, so the numbers have known meaning.

Run:  python demos/03_fidelity_and_diversity.py
"""

import numpy as np

from dermdiff import corpus
from dermdiff.metrics import GaussianStats, fid, fit_gaussian, mean_pairwise_msssim, ms_ssim

rng = np.random.default_rng(0)

# --- FID on synthetic feature clouds -------------------------------------
# identical distributions -> 0; shifted mean -> squared distance shows up
base = rng.normal(size=(500, 16))
shifted = base + np.array([1.0] + [0.0] * 15)
print(f"fid(identical)    = {fid(fit_gaussian(base), fit_gaussian(base)):.6f}")
print(f"fid(mean shift 1) = {fid(fit_gaussian(base), fit_gaussian(shifted)):.4f}  (expect ~1)")

# the 1-d closed form: equal means, variances 4 vs 1 -> 4 + 1 - 2*2 = 1
a = GaussianStats(mean=np.zeros(1), cov=np.array([[4.0]]), n=100)
b = GaussianStats(mean=np.zeros(1), cov=np.array([[1.0]]), n=100)
print(f"fid(var 4 vs 1)   = {fid(a, b):.6f}  (closed form: 1)")

# --- MS-SSIM ---------------------------------------------------------------
spec = corpus.CorpusSpec(image_size=64, counts=corpus.balanced_counts(3), corpus_seed=3)
images = [r.image for r in corpus.generate_corpus(spec)]
x = images[0]
print(f"\nms_ssim(x, x)              = {ms_ssim(x, x):.6f}")
for sigma in (0.05, 0.1, 0.2, 0.4):
    noisy = x + rng.standard_normal(x.shape) * sigma
    print(f"ms_ssim(x, x + noise {sigma:.2f}) = {ms_ssim(x, noisy):.4f}")

# diversity of a set: near 1 for clones, lower for a varied set
clones = [x] * 6
print(f"\nmean pairwise MS-SSIM, clones: "
      f"{mean_pairwise_msssim(clones, n_pairs=10, seed=1):.4f}")
print(f"mean pairwise MS-SSIM, corpus: "
      f"{mean_pairwise_msssim(images, n_pairs=50, seed=1):.4f}")
