"""Train a miniature prompt-conditioned generator and sample from it.

This is a scaled-down run (small corpus, few steps) meant to finish in a few
minutes on a laptop CPU; quality improves markedly with more data and steps
(see the pipeline config defaults).

Run:  python demos/02_train_and_sample.py
"""

import numpy as np

from dermdiff import corpus
from dermdiff.diffusion import (
    DiffusionTrainConfig,
    generate_balanced_dataset,
    sample,
    train_diffusion,
    train_vae,
)

spec = corpus.CorpusSpec(image_size=32, counts=corpus.balanced_counts(40), corpus_seed=7)
records = corpus.generate_corpus(spec)
print(f"corpus: {len(records)} images")

print("training VAE ...")
vae = train_vae(records, epochs=8, lr=0.7, batch=16, seed=1)
print(f"  reconstruction loss {vae.loss_history[0]:.4f} -> {np.mean(vae.loss_history[-10:]):.4f}")

print("training conditional denoiser (800 steps) ...")
cfg = DiffusionTrainConfig(steps=800, batch=4, lr=1e-4, T=100, beta_end=0.08,
                           base_channels=32, seed=2, cfg_dropout=0.1)
model = train_diffusion(records, vae, cfg)
print(f"  noise-prediction loss {model.loss_history[0]:.3f} -> "
      f"{np.mean(model.loss_history[-50:]):.3f}")

prompt = corpus.build_prompt("malignant", "C")
print(f"sampling 4 images for: {prompt.text!r}")
images = sample(model, prompt, 4, seed=9, guidance_scale=3.0)
print(f"  pixel range [{images.min():.2f}, {images.max():.2f}]")

records_synth, manifest = generate_balanced_dataset(model, per_cell=2, seed=5,
                                                    out_dir="runs/demo_synth",
                                                    guidance_scale=3.0)
print(f"balanced synthetic set: {len(records_synth)} images, manifest {manifest}")
