"""Small convolutional VAE mapping images to a 4x(H/4)x(W/4) latent space."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dermdiff.neuralcore import (
    ParameterSet,
    SeedStream,
    SgdState,
    Tape,
    init_uniform,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
)

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0


@dataclass
class VaeLite:
    """Encoder/decoder parameters plus the loss weighting used to train them."""

    pset: ParameterSet
    image_size: int = 32
    latent_channels: int = 4
    enc_channels: tuple = (32, 64)
    kl_weight: float = 1e-4
    loss_history: list = field(default_factory=list)
    trained: bool = False

    @property
    def latent_hw(self) -> int:
        return self.image_size // 4

    @property
    def latent_shape(self) -> tuple:
        return (self.latent_channels, self.latent_hw, self.latent_hw)


def _conv_names(prefix):
    return (f"{prefix}.w", f"{prefix}.b")


def _gn_names(prefix):
    return (f"{prefix}.gamma", f"{prefix}.beta")


def _add_conv(pset, rng, prefix, cin, cout, k):
    pset.add(f"{prefix}.w", init_uniform(rng, (cout, cin, k, k), cin * k * k))
    pset.add(f"{prefix}.b", init_uniform(rng, (cout,), cin * k * k))


def _add_tconv(pset, rng, prefix, cin, cout, k):
    pset.add(f"{prefix}.w", init_uniform(rng, (cin, cout, k, k), cin * k * k))
    pset.add(f"{prefix}.b", init_uniform(rng, (cout,), cin * k * k))


def _add_gn(pset, prefix, channels):
    pset.add(f"{prefix}.gamma", np.ones(channels))
    pset.add(f"{prefix}.beta", np.zeros(channels))


def init_vae(seed_stream: SeedStream, image_size: int = 32, latent_channels: int = 4,
             enc_channels: tuple = (32, 64), kl_weight: float = 1e-4) -> VaeLite:
    if image_size % 4 != 0:
        raise ValueError(f"image_size must be a multiple of 4, got {image_size}")
    pset = ParameterSet()
    rng = seed_stream.child("vae-init").generator()
    c1, c2 = enc_channels
    _add_conv(pset, rng, "vae/enc1", 3, c1, 3)
    _add_gn(pset, "vae/enc1n", c1)
    _add_conv(pset, rng, "vae/enc2", c1, c2, 3)
    _add_gn(pset, "vae/enc2n", c2)
    _add_conv(pset, rng, "vae/enc3", c2, c2, 3)
    _add_conv(pset, rng, "vae/heads", c2, 2 * latent_channels, 3)
    _add_conv(pset, rng, "vae/dec1", latent_channels, c2, 3)
    _add_gn(pset, "vae/dec1n", c2)
    _add_tconv(pset, rng, "vae/dec2", c2, c1, 4)
    _add_gn(pset, "vae/dec2n", c1)
    _add_conv(pset, rng, "vae/dec2b", c1, c1, 3)
    _add_tconv(pset, rng, "vae/dec3", c1, 12, 4)
    _add_gn(pset, "vae/dec3n", 12)
    _add_conv(pset, rng, "vae/out", 12, 3, 1)
    return VaeLite(pset=pset, image_size=image_size, latent_channels=latent_channels,
                   enc_channels=tuple(enc_channels), kl_weight=kl_weight)


def encoder_forward(tape: Tape, vae: VaeLite, x):
    """Encoder on the tape; returns (mu, clamped logvar) vars."""
    h = tape.apply("conv2d", x, params=_conv_names("vae/enc1"), stride=2, pad=1)
    h = tape.apply("group-norm", h, params=_gn_names("vae/enc1n"))
    h = tape.apply("silu", h)
    h = tape.apply("conv2d", h, params=_conv_names("vae/enc2"), stride=2, pad=1)
    h = tape.apply("group-norm", h, params=_gn_names("vae/enc2n"))
    h = tape.apply("silu", h)
    h = tape.apply("conv2d", h, params=_conv_names("vae/enc3"), stride=1, pad=1)
    h = tape.apply("silu", h)
    heads = tape.apply("conv2d", h, params=_conv_names("vae/heads"), stride=1, pad=1)
    c = vae.latent_channels
    mu = tape.custom(
        [heads],
        heads.value[:, :c],
        lambda gy, s=heads.value.shape, c=c: [
            np.concatenate([gy, np.zeros((s[0], s[1] - c) + s[2:])], axis=1)
        ],
    )
    logvar_raw = tape.custom(
        [heads],
        heads.value[:, c:],
        lambda gy, s=heads.value.shape, c=c: [
            np.concatenate([np.zeros((s[0], c) + s[2:]), gy], axis=1)
        ],
    )
    inside = (logvar_raw.value > LOGVAR_MIN) & (logvar_raw.value < LOGVAR_MAX)
    logvar = tape.custom(
        [logvar_raw],
        np.clip(logvar_raw.value, LOGVAR_MIN, LOGVAR_MAX),
        lambda gy, mask=inside: [gy * mask],
    )
    return mu, logvar


def decoder_forward(tape: Tape, vae: VaeLite, z):
    """Decoder on the tape; returns the reconstructed image var (sigmoid output)."""
    h = tape.apply("conv2d", z, params=_conv_names("vae/dec1"), stride=1, pad=1)
    h = tape.apply("group-norm", h, params=_gn_names("vae/dec1n"))
    h = tape.apply("silu", h)
    h = tape.apply("transposed-conv2d", h, params=_conv_names("vae/dec2"), stride=2, pad=1)
    h = tape.apply("group-norm", h, params=_gn_names("vae/dec2n"))
    h = tape.apply("silu", h)
    h = tape.apply("conv2d", h, params=_conv_names("vae/dec2b"), stride=1, pad=1)
    h = tape.apply("silu", h)
    h = tape.apply("transposed-conv2d", h, params=_conv_names("vae/dec3"), stride=2, pad=1)
    h = tape.apply("group-norm", h, params=_gn_names("vae/dec3n"))
    h = tape.apply("silu", h)
    h = tape.apply("conv2d", h, params=_conv_names("vae/out"), stride=1, pad=0)
    return tape.apply("sigmoid", h)


def reparameterize(tape: Tape, mu, logvar, eta: np.ndarray):
    """z = mu + exp(logvar/2) * eta as a tape node with exact gradients."""
    sigma_eta = np.exp(logvar.value / 2.0) * eta
    return tape.custom(
        [mu, logvar],
        mu.value + sigma_eta,
        lambda gy, se=sigma_eta: [gy, gy * se / 2.0],
    )


def kl_term(mu: np.ndarray, logvar: np.ndarray) -> float:
    """Mean per-dimension KL(N(mu, exp(logvar)) || N(0, 1))."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    return float(0.5 * (mu**2 + np.exp(logvar) - 1.0 - logvar).mean())


def vae_loss(tape: Tape, recon, mu, logvar, target: np.ndarray, kl_weight: float):
    """Recon MSE + kl_weight * mean KL, as a scalar tape node."""
    diff = recon.value - target
    mse = float((diff * diff).mean())
    kl = kl_term(mu.value, logvar.value)
    loss_value = np.float64(mse + kl_weight * kl)

    def backward(gy):
        g = float(gy)
        d_recon = g * 2.0 * diff / diff.size
        d_mu = g * kl_weight * mu.value / mu.value.size
        d_lv = g * kl_weight * 0.5 * (np.exp(logvar.value) - 1.0) / logvar.value.size
        return [d_recon, d_mu, d_lv]

    node = tape.custom([recon, mu, logvar], loss_value, backward)
    return node, mse, kl


def _to_nchw(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    return images.transpose(0, 3, 1, 2)


def train_vae(records, epochs: int = 20, lr: float = 0.15, batch: int = 16,
              momentum: float = 0.9, seed: int = 0, image_size: int = 32,
              latent_channels: int = 4, kl_weight: float = 1e-4) -> VaeLite:
    """Train the VAE on a corpus of SampleRecords; returns it with loss history."""
    if not records:
        raise ValueError("cannot train a VAE on an empty corpus")
    root = SeedStream(seed)
    vae = init_vae(root, image_size=image_size, latent_channels=latent_channels,
                   kl_weight=kl_weight)
    data = _to_nchw(np.stack([r.image for r in records]))
    n = len(records)
    state = SgdState(vae.pset, lr, momentum)
    step = 0
    for epoch in range(epochs):
        order = root.child("shuffle").child(str(epoch)).generator().permutation(n)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            x = data[idx]
            tape = Tape(vae.pset)
            xv = tape.input(x)
            mu, logvar = encoder_forward(tape, vae, xv)
            eta = root.child("eta").child(str(step)).generator().standard_normal(mu.value.shape)
            z = reparameterize(tape, mu, logvar, eta)
            recon = decoder_forward(tape, vae, z)
            loss, mse, kl = vae_loss(tape, recon, mu, logvar, x, vae.kl_weight)
            if not np.isfinite(loss.value):
                raise RuntimeError(f"non-finite VAE loss at step {step}")
            tape.backward(loss, 1.0)
            sgd_step(vae.pset, state)
            vae.loss_history.append(float(loss.value))
            step += 1
    vae.trained = True
    return vae


def vae_encode(vae: VaeLite, image: np.ndarray, mode: str = "mean", seed: int = 0) -> np.ndarray:
    """Encode one HxWx3 image (or an NxHxWx3 batch) to latents.

    mode "mean" is deterministic; "sample" draws z = mu + sigma*eta with eta
    seeded by `seed`.
    """
    single = np.asarray(image).ndim == 3
    x = _to_nchw(image)
    if x.shape[2] != vae.image_size or x.shape[3] != vae.image_size:
        raise ValueError(f"image spatial size {x.shape[2:]} != configured {vae.image_size}")
    tape = Tape(vae.pset)
    mu, logvar = encoder_forward(tape, vae, tape.input(x))
    if mode == "mean":
        z = mu.value
    elif mode == "sample":
        eta = SeedStream(seed).child("vae-encode").generator().standard_normal(mu.value.shape)
        z = mu.value + np.exp(logvar.value / 2.0) * eta
    else:
        raise ValueError(f"unknown encode mode {mode!r} (expected 'mean' or 'sample')")
    return z[0] if single else z


def vae_decode(vae: VaeLite, latent: np.ndarray) -> np.ndarray:
    """Decode latents back to HxWx3 images in [0, 1]."""
    latent = np.asarray(latent, dtype=np.float64)
    single = latent.ndim == 3
    if single:
        latent = latent[None]
    tape = Tape(vae.pset)
    recon = decoder_forward(tape, vae, tape.input(latent))
    imgs = np.clip(recon.value.transpose(0, 2, 3, 1), 0.0, 1.0)
    return imgs[0] if single else imgs


def save_vae(vae: VaeLite, path) -> None:
    tensors = dict(vae.pset.params)
    tensors["meta/image_size"] = np.float64(vae.image_size)
    tensors["meta/latent_channels"] = np.float64(vae.latent_channels)
    tensors["meta/enc_c1"] = np.float64(vae.enc_channels[0])
    tensors["meta/enc_c2"] = np.float64(vae.enc_channels[1])
    tensors["meta/kl_weight"] = np.float64(vae.kl_weight)
    tensors["meta/trained"] = np.float64(vae.trained)
    save_checkpoint(path, tensors)


def load_vae(path) -> VaeLite:
    tensors = load_checkpoint(path)
    pset = ParameterSet()
    for name, value in tensors.items():
        if name.startswith("vae/"):
            pset.add(name, value)
    return VaeLite(
        pset=pset,
        image_size=int(float(tensors["meta/image_size"])),
        latent_channels=int(float(tensors["meta/latent_channels"])),
        enc_channels=(int(float(tensors["meta/enc_c1"])), int(float(tensors["meta/enc_c2"]))),
        kl_weight=float(tensors["meta/kl_weight"]),
        trained=bool(float(tensors["meta/trained"])),
    )
