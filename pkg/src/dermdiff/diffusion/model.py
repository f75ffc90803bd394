"""The trained generator bundle: VAE + condition encoder + U-Net + schedule."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dermdiff.corpus import DISEASES, TONES, PromptCondition, SampleRecord, build_prompt, write_image
from dermdiff.diffusion.condition import ConditionEncoder
from dermdiff.diffusion.schedule import NoiseSchedule, diffusion_loss_grad, forward_diffuse, make_schedule
from dermdiff.diffusion.unet import UNetConfig, init_unet_params, unet_forward
from dermdiff.diffusion.vae import VaeLite, vae_decode, vae_encode
from dermdiff.neuralcore import (
    ParameterSet,
    SeedStream,
    SgdState,
    Tape,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
)


@dataclass
class DiffusionTrainConfig:
    steps: int = 10_000
    batch: int = 4
    lr: float = 1e-4
    momentum: float = 0.99
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    base_channels: int = 48
    cond_dim: int = 64
    cond_gain: float = 4.0
    seed: int = 0
    cfg_dropout: float = 0.0  # condition dropout rate; 0 disables classifier-free guidance
    use_cross_attention: bool = False


@dataclass
class DermDiffModel:
    vae: VaeLite
    cond: ConditionEncoder
    pset: ParameterSet  # unet + condition embedding parameters
    unet_cfg: UNetConfig
    schedule: NoiseSchedule
    latent_scale: float
    train_cfg: DiffusionTrainConfig
    latent_shift: np.ndarray | None = None  # per-coordinate latent mean
    loss_history: list = field(default_factory=list)
    trained: bool = False

    @property
    def latent_shape(self) -> tuple:
        return self.vae.latent_shape


def _encode_corpus_latents(vae: VaeLite, records) -> np.ndarray:
    images = np.stack([r.image for r in records])
    latents = []
    for start in range(0, len(records), 64):
        latents.append(vae_encode(vae, images[start : start + 64], mode="mean"))
    return np.concatenate(latents, axis=0)


def build_model(vae: VaeLite, cfg: DiffusionTrainConfig) -> DermDiffModel:
    """Fresh untrained model around a trained VAE."""
    root = SeedStream(cfg.seed)
    pset = ParameterSet()
    cond = ConditionEncoder.create(pset, root, dim=cfg.cond_dim)
    unet_cfg = UNetConfig(
        latent_channels=vae.latent_channels,
        base_channels=cfg.base_channels,
        cond_dim=cfg.cond_dim,
        cond_gain=cfg.cond_gain,
        use_cross_attention=cfg.use_cross_attention,
    )
    init_unet_params(pset, root, unet_cfg)
    schedule = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    return DermDiffModel(
        vae=vae,
        cond=cond,
        pset=pset,
        unet_cfg=unet_cfg,
        schedule=schedule,
        latent_scale=1.0,
        train_cfg=cfg,
    )


def train_diffusion(records, vae: VaeLite, cfg: DiffusionTrainConfig | None = None,
                    model: DermDiffModel | None = None) -> DermDiffModel:
    """Train the noise predictor (and the condition embedding, jointly).

    Each step draws a prompt-labeled minibatch, a uniform step t per sample and
    unit Gaussian noise, then minimizes the mean squared error between sampled
    and predicted noise.
    """
    if not records:
        raise ValueError("cannot train the diffusion model on an empty corpus")
    if any(r.tone is None for r in records):
        raise ValueError("diffusion training requires tone labels on every record")
    cfg = cfg or DiffusionTrainConfig()
    if not vae.trained:
        raise ValueError("the VAE must be trained before diffusion training")
    if model is None:
        model = build_model(vae, cfg)
    root = SeedStream(cfg.seed)

    latents = _encode_corpus_latents(vae, records)
    # center and whiten: diffusion then runs on zero-mean unit-variance latents
    shift = latents.mean(axis=0)
    scale = float((latents - shift).std())
    if scale <= 0:
        raise RuntimeError("degenerate VAE latents: zero variance across the corpus")
    model.latent_shift = shift
    model.latent_scale = 1.0 / scale
    latents = (latents - shift) * model.latent_scale
    prompts = [build_prompt(r.disease, r.tone).text for r in records]
    null_cond = np.zeros(cfg.cond_dim)

    state = SgdState(model.pset, cfg.lr, cfg.momentum)
    n = len(records)
    T = model.schedule.T
    for step in range(cfg.steps):
        g = root.child("train").child(str(step)).generator()
        idx = g.integers(0, n, size=cfg.batch)
        t = g.integers(0, T, size=cfg.batch)
        eps = g.standard_normal((cfg.batch,) + model.latent_shape)
        x_t = forward_diffuse(latents[idx], t, eps, model.schedule)

        tape = Tape(model.pset)
        xv = tape.input(x_t)
        tv = tape.input(t.astype(np.float64))
        batch_prompts = [prompts[i] for i in idx]
        cond = model.cond.encode(tape, batch_prompts)
        if cfg.cfg_dropout > 0.0:
            drop = g.random(cfg.batch) < cfg.cfg_dropout
            if drop.any():
                mask = (~drop).astype(np.float64)[:, None]
                cond = tape.custom([cond], cond.value * mask, lambda gy, m=mask: [gy * m])
        tokens = model.cond.encode_tokens(tape, batch_prompts) if cfg.use_cross_attention else None
        eps_pred = unet_forward(tape, model.pset, xv, tv, cond, model.unet_cfg, tokens=tokens)
        loss, dloss = diffusion_loss_grad(eps_pred.value, eps)
        if not np.isfinite(loss):
            raise RuntimeError(f"non-finite diffusion loss at step {step}")
        tape.backward(eps_pred, dloss)
        sgd_step(model.pset, state)
        model.loss_history.append(loss)
    model.trained = True
    model.train_cfg = cfg
    return model


def predict_noise(model: DermDiffModel, x_t: np.ndarray, t, condition: np.ndarray,
                  prompt_text: str | None = None) -> np.ndarray:
    """Noise prediction for latents x_t at steps t under a condition vector.

    When the model was built with cross-attention, the prompt text is also
    required (it supplies the unpooled token embeddings).
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    single = x_t.ndim == 3
    if single:
        x_t = x_t[None]
    if x_t.shape[1:] != model.latent_shape:
        raise ValueError(f"latent shape {x_t.shape[1:]} != model latent shape {model.latent_shape}")
    n = x_t.shape[0]
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,)).copy()
    condition = np.asarray(condition, dtype=np.float64)
    if condition.ndim == 1:
        condition = np.broadcast_to(condition, (n, condition.shape[0])).copy()
    tape = Tape(model.pset)
    tokens = None
    if model.unet_cfg.use_cross_attention:
        if prompt_text is None:
            raise ValueError("cross-attention model needs prompt_text for token embeddings")
        tokens = model.cond.encode_tokens(tape, [prompt_text] * n)
    out = unet_forward(
        tape,
        model.pset,
        tape.input(x_t),
        tape.input(t_arr),
        tape.input(condition),
        model.unet_cfg,
        tokens=tokens,
    )
    return out.value[0] if single else out.value


def _sampling_condition(model: DermDiffModel, prompt: PromptCondition, n: int,
                        tape: Tape):
    texts = [prompt.text] * n
    cond = model.cond.encode(tape, texts)
    tokens = model.cond.encode_tokens(tape, texts) if model.unet_cfg.use_cross_attention else None
    return cond, tokens


def _unet_predict(model: DermDiffModel, x: np.ndarray, t_value: float, prompt: PromptCondition,
                  guidance_scale: float) -> np.ndarray:
    n = x.shape[0]
    tape = Tape(model.pset)
    xv = tape.input(x)
    tv = tape.input(np.full(n, float(t_value)))
    cond, tokens = _sampling_condition(model, prompt, n, tape)
    eps = unet_forward(tape, model.pset, xv, tv, cond, model.unet_cfg, tokens=tokens).value
    if guidance_scale and guidance_scale != 1.0:
        tape_u = Tape(model.pset)
        null = tape_u.input(np.zeros((n, model.unet_cfg.cond_dim)))
        null_tokens = None
        if model.unet_cfg.use_cross_attention:
            n_tok = model.cond.token_ids(prompt.text).shape[0]
            null_tokens = tape_u.input(np.zeros((n, n_tok, model.cond.dim)))
        eps_u = unet_forward(
            tape_u, model.pset, tape_u.input(x), tape_u.input(np.full(n, float(t_value))),
            null, model.unet_cfg,
            tokens=null_tokens,
        ).value
        eps = eps_u + guidance_scale * (eps - eps_u)
    return eps


def sample(model: DermDiffModel, prompt: PromptCondition, n: int, seed: int,
           steps: int | None = None, guidance_scale: float = 0.0) -> np.ndarray:
    """Ancestral sampling: n images for one prompt, deterministic in seed.

    Per-image noise comes from per-image seed substreams, so results do not
    depend on batch composition.  steps=None (or steps == T) walks the full
    schedule with the exact per-step posterior; smaller values walk an evenly
    strided sub-schedule with compounded noise levels.
    """
    if not model.trained:
        raise ValueError("model is untrained; call train_diffusion first")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    sched = model.schedule
    T = sched.T
    steps = T if steps is None else int(steps)
    if not 1 <= steps <= T:
        raise ValueError(f"steps must be in [1, {T}], got {steps}")
    root = SeedStream(seed).child("sample")
    streams = [root.child(str(i)) for i in range(n)]
    x = np.stack([s.child("init").generator().standard_normal(model.latent_shape) for s in streams])

    if steps == T:
        ts = list(range(T - 1, -1, -1))
    else:
        ts = sorted({int(round(v)) for v in np.linspace(T - 1, 0, steps)}, reverse=True)
    for pos, t in enumerate(ts):
        eps = _unet_predict(model, x, t, prompt, guidance_scale)
        abar_t = sched.alpha_bar[t]
        last = pos == len(ts) - 1
        if steps == T:
            beta_t = sched.beta[t]
            alpha_t = sched.alpha[t]
        else:
            abar_prev = 1.0 if last else sched.alpha_bar[ts[pos + 1]]
            alpha_t = abar_t / abar_prev
            beta_t = 1.0 - alpha_t
        mean = (x - (beta_t / np.sqrt(1.0 - abar_t)) * eps) / np.sqrt(alpha_t)
        if last:
            x = mean
        else:
            z = np.stack([
                s.child("z").child(str(t)).generator().standard_normal(model.latent_shape)
                for s in streams
            ])
            x = mean + np.sqrt(beta_t) * z
    latents = x / model.latent_scale
    if model.latent_shift is not None:
        latents = latents + model.latent_shift
    images = vae_decode(model.vae, latents)
    return np.clip(images, 0.0, 1.0)


def generate_balanced_dataset(model: DermDiffModel, per_cell: int, seed: int, out_dir=None,
                              steps: int | None = None,
                              guidance_scale: float = 0.0) -> tuple[list[SampleRecord], Path | None]:
    """Exactly per_cell synthetic samples for each (disease, tone) cell.

    When out_dir is given, images are written as PPM files along with a
    sampling manifest (columns index,path,disease,tone,seed,steps).
    """
    if not model.trained:
        raise ValueError("model is untrained; call train_diffusion first")
    records: list[SampleRecord] = []
    root = SeedStream(seed)
    used_steps = model.schedule.T if steps is None else int(steps)
    for disease in DISEASES:
        for tone in TONES:
            cell_seed = root.child("cell").child(disease).child(tone).integer_seed()
            images = sample(model, build_prompt(disease, tone), per_cell, cell_seed, steps=steps,
                            guidance_scale=guidance_scale)
            for i in range(per_cell):
                records.append(
                    SampleRecord(
                        image=images[i],
                        disease=disease,
                        tone=tone,
                        fst=None,
                        provenance="synthetic",
                        seed=cell_seed,
                    )
                )
    manifest_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for i, rec in enumerate(records):
            name = f"synth_{i:06d}_{rec.disease}_{rec.tone}.ppm"
            rec.path = name
            write_image(out_dir / name, rec.image)
        manifest_path = out_dir / "manifest.csv"
        with open(manifest_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index", "path", "disease", "tone", "seed", "steps"])
            for i, rec in enumerate(records):
                writer.writerow([i, rec.path, rec.disease, rec.tone, rec.seed, used_steps])
    return records, manifest_path


# ---------------------------------------------------------------------------
# persistence (neuralcore checkpoint format with vae/cond/unet/schedule sections)


def save_model(model: DermDiffModel, path) -> None:
    tensors: dict[str, np.ndarray] = {}
    tensors.update(model.vae.pset.params)
    tensors.update(model.pset.params)
    tensors["schedule/beta"] = model.schedule.beta
    tensors["meta/latent_shift"] = (model.latent_shift if model.latent_shift is not None
                                    else np.zeros(model.vae.latent_shape))
    meta = {
        "latent_scale": model.latent_scale,
        "image_size": model.vae.image_size,
        "latent_channels": model.vae.latent_channels,
        "enc_c1": model.vae.enc_channels[0],
        "enc_c2": model.vae.enc_channels[1],
        "kl_weight": model.vae.kl_weight,
        "base_channels": model.unet_cfg.base_channels,
        "cond_dim": model.unet_cfg.cond_dim,
        "cond_gain": model.unet_cfg.cond_gain,
        "use_cross_attention": float(model.unet_cfg.use_cross_attention),
        "vocab_size": len(model.cond.vocab),
        "trained": float(model.trained),
    }
    for key, value in meta.items():
        tensors[f"meta/{key}"] = np.float64(value)
    save_checkpoint(path, tensors)


def load_model(path) -> DermDiffModel:
    tensors = load_checkpoint(path)

    def meta(key):
        return float(tensors[f"meta/{key}"])

    vae_pset = ParameterSet()
    unet_pset = ParameterSet()
    for name, value in tensors.items():
        if name.startswith("vae/"):
            vae_pset.add(name, value)
        elif name.startswith(("unet/", "cond/")):
            unet_pset.add(name, value)
    vae = VaeLite(
        pset=vae_pset,
        image_size=int(meta("image_size")),
        latent_channels=int(meta("latent_channels")),
        enc_channels=(int(meta("enc_c1")), int(meta("enc_c2"))),
        kl_weight=meta("kl_weight"),
        trained=True,
    )
    cond = ConditionEncoder(unet_pset, dim=int(meta("cond_dim")))
    if len(cond.vocab) != int(meta("vocab_size")):
        raise ValueError("checkpoint vocabulary size does not match the closed prompt vocabulary")
    unet_cfg = UNetConfig(
        latent_channels=vae.latent_channels,
        base_channels=int(meta("base_channels")),
        cond_dim=int(meta("cond_dim")),
        cond_gain=meta("cond_gain"),
        use_cross_attention=bool(meta("use_cross_attention")),
    )
    beta = tensors["schedule/beta"]
    schedule = NoiseSchedule(beta=beta, alpha=1.0 - beta, alpha_bar=np.cumprod(1.0 - beta))
    cfg = DiffusionTrainConfig(T=len(beta), base_channels=unet_cfg.base_channels,
                               cond_dim=unet_cfg.cond_dim, cond_gain=unet_cfg.cond_gain,
                               use_cross_attention=unet_cfg.use_cross_attention)
    return DermDiffModel(
        vae=vae,
        cond=cond,
        pset=unet_pset,
        unet_cfg=unet_cfg,
        schedule=schedule,
        latent_scale=meta("latent_scale"),
        train_cfg=cfg,
        latent_shift=tensors["meta/latent_shift"],
        trained=bool(meta("trained")),
    )
