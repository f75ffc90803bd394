"""End-to-end pipeline: tone detection, conditional generation, balanced mix,
diagnosis training, grouped evaluation and report emission.

Every stage is seeded from the config, so a pipeline run is a pure function of
its config file: running it twice produces byte-identical report CSVs.
"""

from __future__ import annotations

import csv
import hashlib
from pathlib import Path

import numpy as np

from dermdiff import classify, corpus, metrics, report
from dermdiff.config import ExperimentConfig
from dermdiff.diffusion import (
    DiffusionTrainConfig,
    generate_balanced_dataset,
    save_model,
    save_vae,
    train_diffusion,
    train_vae,
)


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:12]


def _mix_records(train_records, synthetic_records, ratio: float):
    """Real training set plus a balanced synthetic complement.

    The per-cell synthetic budget is ratio times the largest real cell, so a
    ratio of 1.0 tops every cell up toward parity with the majority cell.
    """
    by_cell: dict[tuple, int] = {}
    for rec in train_records:
        by_cell[(rec.disease, rec.tone)] = by_cell.get((rec.disease, rec.tone), 0) + 1
    budget = int(round(ratio * max(by_cell.values())))
    mixed = list(train_records)
    taken: dict[tuple, int] = {}
    for rec in synthetic_records:
        cell = (rec.disease, rec.tone)
        if taken.get(cell, 0) < budget:
            mixed.append(rec)
            taken[cell] = taken.get(cell, 0) + 1
    return mixed


def run_pipeline(cfg: ExperimentConfig, out_dir=None, log=print) -> dict:
    """Run the full flow under out_dir; returns a dict of artifact paths."""
    out_dir = Path(out_dir if out_dir is not None else cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    paths: dict[str, Path] = {}
    cfg_path = out_dir / "config.cfg"
    cfg.save(cfg_path)
    paths["config"] = cfg_path
    config_hash = cfg.config_hash()
    reports_dir = out_dir / "reports"
    ckpt_dir = out_dir / "checkpoints"

    log(f"[pipeline] corpus: generating {sum(cfg.counts().values())} samples")
    spec = corpus.CorpusSpec(
        image_size=cfg["corpus.image_size"],
        counts=cfg.counts(),
        corpus_seed=cfg["corpus.seed"],
        lesion_margin=cfg["corpus.lesion_margin"],
    )
    records = corpus.generate_corpus(spec)
    paths["corpus_manifest"] = corpus.save_corpus(out_dir / "corpus", records)

    train_recs, val_recs, test_recs = corpus.split(
        records, (cfg["split.train"], cfg["split.val"], cfg["split.test"]), cfg["split.seed"]
    )
    fit_recs = list(train_recs) + list(val_recs)

    log("[pipeline] tone detection: training the skin-tone classifier")
    tone_cfg = classify.FocalConfig(
        alpha=cfg.alpha("tone"), gamma=cfg["classifier.tone.gamma"],
        lr=cfg["classifier.tone.lr"], batch=cfg["classifier.tone.batch"],
        epochs=cfg["classifier.tone.epochs"], seed=cfg["classifier.tone.seed"],
    )
    tone_clf, _ = classify.train_classifier(fit_recs, "tone", tone_cfg)
    classify.save_classifier(tone_clf, ckpt_dir / "tone_clf.ckpt")
    paths["tone_clf"] = ckpt_dir / "tone_clf.ckpt"

    log("[pipeline] vae: training the latent autoencoder")
    vae = train_vae(
        fit_recs, epochs=cfg["vae.epochs"], lr=cfg["vae.lr"], batch=cfg["vae.batch"],
        seed=cfg["vae.seed"], image_size=cfg["corpus.image_size"],
        latent_channels=cfg["vae.latent_channels"], kl_weight=cfg["vae.kl_weight"],
    )
    save_vae(vae, ckpt_dir / "vae.ckpt")
    paths["vae"] = ckpt_dir / "vae.ckpt"

    log(f"[pipeline] diffusion: {cfg['diffusion.steps']} training steps")
    diff_cfg = DiffusionTrainConfig(
        steps=cfg["diffusion.steps"], batch=cfg["diffusion.batch"], lr=cfg["diffusion.lr"],
        momentum=cfg["diffusion.momentum"], T=cfg["diffusion.t"],
        beta_start=cfg["diffusion.beta_start"], beta_end=cfg["diffusion.beta_end"],
        base_channels=cfg["diffusion.base_channels"], cond_dim=cfg["diffusion.cond_dim"],
        cond_gain=cfg["diffusion.cond_gain"], seed=cfg["diffusion.seed"],
        cfg_dropout=cfg["diffusion.cfg_dropout"],
        use_cross_attention=cfg["diffusion.cross_attention"],
    )
    model = train_diffusion(fit_recs, vae, diff_cfg)
    save_model(model, ckpt_dir / "dermdiff.ckpt")
    paths["dermdiff"] = ckpt_dir / "dermdiff.ckpt"

    log(f"[pipeline] sampling: balanced synthetic set, {cfg['sample.per_cell']} per cell")
    synthetic, synth_manifest = generate_balanced_dataset(
        model, per_cell=cfg["sample.per_cell"], seed=cfg["sample.seed"],
        out_dir=out_dir / "synthetic", guidance_scale=cfg["diffusion.guidance_scale"],
    )
    paths["synthetic_manifest"] = synth_manifest

    log("[pipeline] diagnosis: training real-only and real+synthetic classifiers")
    disease_cfg = classify.FocalConfig(
        alpha=cfg.alpha("disease"), gamma=cfg["classifier.disease.gamma"],
        lr=cfg["classifier.disease.lr"], batch=cfg["classifier.disease.batch"],
        epochs=cfg["classifier.disease.epochs"], seed=cfg["classifier.disease.seed"],
    )
    clf_real, _ = classify.train_classifier(fit_recs, "disease", disease_cfg)
    classify.save_classifier(clf_real, ckpt_dir / "disease_real.ckpt")
    paths["disease_real"] = ckpt_dir / "disease_real.ckpt"
    mixed = _mix_records(fit_recs, synthetic, cfg["mix.synthetic_ratio"])
    clf_mix, _ = classify.train_classifier(mixed, "disease", disease_cfg)
    classify.save_classifier(clf_mix, ckpt_dir / "disease_mix.ckpt")
    paths["disease_mix"] = ckpt_dir / "disease_mix.ckpt"

    log("[pipeline] evaluation: grouped metrics, fairness, FID, MS-SSIM")
    tone_source = cfg["evaluate.tone_source"]
    if tone_source == "predicted":
        tone_images = np.stack([r.image for r in test_recs])
        probs = [classify.predict(tone_clf, tone_images[i : i + 256])
                 for i in range(0, len(tone_images), 256)]
        tone_idx = np.argmax(np.concatenate(probs, axis=0), axis=1)
        tone_labels = [classify.TASK_CLASSES["tone"][i] for i in tone_idx]
    elif tone_source == "oracle":
        tone_labels = [r.tone for r in test_recs]
    else:
        raise ValueError(f"evaluate.tone_source must be oracle or predicted, got {tone_source!r}")

    grouped = {}
    fairness = {}
    logs_by_variant = {}
    for variant, clf in (("real", clf_real), ("real+synthetic", clf_mix)):
        grouped[variant] = classify.evaluate_grouped(clf, test_recs, tone_labels=tone_labels,
                                                     tone_source=tone_source)
        log_path = reports_dir / f"pred_{variant.replace('+', '_')}.csv"
        classify.write_prediction_log(log_path, clf, test_recs, tone_labels=tone_labels)
        paths[f"pred_{variant}"] = log_path
        rows = classify.read_prediction_log(log_path)
        logs_by_variant[variant] = rows
        fairness[variant] = metrics.fairness_metrics(rows)

    extractor_hash = _file_hash(paths["disease_real"])
    feats_real = classify.batched_features(clf_real, test_recs)
    feats_synth = classify.batched_features(clf_real, synthetic)
    fid_rows = []
    stats_real_all = metrics.fit_gaussian(feats_real)
    stats_synth_all = metrics.fit_gaussian(feats_synth)
    fid_rows.append({
        "compared_set_a": "real_test", "compared_set_b": "synthetic",
        "n_a": stats_real_all.n, "n_b": stats_synth_all.n,
        "feature_dim": len(stats_real_all.mean), "extractor_hash": extractor_hash,
        "fid": f"{metrics.fid(stats_real_all, stats_synth_all):.4f}",
    })
    for disease in corpus.DISEASES:
        mask_r = [r.disease == disease for r in test_recs]
        mask_s = [r.disease == disease for r in synthetic]
        if sum(mask_r) >= 2 and sum(mask_s) >= 2:
            st_r = metrics.fit_gaussian(feats_real[np.array(mask_r)])
            st_s = metrics.fit_gaussian(feats_synth[np.array(mask_s)])
            fid_rows.append({
                "compared_set_a": f"real_test_{disease}", "compared_set_b": f"synthetic_{disease}",
                "n_a": st_r.n, "n_b": st_s.n, "feature_dim": len(st_r.mean),
                "extractor_hash": extractor_hash,
                "fid": f"{metrics.fid(st_r, st_s):.4f}",
            })

    ms_rows = []
    n_pairs = cfg["metrics.msssim_pairs"]
    ms_seed = cfg["metrics.msssim_seed"]
    subsets = [("all", synthetic)] + [(d, [r for r in synthetic if r.disease == d])
                                      for d in corpus.DISEASES]
    for name, subset in subsets:
        if len(subset) >= 2:
            value = metrics.mean_pairwise_msssim([r.image for r in subset], n_pairs, ms_seed)
            ms_rows.append({"subset": name, "n_images": len(subset), "n_pairs": n_pairs,
                            "mean_msssim": f"{value:.4f}"})

    report_paths = report.emit_report(grouped, fairness, fid_rows, ms_rows, reports_dir,
                                      config_hash=config_hash, tone_source=tone_source)
    paths.update({f"report_{k}": v for k, v in report_paths.items()})
    paths["roc"] = report.emit_roc_plot(logs_by_variant, reports_dir / "roc.svg")

    run_manifest = reports_dir / "run_manifest.csv"
    with open(run_manifest, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["artifact", "path"])
        for key in sorted(paths):
            writer.writerow([key, str(Path(paths[key]).relative_to(out_dir))])
    paths["run_manifest"] = run_manifest
    log(f"[pipeline] done: reports under {reports_dir}")
    return paths
