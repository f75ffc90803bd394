"""Command-line interface orchestrating the pipeline stages.

Exit codes: 0 success, 1 usage error, 2 runtime error.  Usage errors never
create output files.  The DERMDIFF_OUT environment variable overrides output
directories.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of calling sys.exit on bad usage."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="dermdiff", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_corpus = sub.add_parser("corpus", help="procedural corpus generation and CSV ingestion")
    corpus_sub = p_corpus.add_subparsers(dest="subcommand", required=True)
    p_gen = corpus_sub.add_parser("gen", help="generate a labeled procedural corpus")
    p_gen.add_argument("--out", default=None, help="output directory (default: DERMDIFF_OUT or ./corpus)")
    p_gen.add_argument("--per-cell", type=int, default=10)
    p_gen.add_argument("--image-size", type=int, default=32)
    p_gen.add_argument("--seed", type=int, default=0)
    p_ing = corpus_sub.add_parser("ingest", help="ingest a metadata CSV (image_path,label[,fst])")
    p_ing.add_argument("--csv", required=True)
    p_ing.add_argument("--image-root", required=True)
    p_ing.add_argument("--out", default=None, help="normalized manifest CSV path")

    p_tone = sub.add_parser("tone", help="colorimetric tone estimation")
    tone_sub = p_tone.add_subparsers(dest="subcommand", required=True)
    p_est = tone_sub.add_parser("estimate", help="estimate the tone of a PPM image")
    p_est.add_argument("image", help="path to a PPM image")

    p_vae = sub.add_parser("vae", help="latent autoencoder")
    vae_sub = p_vae.add_subparsers(dest="subcommand", required=True)
    p_vt = vae_sub.add_parser("train", help="train the VAE on a corpus manifest")
    p_vt.add_argument("--data", required=True, help="corpus manifest CSV")
    p_vt.add_argument("--out", default=None, help="checkpoint path")
    p_vt.add_argument("--epochs", type=int, default=12)
    p_vt.add_argument("--lr", type=float, default=0.7)
    p_vt.add_argument("--batch", type=int, default=16)
    p_vt.add_argument("--seed", type=int, default=0)

    p_diff = sub.add_parser("diffusion", help="conditional diffusion training and sampling")
    diff_sub = p_diff.add_subparsers(dest="subcommand", required=True)
    p_dt = diff_sub.add_parser("train", help="train the noise predictor")
    p_dt.add_argument("--data", required=True, help="corpus manifest CSV")
    p_dt.add_argument("--vae", required=True, help="trained VAE checkpoint")
    p_dt.add_argument("--out", default=None, help="model checkpoint path")
    p_dt.add_argument("--steps", type=int, default=10000)
    p_dt.add_argument("--batch", type=int, default=4)
    p_dt.add_argument("--lr", type=float, default=1e-4)
    p_dt.add_argument("--t", type=int, default=200)
    p_dt.add_argument("--seed", type=int, default=0)
    p_ds = diff_sub.add_parser("sample", help="sample images for a prompt or balanced set")
    p_ds.add_argument("--model", required=True)
    p_ds.add_argument("--out", default=None)
    p_ds.add_argument("--disease", choices=["benign", "malignant"], default=None)
    p_ds.add_argument("--tone", choices=["A", "B", "C"], default=None)
    p_ds.add_argument("--per-cell", type=int, default=None,
                      help="balanced mode: this many samples for each of the 6 cells")
    p_ds.add_argument("-n", type=int, default=1, help="sample count (single-prompt mode)")
    p_ds.add_argument("--seed", type=int, default=0)
    p_ds.add_argument("--steps", type=int, default=None)
    p_ds.add_argument("--guidance-scale", type=float, default=0.0)

    p_clf = sub.add_parser("classifier", help="focal-loss classifier training")
    clf_sub = p_clf.add_subparsers(dest="subcommand", required=True)
    p_ct = clf_sub.add_parser("train", help="train a tone or disease classifier")
    p_ct.add_argument("--task", choices=["tone", "disease"], required=True)
    p_ct.add_argument("--data", required=True, help="corpus manifest CSV")
    p_ct.add_argument("--mix", default=None, help="optional synthetic manifest to mix in")
    p_ct.add_argument("--out", default=None, help="checkpoint path")
    p_ct.add_argument("--epochs", type=int, default=30)
    p_ct.add_argument("--batch", type=int, default=64)
    p_ct.add_argument("--lr", type=float, default=3e-4)
    p_ct.add_argument("--gamma", type=float, default=2.0)
    p_ct.add_argument("--alpha", default=None, help="comma-separated class weights")
    p_ct.add_argument("--seed", type=int, default=0)

    p_eval = sub.add_parser("evaluate", help="grouped evaluation of a disease classifier")
    p_eval.add_argument("--model", required=True)
    p_eval.add_argument("--data", required=True, help="corpus manifest CSV")
    p_eval.add_argument("--out", default=None, help="prediction log CSV path")
    p_eval.add_argument("--tone-source", choices=["oracle", "predicted"], default="oracle")
    p_eval.add_argument("--tone-model", default=None, help="tone classifier (predicted mode)")

    p_fid = sub.add_parser("fid", help="Frechet distance between two sets")
    p_fid.add_argument("--real", required=True, help="manifest CSV of the real set")
    p_fid.add_argument("--synthetic", required=True, help="manifest CSV of the synthetic set")
    p_fid.add_argument("--extractor", required=True, help="disease classifier checkpoint")
    p_fid.add_argument("--out", default=None, help="FID report CSV path")

    p_ms = sub.add_parser("msssim", help="mean pairwise MS-SSIM of a set")
    p_ms.add_argument("--data", required=True, help="manifest CSV")
    p_ms.add_argument("--n-pairs", type=int, default=100)
    p_ms.add_argument("--seed", type=int, default=0)

    p_fair = sub.add_parser("fairness", help="group fairness gaps from a prediction log")
    p_fair.add_argument("--log", required=True, help="prediction log CSV")
    p_fair.add_argument("--out", default=None, help="fairness report CSV path")

    p_rep = sub.add_parser("report", help="aggregate prediction logs into report tables")
    p_rep.add_argument("--log", action="append", required=True, metavar="VARIANT=PATH",
                       help="named prediction log (repeatable)")
    p_rep.add_argument("--out", default=None, help="report output directory")

    p_pipe = sub.add_parser("pipeline", help="full pipeline")
    pipe_sub = p_pipe.add_subparsers(dest="subcommand", required=True)
    p_run = pipe_sub.add_parser("run", help="run every stage from a config file")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", default=None, help="output directory override")
    return parser


def _out_path(explicit, default):
    if explicit:
        return Path(explicit)
    env = os.environ.get("DERMDIFF_OUT")
    if env:
        return Path(env) / default
    return Path(default)


def _load_manifest(path):
    from dermdiff import corpus

    return corpus.load_corpus(path)


def _cmd_corpus_gen(args) -> int:
    from dermdiff import corpus

    out = _out_path(args.out, "corpus")
    spec = corpus.CorpusSpec(image_size=args.image_size,
                             counts=corpus.balanced_counts(args.per_cell),
                             corpus_seed=args.seed)
    records = corpus.generate_corpus(spec)
    manifest = corpus.save_corpus(out, records)
    print(f"wrote {len(records)} samples; manifest {manifest}")
    return 0


def _cmd_corpus_ingest(args) -> int:
    from dermdiff import corpus

    records = corpus.ingest_metadata_csv(args.csv, args.image_root)
    out = _out_path(args.out, "ingested_manifest.csv")
    for rec in records:
        rec.path = str(Path(rec.path).resolve()) if rec.path else ""
    corpus.write_corpus_manifest(out, records)
    print(f"ingested {len(records)} records; manifest {out}")
    return 0


def _cmd_tone_estimate(args) -> int:
    from dermdiff import corpus, tone

    image = corpus.read_image(args.image)
    label, angle = tone.estimate_tone_ita(image)
    print(f"{label} {angle:.2f}")
    return 0


def _cmd_vae_train(args) -> int:
    from dermdiff.diffusion import save_vae, train_vae

    records = _load_manifest(args.data)
    image_size = records[0].image.shape[0]
    vae = train_vae(records, epochs=args.epochs, lr=args.lr, batch=args.batch,
                    seed=args.seed, image_size=image_size)
    out = _out_path(args.out, "vae.ckpt")
    save_vae(vae, out)
    print(f"trained VAE ({len(vae.loss_history)} steps, final loss "
          f"{np.mean(vae.loss_history[-10:]):.5f}); checkpoint {out}")
    return 0


def _cmd_diffusion_train(args) -> int:
    from dermdiff.diffusion import DiffusionTrainConfig, load_vae, save_model, train_diffusion

    records = _load_manifest(args.data)
    vae = load_vae(args.vae)
    cfg = DiffusionTrainConfig(steps=args.steps, batch=args.batch, lr=args.lr, T=args.t,
                               seed=args.seed)
    model = train_diffusion(records, vae, cfg)
    out = _out_path(args.out, "dermdiff.ckpt")
    save_model(model, out)
    print(f"trained diffusion model ({args.steps} steps, final loss "
          f"{np.mean(model.loss_history[-100:]):.4f}); checkpoint {out}")
    return 0


def _cmd_diffusion_sample(args) -> int:
    from dermdiff import corpus
    from dermdiff.diffusion import generate_balanced_dataset, load_model, sample

    model = load_model(args.model)
    out = _out_path(args.out, "samples")
    if args.per_cell is not None:
        records, manifest = generate_balanced_dataset(model, per_cell=args.per_cell,
                                                      seed=args.seed, out_dir=out,
                                                      steps=args.steps,
                                                      guidance_scale=args.guidance_scale)
        print(f"wrote {len(records)} samples; manifest {manifest}")
        return 0
    if not args.disease or not args.tone:
        raise UsageError("diffusion sample: need --disease and --tone (or --per-cell)")
    prompt = corpus.build_prompt(args.disease, args.tone)
    images = sample(model, prompt, args.n, args.seed, steps=args.steps,
                    guidance_scale=args.guidance_scale)
    out.mkdir(parents=True, exist_ok=True)
    import csv as _csv

    manifest = out / "manifest.csv"
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["index", "path", "disease", "tone", "seed", "steps"])
        for i in range(args.n):
            name = f"sample_{i:04d}_{args.disease}_{args.tone}.ppm"
            corpus.write_image(out / name, images[i])
            writer.writerow([i, name, args.disease, args.tone, args.seed,
                             args.steps or model.schedule.T])
    print(f"wrote {args.n} samples; manifest {manifest}")
    return 0


def _cmd_classifier_train(args) -> int:
    from dermdiff import classify

    records = _load_manifest(args.data)
    if args.mix:
        records = records + _load_manifest(args.mix)
    alpha = None
    if args.alpha:
        parts = [float(p) for p in args.alpha.split(",")]
        alpha = parts[0] if len(parts) == 1 else tuple(parts)
    cfg = classify.FocalConfig(alpha=alpha, gamma=args.gamma, lr=args.lr, batch=args.batch,
                               epochs=args.epochs, seed=args.seed)
    model, history = classify.train_classifier(records, args.task, cfg)
    out = _out_path(args.out, f"{args.task}_clf.ckpt")
    classify.save_classifier(model, out)
    best = max(h["val_f1"] for h in history)
    print(f"trained {args.task} classifier (best val F1 {best:.3f}); checkpoint {out}")
    return 0


def _cmd_evaluate(args) -> int:
    from dermdiff import classify

    model = classify.load_classifier(args.model)
    records = _load_manifest(args.data)
    tone_labels = None
    if args.tone_source == "predicted":
        if not args.tone_model:
            raise UsageError("evaluate: --tone-source predicted needs --tone-model")
        tone_clf = classify.load_classifier(args.tone_model)
        images = np.stack([r.image for r in records])
        probs = np.concatenate([classify.predict(tone_clf, images[i : i + 256])
                                for i in range(0, len(images), 256)])
        tone_labels = [classify.TASK_CLASSES["tone"][i] for i in np.argmax(probs, axis=1)]
    rep = classify.evaluate_grouped(model, records, tone_labels=tone_labels,
                                    tone_source=args.tone_source)
    out = _out_path(args.out, "predictions.csv")
    classify.write_prediction_log(out, model, records, tone_labels=tone_labels)
    for group in sorted(rep.groups):
        gm = rep.groups[group]
        auc = "--" if gm.auc is None else f"{gm.auc:.2f}"
        f1 = "--" if gm.f1 is None else f"{gm.f1:.2f}"
        print(f"group {group}: n={gm.n} accuracy={gm.accuracy:.2f} f1={f1} auc={auc}")
    print(f"prediction log {out}")
    return 0


def _cmd_fid(args) -> int:
    import hashlib

    from dermdiff import classify, metrics

    extractor = classify.load_classifier(args.extractor)
    real = _load_manifest(args.real)
    synth = _load_manifest(args.synthetic)
    stats_a = metrics.fit_gaussian(classify.batched_features(extractor, real))
    stats_b = metrics.fit_gaussian(classify.batched_features(extractor, synth))
    value = metrics.fid(stats_a, stats_b)
    extractor_hash = hashlib.sha256(Path(args.extractor).read_bytes()).hexdigest()[:12]
    out = _out_path(args.out, "fid.csv")
    metrics.write_fid_row(out, args.real, args.synthetic, stats_a, stats_b, extractor_hash, value)
    print(f"fid {value:.4f} (extractor {extractor_hash}); report {out}")
    return 0


def _cmd_msssim(args) -> int:
    from dermdiff import metrics

    records = _load_manifest(args.data)
    value = metrics.mean_pairwise_msssim([r.image for r in records], args.n_pairs, args.seed)
    print(f"mean pairwise ms-ssim {value:.4f} over {args.n_pairs} pairs")
    return 0


def _cmd_fairness(args) -> int:
    from dermdiff import classify, metrics

    rows = classify.read_prediction_log(args.log)
    rep = metrics.fairness_metrics(rows)
    out = _out_path(args.out, "fairness.csv")
    metrics.write_fairness_report(out, rep)

    def fmt(v):
        return "--" if v is None else f"{v:.4f}"

    print(f"accuracy_parity_gap {fmt(rep.accuracy_parity_gap)}")
    print(f"equal_opportunity_gap {fmt(rep.equal_opportunity_gap)}")
    print(f"equalized_odds_gap {fmt(rep.equalized_odds_gap)}")
    print(f"report {out}")
    return 0


def _cmd_report(args) -> int:
    from dermdiff import classify, metrics, report

    logs = {}
    for spec in args.log:
        if "=" not in spec:
            raise UsageError(f"report: --log expects VARIANT=PATH, got {spec!r}")
        name, path = spec.split("=", 1)
        logs[name] = classify.read_prediction_log(path)
    fairness = {name: metrics.fairness_metrics(rows) for name, rows in logs.items()}
    out = _out_path(args.out, "reports")
    paths = report.emit_report({}, fairness, [], [], out)
    roc = report.emit_roc_plot(logs, out / "roc.svg")
    print(f"report tables under {out}; roc {roc}")
    return 0


def _cmd_pipeline_run(args) -> int:
    from dermdiff.config import ExperimentConfig
    from dermdiff.pipeline import run_pipeline

    cfg = ExperimentConfig.load(args.config)
    out = args.out or os.environ.get("DERMDIFF_OUT") or None
    paths = run_pipeline(cfg, out_dir=out)
    print(f"pipeline complete; run manifest {paths['run_manifest']}")
    return 0


_HANDLERS = {
    ("corpus", "gen"): _cmd_corpus_gen,
    ("corpus", "ingest"): _cmd_corpus_ingest,
    ("tone", "estimate"): _cmd_tone_estimate,
    ("vae", "train"): _cmd_vae_train,
    ("diffusion", "train"): _cmd_diffusion_train,
    ("diffusion", "sample"): _cmd_diffusion_sample,
    ("classifier", "train"): _cmd_classifier_train,
    ("evaluate", None): _cmd_evaluate,
    ("fid", None): _cmd_fid,
    ("msssim", None): _cmd_msssim,
    ("fairness", None): _cmd_fairness,
    ("report", None): _cmd_report,
    ("pipeline", "run"): _cmd_pipeline_run,
}


def run_subcommand(argv) -> int:
    """Parse argv and dispatch; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        handler = _HANDLERS[(args.command, getattr(args, "subcommand", None))]
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    try:
        return handler(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main(argv=None) -> int:
    return run_subcommand(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
