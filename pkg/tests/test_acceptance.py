"""Acceptance gate: one test per criterion, at the stated tolerances.

Criteria 7 and 8 train the full generator at the pre-registered reference
configuration (2,000 procedural 32x32 images; batch 4, lr 1e-4, 5,000 steps,
fixed seeds; condition dropout 0.05 with guidance 3.0 at sampling) and are
marked slow.  Each test prints one PASS/FAIL line.
"""

import time

import numpy as np
import pytest

from dermdiff import classify, corpus, metrics, tone
from dermdiff.config import ExperimentConfig
from dermdiff.diffusion import (
    DiffusionTrainConfig,
    generate_balanced_dataset,
    load_model,
    make_schedule,
    forward_diffuse,
    sample,
    save_model,
    train_diffusion,
    train_vae,
)
from dermdiff.neuralcore import PRIMITIVE_IDS, gradient_check, load_checkpoint, save_checkpoint
from dermdiff.pipeline import run_pipeline

from test_neuralcore import make_fragment
from test_metrics import constant_msssim_oracle, diagonal_fid_closed_form, brute_force_gaps, _rows

GUIDANCE = 3.0


def _line(num, ok, detail):
    status = "PASS" if ok else "FAIL"
    print(f"\nACCEPTANCE {num}: {status} — {detail}")
    assert ok, f"criterion {num}: {detail}"


# ---------------------------------------------------------------------------
# reference run fixtures (shared by criteria 7 and 8)


@pytest.fixture(scope="module")
def reference_corpus():
    counts = {("benign", "A"): 334, ("benign", "B"): 333, ("benign", "C"): 333,
              ("malignant", "A"): 334, ("malignant", "B"): 333, ("malignant", "C"): 333}
    spec = corpus.CorpusSpec(image_size=32, counts=counts, corpus_seed=101)
    return corpus.generate_corpus(spec)


@pytest.fixture(scope="module")
def reference_model(reference_corpus):
    vae = train_vae(reference_corpus, epochs=12, lr=0.7, batch=16, seed=7)
    cfg = DiffusionTrainConfig(steps=5000, batch=4, lr=1e-4, momentum=0.99, T=200,
                               beta_start=1e-4, beta_end=0.05, base_channels=48,
                               seed=13, cfg_dropout=0.05)
    return train_diffusion(reference_corpus, vae, cfg)


@pytest.fixture(scope="module")
def oracle_classifiers(reference_corpus):
    clf_d, hist_d = classify.train_classifier(
        reference_corpus, "disease", classify.FocalConfig(epochs=15, seed=21))
    clf_t, hist_t = classify.train_classifier(
        reference_corpus, "tone", classify.FocalConfig(epochs=15, seed=22))
    best_d = max(h["val_accuracy"] for h in hist_d)
    best_t = max(h["val_accuracy"] for h in hist_t)
    return clf_d, clf_t, best_d, best_t


@pytest.fixture(scope="module")
def reference_synthetic(reference_model):
    records, _ = generate_balanced_dataset(reference_model, per_cell=60, seed=1234,
                                           guidance_scale=GUIDANCE)
    return records


# ---------------------------------------------------------------------------
# criterion 1: gradient suite


def test_criterion_1_gradient_suite():
    start = time.time()
    worst = {}
    for op in sorted(PRIMITIVE_IDS):
        for trial in range(3):
            rng = np.random.default_rng(1000 + 31 * trial)
            fragment, pset, inputs = make_fragment(op, rng)
            report = gradient_check(fragment, pset, inputs, tolerance=1e-6, h=1e-5)
            worst[op] = max(worst.get(op, 0.0), report.max_rel_err)
    # focal-loss classifier head: softmax + focal gradient w.r.t. logits
    rng = np.random.default_rng(77)
    head_worst = 0.0
    for _ in range(8):
        logits = rng.normal(size=(5, 3))
        targets = rng.integers(0, 3, size=5)
        _, grad, _ = classify.focal_loss_from_logits(logits, targets,
                                                     np.array([0.3, 0.4, 0.9]), 2.0)
        h = 1e-5
        for i in range(logits.size):
            flat = logits.reshape(-1)
            keep = flat[i]
            flat[i] = keep + h
            up, _, _ = classify.focal_loss_from_logits(logits, targets,
                                                       np.array([0.3, 0.4, 0.9]), 2.0)
            flat[i] = keep - h
            down, _, _ = classify.focal_loss_from_logits(logits, targets,
                                                         np.array([0.3, 0.4, 0.9]), 2.0)
            flat[i] = keep
            fd = (up - down) / (2 * h)
            a = grad.reshape(-1)[i]
            head_worst = max(head_worst, abs(a - fd) / max(abs(a), abs(fd), 1.0))
    elapsed = time.time() - start
    overall = max(max(worst.values()), head_worst)
    _line(1, overall < 1e-6 and elapsed < 60,
          f"max rel err {overall:.2e} over {len(worst)} primitives + focal head, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 2: FID oracle


def test_criterion_2_fid_oracle():
    start = time.time()
    rng = np.random.default_rng(2020)
    worst = 0.0
    for _ in range(50):
        dim = int(rng.integers(1, 17))
        mu_a, mu_b = rng.normal(size=dim), rng.normal(size=dim)
        var_a = rng.uniform(0.05, 4.0, size=dim)
        var_b = rng.uniform(0.05, 4.0, size=dim)
        a = metrics.GaussianStats(mean=mu_a, cov=np.diag(var_a), n=50)
        b = metrics.GaussianStats(mean=mu_b, cov=np.diag(var_b), n=50)
        got = metrics.fid(a, b)
        worst = max(worst, abs(got - diagonal_fid_closed_form(mu_a, var_a, mu_b, var_b)))
        worst = max(worst, abs(got - metrics.fid(b, a)))
        worst = max(worst, metrics.fid(a, a))
    elapsed = time.time() - start
    _line(2, worst < 1e-8 and elapsed < 10,
          f"50 diagonal pairs, worst deviation {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 3: MS-SSIM suite


def test_criterion_3_msssim_suite(msssim_images):
    start = time.time()
    ok = True
    details = []
    ident = max(abs(metrics.ms_ssim(im, im) - 1.0) for im in msssim_images[:5])
    ok &= ident < 1e-9
    details.append(f"identity dev {ident:.1e}")
    rng = np.random.default_rng(30)
    x = msssim_images[0]
    y = np.clip(x + rng.normal(0, 0.15, x.shape), 0, 1)
    sym = abs(metrics.ms_ssim(x, y) - metrics.ms_ssim(y, x))
    ok &= sym < 1e-12
    details.append(f"symmetry dev {sym:.1e}")
    mono = True
    for i, image in enumerate(msssim_images):
        noise = rng.standard_normal(image.shape)
        vals = [metrics.ms_ssim(image, image + s * noise) for s in (0.05, 0.1, 0.2, 0.4)]
        mono &= all(a > b for a, b in zip(vals, vals[1:]))
    ok &= mono
    details.append(f"monotone over 20 images: {mono}")
    const_dev = abs(metrics.ms_ssim(np.full((64, 64, 3), 0.25), np.full((64, 64, 3), 0.75),
                                    scales=3)
                    - constant_msssim_oracle(0.25, 0.75, metrics.msssim_weights(3)))
    ok &= const_dev < 1e-9
    details.append(f"constant-image oracle dev {const_dev:.1e}")
    elapsed = time.time() - start
    ok &= elapsed < 30
    _line(3, ok, "; ".join(details) + f", {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 4: focal loss


def test_criterion_4_focal_loss():
    rng = np.random.default_rng(4040)
    worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(2, 5))
        raw = rng.random(k) + 1e-3
        probs = raw / raw.sum()
        target = int(rng.integers(0, k))
        nll = -np.log(probs[target])
        worst = max(worst, abs(classify.focal_loss(probs, target, 1.0, 0.0) - nll))
    hand = abs(classify.focal_loss(np.array([0.5, 0.5]), 0, 0.8, 2.0) - 0.8 * 0.25 * np.log(2.0))
    tone_alpha = np.array([0.3, 0.4, 0.9])
    probs = np.array([0.25, 0.35, 0.40])
    tone_dev = 0.0
    for target in range(3):
        expected = -tone_alpha[target] * (1 - probs[target]) ** 2 * np.log(probs[target])
        tone_dev = max(tone_dev, abs(classify.focal_loss(probs, target, tone_alpha, 2.0) - expected))
    ok = worst < 1e-12 and hand < 1e-12 and tone_dev < 1e-12
    _line(4, ok, f"NLL equivalence dev {worst:.1e}; hand cases dev {max(hand, tone_dev):.1e}")


# ---------------------------------------------------------------------------
# criterion 5: schedule and sampling invariants


def test_criterion_5_schedule_and_determinism(small_corpus):
    start = time.time()
    ok = True
    details = []
    for T, b0, b1 in ((10, 0.01, 0.3), (200, 1e-4, 0.05), (1000, 1e-4, 0.02)):
        sched = make_schedule(T, b0, b1)
        ok &= (np.diff(sched.alpha_bar) < 0).all()
        ok &= ((sched.alpha_bar > 0) & (sched.alpha_bar < 1)).all()
    details.append("alpha_bar strictly decreasing")
    sched = make_schedule(100, 1e-4, 0.05)
    rng = np.random.default_rng(55)
    x0 = rng.standard_normal(100_000)
    eps = rng.standard_normal(100_000)
    var_dev = max(abs(forward_diffuse(x0, t, eps, sched).var() - 1.0) for t in (5, 50, 95))
    ok &= var_dev < 0.05
    details.append(f"variance dev {var_dev:.3f} over 1e5 draws")
    subset = small_corpus[:48]
    vae = train_vae(subset, epochs=2, lr=0.3, batch=16, seed=50)
    cfg = DiffusionTrainConfig(steps=40, batch=4, lr=1e-4, T=30, beta_end=0.05,
                               base_channels=8, seed=51)
    model = train_diffusion(subset, vae, cfg)
    prompt = corpus.build_prompt("benign", "B")
    bit_exact = np.array_equal(sample(model, prompt, 2, seed=99),
                               sample(model, prompt, 2, seed=99))
    ok &= bit_exact
    details.append(f"sampling bit-exact: {bit_exact}")
    elapsed = time.time() - start
    ok &= elapsed < 60
    _line(5, ok, "; ".join(details) + f", {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 6: tone oracle


def test_criterion_6_tone_oracle():
    start = time.time()
    counts = {(d, t): 167 for d in corpus.DISEASES for t in corpus.TONES}
    counts[("benign", "A")] = 165  # exactly 1000 samples
    spec = corpus.CorpusSpec(image_size=32, counts=counts, corpus_seed=66)
    records = corpus.generate_corpus(spec)
    assert len(records) == 1000
    hits = sum(tone.estimate_tone_ita(r.image)[0] == r.tone for r in records)
    agreement = hits / len(records)
    trig_dev = abs(tone.ita_degrees(tone.LabColor(50.0 + 10.0 * np.sqrt(3.0), 0.0, 10.0)) - 60.0)
    elapsed = time.time() - start
    ok = agreement >= 0.99 and trig_dev < 1e-9 and elapsed < 60
    _line(6, ok, f"agreement {agreement:.3f} on 1000 samples; "
          f"exact-trig dev {trig_dev:.1e}; {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 7: end-to-end conditional generation


@pytest.mark.slow
def test_criterion_7_conditional_generation(reference_corpus, reference_model,
                                            oracle_classifiers, reference_synthetic):
    start = time.time()
    clf_d, clf_t, best_d, best_t = oracle_classifiers
    assert best_d >= 0.95, f"oracle disease classifier val accuracy {best_d:.3f} < 0.95"
    images = np.stack([r.image for r in reference_synthetic])
    want_d = np.array([0 if r.disease == "benign" else 1 for r in reference_synthetic])
    want_t = np.array(["ABC".index(r.tone) for r in reference_synthetic])
    probs_d = np.concatenate([classify.predict(clf_d, images[i : i + 64])
                              for i in range(0, len(images), 64)])
    probs_t = np.concatenate([classify.predict(clf_t, images[i : i + 64])
                              for i in range(0, len(images), 64)])
    agree_d = float((np.argmax(probs_d, axis=1) == want_d).mean())
    agree_t = float((np.argmax(probs_t, axis=1) == want_t).mean())
    elapsed = time.time() - start
    ok = agree_d >= 0.70 and agree_t >= 0.70
    _line(7, ok, f"360 samples: disease agreement {agree_d:.3f}, tone agreement {agree_t:.3f} "
          f"(thresholds 0.70; oracle val acc {best_d:.2f}/{best_t:.2f}); eval {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# criterion 8: bias-mitigation directional check


@pytest.mark.slow
def test_criterion_8_bias_mitigation(reference_model, reference_synthetic):
    imbalanced_counts = {("benign", "A"): 360, ("malignant", "A"): 360,
                         ("benign", "B"): 180, ("malignant", "B"): 180,
                         ("benign", "C"): 18, ("malignant", "C"): 18}  # C = 5% of A
    real = corpus.generate_corpus(
        corpus.CorpusSpec(image_size=32, counts=imbalanced_counts, corpus_seed=88))
    held_out = corpus.generate_corpus(
        corpus.CorpusSpec(image_size=32, counts=corpus.balanced_counts(100), corpus_seed=89))
    mixed = real + list(reference_synthetic)

    f1_real, f1_mix, eq_real, eq_mix = [], [], [], []
    for seed in (301, 302, 303):
        cfg = classify.FocalConfig(epochs=15, seed=seed)
        for variant, data, f1_list, eq_list in (("real", real, f1_real, eq_real),
                                                ("mix", mixed, f1_mix, eq_mix)):
            model, _ = classify.train_classifier(data, "disease", cfg)
            report = classify.evaluate_grouped(model, held_out)
            f1_list.append(report.groups["C"].f1 if report.groups["C"].f1 is not None else 0.0)
            images = np.stack([r.image for r in held_out])
            probs = np.concatenate([classify.predict(model, images[i : i + 256])
                                    for i in range(0, len(images), 256)])
            preds = np.argmax(probs, axis=1)
            rows = [{"group": r.tone,
                     "true_label": r.disease,
                     "predicted_label": model.classes[preds[i]]}
                    for i, r in enumerate(held_out)]
            eq_list.append(metrics.fairness_metrics(rows).equalized_odds_gap)
    med_f1_real, med_f1_mix = float(np.median(f1_real)), float(np.median(f1_mix))
    med_eq_real, med_eq_mix = float(np.median(eq_real)), float(np.median(eq_mix))
    ok = med_f1_mix > med_f1_real and med_eq_mix <= med_eq_real
    _line(8, ok, f"median tone-C F1 real {med_f1_real:.3f} -> mixed {med_f1_mix:.3f}; "
          f"equalized-odds gap {med_eq_real:.3f} -> {med_eq_mix:.3f} "
          f"(per-seed F1 real {np.round(f1_real, 3)}, mix {np.round(f1_mix, 3)})")


# ---------------------------------------------------------------------------
# criterion 9: fairness metrics


def test_criterion_9_fairness_exact():
    start = time.time()
    rng = np.random.default_rng(909)
    exact = True
    for _ in range(100):
        per_group = {g: tuple(int(v) for v in rng.integers(1, 25, size=4))
                     for g in ("A", "B", "C")}
        report = metrics.fairness_metrics(_rows(per_group))
        acc, eo, eq = brute_force_gaps(per_group)
        exact &= (report.accuracy_parity_gap == acc
                  and report.equal_opportunity_gap == eo
                  and report.equalized_odds_gap == eq)
    hand = metrics.fairness_metrics(_rows({"A": (9, 1, 2, 8), "B": (7, 3, 3, 7)}))
    hand_ok = (abs(hand.equal_opportunity_gap - 0.2) < 1e-15
               and abs(hand.equalized_odds_gap - 0.2) < 1e-15)
    elapsed = time.time() - start
    ok = exact and hand_ok and elapsed < 5
    _line(9, ok, f"100 random grouped tables exact: {exact}; hand case exact: {hand_ok}; "
          f"{elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 10: reproducibility


@pytest.mark.slow
def test_criterion_10_reproducibility(tmp_path):
    cfg = ExperimentConfig({
        "corpus.count_benign_a": 20, "corpus.count_benign_b": 20, "corpus.count_benign_c": 20,
        "corpus.count_malignant_a": 20, "corpus.count_malignant_b": 20,
        "corpus.count_malignant_c": 20,
        "vae.epochs": 3, "diffusion.steps": 60, "diffusion.t": 40,
        "diffusion.base_channels": 8, "sample.per_cell": 4,
        "classifier.tone.epochs": 2, "classifier.disease.epochs": 2,
        "metrics.msssim_pairs": 10,
    })
    paths_a = run_pipeline(cfg, out_dir=tmp_path / "run_a", log=lambda *_: None)
    paths_b = run_pipeline(cfg, out_dir=tmp_path / "run_b", log=lambda *_: None)
    report_names = ["report_grouped", "report_fairness", "report_fid", "report_msssim"]
    identical = all(
        paths_a[name].read_bytes() == paths_b[name].read_bytes() for name in report_names
    )
    # checkpoint bit-exact round trip
    original = load_checkpoint(paths_a["dermdiff"])
    save_checkpoint(tmp_path / "rt.ckpt", original)
    round_trip = (tmp_path / "rt.ckpt").read_bytes() == paths_a["dermdiff"].read_bytes()
    # no orphans: every file is a manifest or referenced by exactly one manifest
    referenced = []
    for manifest, root in ((paths_a["corpus_manifest"], paths_a["corpus_manifest"].parent),
                           (paths_a["synthetic_manifest"], paths_a["synthetic_manifest"].parent)):
        for line in manifest.read_text().strip().splitlines()[1:]:
            referenced.append(root / line.split(",")[1])
    run_dir = tmp_path / "run_a"
    for line in paths_a["run_manifest"].read_text().strip().splitlines()[1:]:
        referenced.append(run_dir / line.split(",")[1])
    on_disk = {p for p in run_dir.rglob("*") if p.is_file()}
    accounted = set(referenced) | {paths_a["run_manifest"]}
    orphans = on_disk - accounted
    dupes = len(referenced) != len(set(referenced))
    ok = identical and round_trip and not orphans and not dupes
    _line(10, ok, f"report CSVs byte-identical: {identical}; checkpoint round-trip bit-exact: "
          f"{round_trip}; orphan files: {sorted(str(p) for p in orphans)[:3] or 'none'}")
