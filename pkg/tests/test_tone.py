"""Colorimetry tests: conversion oracles, ITA trigonometry, band conventions,
and the border-ring estimator against corpus ground truth."""

import numpy as np
import pytest

from dermdiff import corpus, tone

# Independent oracle for mid-gray, computed once straight from the sRGB and
# CIELAB defining equations (inverse companding of 0.5, cube root, 116f-16)
# and frozen here.
MID_GRAY_L = 53.38896474111432


def test_reference_white_and_black():
    white = tone.srgb_to_lab(1.0, 1.0, 1.0)
    assert abs(white.L - 100.0) < 1e-9
    assert abs(white.a) < 1e-6 and abs(white.b) < 1e-6
    black = tone.srgb_to_lab(0.0, 0.0, 0.0)
    assert black.L == 0.0 and black.a == 0.0 and black.b == 0.0


def test_mid_gray_against_frozen_oracle():
    lab = tone.srgb_to_lab(0.5, 0.5, 0.5)
    assert abs(lab.L - MID_GRAY_L) < 1e-9
    assert abs(lab.a) < 1e-6 and abs(lab.b) < 1e-6


def test_gray_axis_property():
    for v in np.linspace(0.02, 0.98, 25):
        lab = tone.srgb_to_lab(v, v, v)
        assert abs(lab.a) < 1e-6 and abs(lab.b) < 1e-6


def test_out_of_range_input_rejected():
    with pytest.raises(ValueError, match="\\[0, 1\\]"):
        tone.srgb_to_lab(1.2, 0.0, 0.0)


def test_lab_srgb_round_trip():
    rng = np.random.default_rng(11)
    rgb = rng.uniform(0.05, 0.95, size=(50, 3))
    lab = tone.srgb_to_lab_array(rgb)
    back = tone.lab_to_srgb_array(lab)
    np.testing.assert_allclose(back, rgb, atol=1e-10)


# ---------------------------------------------------------------------------
# ITA


def test_ita_zero_numerator():
    assert tone.ita_degrees(tone.LabColor(50.0, 0.0, 10.0)) == 0.0


def test_ita_exact_sixty_degrees():
    lab = tone.LabColor(50.0 + 10.0 * np.sqrt(3.0), 0.0, 10.0)
    assert abs(tone.ita_degrees(lab) - 60.0) < 1e-9


def test_ita_forty_five_chain():
    # L=60, b=10 -> atan(1) = 45 deg -> FST II -> tone A
    angle = tone.ita_degrees(tone.LabColor(60.0, 0.0, 10.0))
    assert abs(angle - 45.0) < 1e-12
    assert tone.ita_to_fst(angle) == "II"
    assert tone.fst_to_tone("II") == "A"


def test_ita_degenerate_origin():
    assert tone.ita_degrees(tone.LabColor(50.0, 0.0, 0.0)) == 0.0


def test_ita_bands():
    assert tone.ita_to_fst(60.0) == "I"
    assert tone.ita_to_fst(41.0) == "III"  # right-closed: 41 falls to the lower band
    assert tone.ita_to_fst(41.0001) == "II"
    assert tone.ita_to_fst(-35.0) == "VI"
    assert tone.ita_to_fst(10.0) == "V"
    assert tone.ita_to_fst(28.0) == "IV"


def test_fst_to_tone_remap():
    assert tone.fst_to_tone("II") == "A"
    assert tone.fst_to_tone("IV") == "B"
    assert tone.fst_to_tone("V") == "C"
    for fst, expected in zip(tone.FST_LEVELS, "AABBCC"):
        assert tone.fst_to_tone(fst) == expected
    with pytest.raises(ValueError, match="invalid FST"):
        tone.fst_to_tone("VII")


def test_ita_monotonic_in_L_and_b():
    ls = np.linspace(30, 90, 40)
    angles = [tone.ita_degrees(tone.LabColor(L, 0.0, 15.0)) for L in ls]
    assert all(a < b for a, b in zip(angles, angles[1:]))
    bs = np.linspace(5, 40, 40)
    angles_b = [tone.ita_degrees(tone.LabColor(70.0, 0.0, b)) for b in bs]
    assert all(a > b for a, b in zip(angles_b, angles_b[1:]))


def test_band_chain_total_and_surjective():
    labels = {tone.fst_to_tone(tone.ita_to_fst(a)) for a in np.linspace(-89, 89, 400)}
    assert labels == {"A", "B", "C"}


# ---------------------------------------------------------------------------
# image-level estimator


def test_flat_tone_a_background():
    lab = np.zeros((24, 24, 3))
    lab[..., 0] = 75.0
    lab[..., 2] = 15.0  # ITA = atan(25/15) = 59 deg -> FST I -> A
    image = np.clip(tone.lab_to_srgb_array(lab), 0, 1)
    label, angle = tone.estimate_tone_ita(image)
    assert label == "A"
    assert angle > 41.0


def test_estimator_rejects_small_images():
    with pytest.raises(ValueError, match="ring"):
        tone.estimate_tone_ita(np.zeros((6, 6, 3)))


def test_estimator_permutation_invariant():
    rec = corpus.generate_sample(
        corpus.CorpusSpec(image_size=32, counts={}, corpus_seed=3), "benign", "B", 0
    )
    label, angle = tone.estimate_tone_ita(rec.image)
    # permute ring pixels: swap the top and bottom ring rows
    shuffled = rec.image.copy()
    shuffled[[0, 1, 2, 3, -4, -3, -2, -1]] = shuffled[[-1, -2, -3, -4, 3, 2, 1, 0]]
    label2, angle2 = tone.estimate_tone_ita(shuffled)
    assert label2 == label
    assert abs(angle2 - angle) < 1e-12


def test_estimator_agreement_on_corpus(small_corpus):
    hits = sum(tone.estimate_tone_ita(r.image)[0] == r.tone for r in small_corpus)
    assert hits / len(small_corpus) >= 0.99
