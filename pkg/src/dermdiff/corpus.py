"""Procedural lesion corpus with known tone and disease ground truth.

Samples are composed in CIELAB: a textured background drawn strictly inside
the requested tone's ITA band, plus a centered elliptical lesion.  Benign
lesions are small, radially symmetric and single-hued; malignant lesions are
larger, with an irregular boundary (>= 25% radial variation) and an
asymmetric second blue-grey hue, loosely following the ABCD dermoscopy cues.
Everything is a deterministic function of (corpus seed, disease, tone, index).

Also here: metadata CSV ingestion for externally supplied datasets,
stratified splitting, prompt construction, and binary PPM image I/O.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from dermdiff.neuralcore.rng import SeedStream
from dermdiff import tone as tone_mod

DISEASES = ("benign", "malignant")
TONES = ("A", "B", "C")

# Per-tone draw boxes.  ITA is drawn uniformly inside the spec band; the b*
# ranges are chosen so that +-1.5 L* texture can never push a pixel across
# the tone band edges (41 deg between A/B, 10 deg between B/C), and the whole
# box including texture stays inside the sRGB gamut.
ITA_DRAW_BANDS = {"A": (45.0, 65.0), "B": (14.0, 37.0), "C": (-40.0, 6.0)}
_BSTAR_RANGE = {"A": (13.5, 17.0), "B": (23.0, 27.0), "C": (23.5, 28.0)}
# a* does not enter ITA, so the redness ranges are free to keep the three
# tones chromatically well separated (helps every downstream color model)
_ASTAR_RANGE = {"A": (3.0, 7.0), "B": (11.0, 16.0), "C": (6.0, 12.0)}
_TEXTURE_L = 1.5

PROMPT_TEMPLATE = "dermoscopic image of a {disease} skin lesion, {tone_word} skin tone"
_TONE_WORDS = {"A": "lighter", "B": "brown", "C": "darker"}


@dataclass(frozen=True)
class PromptCondition:
    disease: str
    tone: str
    text: str


@dataclass
class SampleRecord:
    """One labeled image with provenance and the seed that produced it."""

    image: np.ndarray  # HxWx3 float64 in [0, 1]
    disease: str
    tone: str
    fst: str | None
    provenance: str  # "real" | "synthetic"
    seed: int
    path: str | None = None


@dataclass(frozen=True)
class CorpusSpec:
    image_size: int = 32
    counts: dict = field(default_factory=dict)  # (disease, tone) -> count
    corpus_seed: int = 0
    lesion_margin: int = 6

    def __post_init__(self):
        if self.image_size < 16:
            raise ValueError(f"image_size must be >= 16, got {self.image_size}")
        if self.lesion_margin < 4:
            raise ValueError(f"lesion_margin must be >= 4, got {self.lesion_margin}")
        for cell, n in self.counts.items():
            if n < 0:
                raise ValueError(f"negative count for cell {cell}: {n}")


def balanced_counts(per_cell: int) -> dict:
    return {(d, t): per_cell for d in DISEASES for t in TONES}


def _check_labels(disease: str, tone: str) -> None:
    if disease not in DISEASES:
        raise ValueError(f"invalid disease label {disease!r}; expected one of {DISEASES}")
    if tone not in TONES:
        raise ValueError(f"invalid tone label {tone!r}; expected one of {TONES}")


def build_prompt(disease: str, tone: str) -> PromptCondition:
    """Render the prompt for a (disease, tone) pair; injective over the 6 pairs."""
    _check_labels(disease, tone)
    text = PROMPT_TEMPLATE.format(disease=disease, tone_word=_TONE_WORDS[tone])
    return PromptCondition(disease, tone, text)


def _smooth_field(rng: np.random.Generator, size: int, waves: int = 3, freq_lo: float = 0.5,
                  freq_hi: float = 2.5) -> np.ndarray:
    """Low-frequency 2-d field in roughly [-1, 1] from a few random plane waves."""
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    u = (xx / size) * 2 * np.pi
    v = (yy / size) * 2 * np.pi
    out = np.zeros((size, size))
    for _ in range(waves):
        fx = rng.uniform(freq_lo, freq_hi) * (1 if rng.random() < 0.5 else -1)
        fy = rng.uniform(freq_lo, freq_hi) * (1 if rng.random() < 0.5 else -1)
        phase = rng.uniform(0, 2 * np.pi)
        out += np.sin(fx * u + fy * v + phase)
    return out / waves


def _boundary_radius(rng: np.random.Generator, phi: np.ndarray, r0: float,
                     malignant: bool) -> np.ndarray:
    """Lesion boundary radius as a function of angle."""
    if malignant:
        ecc = rng.uniform(0.10, 0.18)
    else:
        ecc = rng.uniform(0.0, 0.06)
    axis_angle = rng.uniform(0, np.pi)
    a_ax = 1.0 + ecc
    b_ax = 1.0 - ecc
    c, s = np.cos(phi - axis_angle), np.sin(phi - axis_angle)
    ellipse = (a_ax * b_ax) / np.sqrt((b_ax * c) ** 2 + (a_ax * s) ** 2)
    radius = r0 * ellipse
    if malignant:
        # Low-frequency radial noise rescaled to a guaranteed >= 25% peak-to-peak
        # variation relative to the mean radius.
        bumps = np.zeros_like(phi)
        for k in (2, 3, 4, 5):
            bumps += rng.uniform(0.2, 1.0) * np.cos(k * phi + rng.uniform(0, 2 * np.pi))
        span = bumps.max() - bumps.min()
        target = rng.uniform(0.30, 0.42)
        bumps *= target / max(span, 1e-9)
        radius = radius * (1.0 + bumps)
    return radius


def generate_sample(spec: CorpusSpec, disease: str, tone: str, index: int) -> SampleRecord:
    """Deterministically generate one labeled lesion image."""
    _check_labels(disease, tone)
    n_cell = spec.counts.get((disease, tone))
    if n_cell is not None and index >= n_cell:
        raise ValueError(f"index {index} out of range for cell ({disease}, {tone}) of {n_cell}")
    stream = SeedStream(spec.corpus_seed).child("sample").child(disease).child(tone).child(str(index))
    rng = stream.generator()
    size = spec.image_size

    # Background: base color drawn in CIELAB inside the tone band.
    ita_lo, ita_hi = ITA_DRAW_BANDS[tone]
    theta = rng.uniform(ita_lo, ita_hi)
    bstar = rng.uniform(*_BSTAR_RANGE[tone])
    astar = rng.uniform(*_ASTAR_RANGE[tone])
    bg_L = 50.0 + bstar * np.tan(np.radians(theta))
    fst = tone_mod.ita_to_fst(theta)

    texture = rng.uniform(-_TEXTURE_L, _TEXTURE_L, size=(size, size))
    L_plane = np.full((size, size), bg_L) + texture
    a_plane = np.full((size, size), astar)
    b_plane = np.full((size, size), bstar)

    # Lesion geometry: kept strictly inside the lesion_margin ring.
    yy, xx = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
    cy = size / 2.0 + rng.uniform(-1.5, 1.5)
    cx = size / 2.0 + rng.uniform(-1.5, 1.5)
    avail = size / 2.0 - spec.lesion_margin - 2.0
    if disease == "malignant":
        r0 = rng.uniform(0.175, 0.215) * size
    else:
        r0 = rng.uniform(0.095, 0.130) * size
    r0 = min(r0, avail / 1.45)  # 1.45 covers worst-case eccentricity + radial bumps
    dy, dx = yy - cy, xx - cx
    dist = np.sqrt(dy * dy + dx * dx)
    phi = np.arctan2(dy, dx)
    boundary = _boundary_radius(rng, phi, r0, disease == "malignant")
    # Soft 1-pixel edge keeps the boundary band-limited.
    lesion_mask = np.clip((boundary - dist) + 0.5, 0.0, 1.0)

    # Lesion interior color: a single darker hue for benign; malignant adds an
    # asymmetric blue-grey speckle as a second hue.
    drop = rng.uniform(16.0, 24.0)
    les_L = max(bg_L - drop, 4.0)
    chroma_scale = min(1.0, les_L / 30.0)
    les_a = (astar + rng.uniform(4.0, 8.0)) * chroma_scale
    les_b = (bstar - rng.uniform(2.0, 6.0)) * chroma_scale
    L_les = np.full((size, size), les_L)
    a_les = np.full((size, size), les_a)
    b_les = np.full((size, size), les_b)
    if disease == "benign":
        # Mild radially symmetric darkening toward the center.
        radial = np.clip(1.0 - dist / np.maximum(boundary, 1e-9), 0.0, 1.0)
        L_les = L_les - 4.0 * radial
    else:
        speckle = _smooth_field(rng, size, waves=4, freq_lo=2.0, freq_hi=5.0)
        side_angle = rng.uniform(0, 2 * np.pi)
        side = (np.cos(side_angle) * dx + np.sin(side_angle) * dy) > -0.15 * r0
        second = ((speckle > 0.05) & side).astype(np.float64)
        les2_L = max(les_L - rng.uniform(6.0, 10.0), 2.0)
        sc2 = min(1.0, les2_L / 30.0)
        L_les = L_les * (1 - second) + les2_L * second
        a_les = a_les * (1 - second) + (2.0 * sc2) * second
        b_les = b_les * (1 - second) + (-6.0 * sc2) * second

    L_plane = L_plane * (1 - lesion_mask) + (L_les + texture) * lesion_mask
    a_plane = a_plane * (1 - lesion_mask) + a_les * lesion_mask
    b_plane = b_plane * (1 - lesion_mask) + b_les * lesion_mask

    lab = np.stack([L_plane, a_plane, b_plane], axis=-1)
    rgb = tone_mod.lab_to_srgb_array(lab)
    image = np.clip(rgb, 0.0, 1.0)

    # Construction guarantee: border ring pixels must still band to the
    # requested tone after clamping.
    ring = tone_mod.border_ring_mask(size, size, min(4, spec.lesion_margin))
    ring_lab = tone_mod.srgb_to_lab_array(image[ring])
    ring_ita = tone_mod.ita_degrees_array(ring_lab[:, 0], ring_lab[:, 2])
    bands = {"A": (41.0, 90.0), "B": (10.0, 41.0), "C": (-90.0, 10.0)}
    lo, hi = bands[tone]
    if not ((ring_ita > lo) & (ring_ita <= hi)).all():
        raise RuntimeError(
            f"internal error: border pixel left tone band {tone} "
            f"(ITA range [{ring_ita.min():.2f}, {ring_ita.max():.2f}])"
        )
    return SampleRecord(
        image=image,
        disease=disease,
        tone=tone,
        fst=fst,
        provenance="real",
        seed=stream.integer_seed(),
    )


def generate_corpus(spec: CorpusSpec) -> list[SampleRecord]:
    """All samples of the spec, in deterministic (disease, tone, index) order."""
    records = []
    for disease in DISEASES:
        for tone in TONES:
            for index in range(spec.counts.get((disease, tone), 0)):
                records.append(generate_sample(spec, disease, tone, index))
    return records


# ---------------------------------------------------------------------------
# splitting


def split(records: list, fractions: tuple, seed: int) -> tuple:
    """Stratified split by (disease, tone); deterministic, disjoint, exhaustive.

    Rounding is balanced across strata so the global partition sizes match the
    requested fractions as closely as possible.
    """
    fractions = tuple(float(f) for f in fractions)
    if any(f <= 0 for f in fractions):
        raise ValueError(f"fractions must be positive, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got sum {sum(fractions)}")
    strata: dict[tuple, list] = {}
    for rec in records:
        strata.setdefault((rec.disease, rec.tone), []).append(rec)
    for cell, members in sorted(strata.items()):
        if len(members) < 3:
            raise ValueError(
                f"stratum {cell} has only {len(members)} sample(s); "
                "use larger per-cell counts (need at least 3)"
            )
    n_parts = len(fractions)
    parts: list[list] = [[] for _ in range(n_parts)]
    assigned = [0.0] * n_parts
    ideal_total = [0.0] * n_parts
    root = SeedStream(seed).child("split")
    for cell, members in sorted(strata.items()):
        order = root.child(f"{cell[0]}:{cell[1]}").generator().permutation(len(members))
        members = [members[i] for i in order]
        n = len(members)
        ideal = [n * f for f in fractions]
        base = [int(np.floor(v)) for v in ideal]
        leftover = n - sum(base)
        for i in range(n_parts):
            ideal_total[i] += ideal[i]
        # Distribute leftovers by largest fractional remainder, breaking ties
        # toward the globally most under-served part.
        order_keys = sorted(
            range(n_parts),
            key=lambda i: (-(ideal[i] - base[i]), -(ideal_total[i] - assigned[i] - base[i]), i),
        )
        for i in order_keys[:leftover]:
            base[i] += 1
        at = 0
        for i in range(n_parts):
            parts[i].extend(members[at : at + base[i]])
            assigned[i] += base[i]
            at += base[i]
    return tuple(parts)


# ---------------------------------------------------------------------------
# metadata CSV ingestion


class IngestWarning(UserWarning):
    pass


def ingest_metadata_csv(path, image_root) -> list[SampleRecord]:
    """Load records from a metadata CSV with columns image_path,label[,fst].

    Disease labels are normalized case-insensitively; rows with labels outside
    {benign, malignant} are skipped with a counted warning.  FST integers 1-6
    map to levels I-VI and then to the 3-class tone.
    """
    path = Path(path)
    image_root = Path(image_root)
    if not path.exists():
        raise FileNotFoundError(f"metadata CSV not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for required in ("image_path", "label"):
            if required not in header:
                raise ValueError(f"metadata CSV {path} is missing required column {required!r}")
        records = []
        skipped = 0
        for rownum, row in enumerate(reader, start=2):
            label = (row.get("label") or "").strip().lower()
            if label not in DISEASES:
                skipped += 1
                continue
            fst_raw = (row.get("fst") or "").strip()
            fst = None
            tone = None
            if fst_raw:
                try:
                    level = int(fst_raw)
                    if not 1 <= level <= 6:
                        raise ValueError
                except ValueError:
                    raise ValueError(f"row {rownum}: fst must be an integer 1-6, got {fst_raw!r}") from None
                fst = tone_mod.FST_LEVELS[level - 1]
                tone = tone_mod.fst_to_tone(fst)
            img_path = image_root / row["image_path"]
            try:
                image = read_image(img_path)
            except Exception as exc:
                raise ValueError(f"row {rownum}: cannot read image {img_path}: {exc}") from exc
            records.append(
                SampleRecord(
                    image=image,
                    disease=label,
                    tone=tone,
                    fst=fst,
                    provenance="real",
                    seed=0,
                    path=str(img_path),
                )
            )
    if skipped:
        warnings.warn(IngestWarning(f"skipped {skipped} row(s) with labels outside {DISEASES}"))
    return records


# ---------------------------------------------------------------------------
# PPM image I/O


def write_image(path, image: np.ndarray) -> None:
    """Write an HxWx3 [0,1] image as binary PPM (P6, maxval 255, round half-up)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got shape {image.shape}")
    if image.min() < -1e-12 or image.max() > 1.0 + 1e-12:
        raise ValueError(f"pixels must be in [0, 1], got [{image.min():.4g}, {image.max():.4g}]")
    quantized = np.clip(np.floor(image * 255.0 + 0.5), 0, 255).astype(np.uint8)
    h, w = image.shape[:2]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(path, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            fh.write(quantized.tobytes())
    except OSError as exc:
        raise OSError(f"cannot write image {path}: {exc}") from exc


def read_image(path) -> np.ndarray:
    """Read a binary PPM written by write_image back to HxWx3 floats in [0, 1]."""
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    if not data.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM (bad magic bytes {data[:2]!r})")
    # Header: magic, width, height, maxval, single whitespace, then raster.
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PPM header")
        fields.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError:
        raise ValueError(f"{path}: malformed PPM header fields {fields}") from None
    if maxval != 255:
        raise ValueError(f"{path}: unsupported maxval {maxval} (expected 255)")
    raster = data[pos : pos + 3 * w * h]
    if len(raster) != 3 * w * h:
        raise ValueError(f"{path}: truncated PPM raster ({len(raster)} of {3 * w * h} bytes)")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# manifests


def write_corpus_manifest(path, records: list[SampleRecord]) -> None:
    """Corpus manifest CSV: index,path,disease,tone,fst,seed."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "path", "disease", "tone", "fst", "seed"])
        for i, rec in enumerate(records):
            writer.writerow([i, rec.path or "", rec.disease, rec.tone or "", rec.fst or "", rec.seed])


def save_corpus(out_dir, records: list[SampleRecord], manifest_name: str = "manifest.csv") -> Path:
    """Write every record as a PPM plus the corpus manifest; returns manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, rec in enumerate(records):
        name = f"{i:06d}_{rec.disease}_{rec.tone or 'NA'}.ppm"
        rec.path = name
        write_image(out_dir / name, rec.image)
    manifest = out_dir / manifest_name
    write_corpus_manifest(manifest, records)
    return manifest


def load_corpus(manifest_path) -> list[SampleRecord]:
    """Read back a corpus written by save_corpus."""
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    records = []
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            records.append(
                SampleRecord(
                    image=read_image(root / row["path"]),
                    disease=row["disease"],
                    tone=row["tone"] or None,
                    fst=row["fst"] or None,
                    provenance="real",
                    seed=int(row["seed"]),
                    path=row["path"],
                )
            )
    return records
