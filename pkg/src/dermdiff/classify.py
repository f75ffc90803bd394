"""Focal-loss classifiers for skin tone (3-way) and disease (binary).

A small residual convnet (3 stages with stride-2 downsampling, global average
pool, linear head) stands in for a large pretrained backbone; the evaluation
logic is backbone-agnostic.  The penultimate (post-pool) activations double as
the feature embedding for FID.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

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

TASK_CLASSES = {"disease": ("benign", "malignant"), "tone": ("A", "B", "C")}
# Focal-loss class weights: the tone task uses a per-class vector, the
# disease task a single weight applied to whichever class is the target.
DEFAULT_ALPHA = {"tone": (0.3, 0.4, 0.9), "disease": (0.8, 0.8)}

P_CLAMP = 1e-12


@dataclass
class FocalConfig:
    alpha: tuple | float | None = None  # None -> task default
    gamma: float = 2.0
    lr: float = 3e-4
    momentum: float = 0.9
    batch: int = 64
    epochs: int = 30
    seed: int = 0
    val_fraction: float = 0.15

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


@dataclass
class ClassifierModel:
    task: str
    pset: ParameterSet
    classes: tuple
    feature_dim: int = 64
    channels: tuple = (24, 48, 64)
    image_size: int = 32
    trained: bool = False

    def class_index(self, label: str) -> int:
        try:
            return self.classes.index(label)
        except ValueError:
            raise ValueError(f"label {label!r} not in task classes {self.classes}") from None


def _expand_alpha(alpha, n_classes: int, task: str) -> np.ndarray:
    if alpha is None:
        alpha = DEFAULT_ALPHA[task]
    arr = np.asarray(alpha, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(n_classes, float(arr))
    if arr.shape != (n_classes,):
        raise ValueError(f"alpha must be scalar or length {n_classes}, got shape {arr.shape}")
    if (arr <= 0).any() or (arr > 1).any():
        raise ValueError(f"alpha entries must be in (0, 1], got {arr}")
    return arr


def focal_loss(probabilities, target_class, alpha, gamma: float) -> float:
    """-alpha_target * (1 - p)^gamma * log(p), averaged over the batch.

    `probabilities` is one simplex (K,) or a batch (N, K); `target_class` is
    the target index (or one per row); `alpha` is scalar or per-class weights.
    """
    p = np.asarray(probabilities, dtype=np.float64)
    single = p.ndim == 1
    if single:
        p = p[None]
    if p.ndim != 2:
        raise ValueError(f"probabilities must be (K,) or (N, K), got shape {p.shape}")
    if (p < -1e-9).any() or np.abs(p.sum(axis=1) - 1.0).max() > 1e-6:
        raise ValueError("probabilities are not a valid simplex (negative or not summing to 1)")
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    n, k = p.shape
    targets = np.broadcast_to(np.asarray(target_class, dtype=np.int64), (n,))
    if (targets < 0).any() or (targets >= k).any():
        raise ValueError(f"target class out of range for {k} classes")
    alpha_vec = np.asarray(alpha, dtype=np.float64)
    if alpha_vec.ndim == 0:
        a_t = np.full(n, float(alpha_vec))
    else:
        if alpha_vec.shape != (k,):
            raise ValueError(f"alpha must be scalar or length {k}, got shape {alpha_vec.shape}")
        a_t = alpha_vec[targets]
    p_hat = np.clip(p[np.arange(n), targets], P_CLAMP, 1.0 - P_CLAMP)
    losses = -a_t * (1.0 - p_hat) ** gamma * np.log(p_hat)
    return float(losses.mean())


def focal_loss_from_logits(logits: np.ndarray, targets: np.ndarray, alpha, gamma: float):
    """Softmax + focal loss with its exact gradient w.r.t. the logits."""
    z = np.asarray(logits, dtype=np.float64)
    n, k = z.shape
    targets = np.asarray(targets, dtype=np.int64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    alpha_vec = np.asarray(alpha, dtype=np.float64)
    a_t = np.full(n, float(alpha_vec)) if alpha_vec.ndim == 0 else alpha_vec[targets]
    rows = np.arange(n)
    p_hat = np.clip(p[rows, targets], P_CLAMP, 1.0 - P_CLAMP)
    one_minus = 1.0 - p_hat
    loss = float((-a_t * one_minus**gamma * np.log(p_hat)).mean())
    # dL/dp_hat, then through the softmax Jacobian row for the target class.
    if gamma == 0.0:
        dl_dp = -a_t / p_hat
    else:
        dl_dp = a_t * (gamma * one_minus ** (gamma - 1.0) * np.log(p_hat) - one_minus**gamma / p_hat)
    onehot = np.zeros_like(p)
    onehot[rows, targets] = 1.0
    dlogits = (dl_dp * p_hat)[:, None] * (onehot - p) / n
    return loss, dlogits, p


# ---------------------------------------------------------------------------
# network definition


def _add_conv(pset, rng, name, cin, cout, k):
    pset.add(f"{name}.w", init_uniform(rng, (cout, cin, k, k), cin * k * k))
    pset.add(f"{name}.b", init_uniform(rng, (cout,), cin * k * k))


def _add_gn(pset, name, channels):
    pset.add(f"{name}.gamma", np.ones(channels))
    pset.add(f"{name}.beta", np.zeros(channels))


def _add_resblock(pset, rng, name, cin, cout):
    _add_gn(pset, f"{name}.n1", cin)
    _add_conv(pset, rng, f"{name}.c1", cin, cout, 3)
    _add_gn(pset, f"{name}.n2", cout)
    _add_conv(pset, rng, f"{name}.c2", cout, cout, 3)
    if cin != cout:
        _add_conv(pset, rng, f"{name}.skip", cin, cout, 1)


def init_classifier(task: str, seed: int = 0, feature_dim: int = 64,
                    channels: tuple = (24, 40, 64), image_size: int = 32) -> ClassifierModel:
    if task not in TASK_CLASSES:
        raise ValueError(f"unknown task {task!r}; expected one of {sorted(TASK_CLASSES)}")
    classes = TASK_CLASSES[task]
    if channels[-1] != feature_dim:
        raise ValueError("feature_dim must equal the last stage's channel count")
    pset = ParameterSet()
    rng = SeedStream(seed).child("clf-init").generator()
    c1, c2, c3 = channels
    _add_conv(pset, rng, "clf/stem", 3, c1, 3)
    _add_conv(pset, rng, "clf/down1", c1, c2, 3)
    _add_resblock(pset, rng, "clf/b2", c2, c2)
    _add_conv(pset, rng, "clf/down2", c2, c3, 3)
    _add_resblock(pset, rng, "clf/b3", c3, c3)
    _add_gn(pset, "clf/outn", c3)
    pset.add("clf/head.w", init_uniform(rng, (feature_dim, len(classes)), feature_dim))
    pset.add("clf/head.b", init_uniform(rng, (len(classes),), feature_dim))
    return ClassifierModel(task=task, pset=pset, classes=classes, feature_dim=feature_dim,
                           channels=tuple(channels), image_size=image_size)


def _resblock(tape, name, x, cin, cout):
    h = tape.apply("group-norm", x, params=(f"{name}.n1.gamma", f"{name}.n1.beta"))
    h = tape.apply("silu", h)
    h = tape.apply("conv2d", h, params=(f"{name}.c1.w", f"{name}.c1.b"), stride=1, pad=1)
    h = tape.apply("group-norm", h, params=(f"{name}.n2.gamma", f"{name}.n2.beta"))
    h = tape.apply("silu", h)
    h = tape.apply("conv2d", h, params=(f"{name}.c2.w", f"{name}.c2.b"), stride=1, pad=1)
    if cin != cout:
        x = tape.apply("conv2d", x, params=(f"{name}.skip.w", f"{name}.skip.b"), stride=1, pad=0)
    return tape.apply("add", [h, x])


def classifier_forward(tape: Tape, model: ClassifierModel, x):
    """Returns (logits var, penultimate features var)."""
    c1, c2, c3 = model.channels
    h = tape.apply("conv2d", x, params=("clf/stem.w", "clf/stem.b"), stride=2, pad=1)
    h = tape.apply("silu", h)
    h = tape.apply("conv2d", h, params=("clf/down1.w", "clf/down1.b"), stride=2, pad=1)
    h = _resblock(tape, "clf/b2", h, c2, c2)
    h = tape.apply("conv2d", h, params=("clf/down2.w", "clf/down2.b"), stride=2, pad=1)
    h = _resblock(tape, "clf/b3", h, c3, c3)
    h = tape.apply("group-norm", h, params=("clf/outn.gamma", "clf/outn.beta"))
    h = tape.apply("silu", h)
    pooled = tape.apply("avg-pool2d", h, kernel=h.value.shape[2])
    n, c = pooled.value.shape[:2]
    feats = tape.custom([pooled], pooled.value.reshape(n, c),
                        lambda gy, s=pooled.value.shape: [gy.reshape(s)])
    logits = tape.apply("linear", feats, params=("clf/head.w", "clf/head.b"))
    return logits, feats


def _to_nchw(images) -> np.ndarray:
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise ValueError(f"expected HxWx3 or NxHxWx3 images, got shape {arr.shape}")
    return arr.transpose(0, 3, 1, 2)


def predict(model: ClassifierModel, images) -> np.ndarray:
    """Class probabilities (softmax simplex); one row per image."""
    x = _to_nchw(images)
    single = np.asarray(images).ndim == 3
    tape = Tape(model.pset)
    logits, _ = classifier_forward(tape, model, tape.input(x))
    probs, _ = _softmax(logits.value)
    return probs[0] if single else probs


def _softmax(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)
    return p, e


def penultimate_features(model: ClassifierModel, images) -> np.ndarray:
    """Post-pool activations feeding the head; the FID embedding space."""
    x = _to_nchw(images)
    single = np.asarray(images).ndim == 3
    tape = Tape(model.pset)
    _, feats = classifier_forward(tape, model, tape.input(x))
    return feats.value[0] if single else feats.value


def batched_features(model: ClassifierModel, records, batch: int = 64) -> np.ndarray:
    images = np.stack([r.image for r in records])
    out = [penultimate_features(model, images[i : i + batch]) for i in range(0, len(images), batch)]
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# training


def _labels_for(records, task):
    classes = TASK_CLASSES[task]
    labels = []
    for i, rec in enumerate(records):
        value = rec.disease if task == "disease" else rec.tone
        if value not in classes:
            raise ValueError(f"record {i} lacks a valid {task} label (got {value!r})")
        labels.append(classes.index(value))
    return np.array(labels, dtype=np.int64)


def _stratified_indices(labels: np.ndarray, val_fraction: float, rng) -> tuple:
    train_idx, val_idx = [], []
    for cls in np.unique(labels):
        members = np.nonzero(labels == cls)[0]
        members = members[rng.permutation(len(members))]
        n_val = max(1, int(round(len(members) * val_fraction)))
        val_idx.extend(members[:n_val])
        train_idx.extend(members[n_val:])
    return np.sort(np.array(train_idx)), np.sort(np.array(val_idx))


def _f1_binary(y_true, y_pred, positive: int) -> float | None:
    tp = int(((y_pred == positive) & (y_true == positive)).sum())
    fp = int(((y_pred == positive) & (y_true != positive)).sum())
    fn = int(((y_pred != positive) & (y_true == positive)).sum())
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else None


def _val_f1(task, y_true, y_pred) -> float:
    if task == "disease":
        f1 = _f1_binary(y_true, y_pred, positive=1)
        return f1 if f1 is not None else 0.0
    scores = [s for s in (_f1_binary(y_true, y_pred, positive=c) for c in range(3)) if s is not None]
    return float(np.mean(scores)) if scores else 0.0


def train_classifier(records, task: str, config: FocalConfig | None = None,
                     channels: tuple = (24, 48, 64)) -> tuple[ClassifierModel, list]:
    """Train a classifier with focal loss and SGD momentum.

    The dataset is split once (stratified by label) into train/validation;
    the returned model carries the parameters of the best validation-F1 epoch.
    """
    if not records:
        raise ValueError("cannot train a classifier on an empty dataset")
    config = config or FocalConfig()
    labels = _labels_for(records, task)
    classes = TASK_CLASSES[task]
    alpha = _expand_alpha(config.alpha, len(classes), task)
    image_size = records[0].image.shape[0]
    model = init_classifier(task, seed=config.seed, channels=channels, image_size=image_size)
    root = SeedStream(config.seed)
    data = _to_nchw(np.stack([r.image for r in records]))
    train_idx, val_idx = _stratified_indices(labels, config.val_fraction,
                                             root.child("val-split").generator())
    x_train, y_train = data[train_idx], labels[train_idx]
    x_val, y_val = data[val_idx], labels[val_idx]

    state = SgdState(model.pset, config.lr, config.momentum)
    history = []
    best_f1 = -1.0
    best_params = None
    step = 0
    n = len(x_train)
    for epoch in range(config.epochs):
        order = root.child("shuffle").child(str(epoch)).generator().permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n, config.batch):
            idx = order[start : start + config.batch]
            tape = Tape(model.pset)
            logits, _ = classifier_forward(tape, model, tape.input(x_train[idx]))
            loss, dlogits, _ = focal_loss_from_logits(logits.value, y_train[idx], alpha, config.gamma)
            if not np.isfinite(loss):
                raise RuntimeError(f"non-finite classifier loss at step {step}")
            tape.backward(logits, dlogits)
            sgd_step(model.pset, state)
            epoch_loss += loss
            n_batches += 1
            step += 1
        val_pred = _predict_labels(model, x_val)
        val_acc = float((val_pred == y_val).mean())
        val_f1 = _val_f1(task, y_val, val_pred)
        history.append({"epoch": epoch, "train_loss": epoch_loss / max(n_batches, 1),
                        "val_accuracy": val_acc, "val_f1": val_f1})
        if val_f1 > best_f1:
            best_f1 = val_f1
            best_params = {k: v.copy() for k, v in model.pset.params.items()}
    if best_params is not None:
        model.pset.load_values(best_params)
    model.trained = True
    return model, history


def _predict_labels(model, x_nchw, batch: int = 256) -> np.ndarray:
    preds = []
    for start in range(0, len(x_nchw), batch):
        tape = Tape(model.pset)
        logits, _ = classifier_forward(tape, model, tape.input(x_nchw[start : start + batch]))
        preds.append(np.argmax(logits.value, axis=1))
    return np.concatenate(preds)


# ---------------------------------------------------------------------------
# grouped evaluation


def auc_rank(scores_pos, scores_neg) -> float:
    """Mann-Whitney AUC with ties counted one half."""
    pos = np.asarray(scores_pos, dtype=np.float64)
    neg = np.asarray(scores_neg, dtype=np.float64)
    wins = (pos[:, None] > neg[None, :]).sum() + 0.5 * (pos[:, None] == neg[None, :]).sum()
    return float(wins / (len(pos) * len(neg)))


@dataclass
class GroupMetrics:
    n: int
    accuracy: float
    f1: float | None
    auc: float | None
    flags: list = field(default_factory=list)


@dataclass
class GroupedReport:
    task: str
    groups: dict  # tone label -> GroupMetrics
    overall: GroupMetrics
    tone_source: str = "oracle"


def evaluate_grouped(model: ClassifierModel, records, tone_labels=None,
                     tone_source: str = "oracle") -> GroupedReport:
    """Per-tone-group accuracy / F1 / AUC for a trained classifier.

    `tone_labels` overrides each record's tone (e.g. with predicted tones);
    groups with no samples are omitted with a warning, and AUC is reported as
    undefined (None, flagged) for groups where only one class is present.
    """
    if not records:
        raise ValueError("cannot evaluate on an empty dataset")
    if tone_labels is None:
        tone_labels = [r.tone for r in records]
    if len(tone_labels) != len(records):
        raise ValueError("tone_labels length does not match the dataset")
    y_true = _labels_for(records, model.task)
    probs = []
    images = np.stack([r.image for r in records])
    for start in range(0, len(records), 256):
        probs.append(predict(model, images[start : start + 256]))
    probs = np.concatenate(probs, axis=0)
    y_pred = np.argmax(probs, axis=1)

    def metrics_for(mask: np.ndarray, positive_class: int, score_col: int) -> GroupMetrics:
        yt, yp = y_true[mask], y_pred[mask]
        sc = probs[mask][:, score_col]
        acc = float((yt == yp).mean())
        f1 = _f1_binary(yt, yp, positive_class)
        flags = []
        if f1 is None:
            flags.append("f1 undefined (no positives present or predicted)")
        pos_scores = sc[yt == positive_class]
        neg_scores = sc[yt != positive_class]
        if len(pos_scores) == 0 or len(neg_scores) == 0:
            auc = None
            flags.append("auc undefined (single class present)")
        else:
            auc = auc_rank(pos_scores, neg_scores)
        return GroupMetrics(n=int(mask.sum()), accuracy=acc, f1=f1, auc=auc, flags=flags)

    groups = {}
    tone_arr = np.array([t if t is not None else "" for t in tone_labels])
    for tone in ("A", "B", "C"):
        mask = tone_arr == tone
        if not mask.any():
            warnings.warn(f"tone group {tone} is empty; omitted from the report")
            continue
        if model.task == "disease":
            groups[tone] = metrics_for(mask, positive_class=1, score_col=1)
        else:
            # Tone task: accuracy within the group, class-wise F1/AUC for that
            # tone over the whole set (one-vs-rest).
            cls = model.classes.index(tone)
            acc = float((y_pred[mask] == y_true[mask]).mean())
            f1 = _f1_binary(y_true, y_pred, cls)
            pos_scores = probs[y_true == cls][:, cls]
            neg_scores = probs[y_true != cls][:, cls]
            flags = []
            if f1 is None:
                flags.append("f1 undefined (no positives present or predicted)")
            if len(pos_scores) == 0 or len(neg_scores) == 0:
                auc = None
                flags.append("auc undefined (single class present)")
            else:
                auc = auc_rank(pos_scores, neg_scores)
            groups[tone] = GroupMetrics(n=int(mask.sum()), accuracy=acc, f1=f1, auc=auc, flags=flags)
    all_mask = np.ones(len(records), dtype=bool)
    if model.task == "disease":
        overall = metrics_for(all_mask, positive_class=1, score_col=1)
    else:
        acc = float((y_pred == y_true).mean())
        f1s = [g.f1 for g in groups.values() if g.f1 is not None]
        overall = GroupMetrics(n=len(records), accuracy=acc,
                               f1=float(np.mean(f1s)) if f1s else None, auc=None,
                               flags=["auc not aggregated across classes"])
    return GroupedReport(task=model.task, groups=groups, overall=overall, tone_source=tone_source)


# ---------------------------------------------------------------------------
# prediction log (consumed by the metrics module)

PREDICTION_LOG_COLUMNS = ["path", "group", "true_label", "score_malignant", "predicted_label"]


def write_prediction_log(path, model: ClassifierModel, records, tone_labels=None) -> Path:
    """Score a disease classifier over records and write the prediction log CSV."""
    if model.task != "disease":
        raise ValueError("prediction logs are defined for the disease task")
    if tone_labels is None:
        tone_labels = [r.tone for r in records]
    images = np.stack([r.image for r in records])
    probs = []
    for start in range(0, len(records), 256):
        probs.append(predict(model, images[start : start + 256]))
    probs = np.concatenate(probs, axis=0)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(PREDICTION_LOG_COLUMNS)
        for i, rec in enumerate(records):
            writer.writerow([
                rec.path or f"record_{i}",
                tone_labels[i] or "",
                rec.disease,
                f"{probs[i, 1]:.10f}",
                model.classes[int(np.argmax(probs[i]))],
            ])
    return path


def read_prediction_log(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"prediction log {path} is empty")
    for row in rows:
        row["score_malignant"] = float(row["score_malignant"])
    return rows


def save_classifier(model: ClassifierModel, path) -> None:
    tensors = dict(model.pset.params)
    tensors["meta/task"] = np.float64(list(TASK_CLASSES).index(model.task))
    tensors["meta/image_size"] = np.float64(model.image_size)
    tensors["meta/channels"] = np.asarray(model.channels, dtype=np.float64)
    tensors["meta/trained"] = np.float64(model.trained)
    save_checkpoint(path, tensors)


def load_classifier(path) -> ClassifierModel:
    tensors = load_checkpoint(path)
    task = list(TASK_CLASSES)[int(float(tensors["meta/task"]))]
    channels = tuple(int(c) for c in tensors["meta/channels"])
    pset = ParameterSet()
    for name, value in tensors.items():
        if name.startswith("clf/"):
            pset.add(name, value)
    return ClassifierModel(
        task=task,
        pset=pset,
        classes=TASK_CLASSES[task],
        feature_dim=channels[-1],
        channels=channels,
        image_size=int(float(tensors["meta/image_size"])),
        trained=bool(float(tensors["meta/trained"])),
    )
