"""Frozen-feature evaluation: embedding extraction, the MLP classification
probe, robustness and hyperparameter-sensitivity sweeps, and embedding
invariance diagnostics.
"""

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, logsumexp, no_grad
from .errors import ContractError, ParameterError
from .geometry import normalize
from .nn import MLP, SGD, state_arrays
from .numkit import Rng
from .transforms import (
    AugmentationChoice,
    apply_augmentation,
    apply_linear,
    fixed_axiswise_rotation,
    LinearMap,
)

SWEEP_VARIABLES = ("rotation_angle", "gaussian_sigma", "rip_delta", "smooth_sigma")


def worker_count() -> int:
    """Worker cap for sweep parallelism, from ISOSHAPE_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("ISOSHAPE_THREADS", "1")))
    except ValueError:
        return 1


def _encoder_of(model):
    return model.encoder if hasattr(model, "encoder") else model


def extract_embeddings(model, dataset, transform=None, batch_size: int = 64):
    """Eval-mode pooled features, one row per cloud, plus the labels.

    transform, when given, is a callable cloud -> cloud applied before
    encoding (fresh per cloud; pass None for the plain embeddings).
    """
    encoder = _encoder_of(model)
    rows = []
    labels = []
    for start in range(0, len(dataset), batch_size):
        batch = dataset[start : start + batch_size]
        if transform is not None:
            batch = [transform(c) for c in batch]
        x = np.stack([c.points for c in batch])
        with no_grad():
            feature, _ = encoder.forward(x, mode="eval")
        rows.append(feature.data)
        labels.extend(c.label for c in dataset[start : start + batch_size])
    return np.concatenate(rows, axis=0), labels


@dataclass
class ProbeConfig:
    hidden: int = 1000
    batch_size: int = 128
    learning_rates: tuple = (0.01, 0.001)
    epochs: int = 200
    val_fraction: float = 0.2
    patience: int = 25
    sgd_momentum: float = 0.9


@dataclass
class ProbeModel:
    """Frozen-feature classifier: one hidden ReLU layer, trained with SGD."""

    mlp: MLP
    classes: tuple
    chosen_lr: float
    val_accuracy: float

    def predict(self, embeddings: np.ndarray) -> np.ndarray:
        with no_grad():
            logits = self.mlp.forward(Tensor(embeddings))
        return np.argmax(logits.data, axis=1)


def _cross_entropy(logits: Tensor, y: np.ndarray, n_classes: int) -> Tensor:
    onehot = np.zeros((y.size, n_classes))
    onehot[np.arange(y.size), y] = 1.0
    return (logsumexp(logits, axis=1) - (logits * Tensor(onehot)).sum(axis=1)).mean()


def _fit_mlp(embeddings, y, n_classes, hidden, lr, epochs, batch_size, momentum,
             rng, val_embeddings=None, val_y=None, patience=0):
    """Train one MLP; with a validation set, early-stop on accuracy plateau
    and report (best epoch, best val accuracy)."""
    mlp = MLP((embeddings.shape[1], hidden, n_classes), rng.child("init"))
    optimizer = SGD([p for _, p in mlp.named_parameters()], lr=lr, momentum=momentum)
    shuffle = rng.child("shuffle")
    best_acc, best_epoch, since_best = -1.0, 0, 0
    for epoch in range(epochs):
        order = shuffle.permutation(len(y))
        for start in range(0, len(y), batch_size):
            idx = order[start : start + batch_size]
            logits = mlp.forward(Tensor(embeddings[idx]))
            loss = _cross_entropy(logits, y[idx], n_classes)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
        if val_embeddings is not None:
            with no_grad():
                pred = np.argmax(mlp.forward(Tensor(val_embeddings)).data, axis=1)
            acc = float(np.mean(pred == val_y))
            if acc > best_acc:
                best_acc, best_epoch, since_best = acc, epoch, 0
            else:
                since_best += 1
                if patience and since_best >= patience:
                    break
    return mlp, best_epoch, best_acc


def train_probe(embeddings: np.ndarray, labels, cfg: ProbeConfig, rng: Rng) -> ProbeModel:
    """Select the learning rate on a held-out validation split, then retrain
    on the full embedding set for the epoch budget the winner needed."""
    classes = tuple(sorted(set(labels)))
    if len(classes) < 2:
        raise ContractError("probe needs at least 2 classes")
    y = np.array([classes.index(l) for l in labels])
    m = len(y)
    order = rng.child("split").permutation(m)
    n_val = max(1, int(round(cfg.val_fraction * m)))
    val_idx, train_idx = order[:n_val], order[n_val:]

    best = None
    for i, lr in enumerate(cfg.learning_rates):
        _, best_epoch, val_acc = _fit_mlp(
            embeddings[train_idx], y[train_idx], len(classes), cfg.hidden, lr,
            cfg.epochs, cfg.batch_size, cfg.sgd_momentum, rng.child(f"lr{i}"),
            embeddings[val_idx], y[val_idx], cfg.patience,
        )
        if best is None or val_acc > best[1]:
            best = (lr, val_acc, best_epoch)
    lr, val_acc, best_epoch = best
    mlp, _, _ = _fit_mlp(
        embeddings, y, len(classes), cfg.hidden, lr,
        best_epoch + 1, cfg.batch_size, cfg.sgd_momentum, rng.child("final"),
    )
    return ProbeModel(mlp, classes, lr, val_acc)


def evaluate_probe(probe: ProbeModel, embeddings: np.ndarray, labels):
    """Accuracy and the class-by-class confusion matrix (rows = truth)."""
    y = np.array([probe.classes.index(l) for l in labels])
    pred = probe.predict(embeddings)
    n = len(probe.classes)
    confusion = np.zeros((n, n), dtype=np.int64)
    np.add.at(confusion, (y, pred), 1)
    return float(np.mean(pred == y)), confusion


# ---------------------------------------------------------------------------
# Transform factories for sweep levels
# ---------------------------------------------------------------------------

def _sweep_transform(variable: str, level: float, rng: Rng, renorm_mode: str):
    """Per-cloud transform callable for one sweep level; None at an exact
    identity level so level-0 embeddings are bitwise equal to the plain run."""
    if variable == "rotation_angle":
        if level == 0.0:
            return None
        matrix = fixed_axiswise_rotation(math.radians(level))
        linear = LinearMap(matrix, "rotation_axis")
        return lambda c: normalize(apply_linear(linear, c), renorm_mode)
    if variable == "gaussian_sigma":
        if level == 0.0:
            return None
        choice = AugmentationChoice("jitter", (("sigma", float(level)),))
    elif variable == "smooth_sigma":
        if level == 0.0:
            return None
        choice = AugmentationChoice("smooth", (("sigma", float(level)),))
    elif variable == "rip_delta":
        choice = AugmentationChoice("rip", (("delta", float(level)),))
    else:
        raise ParameterError(f"unknown sweep variable {variable!r}")
    return lambda c: normalize(apply_augmentation(choice, c, rng), renorm_mode)


def robustness_sweep(model, variable: str, grid, train_clouds, test_clouds,
                     probe_cfg: ProbeConfig, rng: Rng, renorm_mode: str = "unit_sphere"):
    """Probe accuracy per variation level, the variation applied to both the
    probe-train and probe-test clouds. Returns [(level, accuracy), ...]."""
    if not grid:
        raise ParameterError("sweep grid must be nonempty")
    levels = list(grid)

    def run_level(i_level):
        i, level = i_level
        level_rng = rng.child(f"level-{i}")
        transform = _sweep_transform(variable, float(level), level_rng.child("transform"), renorm_mode)
        e_train, y_train = extract_embeddings(model, train_clouds, transform)
        e_test, y_test = extract_embeddings(model, test_clouds, transform)
        probe = train_probe(e_train, y_train, probe_cfg, level_rng.child("probe"))
        acc, _ = evaluate_probe(probe, e_test, y_test)
        return float(level), acc

    jobs = list(enumerate(levels))
    workers = min(worker_count(), len(jobs))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            curve = list(pool.map(run_level, jobs))
    else:
        curve = [run_level(job) for job in jobs]
    return curve


def sensitivity_sweep(variable: str, grid, run_pipeline):
    """Full pretrain+probe accuracy per hyperparameter value, seeds fixed.

    run_pipeline(variable, value) -> accuracy is supplied by the caller (the
    CLI wires it to the standard pipeline); this keeps the sweep itself free
    of training-loop knowledge. Returns [(value, accuracy), ...].
    """
    if variable not in ("sigma", "delta"):
        raise ParameterError(f"unknown sensitivity variable {variable!r}")
    if not grid:
        raise ParameterError("sweep grid must be nonempty")
    jobs = [float(v) for v in grid]
    workers = min(worker_count(), len(jobs))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            accs = list(pool.map(lambda v: run_pipeline(variable, v), jobs))
    else:
        accs = [run_pipeline(variable, v) for v in jobs]
    return list(zip(jobs, accs))


def invariance_score(model, dataset, sampler_kind: str, trials: int, rng: Rng,
                     renorm_mode: str = "unit_sphere") -> float:
    """Mean cosine similarity between the embedding of each cloud and the
    embeddings of `trials` freshly transformed copies."""
    if trials < 1:
        raise ParameterError(f"need trials >= 1, got {trials}")
    base, _ = extract_embeddings(model, dataset)
    choice = AugmentationChoice(sampler_kind)
    total = 0.0
    count = 0
    for t in range(trials):
        if sampler_kind == "none":
            transformed = base
        else:
            trial_rng = rng.child(f"trial-{t}")
            transform = lambda c: normalize(apply_augmentation(choice, c, trial_rng), renorm_mode)
            transformed, _ = extract_embeddings(model, dataset, transform)
        for a, b in zip(base, transformed):
            if a is b or np.array_equal(a, b):
                total += 1.0
            else:
                total += float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))
            count += 1
    return total / count


def encoder_fingerprint(model) -> bytes:
    """Byte digest of all parameters and buffers; used to assert the probe
    protocol never mutates the encoder."""
    arrays = state_arrays(model)
    return b"".join(np.ascontiguousarray(arrays[k], dtype="<f8").tobytes() for k in sorted(arrays))
