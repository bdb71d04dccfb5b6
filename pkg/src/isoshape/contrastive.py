"""Momentum-contrast pretraining.

Query and key encoders share an architecture; the key side is updated by
momentum mixing instead of gradients, negatives come from a ring-buffer
queue of past keys, and the loss is softmax cross-entropy over one positive
and the queued negatives (positive at index 0).
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, concat, logsumexp, no_grad
from .errors import ContractError, DivergenceError, ParameterError
from .geometry import normalize
from .nn import (
    SGD,
    ContrastiveEncoder,
    EncoderConfig,
    clone_model,
    cosine_lr,
    momentum_update,
    state_arrays,
)
from .numkit import Rng
from .transforms import AugmentationSpec, draw_view, draw_view_pair


@dataclass
class MoCoState:
    """Query/key encoder pair plus the negative-key queue."""

    query: ContrastiveEncoder
    key: ContrastiveEncoder
    queue: np.ndarray
    queue_ptr: int = 0
    tau: float = 0.02
    key_momentum: float = 0.999
    rng_states: dict | None = None  # substream states at the last step, for resume

    def __post_init__(self):
        if self.tau <= 0:
            raise ParameterError(f"temperature must be > 0, got {self.tau}")
        if not 0.0 <= self.key_momentum <= 1.0:
            raise ParameterError("key momentum must lie in [0, 1]")


def info_nce(q, k_pos, negatives, tau: float):
    """Contrastive loss over K+1 logits with the positive at index 0.

    q may carry gradients; k_pos and the negatives are treated as constants.
    Returns (scalar loss tensor, instance-discrimination hit(s): True where
    the positive logit is the maximum). Inputs may be single vectors or
    (B, d) batches; the loss is averaged over the batch.
    """
    if tau <= 0:
        raise ParameterError(f"temperature must be > 0, got {tau}")
    q = q if isinstance(q, Tensor) else Tensor(np.asarray(q, dtype=np.float64))
    single = q.data.ndim == 1
    if single:
        q = q.reshape((1, q.data.shape[0]))
    k_pos = np.atleast_2d(np.asarray(k_pos.data if isinstance(k_pos, Tensor) else k_pos, dtype=np.float64))
    negatives = np.asarray(negatives.data if isinstance(negatives, Tensor) else negatives, dtype=np.float64)

    l_pos = (q * Tensor(k_pos)).sum(axis=1, keepdims=True)
    l_neg = q @ Tensor(negatives.T)
    logits = concat([l_pos, l_neg], axis=1) * (1.0 / tau)
    per_row = logsumexp(logits, axis=1) - (logits * Tensor(_pos_mask(logits.data.shape[1]))).sum(axis=1)
    loss = per_row.mean()
    correct = np.argmax(logits.data, axis=1) == 0
    return loss, (bool(correct[0]) if single else correct)


def _pos_mask(width: int) -> np.ndarray:
    mask = np.zeros((1, width))
    mask[0, 0] = 1.0
    return mask


def enqueue(state: MoCoState, keys: np.ndarray) -> MoCoState:
    """Write keys at the queue pointer with wraparound; advances the pointer
    by the batch size modulo the queue length."""
    keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
    k_cap, dim = state.queue.shape
    if keys.shape[0] > k_cap:
        raise ContractError(f"batch of {keys.shape[0]} keys exceeds queue size {k_cap}")
    if keys.shape[1] != dim:
        raise ContractError(f"key dim {keys.shape[1]} != queue dim {dim}")
    norms = np.linalg.norm(keys, axis=1)
    if np.max(np.abs(norms - 1.0)) > 1e-8:
        raise ContractError("keys must be unit-norm before enqueueing")
    idx = (state.queue_ptr + np.arange(keys.shape[0])) % k_cap
    state.queue[idx] = keys
    state.queue_ptr = int((state.queue_ptr + keys.shape[0]) % k_cap)
    return state


@dataclass
class PretrainConfig:
    """Hyperparameters for the contrastive pretraining loop."""

    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig.profile("reduced"))
    max_epochs: int = 800
    batch_size: int = 64
    base_lr: float = 0.075
    weight_decay: float = 1e-4
    sgd_momentum: float = 0.9
    tau: float = 0.02
    key_momentum: float = 0.999
    queue_size: int = 1024
    renormalize_views: bool = True
    normalize_mode: str = "unit_sphere"
    converge_window: int = 20
    converge_eps: float = 0.001  # 0.1 accuracy points, as a fraction
    independent_kinds: bool = False


def _stack_views(views, normalize_mode: str, renormalize: bool) -> np.ndarray:
    if renormalize:
        views = [normalize(v, normalize_mode) for v in views]
    return np.stack([v.points for v in views])


def _fill_queue(state: MoCoState, dataset, aug: AugmentationSpec, cfg: PretrainConfig, rng: Rng):
    """Prefill every queue row by encoding augmented passes of the dataset
    with the initial key encoder (batch statistics, running stats untouched)."""
    k_cap = state.queue.shape[0]
    filled = 0
    while filled < k_cap:
        for start in range(0, len(dataset), cfg.batch_size):
            batch = dataset[start : start + cfg.batch_size]
            if len(batch) < 2:
                continue
            views, _ = draw_view(aug, batch, rng)
            x = _stack_views(views, cfg.normalize_mode, cfg.renormalize_views)
            with no_grad():
                latent, _, _ = state.key.forward(x, "train", update_running=False)
            take = min(latent.data.shape[0], k_cap - filled)
            state.queue[filled : filled + take] = latent.data[:take]
            filled += take
            if filled >= k_cap:
                break
    state.queue_ptr = 0


def make_moco_state(cfg: PretrainConfig, rng: Rng) -> MoCoState:
    query = ContrastiveEncoder(cfg.encoder, rng.child("init"))
    key = clone_model(query)
    queue = np.zeros((cfg.queue_size, cfg.encoder.latent_dim))
    return MoCoState(query, key, queue, 0, cfg.tau, cfg.key_momentum)


def pretrain(dataset, aug: AugmentationSpec, cfg: PretrainConfig, rng: Rng,
             epoch_callback=None):
    """Run the contrastive loop until the instance-discrimination accuracy
    converges or cfg.max_epochs is reached.

    Per batch: draw a query/key view pair, encode, score against the queue,
    backprop through the query branch only, SGD step at the cosine rate,
    momentum-update the key branch, enqueue the new keys.

    Returns (MoCoState, metrics) where metrics is one dict per epoch with
    epoch, lr, mean_loss, inst_disc_acc, and wall_seconds.
    """
    if len(dataset) <= cfg.batch_size:
        raise ContractError(
            f"dataset size {len(dataset)} must exceed batch size {cfg.batch_size}"
        )
    state = make_moco_state(cfg, rng)
    aug_rng = rng.child("augmentation")
    shuffle_rng = rng.child("data")
    _fill_queue(state, dataset, aug, cfg, rng.child("queue"))

    optimizer = SGD(
        [p for _, p in state.query.named_parameters()],
        lr=cfg.base_lr,
        momentum=cfg.sgd_momentum,
        weight_decay=cfg.weight_decay,
    )
    metrics = []
    acc_history = []
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        lr = cosine_lr(epoch, cfg.max_epochs, cfg.base_lr)
        order = shuffle_rng.permutation(len(dataset))
        losses = []
        hits = []
        for start in range(0, len(dataset), cfg.batch_size):
            batch = [dataset[i] for i in order[start : start + cfg.batch_size]]
            if len(batch) < 2:
                continue  # a 1-cloud remainder cannot form batch statistics
            views_q, views_k, _, _ = draw_view_pair(
                aug, batch, aug_rng, independent_kinds=cfg.independent_kinds
            )
            xq = _stack_views(views_q, cfg.normalize_mode, cfg.renormalize_views)
            xk = _stack_views(views_k, cfg.normalize_mode, cfg.renormalize_views)
            q_latent, _, _ = state.query.forward(xq, "train")
            with no_grad():
                k_latent, _, _ = state.key.forward(xk, "train", update_running=False)
            loss, correct = info_nce(q_latent, k_latent.data, state.queue.copy(), cfg.tau)
            if not np.isfinite(loss.data):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} (lr={lr:.2e}); "
                    "reduce the learning rate or inspect the input data"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step(lr)
            momentum_update(state.key, state.query, cfg.key_momentum)
            enqueue(state, k_latent.data)
            losses.append(float(loss.data))
            hits.extend(bool(c) for c in correct)
        acc = float(np.mean(hits)) if hits else 0.0
        acc_history.append(acc)
        metrics.append(
            {
                "epoch": epoch,
                "lr": lr,
                "mean_loss": float(np.mean(losses)) if losses else float("nan"),
                "inst_disc_acc": acc,
                "wall_seconds": time.perf_counter() - t0,
            }
        )
        if epoch_callback is not None:
            epoch_callback(epoch, state, metrics[-1])
        w = cfg.converge_window
        if len(acc_history) >= 2 * w:
            recent = float(np.mean(acc_history[-w:]))
            previous = float(np.mean(acc_history[-2 * w : -w]))
            if recent - previous < cfg.converge_eps:
                break
    state.rng_states = {"augmentation": aug_rng.state(), "data": shuffle_rng.state()}
    return state, metrics


def training_state_arrays(state: MoCoState) -> dict:
    """Checkpoint payload: query/key parameters and buffers plus the queue."""
    arrays = {f"query.{n}": a for n, a in state_arrays(state.query).items()}
    arrays.update({f"key.{n}": a for n, a in state_arrays(state.key).items()})
    arrays["queue"] = state.queue
    arrays["queue_ptr"] = np.array([float(state.queue_ptr)])
    return arrays
