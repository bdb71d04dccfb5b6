"""Verification suite: every mathematical claim the toolkit relies on is
checked here numerically, from Haar uniformity of the orthogonal sampler to
end-to-end training behavior.

The gradient checks compare the autodiff engine against central finite
differences evaluated on an independent straight-line numpy forward pass
(stage-structured so single-parameter perturbations only recompute the
suffix of the network).
"""

import math
import shutil
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import RunConfig
from .contrastive import info_nce, pretrain
from .data import make_synthetic_dataset
from .errors import IsoshapeError
from .evaluation import (
    evaluate_probe,
    extract_embeddings,
    invariance_score,
    robustness_sweep,
    train_probe,
)
from .geometry import normalize
from .nn import BN_EPS, ContrastiveEncoder, EncoderConfig
from .numkit import (
    Rng,
    binomial_two_sided_p,
    gaussian_matrix,
    ks_statistic,
    spectral_norm,
)
from .pipeline import build_datasets, desk_profile, run_pretrain, run_probe, run_robustness
from .transforms import (
    AugmentationChoice,
    apply_augmentation,
    sample_perturb_field,
    sample_rip,
    sample_uniform_orthogonal,
)

UNIT_BOX = (np.array([-1.1, -1.1, -1.1]), np.array([1.1, 1.1, 1.1]))


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float

    def report_line(self) -> str:
        mark = "PASS" if self.passed else "FAIL"
        return f"[{mark}] {self.name}: {self.detail} ({self.seconds:.1f}s)"


def _timed(name):
    def wrap(fn):
        def run(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                passed, detail = fn(*args, **kwargs)
            except IsoshapeError as exc:
                passed, detail = False, f"raised {type(exc).__name__}: {exc}"
            return CheckResult(name, passed, detail, time.perf_counter() - t0)
        return run
    return wrap


# ---------------------------------------------------------------------------
# Straight-line forward mirror + finite differences
# ---------------------------------------------------------------------------

def _plain_bn_sorted(z, gamma, beta):
    r = z.shape[0]
    m = np.sort(z, axis=0).sum(axis=0) / r
    c = z - m
    v = np.sort(c * c, axis=0).sum(axis=0) / r
    return (c / np.sqrt(v + BN_EPS)) * gamma + beta


def _plain_bn_mean(z, gamma, beta):
    r = z.shape[0]
    m = z.sum(axis=0) * (1.0 / r)
    c = z - m
    v = (c * c).sum(axis=0) * (1.0 / r)
    return (c / np.sqrt(v + BN_EPS)) * gamma + beta


def build_loss_stages(config: EncoderConfig, arrays: dict, x: np.ndarray,
                      k_pos: np.ndarray, negatives: np.ndarray, tau: float):
    """Stage list [(owned parameter names, state -> state)] computing the
    contrastive loss with plain numpy, mirroring the autodiff forward op for
    op. State entries are never mutated, so stage outputs can be cached."""
    b, n, _ = x.shape
    c3 = config.conv_widths[-1]
    eye = np.eye(3)
    mask = np.zeros((1, negatives.shape[0] + 1))
    mask[0, 0] = 1.0

    def conv_stage(prefix, key_in, key_out, sorted_stats=True):
        names = [f"{prefix}.weight", f"{prefix}.bias", f"{prefix}_bn.gamma", f"{prefix}_bn.beta"]
        bn = _plain_bn_sorted if sorted_stats else _plain_bn_mean
        def fn(state):
            z = state[key_in] @ arrays[f"{prefix}.weight"] + arrays[f"{prefix}.bias"]
            z = bn(z, arrays[f"{prefix}_bn.gamma"], arrays[f"{prefix}_bn.beta"])
            out = dict(state)
            out[key_out] = np.maximum(z, 0.0)
            return out
        return names, fn

    stages = []
    stages.append(conv_stage("encoder.tnet_conv0", "flat", "t0"))
    stages.append(conv_stage("encoder.tnet_conv1", "t0", "t1"))
    stages.append(conv_stage("encoder.tnet_conv2", "t1", "t2"))

    def tnet_fc0(state):
        pooled = state["t2"].reshape(b, n, c3).max(axis=1)
        z = pooled @ arrays["encoder.tnet_fc0.weight"] + arrays["encoder.tnet_fc0.bias"]
        z = _plain_bn_mean(z, arrays["encoder.tnet_fc0_bn.gamma"], arrays["encoder.tnet_fc0_bn.beta"])
        out = dict(state)
        out["g0"] = np.maximum(z, 0.0)
        return out

    def tnet_fc1(state):
        z = state["g0"] @ arrays["encoder.tnet_fc1.weight"] + arrays["encoder.tnet_fc1.bias"]
        z = _plain_bn_mean(z, arrays["encoder.tnet_fc1_bn.gamma"], arrays["encoder.tnet_fc1_bn.beta"])
        out = dict(state)
        out["g1"] = np.maximum(z, 0.0)
        return out

    def tnet_out(state):
        t9 = state["g1"] @ arrays["encoder.tnet_out.weight"] + arrays["encoder.tnet_out.bias"]
        trans = t9.reshape(b, 3, 3) + eye
        out = dict(state)
        out["flat2"] = (x @ trans).reshape(b * n, 3)
        return out

    stages.append((["encoder.tnet_fc0.weight", "encoder.tnet_fc0.bias",
                    "encoder.tnet_fc0_bn.gamma", "encoder.tnet_fc0_bn.beta"], tnet_fc0))
    stages.append((["encoder.tnet_fc1.weight", "encoder.tnet_fc1.bias",
                    "encoder.tnet_fc1_bn.gamma", "encoder.tnet_fc1_bn.beta"], tnet_fc1))
    stages.append((["encoder.tnet_out.weight", "encoder.tnet_out.bias"], tnet_out))

    def main_conv(prefix, key_in, key_out):
        names = [f"{prefix}.weight", f"{prefix}.bias", f"{prefix}_bn.gamma", f"{prefix}_bn.beta"]
        def fn(state):
            z = state[key_in] @ arrays[f"{prefix}.weight"] + arrays[f"{prefix}.bias"]
            z = _plain_bn_sorted(z, arrays[f"{prefix}_bn.gamma"], arrays[f"{prefix}_bn.beta"])
            out = dict(state)
            out[key_out] = np.maximum(z, 0.0)
            return out
        return names, fn

    stages.append(main_conv("encoder.conv0", "flat2", "m0"))
    stages.append(main_conv("encoder.conv1", "m0", "m1"))
    stages.append(main_conv("encoder.conv2", "m1", "m2"))

    def head1(state):
        pooled = state["m2"].reshape(b, n, c3).max(axis=1)
        z = pooled @ arrays["head.fc1.weight"] + arrays["head.fc1.bias"]
        out = dict(state)
        out["h1"] = np.maximum(z, 0.0)
        return out

    def head2(state):
        lat = state["h1"] @ arrays["head.fc2.weight"] + arrays["head.fc2.bias"]
        norm = np.sqrt((lat * lat).sum(axis=-1, keepdims=True))
        q = lat / norm
        l_pos = (q * k_pos).sum(axis=1, keepdims=True)
        l_neg = q @ negatives.T
        logits = np.concatenate([l_pos, l_neg], axis=1) * (1.0 / tau)
        shift = np.max(logits, axis=1, keepdims=True)
        lse = np.log(np.exp(logits - shift).sum(axis=1)) + np.squeeze(shift, axis=1)
        per_row = lse - (logits * mask).sum(axis=1)
        out = dict(state)
        out["loss"] = per_row.sum() * (1.0 / b)
        return out

    stages.append((["head.fc1.weight", "head.fc1.bias"], head1))
    stages.append((["head.fc2.weight", "head.fc2.bias"], head2))
    return stages


def plain_loss(config, arrays, x, k_pos, negatives, tau) -> float:
    state = {"flat": x.reshape(-1, 3)}
    for _, fn in build_loss_stages(config, arrays, x, k_pos, negatives, tau):
        state = fn(state)
    return float(state["loss"])


def plain_forward_feature(config, arrays, x):
    """Straight-line eval of (feature, latent) without the loss; used as the
    dual-implementation value oracle for the autodiff forward."""
    dummy_k = np.zeros((x.shape[0], config.latent_dim))
    dummy_n = np.zeros((1, config.latent_dim))
    stages = build_loss_stages(config, arrays, x, dummy_k, dummy_n, 1.0)
    state = {"flat": x.reshape(-1, 3)}
    for _, fn in stages[:-1]:
        state = fn(state)
    b, n, _ = x.shape
    c3 = config.conv_widths[-1]
    feature = state["m2"].reshape(b, n, c3).max(axis=1)
    lat = state["h1"] @ arrays["head.fc2.weight"] + arrays["head.fc2.bias"]
    latent = lat / np.sqrt((lat * lat).sum(axis=-1, keepdims=True))
    return feature, latent


def fd_gradient_check(model: ContrastiveEncoder, x: np.ndarray, k_pos: np.ndarray,
                      negatives: np.ndarray, tau: float, h: float = 1e-5,
                      max_params_per_stage: int | None = None):
    """Max relative error between autodiff gradients and central finite
    differences over (a subset of) all parameters for one batch.

    The FD baseline is the staged plain forward, which must agree with the
    autodiff value to ~1e-12; that agreement is asserted here too.
    """
    q, _, _ = model.forward(x, "train", update_running=False)
    loss, _ = info_nce(q, k_pos, negatives, tau)
    for _, p in model.named_parameters():
        p.grad = None
    loss.backward()
    grads = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in model.named_parameters()
    }

    arrays = {name: p.data.copy() for name, p in model.named_parameters()}
    stages = build_loss_stages(model.config, arrays, x, k_pos, negatives, tau)
    states = [{"flat": x.reshape(-1, 3)}]
    for _, fn in stages:
        states.append(fn(states[-1]))
    value_gap = abs(float(states[-1]["loss"]) - float(loss.data))
    if value_gap > 1e-11:
        return math.inf, value_gap

    def tail_loss(stage_idx):
        state = states[stage_idx]
        for _, fn in stages[stage_idx:]:
            state = fn(state)
        return float(state["loss"])

    max_rel = 0.0
    for si, (names, _) in enumerate(stages):
        for name in names:
            flat = arrays[name].reshape(-1)
            gflat = grads[name].reshape(-1)
            count = flat.size if max_params_per_stage is None else min(flat.size, max_params_per_stage)
            for idx in range(count):
                keep = flat[idx]
                flat[idx] = keep + h
                hi = tail_loss(si)
                flat[idx] = keep - h
                lo = tail_loss(si)
                flat[idx] = keep
                fd = (hi - lo) / (2.0 * h)
                ad = gflat[idx]
                rel = abs(ad - fd) / max(abs(ad), abs(fd), 1e-6)
                if rel > max_rel:
                    max_rel = rel
    return max_rel, value_gap


def _random_unit_rows(rng: Rng, shape) -> np.ndarray:
    v = rng.normal(size=shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# Criterion checks
# ---------------------------------------------------------------------------

@_timed("haar-orthogonal-sampler")
def check_haar(seed: int = 205, draws: int = 20_000):
    rng = Rng(seed)
    fixed = sample_uniform_orthogonal(3, rng).matrix
    worst_orth = 0.0
    worst_det = 0.0
    positives = 0
    first = np.empty(draws)
    rotated_first = np.empty(draws)
    for i in range(draws):
        q = sample_uniform_orthogonal(3, rng).matrix
        worst_orth = max(worst_orth, float(np.linalg.norm(q.T @ q - np.eye(3))))
        det = float(np.linalg.det(q))
        worst_det = max(worst_det, abs(abs(det) - 1.0))
        positives += det > 0
        first[i] = q[0, 0]
        rotated_first[i] = float(fixed[0] @ q[:, 0])
    u_cdf = lambda v: np.clip((v + 1.0) / 2.0, 0.0, 1.0)
    _, p_ks = ks_statistic(first, u_cdf)
    _, p_ks_rot = ks_statistic(rotated_first, u_cdf)
    p_binom = binomial_two_sided_p(positives, draws)
    passed = (
        worst_orth < 1e-8
        and worst_det < 1e-8
        and p_binom > 0.001
        and p_ks > 0.01
        and p_ks_rot > 0.01
    )
    detail = (
        f"max|Q^TQ-I|={worst_orth:.2e}, max||det|-1|={worst_det:.2e}, "
        f"det-sign binomial p={p_binom:.3f}, KS p={p_ks:.3f}, left-invariant KS p={p_ks_rot:.3f}"
    )
    return passed, detail


@_timed("rip-sampler")
def check_rip(seed: int = 102, accepted: int = 1000):
    rng = Rng(seed)
    attempts = 0
    worst_dev = 0.0
    ratio_lo, ratio_hi = math.inf, 0.0
    x = rng.normal(size=(1000, 3))
    x_sq = np.sum(x * x, axis=1)
    for _ in range(accepted):
        linear = sample_rip(rng, n=3, N=1000, T=3, delta=0.9)
        attempts += linear.attempts
        dev = spectral_norm(linear.matrix.T @ linear.matrix - np.eye(3))
        worst_dev = max(worst_dev, dev)
        ratios = np.sum((x @ linear.matrix.T) ** 2, axis=1) / x_sq
        ratio_lo = min(ratio_lo, float(ratios.min()))
        ratio_hi = max(ratio_hi, float(ratios.max()))
    rate = accepted / attempts
    passed = worst_dev <= 0.9 and ratio_lo >= 0.1 - 1e-9 and ratio_hi <= 1.9 + 1e-9
    detail = (
        f"max deviation={worst_dev:.4f} (<=0.9), ratio range=[{ratio_lo:.4f}, {ratio_hi:.4f}] "
        f"in [0.1, 1.9], acceptance rate={rate:.4f}"
    )
    return passed, detail


@_timed("spectral-norm-oracles")
def check_spectral(seed: int = 103, matrices: int = 1000):
    rng = Rng(seed)
    directions = _random_unit_rows(rng, (100_000, 3))
    worst_jacobi = 0.0
    worst_brute = 0.0
    for _ in range(matrices):
        a = gaussian_matrix(3, 3, 0.0, 1.0, rng)
        m = a + a.T
        closed = spectral_norm(m, method="closed_form")
        jacobi = spectral_norm(m, method="jacobi")
        brute = float(np.max(np.linalg.norm(directions @ m.T, axis=1)))
        worst_jacobi = max(worst_jacobi, abs(closed - jacobi))
        worst_brute = max(worst_brute, abs(closed - brute))
    passed = worst_jacobi < 1e-10 and worst_brute < 1e-3
    detail = f"closed-vs-jacobi max gap={worst_jacobi:.2e} (<1e-10), closed-vs-brute={worst_brute:.2e} (<1e-3)"
    return passed, detail


@_timed("smooth-perturbation")
def check_smooth(seed: int = 104):
    rng = Rng(seed)
    zero_field = sample_perturb_field(100, 0.0, UNIT_BOX, rng)
    probe_points = rng.uniform(size=(1000, 3), low=-1.0, high=1.0)
    zero_ok = bool(np.all(zero_field.evaluate(probe_points) == 0.0))
    field = sample_perturb_field(100, 0.02, UNIT_BOX, rng)
    exact_err = float(np.max(np.abs(field.evaluate(field.control_points) - field.displacements)))
    a = rng.uniform(size=(1000, 3), low=-1.0, high=1.0)
    b = a + 1e-6 / math.sqrt(3.0)
    cont_gap = float(np.max(np.linalg.norm(field.evaluate(a) - field.evaluate(b), axis=1)))
    passed = zero_ok and exact_err < 1e-8 and cont_gap < 1e-4
    detail = (
        f"zero-sigma field identically zero: {zero_ok}, control-point error={exact_err:.2e} "
        f"(<1e-8), 1e-6-pair gap={cont_gap:.2e} (<1e-4)"
    )
    return passed, detail


@_timed("gradient-gate")
def check_gradient_gate(seed: int = 105, batches: int = 3, subset: int | None = None):
    rng = Rng(seed)
    config = EncoderConfig.profile("reduced")
    model = ContrastiveEncoder(config, rng.child("init"))
    worst = 0.0
    worst_gap = 0.0
    for b in range(batches):
        batch_rng = rng.child(f"batch-{b}")
        x = batch_rng.normal(size=(4, 8, 3))
        k_pos = _random_unit_rows(batch_rng, (4, config.latent_dim))
        negatives = _random_unit_rows(batch_rng, (8, config.latent_dim))
        rel, gap = fd_gradient_check(model, x, k_pos, negatives, tau=0.02,
                                     max_params_per_stage=subset)
        worst = max(worst, rel)
        worst_gap = max(worst_gap, gap)
    passed = worst < 1e-4
    detail = f"max FD relative error={worst:.2e} (<1e-4), dual-forward value gap={worst_gap:.2e}"
    return passed, detail


@_timed("infonce-closed-forms")
def check_infonce():
    q = np.zeros(128)
    q[0] = 1.0
    ortho = np.zeros((1, 128))
    ortho[0, 1] = 1.0
    loss_a, correct_a = info_nce(q, q, ortho, tau=1.0)
    expected_a = math.log(1.0 + math.exp(-1.0))
    k = 7
    same = np.tile(q, (k, 1))
    loss_b, _ = info_nce(q, q, same, tau=1.0)
    expected_b = math.log(k + 1)
    err_a = abs(float(loss_a.data) - expected_a)
    err_b = abs(float(loss_b.data) - expected_b)
    passed = err_a < 1e-12 and err_b < 1e-12 and bool(correct_a)
    detail = f"log(1+e^-1) error={err_a:.2e}, log(K+1) error={err_b:.2e} (both <1e-12)"
    return passed, detail


def _desk_config(seed: int, aug) -> RunConfig:
    return replace(desk_profile(seed), aug=aug)


def _transformed_test_accuracy(model, cfg: RunConfig, train, test, seed_label: str):
    """Probe trained on plain train embeddings, evaluated on test clouds each
    given a fresh random orthogonal transform."""
    rng = Rng(cfg.seed).child(seed_label)
    choice = AugmentationChoice("orthogonal")
    transform = lambda c: normalize(apply_augmentation(choice, c, rng), cfg.normalize_mode)
    e_train, y_train = extract_embeddings(model, train)
    e_test, y_test = extract_embeddings(model, test, transform)
    probe = train_probe(e_train, y_train, cfg.probe_config(), Rng(cfg.seed).child("probe"))
    acc, _ = evaluate_probe(probe, e_test, y_test)
    return acc


@_timed("desk-scale-end-to-end")
def check_end_to_end(seed: int = 7):
    cfg = _desk_config(seed, ("orthogonal", "rip(delta=0.9,N=1000,T=3)"))
    train, test = build_datasets(cfg)

    untrained = ContrastiveEncoder(cfg.encoder_config(), Rng(seed).child("pretrain").child("init"))
    inv_rng = Rng(seed).child("invariance")
    baseline_inv = invariance_score(untrained, test, "orthogonal", trials=2, rng=inv_rng)

    state, _ = pretrain(train, cfg.augmentation_spec(), cfg.pretrain_config(),
                        Rng(cfg.seed).child("pretrain"))
    acc_aug = _transformed_test_accuracy(state.query, cfg, train, test, "test-transform")

    ctrl_cfg = replace(cfg, aug=("none",))
    ctrl_state, _ = pretrain(train, ctrl_cfg.augmentation_spec(), ctrl_cfg.pretrain_config(),
                             Rng(ctrl_cfg.seed).child("pretrain"))
    acc_ctrl = _transformed_test_accuracy(ctrl_state.query, ctrl_cfg, train, test, "test-transform")

    inv_rng2 = Rng(seed).child("invariance")
    trained_inv = invariance_score(state.query, test, "orthogonal", trials=2, rng=inv_rng2)

    passed = acc_aug >= 0.90 and acc_aug > acc_ctrl and trained_inv > baseline_inv
    detail = (
        f"rotated-test accuracy={acc_aug:.3f} (>=0.90), no-aug control={acc_ctrl:.3f} (must be lower), "
        f"invariance trained={trained_inv:.3f} > untrained baseline={baseline_inv:.3f}"
    )
    return passed, detail


@_timed("robustness-harness")
def check_robustness(seed: int = 7, out_dir=None):
    out = Path(out_dir or "runs/verify-robustness")

    jitter_cfg = _desk_config(seed, ("jitter(sigma=0.08)",))
    train, test = build_datasets(jitter_cfg)
    jitter_state, _ = pretrain(
        train, jitter_cfg.augmentation_spec(),
        jitter_cfg.pretrain_config(), Rng(jitter_cfg.seed).child("pretrain"),
    )
    g_curve = robustness_sweep(
        jitter_state.query, "gaussian_sigma", [0.0, 0.02, 0.04, 0.06, 0.08],
        train, test, jitter_cfg.probe_config(), Rng(seed).child("sweep-gaussian"),
    )
    g_levels = dict(g_curve)
    g_drop = g_levels[0.0] - g_levels[0.08]

    orth_cfg = _desk_config(seed, ("orthogonal",))
    orth_state, _ = pretrain(
        build_datasets(orth_cfg)[0], orth_cfg.augmentation_spec(),
        orth_cfg.pretrain_config(), Rng(orth_cfg.seed).child("pretrain"),
    )
    r_curve = robustness_sweep(
        orth_state.query, "rotation_angle", [0.0, 9.0, 18.0, 27.0, 36.0, 45.0],
        train, test, orth_cfg.probe_config(), Rng(seed).child("sweep-rotation"),
    )
    r_acc = [acc for _, acc in r_curve]
    r_short = r_acc[0] - min(r_acc)

    if out_dir is not None:
        out.mkdir(parents=True, exist_ok=True)
        from .pipeline import write_csv
        from .render import render_sweep

        for name, curve in (("gaussian_sigma", g_curve), ("rotation_angle", r_curve)):
            write_csv(out / f"sweep_{name}.csv", ["level", "accuracy", "seed"],
                      [(lv, acc, seed) for lv, acc in curve])
            render_sweep([lv for lv, _ in curve], [acc for _, acc in curve], name,
                         out / f"sweep_{name}.svg")

    passed = g_drop <= 0.05 and r_short <= 0.05
    detail = (
        f"gaussian sweep drop 0->0.08 = {g_drop:+.3f} (<=0.05), "
        f"rotation worst-below-level-0 = {r_short:+.3f} (<=0.05)"
    )
    return passed, detail


@_timed("pipeline-determinism")
def check_determinism(out_dir=None):
    base = Path(out_dir or "runs/verify-determinism")
    cfg = replace(
        desk_profile(11),
        train_per_class=10, test_per_class=5, points_per_cloud=64,
        max_epochs=6, batch_size=8, queue_size=64,
        probe_epochs=20, probe_patience=5, converge_window=3,
    )
    digests = []
    for run in ("a", "b"):
        run_dir = base / run
        if run_dir.exists():
            shutil.rmtree(run_dir)
        run_pretrain(cfg, run_dir)
        run_probe(cfg, run_dir / "checkpoint.ckpt", run_dir / "probe", test_transform="orthogonal")
        files = ["metrics.csv", "probe/probe_metrics.csv", "probe/confusion.csv"]
        digests.append({f: (run_dir / f).read_bytes() for f in files})
    same = {f: digests[0][f] == digests[1][f] for f in digests[0]}
    passed = all(same.values())
    detail = "byte-identical reruns: " + ", ".join(f"{f}={ok}" for f, ok in same.items())
    return passed, detail


def run_suite(full: bool = False, out_dir=None):
    """Run the invariant suite; full adds the training-based and long
    checks. Returns a list of CheckResult."""
    results = [
        check_haar(),
        check_rip(),
        check_spectral(),
        check_smooth(),
        check_infonce(),
    ]
    if full:
        results.append(check_gradient_gate())
        results.append(check_end_to_end())
        results.append(check_robustness(out_dir=out_dir))
        results.append(check_determinism(out_dir=out_dir))
    else:
        results.append(check_gradient_gate(subset=6))
    return results
