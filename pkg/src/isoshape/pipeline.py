"""End-to-end pipeline steps shared by the CLI, the verification suite and
the tests: dataset building, pretraining with metric/figure outputs, the
frozen-feature probe protocol, sweeps, and transform-sampling demos.

Every step derives its randomness from the config seed through named
substreams, so any output can be reproduced from the resolved config alone.
Metric CSVs contain only deterministic columns; wall-clock timings go to a
sidecar file so reruns are byte-identical.
"""

from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import RunConfig, save_config
from .contrastive import pretrain, training_state_arrays
from .data import load_dataset_dir, make_synthetic_dataset, split_dataset
from .errors import ContractError, ParameterError
from .evaluation import (
    encoder_fingerprint,
    evaluate_probe,
    extract_embeddings,
    robustness_sweep,
    sensitivity_sweep,
    train_probe,
)
from .geometry import bounding_box, generate_synthetic, normalize, write_ply
from .nn import ContrastiveEncoder, load_checkpoint, load_state_arrays, save_checkpoint
from .numkit import Rng
from .render import render_cloud_projections, render_sweep, render_training_curve
from .transforms import (
    AugmentationChoice,
    apply_augmentation,
    apply_field,
    apply_linear,
    sample_perturb_field,
    sample_rip,
    sample_rotation,
    sample_uniform_orthogonal,
)

ROBUSTNESS_GRIDS = {
    "rotation_angle": [0.0, 9.0, 18.0, 27.0, 36.0, 45.0],
    "gaussian_sigma": [0.0, 0.02, 0.04, 0.06, 0.08],
    "rip_delta": [0.75, 0.8, 0.85, 0.9],
    "smooth_sigma": [0.005, 0.010, 0.015, 0.020],
}

SENSITIVITY_GRIDS = {"sigma": [0.01, 0.02, 0.04], "delta": [0.5, 0.7, 0.9]}


def desk_profile(seed: int = 0) -> RunConfig:
    """Desk-scale defaults: 4 synthetic classes, 256-point clouds, reduced
    encoder widths, and a训 budget that fits a desktop CPU."""
    return RunConfig(
        seed=seed,
        points_per_cloud=256,
        encoder_profile="reduced",
        max_epochs=120,
        batch_size=32,
        queue_size=1024,
    )


def format_float(x) -> str:
    return repr(float(x))


def write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(v) if isinstance(v, (int, str)) else format_float(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def build_datasets(cfg: RunConfig):
    """(train, test) clouds, a pure function of the config."""
    rng = Rng(cfg.seed).child("dataset")
    if cfg.dataset == "synthetic":
        train = make_synthetic_dataset(
            cfg.classes, cfg.train_per_class, cfg.points_per_cloud,
            rng.child("train"), cfg.normalize_mode,
        )
        test = make_synthetic_dataset(
            cfg.classes, cfg.test_per_class, cfg.points_per_cloud,
            rng.child("test"), cfg.normalize_mode,
        )
        return train, test
    clouds = load_dataset_dir(cfg.dataset, cfg.points_per_cloud, rng.child("load"), cfg.normalize_mode)
    return split_dataset(clouds, cfg.test_fraction)


def run_pretrain(cfg: RunConfig, out_dir):
    """Pretrain per the config; writes the resolved config, metrics.csv,
    timings.csv, a training-curve figure, and the final checkpoint.
    Returns (MoCoState, metrics)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.resolved.cfg")
    train, _ = build_datasets(cfg)
    rng = Rng(cfg.seed).child("pretrain")

    callback = None
    if cfg.checkpoint_every > 0:
        def callback(epoch, state, _metrics):
            if (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(
                    out / f"checkpoint_epoch{epoch + 1:04d}.ckpt",
                    training_state_arrays(state),
                    meta={"epoch": epoch + 1},
                )

    state, metrics = pretrain(train, cfg.augmentation_spec(), cfg.pretrain_config(), rng, callback)
    write_csv(
        out / "metrics.csv",
        ["epoch", "lr", "mean_loss", "inst_disc_acc"],
        [(m["epoch"], m["lr"], m["mean_loss"], m["inst_disc_acc"]) for m in metrics],
    )
    write_csv(
        out / "timings.csv",
        ["epoch", "wall_seconds"],
        [(m["epoch"], m["wall_seconds"]) for m in metrics],
    )
    render_training_curve(metrics, out / "training.svg")
    meta = {
        "config": open(out / "config.resolved.cfg", encoding="utf-8").read(),
        "epochs_run": len(metrics),
        "rng_states": getattr(state, "rng_states", None) or {},
    }
    save_checkpoint(out / "checkpoint.ckpt", training_state_arrays(state), meta=meta)
    return state, metrics


def load_pretrained(cfg: RunConfig, checkpoint_path) -> ContrastiveEncoder:
    """Rebuild the query encoder from a training checkpoint."""
    arrays, _ = load_checkpoint(checkpoint_path)
    model = ContrastiveEncoder(cfg.encoder_config(), Rng(0))
    query_arrays = {
        name[len("query."):]: arr for name, arr in arrays.items() if name.startswith("query.")
    }
    load_state_arrays(model, query_arrays)
    return model


def _test_transform(cfg: RunConfig, kind: str, rng: Rng):
    if kind == "none":
        return None
    choice = AugmentationChoice(kind)
    return lambda c: normalize(apply_augmentation(choice, c, rng), cfg.normalize_mode)


def run_probe(cfg: RunConfig, checkpoint_path, out_dir, test_transform: str = "none"):
    """The frozen-feature protocol: embed the training clouds, fit the MLP
    probe, evaluate on (optionally transformed) test clouds. Writes
    probe_metrics.csv and confusion.csv. Returns (accuracy, confusion)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = load_pretrained(cfg, checkpoint_path)
    fingerprint = encoder_fingerprint(model)
    train, test = build_datasets(cfg)
    e_train, y_train = extract_embeddings(model, train)
    transform = _test_transform(cfg, test_transform, Rng(cfg.seed).child("probe-test-transform"))
    e_test, y_test = extract_embeddings(model, test, transform)
    probe = train_probe(e_train, y_train, cfg.probe_config(), Rng(cfg.seed).child("probe"))
    accuracy, confusion = evaluate_probe(probe, e_test, y_test)
    if encoder_fingerprint(model) != fingerprint:
        raise ContractError("probe training mutated the frozen encoder")
    write_csv(
        out / "probe_metrics.csv",
        ["accuracy", "chosen_lr", "val_accuracy", "test_transform"],
        [(accuracy, probe.chosen_lr, probe.val_accuracy, test_transform)],
    )
    write_csv(
        out / "confusion.csv",
        ["truth\\pred"] + list(probe.classes),
        [(cls,) + tuple(int(v) for v in row) for cls, row in zip(probe.classes, confusion)],
    )
    return accuracy, confusion


def run_robustness(cfg: RunConfig, checkpoint_path, variable: str, grid, out_dir):
    """Robustness sweep for one variation; writes CSV plus an SVG chart."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = load_pretrained(cfg, checkpoint_path)
    train, test = build_datasets(cfg)
    rng = Rng(cfg.seed).child(f"robustness-{variable}")
    curve = robustness_sweep(
        model, variable, grid, train, test, cfg.probe_config(), rng, cfg.normalize_mode
    )
    write_csv(out / f"sweep_{variable}.csv", ["level", "accuracy", "seed"],
              [(lv, acc, cfg.seed) for lv, acc in curve])
    render_sweep([lv for lv, _ in curve], [acc for _, acc in curve],
                 variable, out / f"sweep_{variable}.svg")
    return curve


def run_sensitivity(cfg: RunConfig, variable: str, grid, out_dir):
    """Full pretrain+probe per grid value, seeds held fixed; CSV + SVG."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def run_point(var, value):
        if var == "sigma":
            aug = (f"jitter(sigma={value})",)
        else:
            aug = (f"rip(delta={value},N=1000,T=3)",)
        sub = replace(cfg, aug=aug)
        train, test = build_datasets(sub)
        state, _ = pretrain(
            train, sub.augmentation_spec(), sub.pretrain_config(),
            Rng(sub.seed).child("pretrain"),
        )
        e_train, y_train = extract_embeddings(state.query, train)
        e_test, y_test = extract_embeddings(state.query, test)
        probe = train_probe(e_train, y_train, sub.probe_config(), Rng(sub.seed).child("probe"))
        accuracy, _ = evaluate_probe(probe, e_test, y_test)
        return accuracy

    curve = sensitivity_sweep(variable, grid, run_point)
    write_csv(out / f"sensitivity_{variable}.csv", ["level", "accuracy", "seed"],
              [(lv, acc, cfg.seed) for lv, acc in curve])
    render_sweep([lv for lv, _ in curve], [acc for _, acc in curve],
                 variable, out / f"sensitivity_{variable}.svg")
    return curve


def run_sample_transform(kind: str, count: int, seed: int, out_dir,
                         shape: str = "torus", points: int = 1024):
    """Demo sampler: emits each sampled transform (matrix or field as CSV)
    and the transformed demo cloud as PLY plus an SVG rendering."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = Rng(seed)
    cloud = normalize(generate_synthetic(shape, None, points, rng.child("shape")))
    (out / "original.ply").write_bytes(write_ply(cloud))
    render_cloud_projections(cloud, out / "original.svg", title=f"original {shape}")
    written = ["original.ply", "original.svg"]
    for i in range(count):
        sub = rng.child(f"sample-{i}")
        stem = f"{kind}_{i:03d}"
        if kind == "orthogonal":
            linear = sample_uniform_orthogonal(3, sub)
            transformed = apply_linear(linear, cloud)
            _write_matrix_csv(out / f"{stem}.csv", linear.matrix)
        elif kind == "rip":
            linear = sample_rip(sub)
            transformed = apply_linear(linear, cloud)
            _write_matrix_csv(out / f"{stem}.csv", linear.matrix)
        elif kind in ("rot_y", "rot_any"):
            axis = "y" if kind == "rot_y" else "random"
            linear = sample_rotation(axis, 2.0 * np.pi, sub)
            transformed = apply_linear(linear, cloud)
            _write_matrix_csv(out / f"{stem}.csv", linear.matrix)
        elif kind == "smooth":
            field = sample_perturb_field(100, 0.02, bounding_box(cloud, 0.1), sub)
            transformed = apply_field(field, cloud)
            write_csv(
                out / f"{stem}.csv",
                ["cx", "cy", "cz", "nx", "ny", "nz"],
                [tuple(c) + tuple(d) for c, d in zip(field.control_points, field.displacements)],
            )
        elif kind == "jitter":
            transformed = apply_augmentation(AugmentationChoice("jitter"), cloud, sub)
        else:
            raise ParameterError(f"cannot demo augmentation kind {kind!r}")
        if (out / f"{stem}.csv").exists():
            written.append(f"{stem}.csv")
        (out / f"{stem}.ply").write_bytes(write_ply(transformed))
        render_cloud_projections(transformed, out / f"{stem}.svg", title=stem)
        written.extend([f"{stem}.ply", f"{stem}.svg"])
    return written


def _write_matrix_csv(path, matrix: np.ndarray):
    write_csv(path, [f"c{j}" for j in range(matrix.shape[1])],
              [tuple(row) for row in matrix])
