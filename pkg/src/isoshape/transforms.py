"""Transformation samplers: uniform orthogonal maps, random RIP maps, smooth
perturbation fields, baseline rotations/jitter, and the stochastic
augmentation policy used to build training views.
"""

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ContractError,
    DegenerateInputError,
    ParameterError,
    RejectionBudgetError,
)
from .geometry import PointCloud, bounding_box
from .numkit import Rng, gaussian_matrix, qr_haar, spectral_norm

AUGMENTATION_KINDS = ("orthogonal", "rip", "smooth", "jitter", "rot_y", "rot_any", "none")


@dataclass(frozen=True)
class LinearMap:
    """A dense linear transform tagged with its family.

    delta is the spectral deviation actually satisfied, sigma(Q^T Q - I),
    recorded for "rip" maps. attempts counts rejection-sampler candidates.
    Family invariants are re-checked at construction.
    """

    matrix: np.ndarray
    family: str
    delta: float | None = None
    attempts: int = 1

    def __post_init__(self):
        m = np.ascontiguousarray(self.matrix, dtype=np.float64)
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)
        gram_err = m.T @ m - np.eye(m.shape[1])
        if self.family == "orthogonal":
            if np.linalg.norm(gram_err) >= 1e-8:
                raise ContractError("orthogonal map fails Q^T Q = I within 1e-8")
        elif self.family == "rip":
            if self.delta is None:
                raise ContractError("rip map must record its satisfied delta")
            if spectral_norm(gram_err) > self.delta + 1e-12:
                raise ContractError("rip map violates its recorded spectral bound")
        elif self.family in ("rotation_y", "rotation_axis"):
            if np.linalg.norm(gram_err) >= 1e-8:
                raise ContractError("rotation is not orthogonal within 1e-8")
            if abs(np.linalg.det(m) - 1.0) > 1e-10:
                raise ContractError("rotation must have determinant +1")
        else:
            raise ParameterError(f"unknown linear-map family {self.family!r}")


def sample_uniform_orthogonal(n: int, rng: Rng) -> LinearMap:
    """Haar-uniform orthogonal matrix: QR of a standard-Gaussian matrix with
    the sign of diag(R) corrected to positive."""
    if n < 1:
        raise ParameterError(f"need n >= 1, got {n}")
    while True:
        try:
            q, _ = qr_haar(gaussian_matrix(n, n, 0.0, 1.0, rng))
            return LinearMap(q, "orthogonal")
        except DegenerateInputError:
            continue  # probability-zero rank deficiency: redraw


def rip_accepts(q: np.ndarray, delta: float) -> tuple[bool, float]:
    """Spectral acceptance test sigma(Q^T Q - I) <= delta; returns the
    decision and the measured deviation."""
    q = np.asarray(q, dtype=np.float64)
    dev = spectral_norm(q.T @ q - np.eye(q.shape[1]))
    return dev <= delta, dev


def sample_rip(
    rng: Rng,
    n: int = 3,
    N: int = 1000,
    T: int = 3,
    delta: float = 0.9,
    max_tries: int = 10_000,
) -> LinearMap:
    """Rejection-sample an n x T matrix satisfying sigma(Q^T Q - I) <= delta.

    Each candidate draws an n x N matrix with N(0, 1/n) entries and keeps T
    columns chosen without replacement. The accepted map records the measured
    spectral deviation in `delta` and the candidate count in `attempts`.
    """
    if not 0.0 < delta < 1.0:
        raise ParameterError(f"delta must lie in (0, 1), got {delta}")
    if not 0 < T <= N:
        raise ParameterError(f"need 0 < T <= N, got T={T}, N={N}")
    if max_tries < 1:
        raise ParameterError("max_tries must be >= 1")
    std = math.sqrt(1.0 / n)
    best_dev = math.inf
    for attempt in range(1, max_tries + 1):
        a = gaussian_matrix(n, N, 0.0, std, rng)
        cols = rng.choice_without_replacement(N, T)
        q = a[:, np.sort(cols)]
        ok, dev = rip_accepts(q, delta)
        best_dev = min(best_dev, dev)
        if ok:
            return LinearMap(q, "rip", delta=dev, attempts=attempt)
    raise RejectionBudgetError(
        f"no candidate satisfied delta={delta} in {max_tries} tries "
        f"(acceptance rate 0.0, best deviation {best_dev:.4f})"
    )


def rotation_about(axis, angle: float) -> np.ndarray:
    """Right-handed rotation matrix about a 3-vector axis (Rodrigues)."""
    axis = np.asarray(axis, dtype=np.float64)
    norm = float(np.linalg.norm(axis))
    if norm < 1e-12:
        raise ParameterError("rotation axis must be nonzero")
    x, y, z = axis / norm
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def fixed_axiswise_rotation(angle: float) -> np.ndarray:
    """Composition of rotations by the same fixed angle about x, then y, then
    z; identity at angle 0. Used by the rotation robustness sweep."""
    if angle == 0.0:
        return np.eye(3)
    rx = rotation_about([1.0, 0.0, 0.0], angle)
    ry = rotation_about([0.0, 1.0, 0.0], angle)
    rz = rotation_about([0.0, 0.0, 1.0], angle)
    return rz @ ry @ rx


def sample_rotation(axis, max_angle: float, rng: Rng) -> LinearMap:
    """Rotation by an angle uniform on [0, max_angle) about the y axis
    ("y"), a uniformly random axis ("random"), or an explicit 3-vector."""
    if not 0.0 <= max_angle <= 2.0 * math.pi:
        raise ParameterError(f"max_angle must lie in [0, 2*pi], got {max_angle}")
    if isinstance(axis, str):
        if axis == "y":
            vec, family = np.array([0.0, 1.0, 0.0]), "rotation_y"
        elif axis == "random":
            vec = rng.normal(size=3)
            while float(np.linalg.norm(vec)) < 1e-8:
                vec = rng.normal(size=3)
            family = "rotation_axis"
        else:
            raise ParameterError(f"unknown rotation axis {axis!r}")
    else:
        vec, family = np.asarray(axis, dtype=np.float64), "rotation_axis"
    angle = rng.uniform(low=0.0, high=max_angle) if max_angle > 0.0 else 0.0
    return LinearMap(rotation_about(vec, angle), family)


def apply_linear(linear: LinearMap, cloud: PointCloud) -> PointCloud:
    """Map every point p to Q p (column-vector convention)."""
    if linear.matrix.shape != (3, 3):
        raise ContractError(f"need a 3x3 map for 3-D clouds, got {linear.matrix.shape}")
    return cloud.with_points(cloud.points @ linear.matrix.T)


# ---------------------------------------------------------------------------
# Smooth perturbation fields
# ---------------------------------------------------------------------------

def _kernel_matrix(kind: str, width: float, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d2 = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2)
    if kind == "gaussian_rbf":
        return np.exp(-d2 / (width * width))
    if kind == "thin_plate":
        with np.errstate(divide="ignore", invalid="ignore"):
            out = 0.5 * d2 * np.log(d2)  # r^2 log r written via squared distance
        out[d2 == 0.0] = 0.0
        return out
    raise ParameterError(f"unknown kernel {kind!r}")


@dataclass(frozen=True)
class PerturbField:
    """Smooth displacement field: RBF interpolation of Gaussian displacement
    values at scattered control points. Exact at the control points."""

    control_points: np.ndarray
    displacements: np.ndarray
    kernel: str = "gaussian_rbf"
    width: float = 0.5
    sigma: float = 0.0
    weights: np.ndarray = field(repr=False, default=None)

    def evaluate(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return _kernel_matrix(self.kernel, self.width, pts, self.control_points) @ self.weights


def sample_perturb_field(
    P: int,
    sigma: float,
    domain: tuple,
    rng: Rng,
    kernel: str = "gaussian_rbf",
    width: float = 0.5,
    placement: str = "uniform",
    ridge: float = 1e-10,
    max_retries: int = 5,
) -> PerturbField:
    """Sample control points in the domain box, draw 3P displacement values
    from N(0, sigma^2), and solve per-axis RBF weights for exact
    interpolation. Near-singular systems are retried with fresh points.
    """
    if P < 1:
        raise ParameterError(f"need P >= 1, got {P}")
    if sigma < 0:
        raise ParameterError(f"sigma must be >= 0, got {sigma}")
    if width <= 0:
        raise ParameterError(f"width must be > 0, got {width}")
    lo = np.asarray(domain[0], dtype=np.float64)
    hi = np.asarray(domain[1], dtype=np.float64)
    for _ in range(max_retries):
        if placement == "uniform":
            ctrl = lo + (hi - lo) * rng.uniform(size=(P, 3))
        elif placement == "gaussian":
            # isotropic Gaussian alternative: centered in the box, std a
            # quarter of the mean extent so points concentrate on the shape
            std = float(np.mean(hi - lo)) / 4.0
            ctrl = 0.5 * (lo + hi) + rng.normal(size=(P, 3)) * std
        else:
            raise ParameterError(f"unknown placement {placement!r}")
        disp = rng.normal(size=(P, 3)) * sigma
        k = _kernel_matrix(kernel, width, ctrl, ctrl)
        try:
            weights = np.linalg.solve(k + ridge * np.eye(P), disp)
        except np.linalg.LinAlgError:
            continue
        if np.max(np.abs(k @ weights - disp)) <= 1e-8:
            return PerturbField(ctrl, disp, kernel, width, sigma, weights)
    raise DegenerateInputError(
        f"could not build an exact interpolant after {max_retries} attempts"
    )


def apply_field(perturb: PerturbField, cloud: PointCloud) -> PointCloud:
    """Translate every point by the field value at that point."""
    return cloud.with_points(cloud.points + perturb.evaluate(cloud.points))


def gaussian_jitter(cloud: PointCloud, sigma: float, rng: Rng) -> PointCloud:
    """Independent N(0, sigma^2) noise on every coordinate."""
    if sigma < 0:
        raise ParameterError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0.0:
        return cloud
    return cloud.with_points(cloud.points + rng.normal(size=cloud.points.shape) * sigma)


# ---------------------------------------------------------------------------
# Augmentation specs and the per-minibatch policy
# ---------------------------------------------------------------------------

_AUG_PATTERN = re.compile(r"^([a-z_]+)(?:\((.*)\))?$")


@dataclass(frozen=True)
class AugmentationChoice:
    kind: str
    params: tuple = ()  # sorted (name, value) pairs

    def param_dict(self) -> dict:
        return dict(self.params)


@dataclass(frozen=True)
class AugmentationSpec:
    """Nonempty list of augmentation kinds, chosen uniformly per mini-batch."""

    choices: tuple

    def __post_init__(self):
        if not self.choices:
            raise ContractError("augmentation spec must be nonempty")

    @classmethod
    def from_strings(cls, specs) -> "AugmentationSpec":
        return cls(tuple(parse_augmentation(s) for s in specs))


def parse_augmentation(text: str) -> AugmentationChoice:
    """Parse "kind" or "kind(a=1,b=2.5)" into an AugmentationChoice."""
    m = _AUG_PATTERN.match(text.strip())
    if not m:
        raise ParameterError(f"bad augmentation spec {text!r}")
    kind, arglist = m.group(1), m.group(2)
    if kind not in AUGMENTATION_KINDS:
        raise ParameterError(f"unknown augmentation kind {kind!r}")
    params = {}
    if arglist:
        for item in arglist.split(","):
            name, _, value = item.partition("=")
            name = name.strip()
            if not name or not value:
                raise ParameterError(f"bad augmentation parameter {item!r} in {text!r}")
            try:
                params[name] = int(value)
            except ValueError:
                try:
                    params[name] = float(value)
                except ValueError:
                    params[name] = value.strip()
    return AugmentationChoice(kind, tuple(sorted(params.items())))


def format_augmentation(choice: AugmentationChoice) -> str:
    if not choice.params:
        return choice.kind
    args = ",".join(f"{k}={v}" for k, v in choice.params)
    return f"{choice.kind}({args})"


def apply_augmentation(choice: AugmentationChoice, cloud: PointCloud, rng: Rng) -> PointCloud:
    """Apply one augmentation kind with fresh random parameters."""
    kind, p = choice.kind, choice.param_dict()
    if kind == "none":
        return cloud
    if kind == "orthogonal":
        return apply_linear(sample_uniform_orthogonal(3, rng), cloud)
    if kind == "rip":
        linear = sample_rip(
            rng,
            n=3,
            N=int(p.get("N", 1000)),
            T=int(p.get("T", 3)),
            delta=float(p.get("delta", 0.9)),
            max_tries=int(p.get("max_tries", 10_000)),
        )
        return apply_linear(linear, cloud)
    if kind == "smooth":
        domain = bounding_box(cloud, inflate=0.1)
        perturb = sample_perturb_field(
            P=int(p.get("P", 100)),
            sigma=float(p.get("sigma", 0.02)),
            domain=domain,
            rng=rng,
            kernel=str(p.get("kernel", "gaussian_rbf")),
            width=float(p.get("width", 0.5)),
            placement=str(p.get("placement", "uniform")),
        )
        return apply_field(perturb, cloud)
    if kind == "jitter":
        return gaussian_jitter(cloud, float(p.get("sigma", 0.02)), rng)
    if kind == "rot_y":
        return apply_linear(sample_rotation("y", float(p.get("max_angle", 2.0 * math.pi)), rng), cloud)
    if kind == "rot_any":
        return apply_linear(sample_rotation("random", float(p.get("max_angle", 2.0 * math.pi)), rng), cloud)
    raise ParameterError(f"unknown augmentation kind {kind!r}")


def draw_view(spec: AugmentationSpec, batch, rng: Rng):
    """One augmentation kind uniformly for the whole mini-batch, fresh random
    parameters per cloud. Returns (views, chosen kind)."""
    if not batch:
        raise ContractError("batch must be nonempty")
    choice = spec.choices[rng.integers(len(spec.choices))]
    return [apply_augmentation(choice, cloud, rng) for cloud in batch], choice.kind


def draw_view_pair(spec: AugmentationSpec, batch, rng: Rng, independent_kinds: bool = False):
    """Query/key view pair. By default both views share one kind drawn for
    the mini-batch (with independent parameters); independent_kinds draws the
    two kinds separately."""
    if not batch:
        raise ContractError("batch must be nonempty")
    if independent_kinds:
        views_q, kind_q = draw_view(spec, batch, rng)
        views_k, kind_k = draw_view(spec, batch, rng)
        return views_q, views_k, kind_q, kind_k
    choice = spec.choices[rng.integers(len(spec.choices))]
    views_q = [apply_augmentation(choice, cloud, rng) for cloud in batch]
    views_k = [apply_augmentation(choice, cloud, rng) for cloud in batch]
    return views_q, views_k, choice.kind, choice.kind
