"""Run configuration: a flat, diffable "key = value" text format.

Every run writes its fully-resolved config (defaults expanded) next to its
outputs; a run is reproducible from that file alone. parse and serialize
round-trip exactly.
"""

import ast
from dataclasses import dataclass, fields, replace

from .contrastive import PretrainConfig
from .errors import ParameterError
from .evaluation import ProbeConfig
from .nn import EncoderConfig
from .transforms import AugmentationSpec


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    dataset: str = "synthetic"  # "synthetic" or a directory of OFF/XYZ/CSV files
    classes: tuple = ("sphere", "box", "cylinder", "torus")
    train_per_class: int = 50
    test_per_class: int = 25
    points_per_cloud: int = 2048  # desk profile uses 256
    normalize_mode: str = "unit_sphere"
    test_fraction: float = 0.25  # directory datasets only
    encoder_profile: str = "full"
    latent_dim: int = 128
    aug: tuple = ("orthogonal", "rip(delta=0.9,N=1000,T=3)")
    batch_size: int = 64
    base_lr: float = 0.075
    weight_decay: float = 0.0001
    sgd_momentum: float = 0.9
    tau: float = 0.02
    key_momentum: float = 0.999
    queue_size: int = 1024
    max_epochs: int = 800
    converge_window: int = 20
    converge_eps: float = 0.001
    renormalize_views: bool = True
    independent_kinds: bool = False
    checkpoint_every: int = 0
    probe_hidden: int = 1000
    probe_batch_size: int = 128
    probe_lrs: tuple = (0.01, 0.001)
    probe_epochs: int = 200
    probe_val_fraction: float = 0.2
    probe_patience: int = 25

    def __post_init__(self):
        for name in ("classes", "aug", "probe_lrs"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    def encoder_config(self) -> EncoderConfig:
        base = EncoderConfig.profile(self.encoder_profile)
        return replace(base, latent_dim=self.latent_dim)

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(
            encoder=self.encoder_config(),
            max_epochs=self.max_epochs,
            batch_size=self.batch_size,
            base_lr=self.base_lr,
            weight_decay=self.weight_decay,
            sgd_momentum=self.sgd_momentum,
            tau=self.tau,
            key_momentum=self.key_momentum,
            queue_size=self.queue_size,
            renormalize_views=self.renormalize_views,
            normalize_mode=self.normalize_mode,
            converge_window=self.converge_window,
            converge_eps=self.converge_eps,
            independent_kinds=self.independent_kinds,
        )

    def probe_config(self) -> ProbeConfig:
        return ProbeConfig(
            hidden=self.probe_hidden,
            batch_size=self.probe_batch_size,
            learning_rates=self.probe_lrs,
            epochs=self.probe_epochs,
            val_fraction=self.probe_val_fraction,
            patience=self.probe_patience,
        )

    def augmentation_spec(self) -> AugmentationSpec:
        return AugmentationSpec.from_strings(self.aug)


_FIELD_TYPES = {f.name: f for f in fields(RunConfig)}


def serialize_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            rendered = "[" + ", ".join(_render_scalar(v) for v in value) + "]"
        else:
            rendered = _render_scalar(value)
        lines.append(f"{f.name} = {rendered}")
    return "\n".join(lines) + "\n"


def _render_scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return repr(value)
    return repr(value)


def parse_config(text: str) -> RunConfig:
    """Parse "key = value" lines; '#' starts a comment; unknown keys are an
    error, missing keys take their defaults."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, rendered = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ParameterError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if key not in _FIELD_TYPES:
            raise ParameterError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _parse_value(rendered.strip(), lineno)
    return RunConfig(**values)


def _parse_value(rendered: str, lineno: int):
    low = rendered.lower()
    if low == "true":
        return True
    if low == "false":
        return False
    try:
        value = ast.literal_eval(rendered)
    except (ValueError, SyntaxError):
        return rendered  # bare string
    if isinstance(value, list):
        return tuple(value)
    return value


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def save_config(cfg: RunConfig, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_config(cfg))
