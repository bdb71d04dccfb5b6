"""Point-cloud encoder and training primitives.

The encoder is a per-point MLP stack with an input-transform regressor whose
output is added to the identity, global max pooling, and an optional
two-layer projection head with L2-normalized output. Train-mode batch
statistics are computed with a sorted reduction so the global feature is
exactly invariant under any permutation of the input points.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, l2_normalize
from .errors import ContractError, DimensionError, ParameterError
from .numkit import Rng

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
CHECKPOINT_MAGIC = b"ISOSHAPECKPT1\n"


@dataclass(frozen=True)
class EncoderConfig:
    """Layer widths. "reduced" divides the full widths by 4 for desk-scale
    runs; the 128-wide contrastive latent is a hyperparameter, not a width,
    and stays fixed across profiles."""

    conv_widths: tuple = (64, 128, 1024)
    tnet_hidden: tuple = (512, 256)
    head_hidden: int = 1024
    latent_dim: int = 128

    @property
    def feature_dim(self) -> int:
        return self.conv_widths[-1]

    @classmethod
    def profile(cls, name: str) -> "EncoderConfig":
        if name == "full":
            return cls()
        if name == "reduced":
            return cls(conv_widths=(16, 32, 256), tnet_hidden=(128, 64), head_hidden=256)
        raise ParameterError(f"unknown encoder profile {name!r}")

    @classmethod
    def scaled(cls, divisor: int, latent_dim: int | None = None) -> "EncoderConfig":
        base = cls()
        return cls(
            conv_widths=tuple(w // divisor for w in base.conv_widths),
            tnet_hidden=tuple(w // divisor for w in base.tnet_hidden),
            head_hidden=base.head_hidden // divisor,
            latent_dim=latent_dim if latent_dim is not None else base.latent_dim,
        )


class Linear:
    """Dense layer y = x W + b, init uniform(-1/sqrt(fan_in), +1/sqrt(fan_in))."""

    def __init__(self, in_dim: int, out_dim: int, rng: Rng, zero_init: bool = False):
        if zero_init:
            w = np.zeros((in_dim, out_dim))
            b = np.zeros(out_dim)
        else:
            bound = 1.0 / math.sqrt(in_dim)
            w = rng.uniform(size=(in_dim, out_dim), low=-bound, high=bound)
            b = rng.uniform(size=out_dim, low=-bound, high=bound)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(b, requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def named_parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def named_buffers(self):
        return []


class BatchNorm:
    """Per-channel batch normalization over the leading axis.

    Train mode normalizes by the batch mean and biased variance (eps 1e-5)
    and updates running statistics with momentum 0.9; eval mode applies the
    running statistics. Batch statistics are accumulated in sorted order, so
    they are exactly invariant under row permutations.
    """

    def __init__(self, dim: int):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)

    def __call__(self, x: Tensor, mode: str, update_running: bool = True) -> Tensor:
        if mode == "train":
            if x.data.shape[0] < 2:
                raise ContractError("train-mode batch norm needs >= 2 rows")
            stats = x.sorted_moments()
            mean, var = stats[0], stats[1]
            if update_running:
                self.running_mean = BN_MOMENTUM * self.running_mean + (1.0 - BN_MOMENTUM) * mean.data
                self.running_var = BN_MOMENTUM * self.running_var + (1.0 - BN_MOMENTUM) * var.data
            scale = self.gamma / (var + BN_EPS).sqrt()
            shift = self.beta - mean * scale
        elif mode == "eval":
            scale = self.gamma / Tensor(np.sqrt(self.running_var + BN_EPS))
            shift = self.beta - Tensor(self.running_mean) * scale
        else:
            raise ParameterError(f"unknown mode {mode!r}")
        return x * scale + shift

    def named_parameters(self):
        return [("gamma", self.gamma), ("beta", self.beta)]

    def named_buffers(self):
        return [("running_mean", self.running_mean), ("running_var", self.running_var)]

    def set_buffer(self, name: str, value: np.ndarray):
        if name not in ("running_mean", "running_var"):
            raise ContractError(f"unknown buffer {name!r}")
        setattr(self, name, np.array(value, dtype=np.float64))


class PointNetEncoder:
    """Per-point 3->c1->c2->c3 stack with an input-transform regressor.

    The regressor shares the conv widths, pools over points, passes through
    two normalized linear layers, and regresses 9 values from a
    zero-initialized layer; the reshaped output is added to the identity
    before the main block, so the input transform starts exactly at I.
    """

    def __init__(self, config: EncoderConfig, rng: Rng):
        self.config = config
        c1, c2, c3 = config.conv_widths
        t1, t2 = config.tnet_hidden
        layout = []

        def add(name, module):
            layout.append((name, module))
            return module

        self.tnet_convs = []
        widths = [3, c1, c2, c3]
        for i in range(3):
            lin = add(f"tnet_conv{i}", Linear(widths[i], widths[i + 1], rng))
            bn = add(f"tnet_conv{i}_bn", BatchNorm(widths[i + 1]))
            self.tnet_convs.append((lin, bn))
        self.tnet_fcs = []
        fc_widths = [c3, t1, t2]
        for i in range(2):
            lin = add(f"tnet_fc{i}", Linear(fc_widths[i], fc_widths[i + 1], rng))
            bn = add(f"tnet_fc{i}_bn", BatchNorm(fc_widths[i + 1]))
            self.tnet_fcs.append((lin, bn))
        self.tnet_out = add("tnet_out", Linear(t2, 9, rng, zero_init=True))
        self.convs = []
        for i in range(3):
            lin = add(f"conv{i}", Linear(widths[i], widths[i + 1], rng))
            bn = add(f"conv{i}_bn", BatchNorm(widths[i + 1]))
            self.convs.append((lin, bn))
        self._layout = layout

    def forward(self, points, mode: str = "train", update_running: bool = True):
        """points (B, N, 3) -> (feature (B, c3), trans (B, 3, 3))."""
        x = points if isinstance(points, Tensor) else Tensor(np.asarray(points, dtype=np.float64))
        if x.data.ndim != 3 or x.data.shape[2] != 3:
            raise DimensionError(f"expected (B, N, 3) input, got {x.data.shape}")
        b, n, _ = x.data.shape
        if mode == "train" and b < 2:
            raise ContractError("train mode needs batch size >= 2")
        if n < 2:
            raise ContractError("need >= 2 points per cloud")
        c3 = self.config.conv_widths[-1]

        h = x.reshape((b * n, 3))
        for lin, bn in self.tnet_convs:
            h = bn(lin(h), mode, update_running=update_running).relu()
        g = h.reshape((b, n, c3)).max(axis=1)
        for lin, bn in self.tnet_fcs:
            g = bn(lin(g), mode, update_running=update_running).relu()
        trans = self.tnet_out(g).reshape((b, 3, 3)) + Tensor(np.eye(3))

        h = x.matmul(trans).reshape((b * n, 3))
        for lin, bn in self.convs:
            h = bn(lin(h), mode, update_running=update_running).relu()
        feature = h.reshape((b, n, c3)).max(axis=1)
        return feature, trans

    def named_parameters(self):
        return [
            (f"{name}.{pn}", p)
            for name, mod in self._layout
            for pn, p in mod.named_parameters()
        ]

    def named_buffers(self):
        return [
            (f"{name}.{bn}", buf)
            for name, mod in self._layout
            for bn, buf in mod.named_buffers()
        ]

    def modules(self):
        return list(self._layout)


class ProjectionHead:
    """Two-layer head ending in an L2-normalized latent vector; discarded
    after pretraining, when the pooled feature is used directly."""

    def __init__(self, config: EncoderConfig, rng: Rng):
        self.fc1 = Linear(config.feature_dim, config.head_hidden, rng)
        self.fc2 = Linear(config.head_hidden, config.latent_dim, rng)

    def forward(self, feature: Tensor) -> Tensor:
        return l2_normalize(self.fc2(self.fc1(feature).relu()))

    def named_parameters(self):
        return [(f"fc1.{n}", p) for n, p in self.fc1.named_parameters()] + [
            (f"fc2.{n}", p) for n, p in self.fc2.named_parameters()
        ]

    def named_buffers(self):
        return []

    def modules(self):
        return [("fc1", self.fc1), ("fc2", self.fc2)]


class ContrastiveEncoder:
    """Encoder plus projection head; forward returns (latent, feature, trans)."""

    def __init__(self, config: EncoderConfig, rng: Rng):
        self.config = config
        self.encoder = PointNetEncoder(config, rng)
        self.head = ProjectionHead(config, rng)

    def forward(self, points, mode: str = "train", update_running: bool = True):
        feature, trans = self.encoder.forward(points, mode, update_running)
        return self.head.forward(feature), feature, trans

    def named_parameters(self):
        return [(f"encoder.{n}", p) for n, p in self.encoder.named_parameters()] + [
            (f"head.{n}", p) for n, p in self.head.named_parameters()
        ]

    def named_buffers(self):
        return [(f"encoder.{n}", b) for n, b in self.encoder.named_buffers()]

    def modules(self):
        return [(f"encoder.{n}", m) for n, m in self.encoder.modules()] + [
            (f"head.{n}", m) for n, m in self.head.modules()
        ]


class MLP:
    """Plain ReLU MLP used by the classification probe."""

    def __init__(self, dims, rng: Rng):
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = layer(x).relu()
        return self.layers[-1](x)

    def named_parameters(self):
        return [
            (f"fc{i}.{n}", p)
            for i, layer in enumerate(self.layers)
            for n, p in layer.named_parameters()
        ]

    def named_buffers(self):
        return []

    def modules(self):
        return [(f"fc{i}", layer) for i, layer in enumerate(self.layers)]


# ---------------------------------------------------------------------------
# State flattening, momentum mixing, checkpoints
# ---------------------------------------------------------------------------

def state_arrays(model) -> dict:
    """Flat name -> array view of parameters and running-stat buffers."""
    out = {name: p.data for name, p in model.named_parameters()}
    out.update({name: buf for name, buf in model.named_buffers()})
    return out


def load_state_arrays(model, arrays: dict):
    """Assign parameters and buffers by name; shapes must match exactly."""
    for name, p in model.named_parameters():
        src = arrays[name]
        if src.shape != p.data.shape:
            raise ContractError(f"shape mismatch for {name}: {src.shape} vs {p.data.shape}")
        p.data = np.array(src, dtype=np.float64)
    for prefix, module in model.modules():
        for bname, _ in module.named_buffers():
            module.set_buffer(bname, arrays[f"{prefix}.{bname}"])


def clone_model(model) -> "ContrastiveEncoder":
    twin = ContrastiveEncoder(model.config, Rng(0))
    load_state_arrays(twin, state_arrays(model))
    return twin


def momentum_update(key_model, query_model, m: float):
    """theta_key <- m * theta_key + (1 - m) * theta_query for every parameter
    and every running statistic."""
    if not 0.0 <= m <= 1.0:
        raise ParameterError(f"momentum must lie in [0, 1], got {m}")
    if m == 1.0:
        return
    key_state = state_arrays(key_model)
    query_state = state_arrays(query_model)
    if key_state.keys() != query_state.keys():
        raise ContractError("key/query parameter sets do not match")
    if m == 0.0:
        load_state_arrays(key_model, query_state)
        return
    mixed = {}
    for name, k in key_state.items():
        q = query_state[name]
        if k.shape != q.shape:
            raise ContractError(f"shape mismatch for {name}")
        mixed[name] = m * k + (1.0 - m) * q
    load_state_arrays(key_model, mixed)


class SGD:
    """SGD with momentum and weight decay:
    v <- momentum * v + grad + weight_decay * theta; theta <- theta - lr * v."""

    def __init__(self, params, lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
        if lr <= 0:
            raise ParameterError(f"lr must be > 0, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ParameterError(f"momentum must lie in [0, 1), got {momentum}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocities = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        for p, v in zip(self.params, self.velocities):
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            if grad.shape != p.data.shape:
                raise ContractError("gradient/parameter shape mismatch")
            v *= self.momentum
            v += grad
            if self.weight_decay:
                v += self.weight_decay * p.data
            p.data = p.data - lr * v


def cosine_lr(epoch: int, total_epochs: int, base_lr: float) -> float:
    """base_lr * (1 + cos(pi * epoch / total_epochs)) / 2."""
    if not 0 <= epoch < total_epochs:
        raise ContractError(f"epoch {epoch} outside [0, {total_epochs})")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def save_checkpoint(path, arrays: dict, meta: dict | None = None):
    """Container file: magic, manifest (name/shape/byte offset per entry),
    then raw little-endian float64 values. Round-trips bit-exactly."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += len(blobs[-1])
    manifest = json.dumps(
        {"version": 1, "meta": meta or {}, "entries": entries}, sort_keys=True
    ).encode("ascii")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(manifest).to_bytes(8, "little"))
        fh.write(manifest)
        fh.write(b"".join(blobs))


def load_checkpoint(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ContractError("not a checkpoint file (bad magic)")
        size = int.from_bytes(fh.read(8), "little")
        manifest = json.loads(fh.read(size).decode("ascii"))
        blob = fh.read()
    arrays = {}
    for entry in manifest["entries"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=start).reshape(shape)
        arrays[entry["name"]] = arr.astype(np.float64)
    return arrays, manifest["meta"]
