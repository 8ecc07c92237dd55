"""Multi-task seq2seq disaggregator with 2-D multi-head self-attention.

Pipeline for one window of raw main-line readings ``(T, 3)``
(power, voltage, current):

1. standardize with training-split statistics
2. linear projection to ``hidden_size`` plus sinusoidal positions
3. encoder: ``n_layers`` pre-norm blocks (temporal MHA + feed-forward)
4. per-appliance decoder tracks ``(A, T, D)``
5. 2-D attention: temporal MHA inside each track, then MHA across the
   appliance axis at every time step, both residual
6. heads: softplus power (scaled to watts) and sigmoid ON probability

Training uses :mod:`nilmbench.autodiff` for gradients.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import config as cfg
from .metrics import ON_THRESHOLD

log = logging.getLogger(__name__)

BCE_EPS = 1e-7
STD_FLOOR = 1e-6
MICRO_BATCH_BUDGET = 4_000_000  # attention-matrix elements held per micro-batch


class ConfigError(ValueError):
    pass


class ShapeError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class AugmentationConfig:
    enabled: bool = True
    recombination_prob: float = 0.3
    time_shift_max: int = 8
    amplitude_jitter_sigma: float = 0.05

    def __post_init__(self):
        if not 0 <= self.recombination_prob <= 1:
            raise ConfigError("recombination_prob must be in [0, 1]")
        if self.time_shift_max < 0 or self.amplitude_jitter_sigma < 0:
            raise ConfigError("time_shift_max and amplitude_jitter_sigma must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    input_size: int = 3
    batch_size: int = 32
    learning_rate: float = 0.001
    hidden_size: int = 64
    dropout: float = 0.1
    seq_len: int = 864
    epochs: int = 5
    n_appliances: int = 4
    n_heads: int = 4
    n_layers: int = 2
    ff_size: int = 0          # 0 means 2 * hidden_size
    lambda_cls: float = 1.0
    on_threshold: float = ON_THRESHOLD
    seed: int = 0
    optimizer: str = "sgd"
    grid_interval: float = 5.0
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)

    def __post_init__(self):
        if isinstance(self.augmentation, dict):
            object.__setattr__(self, "augmentation", AugmentationConfig(**self.augmentation))
        if self.input_size != 3:
            raise ConfigError("input_size must be 3 (main power, voltage, current)")
        if self.seq_len <= 0:
            raise ConfigError("seq_len must be > 0")
        if not 0 <= self.dropout < 1:
            raise ConfigError("dropout must be in [0, 1)")
        if self.hidden_size <= 0 or self.n_heads <= 0 or self.hidden_size % self.n_heads:
            raise ConfigError(
                f"hidden_size {self.hidden_size} is not divisible by n_heads {self.n_heads}"
            )
        if self.n_appliances < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("n_appliances and batch_size must be >= 1, epochs >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("optimizer must be 'sgd' or 'adam'")
        if self.augmentation.time_shift_max >= self.seq_len:
            raise ConfigError("augmentation.time_shift_max must be < seq_len")

    @property
    def head_dim(self):
        return self.hidden_size // self.n_heads

    @property
    def ff_width(self):
        return self.ff_size or 2 * self.hidden_size

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, obj):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in obj.items() if k in names})

    def digest(self):
        return cfg.digest(self.to_json())


def load_train_config(path) -> TrainConfig:
    """``[train]`` keys mirror :class:`TrainConfig`; ``[augmentation]`` likewise."""
    parser = cfg.read_config(path)
    sec = parser["train"] if parser.has_section("train") else {}
    base = TrainConfig.__dataclass_fields__
    kwargs = {}
    for key, value in dict(sec).items():
        if key not in base or key == "augmentation":
            raise cfg.ConfigError(f"[train]: unknown key '{key}'")
        kwargs[key] = _coerce(base[key].type, value, key)
    if parser.has_section("augmentation"):
        aug = parser["augmentation"]
        afields = AugmentationConfig.__dataclass_fields__
        akw = {}
        for key, value in dict(aug).items():
            if key not in afields:
                raise cfg.ConfigError(f"[augmentation]: unknown key '{key}'")
            akw[key] = aug.getboolean(key) if key == "enabled" else _coerce(afields[key].type, value, key)
        kwargs["augmentation"] = AugmentationConfig(**akw)
    try:
        return TrainConfig(**kwargs)
    except ConfigError as exc:
        raise cfg.ConfigError(str(exc)) from exc


def _coerce(type_name, value, key):
    try:
        if type_name in ("int", int):
            return int(value)
        if type_name in ("float", float):
            return float(value)
        return value
    except ValueError as exc:
        raise cfg.ConfigError(f"key '{key}': {exc}") from exc


# ------------------------------------------------------------------ params


def param_shapes(config: TrainConfig) -> dict:
    D, A, F = config.hidden_size, config.n_appliances, config.ff_width
    shapes = {"in.W": (config.input_size, D), "in.b": (D,)}

    def attn(prefix):
        for m in ("q", "k", "v", "o"):
            shapes[f"{prefix}.W{m}"] = (D, D)
            shapes[f"{prefix}.b{m}"] = (D,)

    def norm(prefix):
        shapes[f"{prefix}.g"] = (D,)
        shapes[f"{prefix}.b"] = (D,)

    for layer in range(config.n_layers):
        p = f"enc{layer}"
        norm(f"{p}.ln1")
        attn(f"{p}.attn")
        norm(f"{p}.ln2")
        shapes[f"{p}.ff.W1"] = (D, F)
        shapes[f"{p}.ff.b1"] = (F,)
        shapes[f"{p}.ff.W2"] = (F, D)
        shapes[f"{p}.ff.b2"] = (D,)
    norm("enc.lnf")
    shapes["dec.emb"] = (A, 1, D)
    shapes["dec.W"] = (A, D, D)
    shapes["dec.b"] = (A, 1, D)
    norm("mda.time.ln")
    attn("mda.time.attn")
    norm("mda.app.ln")
    attn("mda.app.attn")
    norm("head.ln")
    shapes["head.reg.W"] = (A, D, 1)
    shapes["head.reg.b"] = (A, 1, 1)
    shapes["head.cls.W"] = (A, D, 1)
    shapes["head.cls.b"] = (A, 1, 1)
    return shapes


# parameters that live on the appliance axis (axis 0)
APPLIANCE_AXIS_PARAMS = ("dec.emb", "dec.W", "dec.b", "head.reg.W", "head.reg.b", "head.cls.W", "head.cls.b")


def _fan_in(name, shape):
    if name == "dec.emb":
        return shape[-1]
    return shape[-2] if len(shape) >= 2 else shape[0]


@dataclass
class ModelParams:
    config: TrainConfig
    weights: dict
    input_mean: np.ndarray
    input_std: np.ndarray
    output_scale: np.ndarray

    def __post_init__(self):
        expected = param_shapes(self.config)
        if set(expected) != set(self.weights):
            missing = sorted(set(expected) - set(self.weights))
            extra = sorted(set(self.weights) - set(expected))
            raise ShapeError(f"parameter names differ from config (missing {missing}, extra {extra})")
        for name, shape in expected.items():
            if tuple(self.weights[name].shape) != tuple(shape):
                raise ShapeError(f"{name}: shape {self.weights[name].shape}, config expects {shape}")
        self.weights = {k: self.weights[k] for k in expected}
        self.input_mean = np.asarray(self.input_mean, dtype=np.float64).reshape(self.config.input_size)
        self.input_std = np.asarray(self.input_std, dtype=np.float64).reshape(self.config.input_size)
        self.output_scale = np.asarray(self.output_scale, dtype=np.float64).reshape(self.config.n_appliances)
        if np.any(self.input_std <= 0):
            raise ShapeError("normalization sigmas must be > 0")
        if np.any(self.output_scale <= 0):
            raise ShapeError("output scales must be > 0")

    def copy(self):
        return ModelParams(
            self.config, {k: v.copy() for k, v in self.weights.items()},
            self.input_mean.copy(), self.input_std.copy(), self.output_scale.copy(),
        )

    def payload(self) -> bytes:
        return b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in self.weights.values())

    def digest(self) -> str:
        h = hashlib.sha256(self.payload())
        h.update(np.concatenate([self.input_mean, self.input_std, self.output_scale]).astype("<f8").tobytes())
        h.update(self.config.digest().encode())
        return h.hexdigest()[:16]

    def norm(self):
        return math.sqrt(sum(float(np.sum(v * v)) for v in self.weights.values()))

    def n_parameters(self):
        return sum(v.size for v in self.weights.values())

    def permute_appliances(self, order):
        """Copy with appliance tracks reordered (embeddings, decoder, heads, scales)."""
        order = list(order)
        w = {k: (v[order].copy() if k in APPLIANCE_AXIS_PARAMS else v.copy()) for k, v in self.weights.items()}
        return ModelParams(self.config, w, self.input_mean.copy(), self.input_std.copy(),
                           self.output_scale[order].copy())


def init_model(config: TrainConfig, input_mean=None, input_std=None, output_scale=None) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, unit norm gains."""
    rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])
    weights = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf == "g":
            weights[name] = np.ones(shape)
        elif leaf.startswith("b"):
            weights[name] = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(_fan_in(name, shape))
            weights[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(
        config, weights,
        np.zeros(config.input_size) if input_mean is None else input_mean,
        np.ones(config.input_size) if input_std is None else input_std,
        np.full(config.n_appliances, 50.0) if output_scale is None else output_scale,
    )


# ----------------------------------------------------------------- forward


def positional_encoding(T, D):
    pos = np.arange(T)[:, None]
    i = np.arange(D)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / D)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _layer_norm(x, P, prefix):
    return ad.layer_norm(x) * P[f"{prefix}.g"] + P[f"{prefix}.b"]


def _mha(x, P, prefix, n_heads):
    """Multi-head self-attention over axis 1 of ``x`` ``(N, L, D)``."""
    N, L, D = x.shape
    dh = D // n_heads

    def split(t):
        return t.reshape(N, L, n_heads, dh).transpose(0, 2, 1, 3)

    q = split((x @ P[f"{prefix}.Wq"] + P[f"{prefix}.bq"]) * (1.0 / math.sqrt(dh)))
    k = split(x @ P[f"{prefix}.Wk"] + P[f"{prefix}.bk"])
    v = split(x @ P[f"{prefix}.Wv"] + P[f"{prefix}.bv"])
    if q.requires_grad or k.requires_grad or v.requires_grad:
        att = ad.softmax(q @ k.transpose(0, 1, 3, 2), axis=-1)
        heads = att @ v
    else:
        heads = ad.Tensor(_attend(q.data, k.data, v.data))
    out = heads.transpose(0, 2, 1, 3).reshape(N, L, D)
    return out @ P[f"{prefix}.Wo"] + P[f"{prefix}.bo"]


def _attend(q, k, v):
    """Inference-only softmax attention. Normalizing after the value product
    divides an (L, dh) block instead of the (L, L) weight matrix."""
    s = q @ np.swapaxes(k, -1, -2)
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    return (s @ v) / s.sum(axis=-1, keepdims=True)


def two_d_attention(x, P, n_heads, drop, rng):
    """Temporal attention within each appliance track, then attention across
    appliances at each time step. ``x`` is ``(B, A, T, D)``."""
    B, A, T, D = x.shape
    y = x.reshape(B * A, T, D)
    y = y + ad.dropout(_mha(_layer_norm(y, P, "mda.time.ln"), P, "mda.time.attn", n_heads), drop, rng)
    z = y.reshape(B, A, T, D).transpose(0, 2, 1, 3).reshape(B * T, A, D)
    z = z + ad.dropout(_mha(_layer_norm(z, P, "mda.app.ln"), P, "mda.app.attn", n_heads), drop, rng)
    return z.reshape(B, T, A, D).transpose(0, 2, 1, 3)


def _graph(P, x_norm, params: ModelParams, train_mode, rng):
    c = params.config
    drop = c.dropout if train_mode else 0.0
    rng = rng if train_mode else None
    B, T, _ = x_norm.shape
    D, A = c.hidden_size, c.n_appliances
    h = ad.as_tensor(x_norm) @ P["in.W"] + P["in.b"] + positional_encoding(T, D)
    for layer in range(c.n_layers):
        p = f"enc{layer}"
        h = h + ad.dropout(_mha(_layer_norm(h, P, f"{p}.ln1"), P, f"{p}.attn", c.n_heads), drop, rng)
        f = ad.relu(_layer_norm(h, P, f"{p}.ln2") @ P[f"{p}.ff.W1"] + P[f"{p}.ff.b1"])
        h = h + ad.dropout(f @ P[f"{p}.ff.W2"] + P[f"{p}.ff.b2"], drop, rng)
    h = _layer_norm(h, P, "enc.lnf").reshape(B, 1, T, D)
    tracks = ad.relu(h @ P["dec.W"] + P["dec.b"]) + h + P["dec.emb"]
    tracks = two_d_attention(tracks, P, c.n_heads, drop, rng)
    tracks = _layer_norm(tracks, P, "head.ln")
    reg = (tracks @ P["head.reg.W"] + P["head.reg.b"]).reshape(B, A, T)
    cls = (tracks @ P["head.cls.W"] + P["head.cls.b"]).reshape(B, A, T)
    power = ad.softplus(reg) * params.output_scale.reshape(1, A, 1)
    return power, ad.sigmoid(cls)


def _check_window(params, window):
    c = params.config
    x = np.asarray(window, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    if x.ndim != 3:
        raise ShapeError(f"window must be (seq_len, 3) or (batch, seq_len, 3), got {x.shape}")
    if x.shape[1] != c.seq_len:
        raise ShapeError(f"seq_len dimension is {x.shape[1]}, model expects {c.seq_len}")
    if x.shape[2] != c.input_size:
        raise ShapeError(f"feature dimension is {x.shape[2]}, model expects {c.input_size}")
    return x, squeeze


def normalize(params, x):
    return (x - params.input_mean) / params.input_std


def forward(params: ModelParams, window, train_mode=False, rng=None):
    """Per-appliance power (watts) and ON probability, each ``(A, T)``
    (or ``(B, A, T)`` for a batch of windows). Inputs are raw units."""
    x, squeeze = _check_window(params, window)
    P = {k: ad.Tensor(v) for k, v in params.weights.items()}
    if train_mode and rng is None:
        rng = np.random.default_rng()
    power, prob = _graph(P, normalize(params, x), params, train_mode, rng)
    if squeeze:
        return power.data[0], prob.data[0]
    return power.data, prob.data


# -------------------------------------------------------------------- loss


def loss(pred_power, pred_prob, true_power, config: TrainConfig, scale):
    """MSE on power in units of ``scale`` + ``lambda_cls`` * BCE on ON labels.

    ``pred_*`` may be Tensors (for training) or arrays; returns a Tensor.
    """
    pred_power, pred_prob = ad.as_tensor(pred_power), ad.as_tensor(pred_prob)
    y = np.asarray(true_power, dtype=np.float64)
    if pred_power.shape != y.shape or pred_prob.shape != y.shape:
        raise ShapeError(f"prediction shape {pred_power.shape} vs target {y.shape}")
    inv = 1.0 / np.asarray(scale, dtype=np.float64).reshape(-1, 1)
    diff = (pred_power - y) * inv
    mse = ad.mean(diff * diff)
    return mse + config.lambda_cls * bce(pred_prob, y > config.on_threshold)


def bce(prob, labels):
    labels = np.asarray(labels, dtype=np.float64)
    p = ad.clip(ad.as_tensor(prob), BCE_EPS, 1.0 - BCE_EPS)
    ll = ad.log(p) * labels + ad.log(1.0 - p) * (1.0 - labels)
    return ad.mean(ll) * -1.0


# ---------------------------------------------------------------- training


@dataclass
class Batch:
    inputs: np.ndarray   # (B, T, 3) raw power, voltage, current
    targets: np.ndarray  # (B, A, T) watts

    def __len__(self):
        return self.inputs.shape[0]


class SGD:
    def __init__(self, lr):
        self.lr = lr

    def step(self, weights, grads):
        return {k: w - self.lr * grads[k] for k, w in weights.items()}


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, weights, grads):
        self.t += 1
        out = {}
        for k, w in weights.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m.get(k, 0.0) + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v.get(k, 0.0) + (1 - self.b2) * g * g
            mh = self.m[k] / (1 - self.b1 ** self.t)
            vh = self.v[k] / (1 - self.b2 ** self.t)
            out[k] = w - self.lr * mh / (np.sqrt(vh) + self.eps)
        return out


def make_optimizer(config: TrainConfig):
    return SGD(config.learning_rate) if config.optimizer == "sgd" else Adam(config.learning_rate)


def micro_batch_size(config: TrainConfig):
    per_window = config.n_appliances * config.n_heads * config.seq_len ** 2
    return max(1, min(config.batch_size, MICRO_BATCH_BUDGET // per_window))


def gradients(params: ModelParams, batch: Batch, rng=None, train_mode=True):
    """Batch loss and gradient of every weight, accumulated over micro-batches."""
    c = params.config
    x, _ = _check_window(params, batch.inputs)
    y = np.asarray(batch.targets, dtype=np.float64)
    if y.shape != (x.shape[0], c.n_appliances, c.seq_len):
        raise ShapeError(f"targets shape {y.shape}, expected {(x.shape[0], c.n_appliances, c.seq_len)}")
    P = {k: ad.Tensor(v, requires_grad=True) for k, v in params.weights.items()}
    x = normalize(params, x)
    n = x.shape[0]
    mb = micro_batch_size(c)
    total = 0.0
    for s in range(0, n, mb):
        e = min(s + mb, n)
        power, prob = _graph(P, x[s:e], params, train_mode, rng)
        part = loss(power, prob, y[s:e], c, params.output_scale) * ((e - s) / n)
        part.backward()
        total += float(part.data)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in P.items()}
    return total, grads


def backward_and_step(params: ModelParams, batch: Batch, config: TrainConfig | None = None,
                      rng=None, optimizer=None, batch_index=0):
    """One optimizer step on ``batch``; returns ``(new_params, batch_loss)``."""
    config = config or params.config
    optimizer = optimizer or make_optimizer(config)
    value, grads = gradients(params, batch, rng, train_mode=True)
    if not math.isfinite(value):
        raise TrainingError(
            f"non-finite loss {value} at batch {batch_index}; parameter norm {params.norm():.6g}"
        )
    new = optimizer.step(params.weights, grads)
    return ModelParams(config, new, params.input_mean, params.input_std, params.output_scale), value


def augment(batch: Batch, aug: AugmentationConfig, rng) -> Batch:
    """Recombine appliance channels across windows.

    For each window (with ``recombination_prob``), every appliance channel
    is replaced by that appliance's channel from a random window in the
    batch, circularly shifted by up to ``time_shift_max`` samples and scaled
    by ``max(0, 1 + amplitude_jitter_sigma * N(0, 1))``. Aggregate power is
    rebuilt as the channel sum plus the window's original residual
    (measured aggregate minus channel sum); current moves with power at the
    batch's current-per-watt ratio; voltage is untouched.
    """
    if not aug.enabled or aug.recombination_prob == 0:
        return batch
    x = np.array(batch.inputs, dtype=np.float64, copy=True)
    y = np.array(batch.targets, dtype=np.float64, copy=True)
    B, A, T = y.shape
    residual = batch.inputs[:, :, 0] - batch.targets.sum(axis=1)
    loaded = batch.inputs[:, :, 0] > 1.0
    amps_per_watt = (batch.inputs[:, :, 2][loaded].sum() / batch.inputs[:, :, 0][loaded].sum()
                     if loaded.any() else 1.0 / max(float(batch.inputs[:, :, 1].mean()), 1.0))
    for b in range(B):
        if rng.random() >= aug.recombination_prob:
            continue
        for a in range(A):
            src = int(rng.integers(B))
            shift = int(rng.integers(-aug.time_shift_max, aug.time_shift_max + 1))
            gain = max(0.0, 1.0 + aug.amplitude_jitter_sigma * rng.standard_normal())
            y[b, a] = np.roll(batch.targets[src, a], shift) * gain
        new_p = y[b].sum(axis=0) + residual[b]
        x[b, :, 2] = batch.inputs[b, :, 2] + (new_p - batch.inputs[b, :, 0]) * amps_per_watt
        x[b, :, 0] = new_p
    return Batch(x, y)


def window_starts(n, seq_len, stride):
    if n < seq_len:
        return []
    starts = list(range(0, n - seq_len + 1, stride))
    if starts[-1] != n - seq_len:
        starts.append(n - seq_len)
    return starts


def fit_normalization(features, targets, rated_powers=None):
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    std = np.where(std > STD_FLOOR, std, 1.0)
    peak = targets.max(axis=1) if targets.size else np.ones(targets.shape[0])
    scale = np.maximum(peak, 1.0)
    if rated_powers is not None:
        rated = np.asarray(rated_powers, dtype=np.float64)
        scale = np.where(np.isfinite(rated) & (rated > 0), rated, scale)
    return mean, std, scale


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_mae: list

    @property
    def val_mae_mean(self):
        return float(np.mean(self.val_mae))


def history_csv(history, names=None) -> str:
    if not history:
        return "epoch,train_loss\n"
    A = len(history[0].val_mae)
    names = names or [f"M{k + 1}" for k in range(A)]
    lines = ["epoch,train_loss," + ",".join(f"val_mae_{n}" for n in names) + ",val_mae_mean"]
    for h in history:
        lines.append(",".join([str(h.epoch), repr(h.train_loss), *map(repr, h.val_mae), repr(h.val_mae_mean)]))
    return "\n".join(lines) + "\n"


def train(train_ds, val_ds, config: TrainConfig, progress=None):
    """Train on grid-aligned datasets; returns ``(best_params, history)``.

    Normalization statistics come from ``train_ds`` only. Windows use
    stride ``seq_len // 2`` and are reshuffled each epoch. The parameters
    of the epoch with the lowest mean validation MAE are returned.
    """
    c = config
    if train_ds.n_channels != c.n_appliances:
        raise ConfigError(f"dataset has {train_ds.n_channels} channels, config expects {c.n_appliances}")
    if len(train_ds) < c.seq_len:
        raise ConfigError(f"training split has {len(train_ds)} samples, fewer than seq_len {c.seq_len}")
    if len(val_ds) < c.seq_len:
        raise ConfigError(
            f"validation split has {len(val_ds)} samples, fewer than seq_len {c.seq_len}; "
            f"use seq_len <= {len(val_ds)}"
        )
    feats = train_ds.features()
    targets = train_ds.line_p.T
    mean, std, scale = fit_normalization(feats, targets, train_ds.meta.rated_powers)
    params = init_model(c, mean, std, scale)
    _, r_shuffle, r_aug, r_drop = (np.random.default_rng(s) for s in np.random.SeedSequence(c.seed).spawn(4))
    optimizer = make_optimizer(c)

    starts = window_starts(len(train_ds), c.seq_len, max(1, c.seq_len // 2))
    X = np.stack([feats[s:s + c.seq_len] for s in starts])
    Y = np.stack([targets[:, s:s + c.seq_len] for s in starts])
    val_feats, val_targets = val_ds.features(), val_ds.line_p.T

    history, best, best_score = [], params.copy(), math.inf
    step = 0
    for epoch in range(1, c.epochs + 1):
        order = r_shuffle.permutation(len(starts))
        losses, sizes = [], []
        for b in range(0, len(order), c.batch_size):
            idx = order[b:b + c.batch_size]
            batch = augment(Batch(X[idx], Y[idx]), c.augmentation, r_aug)
            params, value = backward_and_step(params, batch, c, r_drop, optimizer, step)
            losses.append(value)
            sizes.append(len(idx))
            step += 1
        pred, _ = predict_tiles(params, val_feats)
        val_mae = [float(np.mean(np.abs(val_targets[a] - pred[a]))) for a in range(c.n_appliances)]
        rec = EpochRecord(epoch, float(np.average(losses, weights=sizes)), val_mae)
        history.append(rec)
        if rec.val_mae_mean < best_score:
            best_score, best = rec.val_mae_mean, params.copy()
        log.info("epoch %d loss %.5f val_mae %.3f", epoch, rec.train_loss, rec.val_mae_mean)
        if progress:
            progress(rec)
    return best, history


# --------------------------------------------------------------- inference


def predict_tiles(params: ModelParams, features):
    """Disaggregate a whole series with back-to-back windows.

    The last window is aligned to the series end; only its uncovered tail
    is used. Returns ``(power, prob)``, each ``(A, n)``.
    """
    T = params.config.seq_len
    feats = np.asarray(features, dtype=np.float64)
    n = feats.shape[0]
    if n < T:
        raise ShapeError(f"series of {n} samples is shorter than seq_len {T}")
    A = params.config.n_appliances
    power, prob = np.zeros((A, n)), np.zeros((A, n))
    covered = 0
    for s in window_starts(n, T, T):
        pw, pr = forward(params, feats[s:s + T])
        lo = covered - s
        power[:, covered:s + T] = pw[:, lo:]
        prob[:, covered:s + T] = pr[:, lo:]
        covered = s + T
    return power, prob


def predict_last_step(params: ModelParams, features):
    """Causal inference: for each index ``e >= seq_len - 1`` the prediction at
    the last step of the window ending at ``e``. Returns ``(A, n - seq_len + 1)``
    arrays, exactly what the streaming pipeline emits."""
    T = params.config.seq_len
    feats = np.asarray(features, dtype=np.float64)
    n = feats.shape[0]
    A = params.config.n_appliances
    m = max(n - T + 1, 0)
    power, prob = np.zeros((A, m)), np.zeros((A, m))
    for j in range(m):
        pw, pr = forward(params, feats[j:j + T])
        power[:, j] = pw[:, -1]
        prob[:, j] = pr[:, -1]
    return power, prob


# ------------------------------------------------------------- persistence

MAGIC = b"NILMSEQ\x00"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sII")


class ModelFileError(ValueError):
    pass


class VersionError(ModelFileError):
    pass


class DigestError(ModelFileError):
    pass


class TruncatedError(ModelFileError):
    pass


class ModelShapeError(ModelFileError, ShapeError):
    pass


def _payload_digest(payload: bytes, header_core: dict) -> str:
    h = hashlib.sha256(json.dumps(header_core, sort_keys=True).encode())
    h.update(payload)
    return h.hexdigest()


def save_model(params: ModelParams, path) -> str:
    """Write ``magic | version | header length | JSON header | float64 LE weights``."""
    payload = params.payload()
    core = {
        "config": params.config.to_json(),
        "shapes": [[k, list(v.shape)] for k, v in params.weights.items()],
        "input_mean": params.input_mean.tolist(),
        "input_std": params.input_std.tolist(),
        "output_scale": params.output_scale.tolist(),
    }
    header = dict(core, digest=_payload_digest(payload, core), model_digest=params.digest())
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(hb)))
        fh.write(hb)
        fh.write(payload)
    return header["digest"]


def load_model(path) -> ModelParams:
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size:
        raise TruncatedError(f"{path}: file too short for a model header")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise ModelFileError(f"{path}: not a model file (bad magic)")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    start = _PREFIX.size + hlen
    if len(blob) < start:
        raise TruncatedError(f"{path}: header truncated")
    try:
        header = json.loads(blob[_PREFIX.size:start])
        config = TrainConfig.from_json(header["config"])
        shapes = [(k, tuple(s)) for k, s in header["shapes"]]
    except (ValueError, KeyError, TypeError, ConfigError) as exc:
        raise ModelFileError(f"{path}: malformed header: {exc}") from exc
    expected = param_shapes(config)
    if dict(shapes) != expected or [k for k, _ in shapes] != list(expected):
        bad = [k for k, s in shapes if expected.get(k) != s] or sorted(set(expected) ^ {k for k, _ in shapes})
        raise ModelShapeError(f"{path}: stored shapes disagree with header config ({', '.join(bad[:5])})")
    n_values = sum(int(np.prod(s)) for _, s in shapes)
    payload = blob[start:]
    if len(payload) < 8 * n_values:
        raise TruncatedError(f"{path}: payload has {len(payload)} bytes, expected {8 * n_values}")
    if len(payload) > 8 * n_values:
        raise ModelFileError(f"{path}: {len(payload) - 8 * n_values} trailing bytes after payload")
    core = {k: header[k] for k in ("config", "shapes", "input_mean", "input_std", "output_scale")}
    if _payload_digest(payload, core) != header.get("digest"):
        raise DigestError(f"{path}: digest mismatch, file is corrupted")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    weights, off = {}, 0
    for k, s in shapes:
        size = int(np.prod(s))
        weights[k] = flat[off:off + size].reshape(s).copy()
        off += size
    return ModelParams(config, weights, header["input_mean"], header["input_std"], header["output_scale"])


def with_config(params: ModelParams, **changes) -> ModelParams:
    """Same weights under a config differing only in training-time fields."""
    return ModelParams(replace(params.config, **changes), params.weights, params.input_mean,
                       params.input_std, params.output_scale)
