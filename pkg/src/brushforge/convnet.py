"""A small convolutional classifier written directly in numpy.

Layer stack::

    [conv kxk (same padding) -> ReLU -> avg-pool 2x2/2] * n_blocks
    -> flatten -> dropout -> dense -> ReLU -> dropout -> dense -> softmax

Activations use NHWC layout.  Convolutions are evaluated as a single
matrix product over an im2col view, which keeps training fast enough to
fit ensembles of tens of networks on one CPU core.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

CKPT_MAGIC = b"CNNW"
CKPT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    input_side_px: int = 64
    in_channels: int = 1
    conv_filters: tuple = (16, 32, 64)
    kernel_size: int = 3
    dropout_rate: float = 0.25
    dense_units: int = 128
    l2_factor: float = 0.001
    classes: int = 4
    # fixed affine input standardization: (x - input_offset) * input_scale
    input_offset: float = 0.0
    input_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "conv_filters", tuple(int(f) for f in self.conv_filters))
        if len(self.conv_filters) < 1:
            raise ValueError("need at least one conv block")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if self.input_side_px % (2 ** len(self.conv_filters)):
            raise ValueError(f"input side {self.input_side_px} is not divisible by "
                             f"2**{len(self.conv_filters)} pooling stages")
        if self.classes != 4:
            raise ValueError("classes must be 4")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    @property
    def feature_sides(self) -> list:
        return [self.input_side_px // 2 ** (i + 1) for i in range(len(self.conv_filters))]

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_json().encode()).digest()


@dataclass(frozen=True)
class Phase:
    learning_rate: float
    epochs: int
    batch_size: int = 32
    trainable_blocks: int | None = None  # None -> everything trains

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass(frozen=True)
class TrainSchedule:
    phases: tuple = (Phase(1e-3, 25), Phase(1e-4, 25))

    def __post_init__(self):
        if sum(p.epochs for p in self.phases) < 1:
            raise ValueError("schedule must contain at least one epoch")


@dataclass
class Network:
    config: NetConfig
    params: dict
    seed: int = 0

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def copy(self) -> "Network":
        return Network(self.config, {k: v.copy() for k, v in self.params.items()}, self.seed)

    def astype(self, dtype) -> "Network":
        return Network(self.config, {k: v.astype(dtype) for k, v in self.params.items()},
                       self.seed)


def param_names(config: NetConfig) -> list:
    names = []
    for i in range(len(config.conv_filters)):
        names += [f"conv{i}.W", f"conv{i}.b"]
    return names + ["dense1.W", "dense1.b", "dense2.W", "dense2.b"]


def init_network(config: NetConfig, seed: int = 0, dtype=np.float32) -> Network:
    """He-normal weights scaled by fan-in, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xC0DE]))
    k = config.kernel_size
    params = {}
    c = config.in_channels
    for i, f in enumerate(config.conv_filters):
        fan_in = c * k * k
        params[f"conv{i}.W"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), (c, k, k, f))
        params[f"conv{i}.b"] = np.zeros(f)
        c = f
    side = config.feature_sides[-1]
    flat = side * side * c
    params["dense1.W"] = rng.normal(0.0, np.sqrt(2.0 / flat), (flat, config.dense_units))
    params["dense1.b"] = np.zeros(config.dense_units)
    params["dense2.W"] = rng.normal(0.0, np.sqrt(2.0 / config.dense_units),
                                    (config.dense_units, config.classes))
    params["dense2.b"] = np.zeros(config.classes)
    return Network(config, {n: params[n].astype(dtype) for n in param_names(config)}, int(seed))


# ---------------------------------------------------------------------------
# layers


def conv_forward(x, W, b):
    """Same-padded stride-1 convolution.  ``x``: (N, H, W, C); ``W``: (C, k, k, F)."""
    n, h, w, c = x.shape
    k = W.shape[1]
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
    cols = sliding_window_view(xp, (k, k), axis=(1, 2)).reshape(n * h * w, c * k * k)
    wmat = W.reshape(c * k * k, -1)
    out = (cols @ wmat).reshape(n, h, w, -1) + b
    return out, (cols, x.shape, W.shape)


def conv_backward(dout, cache, W):
    cols, xshape, wshape = cache
    n, h, w, c = xshape
    k = wshape[1]
    p = k // 2
    d2 = dout.reshape(-1, dout.shape[-1])
    dW = (cols.T @ d2).reshape(wshape)
    db = d2.sum(axis=0)
    dcols = (d2 @ W.reshape(c * k * k, -1).T).reshape(n, h, w, c, k, k)
    dxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=dout.dtype)
    for ky in range(k):
        for kx in range(k):
            dxp[:, ky:ky + h, kx:kx + w, :] += dcols[..., ky, kx]
    dx = dxp[:, p:p + h, p:p + w, :] if p else dxp
    return dx, dW, db


def avgpool_forward(x):
    n, h, w, c = x.shape
    return x.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))


def avgpool_backward(dout):
    d = np.repeat(np.repeat(dout, 2, axis=1), 2, axis=2)
    return d * d.dtype.type(0.25)


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _dropout_mask(rng, shape, rate, dtype):
    keep = 1.0 - rate
    return ((rng.random(shape) < keep) / keep).astype(dtype)


def _as_input(net: Network, x):
    x = np.asarray(x, dtype=net.dtype)
    if x.ndim == 3:
        x = x[..., None]
    cfg = net.config
    if x.shape[1:] != (cfg.input_side_px, cfg.input_side_px, cfg.in_channels):
        raise ValueError(f"input batch shape {x.shape[1:]} does not match "
                         f"{(cfg.input_side_px, cfg.input_side_px, cfg.in_channels)}")
    return x


def _forward(net: Network, x, train: bool, rng=None):
    p = net.params
    cfg = net.config
    caches = []
    h = x
    if cfg.input_offset != 0.0 or cfg.input_scale != 1.0:
        h = (x - x.dtype.type(cfg.input_offset)) * x.dtype.type(cfg.input_scale)
    for i in range(len(cfg.conv_filters)):
        z, cc = conv_forward(h, p[f"conv{i}.W"], p[f"conv{i}.b"])
        a = np.maximum(z, 0)
        caches.append((cc, z > 0))
        h = avgpool_forward(a)
    pooled_shape = h.shape
    flat = h.reshape(h.shape[0], -1)
    m1 = m2 = None
    if train and cfg.dropout_rate > 0:
        m1 = _dropout_mask(rng, flat.shape, cfg.dropout_rate, flat.dtype)
        flat = flat * m1
    z1 = flat @ p["dense1.W"] + p["dense1.b"]
    a1 = np.maximum(z1, 0)
    if train and cfg.dropout_rate > 0:
        m2 = _dropout_mask(rng, a1.shape, cfg.dropout_rate, a1.dtype)
        a1 = a1 * m2
    logits = a1 @ p["dense2.W"] + p["dense2.b"]
    cache = (caches, pooled_shape, flat, m1, z1, a1, m2)
    return logits, cache


def forward(net: Network, x, mode: str = "eval", rng=None, batch_size: int = 256) -> np.ndarray:
    """Class probabilities for a batch ``(N, S, S[, C])``."""
    x = _as_input(net, x)
    train = mode == "train"
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    if train:
        rng = rng if rng is not None else np.random.default_rng(0)
        logits, _ = _forward(net, x, True, rng)
        return softmax(logits)
    out = [softmax(_forward(net, x[i:i + batch_size], False)[0])
           for i in range(0, x.shape[0], batch_size)]
    return np.concatenate(out) if out else np.zeros((0, net.config.classes), net.dtype)


def l2_penalty(net: Network) -> float:
    w = net.params["dense1.W"]
    return float(net.config.l2_factor * np.sum(w.astype(np.float64) ** 2))


def loss_and_grads(net: Network, x, labels, rng=None, train: bool = True):
    """Mean cross-entropy plus the L2 penalty on the hidden dense weights.

    ``labels`` are artist ids 1..4.  Returns ``(loss, grads)`` with one
    gradient array per parameter.
    """
    x = _as_input(net, x)
    y = np.asarray(labels, dtype=np.int64) - 1
    if y.min() < 0 or y.max() >= net.config.classes:
        raise ValueError("labels must lie in 1..4")
    p = net.params
    cfg = net.config
    rng = rng if rng is not None else np.random.default_rng(0)
    logits, (caches, pooled_shape, flat, m1, z1, a1, m2) = _forward(net, x, train, rng)
    probs = softmax(logits)
    n = x.shape[0]
    ce = -np.mean(np.log(np.maximum(probs[np.arange(n), y], np.finfo(probs.dtype).tiny)))
    loss = float(ce) + l2_penalty(net)

    g = {}
    dlogits = probs.copy()
    dlogits[np.arange(n), y] -= 1
    dlogits /= n
    g["dense2.W"] = a1.T @ dlogits
    g["dense2.b"] = dlogits.sum(axis=0)
    da1 = dlogits @ p["dense2.W"].T
    if m2 is not None:
        da1 = da1 * m2
    dz1 = da1 * (z1 > 0)
    g["dense1.W"] = flat.T @ dz1 + (2.0 * cfg.l2_factor) * p["dense1.W"]
    g["dense1.b"] = dz1.sum(axis=0)
    dflat = dz1 @ p["dense1.W"].T
    if m1 is not None:
        dflat = dflat * m1
    dh = dflat.reshape(pooled_shape)
    for i in reversed(range(len(cfg.conv_filters))):
        cc, active = caches[i]
        da = avgpool_backward(dh)
        dz = da * active
        dh, g[f"conv{i}.W"], g[f"conv{i}.b"] = conv_backward(dz, cc, p[f"conv{i}.W"])
    grads = {k: g[k].astype(p[k].dtype, copy=False) for k in p}
    return loss, grads


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: dict, grads: dict, lr: float, names=None) -> dict:
    """One bias-corrected Adam update, applied in place to ``params``."""
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for k in (names if names is not None else params):
        g = grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(params[k])
            state.v[k] = np.zeros_like(params[k])
        m, v = state.m[k], state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        upd = (lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
        params[k] -= upd.astype(params[k].dtype, copy=False)
    return params


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochRecord:
    phase: int
    epoch: int
    train_loss: float
    val_acc: float


@dataclass
class TrainedNetwork:
    network: Network
    log: list
    best_val_acc: float

    def write_log(self, path) -> None:
        write_epoch_log(self.log, path)


def write_epoch_log(log, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["phase", "epoch", "train_loss", "val_acc"])
        for r in log:
            w.writerow([r.phase, r.epoch, f"{r.train_loss:.8f}", f"{r.val_acc:.6f}"])


def stack_patches(patches, channels: int | None = None):
    """Patch list -> ``(X, y)`` arrays; X has shape (N, S, S, C)."""
    x = np.stack([np.asarray(p.values) for p in patches])
    if x.ndim == 3:
        x = x[..., None]
    y = np.array([p.artist_id for p in patches], dtype=np.int64)
    return x, y


def accuracy(net: Network, x, y) -> float:
    pred = np.argmax(forward(net, x), axis=1) + 1
    return float(np.mean(pred == y))


def _trainable(cfg: NetConfig, blocks: int | None) -> list:
    names = param_names(cfg)
    if blocks is None:
        return names
    n = len(cfg.conv_filters)
    keep = {f"conv{i}.{t}" for i in range(max(0, n - blocks), n) for t in "Wb"}
    return [k for k in names if k.startswith("dense") or k in keep]


def train_arrays(net: Network, x_train, y_train, x_val, y_val,
                 schedule: TrainSchedule = TrainSchedule(), seed: int = 0) -> TrainedNetwork:
    """Minibatch Adam over the schedule's phases, keeping the best-validation weights.

    Each phase restarts the optimizer from the previous phase's best weights.
    """
    if len(x_train) == 0 or len(x_val) == 0:
        raise ValueError("train and validation sets must be non-empty")
    net = net.copy()
    x_train = _as_input(net, x_train)
    x_val = _as_input(net, x_val)
    y_train = np.asarray(y_train)
    y_val = np.asarray(y_val)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x7A1]))
    log = []
    best_acc = -1.0
    for pi, phase in enumerate(schedule.phases, start=1):
        names = _trainable(net.config, phase.trainable_blocks)
        state = AdamState()
        best_acc, best_params = -1.0, None
        for epoch in range(1, phase.epochs + 1):
            order = rng.permutation(len(x_train))
            tot, cnt = 0.0, 0
            for s in range(0, len(order), phase.batch_size):
                idx = order[s:s + phase.batch_size]
                loss, grads = loss_and_grads(net, x_train[idx], y_train[idx], rng)
                adam_step(state, net.params, grads, phase.learning_rate, names)
                tot += loss * len(idx)
                cnt += len(idx)
            acc = accuracy(net, x_val, y_val)
            log.append(EpochRecord(pi, epoch, tot / cnt, acc))
            if acc > best_acc:
                best_acc = acc
                best_params = {k: v.copy() for k, v in net.params.items()}
        if best_params is not None:
            net.params = best_params
    return TrainedNetwork(net, log, best_acc)


def train(net: Network, split, schedule: TrainSchedule = TrainSchedule(),
          seed: int = 0) -> TrainedNetwork:
    """Train on a :class:`~brushforge.patching.DatasetSplit`."""
    if not split.train or not split.validation:
        raise ValueError("train and validation sets must be non-empty")
    xt, yt = stack_patches(split.train)
    xv, yv = stack_patches(split.validation)
    return train_arrays(net, xt, yt, xv, yv, schedule, seed)


# ---------------------------------------------------------------------------
# ensembles


@dataclass
class EnsembleModel:
    members: list
    config: NetConfig
    seeds: list = field(default_factory=list)
    logs: list = field(default_factory=list)


def member_seed(seed: int, index: int) -> int:
    ss = np.random.SeedSequence([int(seed), 0xE5, int(index)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _train_member(args):
    config, xt, yt, xv, yv, schedule, mseed = args
    net = init_network(config, mseed)
    return train_arrays(net, xt, yt, xv, yv, schedule, mseed)


def train_ensemble(config: NetConfig, x_train, y_train, x_val, y_val, size: int,
                   schedule: TrainSchedule = TrainSchedule(), seed: int = 0,
                   jobs: int = 1) -> EnsembleModel:
    """Train ``size`` independently seeded members; ``jobs`` never changes the result."""
    seeds = [member_seed(seed, i) for i in range(size)]
    tasks = [(config, x_train, y_train, x_val, y_val, schedule, s) for s in seeds]
    if jobs > 1 and size > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(min(jobs, size)) as ex:
            results = list(ex.map(_train_member, tasks))
    else:
        results = [_train_member(t) for t in tasks]
    return EnsembleModel([r.network for r in results], config, seeds, [r.log for r in results])


def ensemble_predict(ensemble, x) -> np.ndarray:
    """Arithmetic mean of the members' eval-mode probability vectors."""
    members = ensemble.members if isinstance(ensemble, EnsembleModel) else list(ensemble)
    if not members:
        raise ValueError("ensemble has no members")
    total = None
    for net in members:
        p = forward(net, x).astype(np.float64)
        total = p if total is None else total + p
    return total / len(members)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(net: Network, path) -> None:
    """Write weights as ``CNNW`` | u32 version | 32-byte config digest | tensors."""
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(net.config.digest())
        for name in param_names(net.config):
            arr = np.ascontiguousarray(net.params[name], dtype="<f4")
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path, config: NetConfig) -> Network:
    """Read a checkpoint written for ``config`` (the stored digest must match)."""
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a CNNW checkpoint")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    if raw[8:40] != config.digest():
        raise ValueError(f"{path}: checkpoint was written for a different NetConfig")
    off = 40
    params = {}
    while off < len(raw):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off:off + nlen].decode()
        off += nlen
        (rank,) = struct.unpack_from("<I", raw, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        params[name] = np.frombuffer(raw, "<f4", count, off).reshape(dims).astype(np.float32)
        off += 4 * count
    missing = set(param_names(config)) - set(params)
    if missing:
        raise ValueError(f"{path}: missing tensors {sorted(missing)}")
    return Network(config, {k: params[k] for k in param_names(config)})
