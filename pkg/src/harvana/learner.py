"""Desk-scale multimodal classifier with configurable feature extraction.

Three convolutional modes control channel grouping (early fusion over all
channels, one stack per modality, one stack per channel); zero conv blocks
fall back to hand-crafted statistics (mean, variance, spectral peak per
channel). Training is plain mini-batch gradient descent on cross-entropy (the
differentiable surrogate); the reported losses stay 0/1-based: nu is the
misclassification rate and per-activity nu is 1 - recall.

Masked-sample incorporation (w-DGP / w-HExp) replaces the channels of
unselected sources in the *training* frames with Gaussian draws so the model
learns to ignore them; evaluation frames are never touched.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .dgp import DgpModel
from .hyperspace import Configuration, derive_rng
from .sensors import Dataset, Deployment, FoldAssignment, Frame

logger = logging.getLogger(__name__)

CONV_MODES = ("grouped_modalities", "split_modalities", "split_channels")
HEADS = ("softmax_linear", "mlp")
MODES = ("wo-DGP", "w-DGP", "w-HExp")

RECURRENT_PARAMS = ("n_hu1", "n_hu2", "p_in", "p_ou", "p_st")


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"training loss diverged to NaN at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class ModelConfig:
    conv_mode: str = "grouped_modalities"
    n_conv_blocks: int = 1
    kernel_sizes: tuple[int, int, int] = (9, 9, 9)
    n_filters: int = 16
    stride_fraction: float = 0.5
    dropout: float = 0.1
    dense_units: int = 64
    learning_rate: float = 0.01
    epochs: int = 20
    batch_size: int = 32
    activation: str = "relu"
    classifier_head: str = "softmax_linear"
    source_gains: Mapping[str, float] = field(default_factory=dict)
    mask_sigma: float = 0.0
    recurrent: Mapping[str, float] = field(default_factory=dict)  # accepted, no-op

    def __post_init__(self):
        object.__setattr__(self, "source_gains", dict(self.source_gains))
        object.__setattr__(self, "recurrent", dict(self.recurrent))
        object.__setattr__(self, "kernel_sizes", tuple(int(k) for k in self.kernel_sizes))
        if self.conv_mode not in CONV_MODES:
            raise ConfigError(f"unknown conv_mode {self.conv_mode!r}")
        if self.activation not in ("relu", "tanh"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if not (0 <= self.n_conv_blocks <= 3):
            raise ConfigError("n_conv_blocks must be 0..3")
        if self.classifier_head not in HEADS:
            raise ConfigError(
                f"classifier head {self.classifier_head!r} is not supported: recurrent/"
                "hybrid heads are accepted in the schema but cannot be built; choose "
                "'softmax_linear' or 'mlp'")


_FIELD_MAP = {
    "lr": "learning_rate",
    "n_f": "n_filters",
    "s": "stride_fraction",
    "p_d": "dropout",
    "n_u": "dense_units",
    "conv_mode": "conv_mode",
    "n_conv_blocks": "n_conv_blocks",
    "activation": "activation",
    "head": "classifier_head",
    "classifier_head": "classifier_head",
    "epochs": "epochs",
    "batch_size": "batch_size",
}


def config_from_values(values: Mapping[str, float | int | str] | Configuration,
                       base: ModelConfig | None = None) -> ModelConfig:
    """Map a Configuration onto a ModelConfig.

    Known names map to fields (lr, ks1..ks3, n_f, s, p_d, n_u, ...); params
    named gain_<source_id> become per-source input gains; the recurrent
    hyperparameters are accepted and recorded but drive nothing.
    """
    if isinstance(values, Configuration):
        values = values.values
    cfg = base or ModelConfig()
    updates: dict = {}
    ks = list(cfg.kernel_sizes)
    gains = dict(cfg.source_gains)
    recurrent = dict(cfg.recurrent)
    for name, v in values.items():
        if name in _FIELD_MAP:
            updates[_FIELD_MAP[name]] = v
        elif name in ("ks1", "ks2", "ks3"):
            ks[int(name[-1]) - 1] = int(v)
        elif name.startswith("gain_"):
            gains[name[len("gain_"):]] = float(v)
        elif name in RECURRENT_PARAMS:
            recurrent[name] = v
        else:
            raise ConfigError(f"unknown hyperparameter {name!r}")
    updates["kernel_sizes"] = tuple(ks)
    updates["source_gains"] = gains
    updates["recurrent"] = recurrent
    if "n_conv_blocks" in updates:
        updates["n_conv_blocks"] = int(updates["n_conv_blocks"])
    if "dense_units" in updates:
        updates["dense_units"] = int(updates["dense_units"])
    if "n_filters" in updates:
        updates["n_filters"] = int(updates["n_filters"])
    if "epochs" in updates:
        updates["epochs"] = int(updates["epochs"])
    return replace(cfg, **updates)


# ---------------------------------------------------------------------------
# layers

class _Conv1d:
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int,
                 rng: np.random.Generator):
        a = math.sqrt(6.0 / (c_in * kernel + c_out))
        self.W = rng.uniform(-a, a, (c_out, c_in, kernel))
        self.b = np.zeros(c_out)
        self.dW = np.zeros_like(self.W)
        self.db = np.zeros_like(self.b)
        self.stride = stride
        self.kernel = kernel

    def out_len(self, L: int) -> int:
        return (L - self.kernel) // self.stride + 1

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._in_len = x.shape[2]
        win = np.lib.stride_tricks.sliding_window_view(x, self.kernel, axis=2)
        self._win = win[:, :, ::self.stride, :]
        return np.einsum("ncok,fck->nfo", self._win, self.W) + self.b[None, :, None]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        self.dW = np.einsum("nfo,ncok->fck", dy, self._win)
        self.db = dy.sum(axis=(0, 2))
        dwin = np.einsum("nfo,fck->ncok", dy, self.W)
        N, C, O, K = dwin.shape
        # full input length, not just the covered span: samples past the last
        # window get zero gradient
        dx = np.zeros((N, C, self._in_len))
        dxt = dx.transpose(2, 0, 1)
        for k in range(K):
            pos = np.arange(O) * self.stride + k
            np.add.at(dxt, pos, dwin[:, :, :, k].transpose(2, 0, 1))
        return dx

    def params(self):
        return [self.W, self.b]

    def grads(self):
        return [self.dW, self.db]


class _Activation:
    def __init__(self, kind: str):
        self.kind = kind

    def forward(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "relu":
            self._mask = x > 0
            return x * self._mask
        self._out = np.tanh(x)
        return self._out

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if self.kind == "relu":
            return dy * self._mask
        return dy * (1.0 - self._out ** 2)

    def params(self):
        return []

    def grads(self):
        return []


class _MaxPool2:
    def forward(self, x: np.ndarray) -> np.ndarray:
        L = x.shape[2] - x.shape[2] % 2
        self._in_len = x.shape[2]
        a, b = x[:, :, 0:L:2], x[:, :, 1:L:2]
        self._left = a >= b
        return np.where(self._left, a, b)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        dx = np.zeros(dy.shape[:2] + (self._in_len,))
        dx[:, :, 0:2 * dy.shape[2]:2] = dy * self._left
        dx[:, :, 1:2 * dy.shape[2]:2] = dy * ~self._left
        return dx

    def params(self):
        return []

    def grads(self):
        return []


class _Dense:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 zero_init: bool = False):
        # the final classifier layer starts at zero so untrained features
        # contribute nothing until gradients say otherwise
        if zero_init:
            self.W = np.zeros((d_in, d_out))
        else:
            a = math.sqrt(6.0 / (d_in + d_out))
            self.W = rng.uniform(-a, a, (d_in, d_out))
        self.b = np.zeros(d_out)
        self.dW = np.zeros_like(self.W)
        self.db = np.zeros_like(self.b)

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return x @ self.W + self.b

    def backward(self, dy: np.ndarray) -> np.ndarray:
        self.dW = self._x.T @ dy
        self.db = dy.sum(axis=0)
        return dy @ self.W.T

    def params(self):
        return [self.W, self.b]

    def grads(self):
        return [self.dW, self.db]


def stat_features(X: np.ndarray) -> np.ndarray:
    """(N, C, L) -> (N, 3C): per-channel mean, variance, spectral peak."""
    N, C, L = X.shape
    mean = X.mean(axis=2)
    var = X.var(axis=2)
    spec = np.abs(np.fft.rfft(X, axis=2))
    peak = spec[:, :, 1:].argmax(axis=2) + 1  # dominant nonzero frequency bin
    peak = peak / (L / 2)
    return np.concatenate([mean, var, peak], axis=1)


class Network:
    """Block graph: per-group conv stacks (or statistical features) feeding a
    softmax head. Weight shapes are determined by conv_mode and the
    deployment's channel layout."""

    def __init__(self, config: ModelConfig, deployment: Deployment,
                 activities: Sequence[str], window_len: int, seed: int = 0):
        self.config = config
        self.deployment = deployment
        self.activities = tuple(activities)
        self.window_len = window_len
        self.seed = seed
        rng = derive_rng(seed)
        C = deployment.n_channels
        self.gain_vector = np.ones(C)
        for sid, g in config.source_gains.items():
            self.gain_vector[deployment.channel_slice(sid)] = g

        self.groups = _channel_groups(config.conv_mode, deployment)
        self.stacks: list[list] = []
        feat_dim = 0
        if config.n_conv_blocks == 0:
            feat_dim = 3 * C
        else:
            for g in self.groups:
                stack = []
                c_in, L = len(g), window_len
                for b in range(config.n_conv_blocks):
                    k = config.kernel_sizes[b]
                    stride = max(1, round(config.stride_fraction * k))
                    if k > L:
                        raise ConfigError(
                            f"kernel {k} of block {b + 1} exceeds sequence length {L}")
                    conv = _Conv1d(c_in, config.n_filters, k, stride, rng)
                    stack.extend([conv, _Activation(config.activation), _MaxPool2()])
                    L = conv.out_len(L) // 2
                    if L < 1:
                        raise ConfigError(f"block {b + 1} pools the sequence away")
                    c_in = config.n_filters
                self.stacks.append(stack)
                feat_dim += c_in * L
        self.feat_dim = feat_dim

        K = len(self.activities)
        self.head: list = []
        if config.classifier_head == "mlp":
            self.head.append(_Dense(feat_dim, int(config.dense_units), rng))
            self.head.append(_Activation(config.activation))
            self.head.append(_Dense(int(config.dense_units), K, rng, zero_init=True))
        else:
            self.head.append(_Dense(feat_dim, K, rng, zero_init=True))

    def features(self, X: np.ndarray) -> np.ndarray:
        X = X * self.gain_vector[None, :, None]
        if self.config.n_conv_blocks == 0:
            return stat_features(X)
        outs = []
        for g, stack in zip(self.groups, self.stacks):
            h = X[:, g, :]
            for layer in stack:
                h = layer.forward(h)
            outs.append(h.reshape(len(h), -1))
        return np.concatenate(outs, axis=1)

    def logits(self, X: np.ndarray) -> np.ndarray:
        h = self.features(X)
        for layer in self.head:
            h = layer.forward(h)
        return h

    def loss_and_grads(self, X: np.ndarray, y_idx: np.ndarray,
                       training: bool = False,
                       rng: np.random.Generator | None = None) -> float:
        """Cross-entropy on a batch; leaves d(loss)/d(param) in every layer."""
        Xs = X * self.gain_vector[None, :, None]
        if self.config.n_conv_blocks == 0:
            feats = stat_features(Xs)
            shapes, widths = [], []
        else:
            outs, shapes, widths = [], [], []
            for g, stack in zip(self.groups, self.stacks):
                h = Xs[:, g, :]
                for layer in stack:
                    h = layer.forward(h)
                shapes.append(h.shape)
                widths.append(h[0].size)
                outs.append(h.reshape(len(h), -1))
            feats = np.concatenate(outs, axis=1)

        h = feats
        drop_mask = None
        for i, layer in enumerate(self.head):
            if i == len(self.head) - 1 and training and self.config.dropout > 0.0:
                p = self.config.dropout
                drop_mask = (rng.uniform(size=h.shape) >= p) / (1.0 - p)
                h = h * drop_mask
            h = layer.forward(h)
        probs = softmax(h)
        n = len(y_idx)
        loss = -float(np.log(np.maximum(probs[np.arange(n), y_idx], 1e-300)).mean())

        g = probs.copy()
        g[np.arange(n), y_idx] -= 1.0
        g /= n
        for i in reversed(range(len(self.head))):
            g = self.head[i].backward(g)
            if i == len(self.head) - 1 and drop_mask is not None:
                g = g * drop_mask
        if self.config.n_conv_blocks > 0:
            offset = 0
            for gi, stack in enumerate(self.stacks):
                gg = g[:, offset:offset + widths[gi]].reshape(shapes[gi])
                offset += widths[gi]
                for layer in reversed(stack):
                    gg = layer.backward(gg)
        return loss

    def gradients(self) -> list[np.ndarray]:
        out = []
        for stack in self.stacks:
            for layer in stack:
                out.extend(layer.grads())
        for layer in self.head:
            out.extend(layer.grads())
        return out

    def sgd_step(self, lr: float) -> None:
        for p, g in zip(self.parameters(), self.gradients()):
            p -= lr * g

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return softmax(self.logits(X))

    def weight_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for gi, stack in enumerate(self.stacks):
            for li, layer in enumerate(stack):
                for pi, p in enumerate(layer.params()):
                    shapes[f"stack{gi}.layer{li}.p{pi}"] = p.shape
        for li, layer in enumerate(self.head):
            for pi, p in enumerate(layer.params()):
                shapes[f"head.layer{li}.p{pi}"] = p.shape
        return shapes

    def parameters(self) -> list[np.ndarray]:
        out = []
        for stack in self.stacks:
            for layer in stack:
                out.extend(layer.params())
        for layer in self.head:
            out.extend(layer.params())
        return out


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _channel_groups(conv_mode: str, deployment: Deployment) -> list[np.ndarray]:
    C = deployment.n_channels
    if conv_mode == "grouped_modalities":
        return [np.arange(C)]
    if conv_mode == "split_channels":
        return [np.array([c]) for c in range(C)]
    # split_modalities: all channels sharing a modality, across positions
    by_mod: dict[str, list[int]] = {}
    for s in deployment.sources:
        sl = deployment.channel_slice(s.id)
        by_mod.setdefault(s.modality, []).extend(range(sl.start, sl.stop))
    return [np.array(chs) for chs in by_mod.values()]


def build(config: ModelConfig, deployment: Deployment, activities: Sequence[str],
          window_len: int, seed: int = 0) -> Network:
    """Construct the untrained block graph for a deployment."""
    return Network(config, deployment, activities, window_len, seed=seed)


@dataclass
class TrainedModel:
    config: ModelConfig
    network: Network
    activities: tuple[str, ...]
    seed: int
    loss_trace: list[float]


def _frames_to_arrays(frames: Sequence[Frame], activities: Sequence[str]):
    usable = [f for f in frames if f.activity in activities]
    X = np.stack([f.samples for f in usable]) if usable else np.zeros((0, 1, 1))
    y = np.array([activities.index(f.activity) for f in usable], dtype=int)
    return usable, X, y


def train(network: Network, frames: Sequence[Frame], config: ModelConfig | None = None,
          seed: int = 0) -> TrainedModel:
    """Mini-batch gradient descent on cross-entropy for config.epochs.

    Deterministic per seed (fixed shuffle and reduction order). Raises
    TrainingDiverged naming the epoch if the loss goes non-finite.
    """
    config = config or network.config
    activities = network.activities
    usable, X, y = _frames_to_arrays(frames, activities)
    present = {activities[i] for i in y}
    missing = set(activities) - present
    if missing:
        raise ConfigError(f"no training frames for activities {sorted(missing)}")
    rng = derive_rng(seed, 7)
    trace: list[float] = []
    n = len(usable)
    bs = min(config.batch_size, n)
    for epoch in range(int(config.epochs)):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            loss = network.loss_and_grads(X[idx], y[idx], training=True, rng=rng)
            network.sgd_step(config.learning_rate)
            losses.append(loss)
        epoch_loss = float(np.mean(losses))
        if not math.isfinite(epoch_loss):
            raise TrainingDiverged(epoch)
        trace.append(epoch_loss)
    return TrainedModel(config=config, network=network, activities=activities,
                        seed=seed, loss_trace=trace)


@dataclass
class Metrics:
    labels: tuple[str, ...]
    confusion: np.ndarray
    macro_f1: float
    nu: float
    per_activity_nu: dict[str, float]
    include_null: bool

    def to_json(self) -> dict:
        return {
            "labels": list(self.labels),
            "confusion": self.confusion.tolist(),
            "macro_f1": self.macro_f1,
            "nu": self.nu,
            "per_activity_nu": dict(sorted(self.per_activity_nu.items())),
            "include_null": self.include_null,
        }


def macro_f1_from_confusion(confusion: np.ndarray) -> float:
    """Mean per-class f1; rows are true classes, columns predictions."""
    K = confusion.shape[0]
    f1s = []
    for k in range(K):
        tp = confusion[k, k]
        fn = confusion[k].sum() - tp
        fp = confusion[:, k].sum() - tp
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom > 0 else 0.0)
    return float(np.mean(f1s))


def evaluate(model: TrainedModel | Network, frames: Sequence[Frame],
             include_null: bool = False) -> Metrics:
    """Argmax predictions, confusion matrix, macro f1, and the 0/1 losses.

    include_null=False drops null-class frames entirely; include_null=True
    keeps them as an extra 'null' row/column (predicted-null never happens
    unless the model was trained with a null class)."""
    network = model.network if isinstance(model, TrainedModel) else model
    activities = list(network.activities)
    labels = list(activities)
    if include_null and "null" not in labels:
        labels = labels + ["null"]
    eval_frames = [f for f in frames
                   if (f.activity in activities) or (include_null and f.is_null)]
    if not eval_frames:
        raise ConfigError("no frames to evaluate")
    X = np.stack([f.samples for f in eval_frames])
    true_idx = np.array([labels.index(f.activity if f.activity is not None else "null")
                         for f in eval_frames])
    pred_idx = network.predict_proba(X).argmax(axis=1)
    K = len(labels)
    confusion = np.zeros((K, K), dtype=int)
    np.add.at(confusion, (true_idx, pred_idx), 1)
    nu = 1.0 - float((pred_idx == true_idx).mean())
    per_nu = {}
    for i, a in enumerate(activities):
        row = confusion[labels.index(a)]
        per_nu[a] = 1.0 - row[labels.index(a)] / row.sum() if row.sum() else 0.0
    return Metrics(labels=tuple(labels), confusion=confusion,
                   macro_f1=macro_f1_from_confusion(confusion), nu=nu,
                   per_activity_nu=per_nu, include_null=include_null)


# ---------------------------------------------------------------------------
# masked-sample incorporation

def mask_augment(frames: Sequence[Frame], subsets: Mapping[str, frozenset[str] | set[str]],
                 noise_sigma: float, seed: int, deployment: Deployment,
                 supplement: bool = False) -> list[Frame]:
    """Replace channels of unselected sources with Gaussian(0, noise_sigma).

    Channels of selected sources are copied untouched (bitwise equal). With
    supplement=True the originals are kept and masked copies appended (fresh
    frame ids); otherwise masked frames replace the originals."""
    known = set(deployment.source_ids)
    for y, subset in subsets.items():
        unknown = set(subset) - known
        if unknown:
            raise ConfigError(f"subset for {y!r} names unknown sources {sorted(unknown)}")
    out: list[Frame] = []
    next_id = max((f.frame_id for f in frames), default=-1) + 1
    for f in frames:
        if f.activity is None:
            out.append(f)
            continue
        if f.activity not in subsets:
            raise ConfigError(f"no subset entry for activity {f.activity!r}")
        keep = subsets[f.activity]
        samples = f.samples.copy()
        rng = derive_rng(seed, f.frame_id)
        for s in deployment.sources:
            if s.id not in keep:
                sl = deployment.channel_slice(s.id)
                shape = samples[sl].shape
                samples[sl] = rng.normal(0.0, noise_sigma, shape) if noise_sigma > 0 else 0.0
        if supplement:
            out.append(f)
            out.append(Frame(frame_id=next_id, activity=f.activity, samples=samples,
                             time_index=f.time_index, recording=f.recording,
                             gap_fraction=f.gap_fraction))
            next_id += 1
        else:
            out.append(Frame(frame_id=f.frame_id, activity=f.activity, samples=samples,
                             time_index=f.time_index, recording=f.recording,
                             gap_fraction=f.gap_fraction))
    return out


@dataclass
class ProtocolResult:
    mode: str
    per_fold: list[Metrics]
    mean_f1: float
    std_f1: float

    def to_json(self) -> dict:
        return {"mode": self.mode, "mean_f1": self.mean_f1, "std_f1": self.std_f1,
                "per_fold": [m.to_json() for m in self.per_fold]}


def run_protocol(dataset: Dataset, folds: FoldAssignment, config: ModelConfig,
                 dgp: DgpModel | None = None, mode: str = "wo-DGP", seed: int = 0,
                 include_null: bool = False, supplement: bool = False) -> ProtocolResult:
    """Cross-validated train/evaluate over the fold assignment.

    w-DGP and w-HExp apply mask_augment with the given model's subsets to the
    training folds only. Activities with an empty or missing subset fall back
    to all sources (with a warning) rather than training on nothing."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    if mode in ("w-DGP", "w-HExp") and dgp is None:
        raise ConfigError(f"mode {mode} requires a DgpModel")
    frames = dataset.frames
    activities = tuple(dataset.activities)
    subsets: dict[str, frozenset[str]] = {}
    if mode != "wo-DGP":
        all_sources = frozenset(dataset.deployment.source_ids)
        for y in activities:
            chosen = dgp.subsets.get(y, frozenset())
            if not chosen:
                logger.warning("activity %r: empty subset, falling back to all sources", y)
                chosen = all_sources
            subsets[y] = frozenset(chosen)
    per_fold: list[Metrics] = []
    window_len = frames[0].samples.shape[1]
    for fold in range(folds.k):
        train_frames, val_frames = folds.split(frames, fold)
        if mode != "wo-DGP":
            train_frames = mask_augment(train_frames, subsets, config.mask_sigma,
                                        int(derive_rng(seed, 11, fold).integers(2 ** 31)),
                                        dataset.deployment, supplement=supplement)
        network = build(config, dataset.deployment, activities, window_len,
                        seed=int(derive_rng(seed, 12, fold).integers(2 ** 31)))
        trained = train(network, train_frames, config,
                        seed=int(derive_rng(seed, 13, fold).integers(2 ** 31)))
        per_fold.append(evaluate(trained, val_frames, include_null=include_null))
    f1s = np.array([m.macro_f1 for m in per_fold])
    return ProtocolResult(mode=mode, per_fold=per_fold,
                          mean_f1=float(f1s.mean()), std_f1=float(f1s.std()))
