"""A small convolutional representation network with a reward head and a rotation head.

Everything is float64 and NHWC. The trunk maps an image to a ``repr_dim``
vector (the output of the last dense layer); the reward head is a dense map to
one output per arm and the rotation head a dense map to the four rotation
classes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigurationError, ContractError, DataError, FormatError
from .ssl import NUM_ROTATIONS, make_pretext_batch

ACTIVATIONS = ("relu", "linear")
CHECKPOINT_MAGIC = b"SSBNET01"


@dataclass(frozen=True)
class ConvLayer:
    filters: int
    kernel: int = 3
    stride: int = 1
    activation: str = "relu"
    pool: int = 2


@dataclass(frozen=True)
class DenseLayer:
    units: int
    activation: str = "relu"


@dataclass(frozen=True)
class NetworkSpec:
    input_shape: tuple[int, int, int]
    conv_layers: tuple[ConvLayer, ...]
    dense_layers: tuple[DenseLayer, ...]
    num_arms: int
    num_rotations: int = NUM_ROTATIONS

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "conv_layers", tuple(self.conv_layers))
        object.__setattr__(self, "dense_layers", tuple(self.dense_layers))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigurationError(f"input_shape must be (H, W, C), got {self.input_shape}")
        if self.num_rotations != NUM_ROTATIONS:
            raise ConfigurationError("the rotation head always has 4 classes")
        if self.num_arms < 1:
            raise ConfigurationError("num_arms must be >= 1")
        if not self.dense_layers:
            raise ConfigurationError("at least one dense layer is required; its width is repr_dim")
        for layer in (*self.conv_layers, *self.dense_layers):
            if layer.activation not in ACTIVATIONS:
                raise ConfigurationError(f"unknown activation {layer.activation!r}")
        self.conv_output_shape()  # validates spatial sizes

    @property
    def repr_dim(self) -> int:
        return self.dense_layers[-1].units

    def conv_output_shape(self) -> tuple[int, int, int]:
        h, w, c = self.input_shape
        for i, layer in enumerate(self.conv_layers):
            if layer.kernel > min(h, w) or layer.stride < 1 or layer.pool < 1:
                raise ConfigurationError(f"conv layer {i} does not fit a {h}x{w} input")
            h = (h - layer.kernel) // layer.stride + 1
            w = (w - layer.kernel) // layer.stride + 1
            h, w, c = h // layer.pool, w // layer.pool, layer.filters
            if h < 1 or w < 1:
                raise ConfigurationError(f"conv layer {i} pools its input away")
        return h, w, c

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        c = self.input_shape[2]
        for i, layer in enumerate(self.conv_layers):
            shapes[f"conv{i}.W"] = (layer.kernel * layer.kernel * c, layer.filters)
            shapes[f"conv{i}.b"] = (layer.filters,)
            c = layer.filters
        width = int(np.prod(self.conv_output_shape()))
        for i, layer in enumerate(self.dense_layers):
            shapes[f"dense{i}.W"] = (width, layer.units)
            shapes[f"dense{i}.b"] = (layer.units,)
            width = layer.units
        shapes["reward.W"] = (width, self.num_arms)
        shapes["reward.b"] = (self.num_arms,)
        shapes["rotation.W"] = (width, self.num_rotations)
        shapes["rotation.b"] = (self.num_rotations,)
        return shapes

    def num_parameters(self) -> int:
        return sum(int(np.prod(s)) for s in self.parameter_shapes().values())

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> NetworkSpec:
        return cls(
            input_shape=tuple(d["input_shape"]),
            conv_layers=tuple(ConvLayer(**c) for c in d["conv_layers"]),
            dense_layers=tuple(DenseLayer(**c) for c in d["dense_layers"]),
            num_arms=d["num_arms"],
            num_rotations=d.get("num_rotations", NUM_ROTATIONS),
        )

    def digest(self) -> bytes:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).digest()

    @classmethod
    def default(cls, input_shape, num_arms, repr_dim=128, conv_filters=(16, 32)) -> NetworkSpec:
        """Two 3x3 relu conv layers with 2x2 max pooling, then one dense layer of width ``repr_dim``."""
        return cls(
            input_shape=tuple(input_shape),
            conv_layers=tuple(ConvLayer(f) for f in conv_filters),
            dense_layers=(DenseLayer(repr_dim),),
            num_arms=num_arms,
        )


class RepresentationNet:
    def __init__(self, spec: NetworkSpec, params: dict[str, np.ndarray]):
        shapes = spec.parameter_shapes()
        if list(params) != list(shapes):
            raise ContractError("parameter names do not match the network spec")
        for name, shape in shapes.items():
            if params[name].shape != shape:
                raise ContractError(f"{name} has shape {params[name].shape}, expected {shape}")
        self.spec = spec
        self.params = params

    @classmethod
    def init(cls, spec: NetworkSpec, rng: np.random.Generator) -> RepresentationNet:
        """Weights and biases uniform in +-1/sqrt(fan_in), the usual default for conv and dense layers.

        Drawn in layer order. Larger (He-scaled) weights diverge under SGD at lr 0.25.
        """
        shapes = spec.parameter_shapes()
        params = {}
        for name, shape in shapes.items():
            fan_in = shapes[name[:-2] + ".W"][0]
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
        return cls(spec, params)

    def copy(self) -> RepresentationNet:
        return RepresentationNet(self.spec, {k: v.copy() for k, v in self.params.items()})

    def flat_parameters(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params.values()])

    # -- trunk ---------------------------------------------------------------

    def _check_input(self, x) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1:] != self.spec.input_shape:
            raise DataError(f"expected images of shape {self.spec.input_shape}, got {x.shape[1:]}")
        return x

    def trunk_forward(self, x: np.ndarray):
        """Map an (n, H, W, C) batch to (n, repr_dim) features; also returns the backward cache."""
        x = self._check_input(x)
        n = x.shape[0]
        p = self.params
        cache = []
        h = x
        for i, layer in enumerate(self.spec.conv_layers):
            in_shape = h.shape
            cols = kernels.im2col(h, layer.kernel, layer.stride)
            ho = (in_shape[1] - layer.kernel) // layer.stride + 1
            wo = (in_shape[2] - layer.kernel) // layer.stride + 1
            a = (cols @ p[f"conv{i}.W"] + p[f"conv{i}.b"]).reshape(n, ho, wo, layer.filters)
            idx = None
            if layer.pool > 1:
                pre_shape = a.shape
                a, idx = kernels.maxpool_forward(a, layer.pool)
            else:
                pre_shape = None
            # pooling before the activation is equivalent for monotone relu and 4x cheaper
            h = np.maximum(a, 0.0) if layer.activation == "relu" else a
            cache.append((in_shape, cols, pre_shape, idx, h))
        h = h.reshape(n, -1)
        for i, layer in enumerate(self.spec.dense_layers):
            h_in = h
            h = h_in @ p[f"dense{i}.W"] + p[f"dense{i}.b"]
            if layer.activation == "relu":
                np.maximum(h, 0.0, out=h)
            cache.append((h_in, h))
        return h, cache

    def trunk_backward(self, dz: np.ndarray, cache, grads: dict) -> None:
        p = self.params
        n_conv = len(self.spec.conv_layers)
        d = dz
        for i in reversed(range(len(self.spec.dense_layers))):
            layer = self.spec.dense_layers[i]
            h_in, h_out = cache[n_conv + i]
            if layer.activation == "relu":
                d = d * (h_out > 0)
            grads[f"dense{i}.W"] = h_in.T @ d
            grads[f"dense{i}.b"] = d.sum(axis=0)
            d = d @ p[f"dense{i}.W"].T
        if n_conv == 0:
            return
        d = d.reshape(cache[n_conv - 1][4].shape)
        for i in reversed(range(n_conv)):
            layer = self.spec.conv_layers[i]
            in_shape, cols, pre_shape, idx, h_out = cache[i]
            if layer.activation == "relu":
                d = d * (h_out > 0)
            if layer.pool > 1:
                d = kernels.maxpool_backward(np.ascontiguousarray(d), idx, pre_shape, layer.pool)
            d2 = d.reshape(-1, layer.filters)
            grads[f"conv{i}.W"] = cols.T @ d2
            grads[f"conv{i}.b"] = _column_sums(d2)
            if i > 0:
                d = kernels.col2im(np.ascontiguousarray(d2 @ p[f"conv{i}.W"].T), in_shape, layer.kernel, layer.stride)

    # -- heads ---------------------------------------------------------------

    def reward_head(self, z: np.ndarray) -> np.ndarray:
        return z @ self.params["reward.W"] + self.params["reward.b"]

    def rotation_head(self, z: np.ndarray) -> np.ndarray:
        return z @ self.params["rotation.W"] + self.params["rotation.b"]


def _column_sums(a: np.ndarray) -> np.ndarray:
    # gemv is much faster than sum(axis=0) on tall C-ordered blocks
    return np.ones(a.shape[0]) @ a


def forward_repr(net: RepresentationNet, image: np.ndarray) -> np.ndarray:
    """Representation of one (H, W, C) image, or of an (n, H, W, C) batch."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        return net.trunk_forward(image[None])[0][0]
    return net.trunk_forward(image)[0]


@dataclass
class TrainBatch:
    images: np.ndarray
    chosen_arms: np.ndarray
    rewards: np.ndarray
    ssl_images: np.ndarray | None = None
    ssl_labels: np.ndarray | None = None
    #: ssl_images[4 * i] is images[i], so one trunk pass can serve both losses
    ssl_shares_source: bool = False

    @classmethod
    def build(cls, images, chosen_arms, rewards, with_ssl: bool = False) -> TrainBatch:
        images = np.asarray(images, dtype=np.float64)
        batch = cls(images, np.asarray(chosen_arms, dtype=np.intp), np.asarray(rewards, dtype=np.float64))
        if with_ssl:
            pre = make_pretext_batch(images)
            batch.ssl_images, batch.ssl_labels = pre.images, pre.labels
            batch.ssl_shares_source = True
        return batch

    def __len__(self):
        return len(self.images)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    m = logits.shape[0]
    loss = -float(log_p[np.arange(m), labels].mean())
    grad = np.exp(log_p)
    grad[np.arange(m), labels] -= 1.0
    return loss, grad / m


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _bandit_terms(pred_all: np.ndarray, arms: np.ndarray, rewards: np.ndarray):
    n = len(arms)
    diff = pred_all[np.arange(n), arms] - rewards
    loss = float(np.mean(diff * diff))
    dpred = np.zeros_like(pred_all)
    dpred[np.arange(n), arms] = 2.0 * diff / n
    return loss, dpred


def loss_bandit(net: RepresentationNet, batch: TrainBatch) -> float:
    """Mean squared error of the chosen arm's predicted reward."""
    if len(batch) == 0:
        raise ContractError("bandit loss of an empty batch")
    pred = net.reward_head(forward_repr(net, batch.images))
    return _bandit_terms(pred, batch.chosen_arms, batch.rewards)[0]


def loss_ssl(net: RepresentationNet, batch: TrainBatch) -> float:
    """Mean cross-entropy of the rotation head over the augmented images."""
    if batch.ssl_images is None or len(batch.ssl_images) == 0:
        raise ContractError("self-supervised loss of an empty batch")
    logits = net.rotation_head(forward_repr(net, batch.ssl_images))
    return softmax_cross_entropy(logits, batch.ssl_labels)[0]


def ssl_weight(mu: float, t: float, beta: int) -> float:
    """mu ** (t / beta) with a real exponent; 0 ** 0 is 1."""
    if not 0.0 <= mu <= 1.0:
        raise ConfigurationError(f"mu must lie in [0, 1], got {mu}")
    if beta < 1:
        raise ConfigurationError(f"beta must be >= 1, got {beta}")
    if t == 0:
        return 1.0
    return float(mu) ** (t / beta)


def combined_loss(net: RepresentationNet, batch: TrainBatch, mu: float, t: float, beta: int) -> float:
    w = ssl_weight(mu, t, beta)
    loss = loss_bandit(net, batch)
    if w != 0.0:
        loss += w * loss_ssl(net, batch)
    return loss


def backward(net: RepresentationNet, batch: TrainBatch, weight: float = 0.0):
    """Gradients of ``loss_bandit + weight * loss_ssl`` for every parameter.

    Returns ``(grads, bandit_loss, ssl_loss)``; ``ssl_loss`` is None when the
    self-supervised term is off (weight 0), in which case the rotation head
    gets exactly zero gradient and no augmented images are touched.
    """
    if len(batch) == 0:
        raise ContractError("backward on an empty batch")
    p = net.params
    grads: dict[str, np.ndarray] = {}
    use_ssl = weight != 0.0
    if use_ssl and batch.ssl_images is None:
        raise ContractError("nonzero self-supervised weight but the batch has no augmented images")

    if use_ssl and batch.ssl_shares_source:
        z_all, cache = net.trunk_forward(batch.ssl_images)
        z = z_all[0::NUM_ROTATIONS]
    else:
        z, cache = net.trunk_forward(batch.images)
        if use_ssl:
            z_all, cache_ssl = net.trunk_forward(batch.ssl_images)

    pred = net.reward_head(z)
    l_b, dpred = _bandit_terms(pred, batch.chosen_arms, batch.rewards)
    grads["reward.W"] = z.T @ dpred
    grads["reward.b"] = dpred.sum(axis=0)
    dz = dpred @ p["reward.W"].T

    l_ss = None
    if use_ssl:
        logits = net.rotation_head(z_all)
        l_ss, dlogits = softmax_cross_entropy(logits, batch.ssl_labels)
        dlogits *= weight
        grads["rotation.W"] = z_all.T @ dlogits
        grads["rotation.b"] = dlogits.sum(axis=0)
        dz_all = dlogits @ p["rotation.W"].T
        if batch.ssl_shares_source:
            dz_all[0::NUM_ROTATIONS] += dz
            net.trunk_backward(dz_all, cache, grads)
        else:
            trunk_grads: dict[str, np.ndarray] = {}
            net.trunk_backward(dz, cache, trunk_grads)
            net.trunk_backward(dz_all, cache_ssl, grads)
            for k, v in trunk_grads.items():
                grads[k] = grads[k] + v
    else:
        grads["rotation.W"] = np.zeros_like(p["rotation.W"])
        grads["rotation.b"] = np.zeros_like(p["rotation.b"])
        net.trunk_backward(dz, cache, grads)
    return {k: grads[k] for k in p}, l_b, l_ss


@dataclass
class OptimizerState:
    kind: str = "sgd"
    learning_rate: float = 0.25
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict, repr=False)
    v: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.kind!r}")
        if self.learning_rate < 0:
            raise ConfigurationError("learning rate must be nonnegative")

    def step(self, params: dict, grads: dict) -> None:
        lr = self.learning_rate
        if self.kind == "sgd":
            for k, g in grads.items():
                params[k] -= lr * g
            return
        self.step_count += 1
        b1, b2 = self.adam_beta1, self.adam_beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.adam_eps)


def train_epoch(net, optimizer, images, arms, rewards, weight, rng, batch_size=64):
    """One shuffled pass over the data. Returns the mean bandit and ssl losses seen."""
    n = len(images)
    order = rng.permutation(n)
    sum_b = sum_s = 0.0
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        batch = TrainBatch.build(images[idx], arms[idx], rewards[idx], with_ssl=weight != 0.0)
        grads, l_b, l_ss = backward(net, batch, weight)
        optimizer.step(net.params, grads)
        sum_b += l_b * len(idx)
        if l_ss is not None:
            sum_s += l_ss * len(idx)
    return sum_b / n, (sum_s / n if weight != 0.0 else None)


def train(
    net: RepresentationNet,
    optimizer: OptimizerState,
    images: np.ndarray,
    arms: np.ndarray,
    rewards: np.ndarray,
    epochs: int,
    rng: np.random.Generator,
    mu: float | None = None,
    beta: int = 500,
    t: int = 0,
    batch_size: int = 64,
) -> RepresentationNet:
    """Minimise the bandit loss (plus mu**(t/beta) times the rotation loss when ``mu`` is given).

    The self-supervised weight is fixed for the whole call. ``net`` is updated
    in place and returned.
    """
    if len(images) == 0:
        raise ContractError("cannot train on an empty history")
    if epochs < 1:
        raise ConfigurationError("epochs must be >= 1")
    weight = 0.0 if mu is None else ssl_weight(mu, t, beta)
    images = np.asarray(images, dtype=np.float64)
    arms = np.asarray(arms, dtype=np.intp)
    rewards = np.asarray(rewards, dtype=np.float64)
    for _ in range(epochs):
        train_epoch(net, optimizer, images, arms, rewards, weight, rng, batch_size)
    return net


def save_checkpoint(net: RepresentationNet, path) -> None:
    """Header (magic, spec digest, spec JSON, parameter count) then little-endian float64s in layer order."""
    spec_json = json.dumps(net.spec.to_dict(), sort_keys=True, separators=(",", ":")).encode()
    flat = net.flat_parameters().astype("<f8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(net.spec.digest())
        f.write(struct.pack("<I", len(spec_json)))
        f.write(spec_json)
        f.write(struct.pack("<Q", flat.size))
        f.write(flat.tobytes())


def load_checkpoint(path) -> RepresentationNet:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", offset=0, path=path)
    off = 8
    digest = blob[off:off + 32]
    off += 32
    if len(blob) < off + 4:
        raise FormatError("truncated checkpoint header", offset=off, path=path)
    (n_json,) = struct.unpack_from("<I", blob, off)
    off += 4
    try:
        spec = NetworkSpec.from_dict(json.loads(blob[off:off + n_json]))
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable network spec: {exc}", offset=off, path=path) from None
    if spec.digest() != digest:
        raise FormatError("spec digest mismatch", offset=8, path=path)
    off += n_json
    if len(blob) < off + 8:
        raise FormatError("truncated checkpoint header", offset=off, path=path)
    (count,) = struct.unpack_from("<Q", blob, off)
    off += 8
    if count != spec.num_parameters():
        raise FormatError(f"checkpoint holds {count} parameters, spec needs {spec.num_parameters()}", offset=off - 8, path=path)
    if len(blob) != off + 8 * count:
        raise FormatError("parameter payload length mismatch", offset=off, path=path)
    flat = np.frombuffer(blob, dtype="<f8", count=count, offset=off).astype(np.float64)
    params = {}
    pos = 0
    for name, shape in spec.parameter_shapes().items():
        size = int(np.prod(shape))
        params[name] = flat[pos:pos + size].reshape(shape).copy()
        pos += size
    return RepresentationNet(spec, params)
