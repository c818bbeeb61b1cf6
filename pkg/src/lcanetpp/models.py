"""CNN, LCANet and LCANet++ classifiers over MFCC feature maps.

Architectures (conv layers use ``kernel`` x ``kernel`` filters with ``pad``):

* ``cnn``:       conv -> relu -> pool -> conv -> relu -> pool -> fc
* ``lcanet``:    lca  -> pool -> conv -> relu -> pool -> fc
* ``lcanet_pp``: lca  -> pool -> batchnorm -> lca -> pool -> fc

LCA layers output their sparse codes directly; the soft threshold is their
activation. Dictionaries learn only from reconstruction error (see
:func:`train_epoch`), every other tensor from the supervised loss.
"""

from __future__ import annotations

import json
import logging
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import lca as lca_mod
from . import numerics as nx
from .errors import CheckpointError, DataError, NumericError, ShapeError
from .lca import Dictionary, LcaConfig

log = logging.getLogger(__name__)

VARIANTS = ("cnn", "lcanet", "lcanet_pp")
_ALIASES = {"lcanet++": "lcanet_pp", "lcanetpp": "lcanet_pp"}


def canonical_variant(name: str) -> str:
    name = _ALIASES.get(name.lower(), name.lower())
    if name not in VARIANTS:
        raise ValueError(f"unknown model variant {name!r}; expected one of {VARIANTS}")
    return name


@dataclass(frozen=True)
class ModelSpec:
    variant: str
    n_classes: int = 3
    input_hw: tuple[int, int] = (20, 98)
    channels: tuple[int, int] = (32, 64)
    kernel: int = 5
    pad: int = 2
    lca: LcaConfig = LcaConfig()

    def __post_init__(self):
        object.__setattr__(self, "variant", canonical_variant(self.variant))
        object.__setattr__(self, "input_hw", tuple(int(v) for v in self.input_hw))
        object.__setattr__(self, "channels", tuple(int(v) for v in self.channels))
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2")

    @property
    def lca_layers(self) -> tuple[str, ...]:
        return {"cnn": (), "lcanet": ("lca1",), "lcanet_pp": ("lca1", "lca2")}[self.variant]

    @property
    def feature_hw(self) -> tuple[int, int]:
        """Spatial size entering the fully connected layer (after two pools)."""
        h, w = self.input_hw
        for _ in range(2):
            h, w = math.ceil(h / 2), math.ceil(w / 2)
        return h, w

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_hw"] = list(self.input_hw)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        d["lca"] = LcaConfig(**d.get("lca", {}))
        return cls(**d)


@dataclass
class ModelParams:
    """All tensors of one model keyed by layer-qualified name."""

    tensors: dict[str, np.ndarray]

    def dictionary(self, layer: str, spec: ModelSpec) -> Dictionary:
        return Dictionary(self.tensors[f"{layer}.phi"], 1, spec.pad)

    @property
    def trainable(self) -> list[str]:
        """Names updated by the supervised optimizer."""
        return [n for n in self.tensors if not n.endswith(".phi") and ".running_" not in n]

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()})


def build(spec: ModelSpec, seed: int = 0) -> ModelParams:
    """Fresh parameters: uniform(+-sqrt(1/fan_in)) weights, Gaussian unit-norm dictionaries."""
    rng = np.random.default_rng(seed)
    c1, c2 = spec.channels
    k = spec.kernel
    t: dict[str, np.ndarray] = {}

    def uniform(shape, fan_in):
        bound = math.sqrt(1.0 / fan_in)
        return rng.uniform(-bound, bound, shape).astype(nx.DTYPE)

    if spec.variant == "cnn":
        t["conv1.weight"] = uniform((c1, 1, k, k), k * k)
    else:
        t["lca1.phi"] = Dictionary.random(c1, 1, k, rng, pad=spec.pad).phi
    if spec.variant == "lcanet_pp":
        t["bn.gamma"] = np.ones(c1, nx.DTYPE)
        t["bn.beta"] = np.zeros(c1, nx.DTYPE)
        t["bn.running_mean"] = np.zeros(c1, nx.DTYPE)
        t["bn.running_var"] = np.ones(c1, nx.DTYPE)
        t["lca2.phi"] = Dictionary.random(c2, c1, k, rng, pad=spec.pad).phi
    else:
        t["conv2.weight"] = uniform((c2, c1, k, k), c1 * k * k)
    h, w = spec.feature_hw
    fan_in = c2 * h * w
    t["fc.weight"] = uniform((spec.n_classes, fan_in), fan_in)
    t["fc.bias"] = uniform((spec.n_classes,), fan_in)
    return ModelParams(t)


def expected_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    return {k: v.shape for k, v in build(spec, 0).tensors.items()}


@dataclass
class ForwardResult:
    logits: nx.Var
    param_vars: dict[str, nx.Var]
    lca_io: list[tuple[str, np.ndarray, np.ndarray]] = field(default_factory=list)


def forward(params: ModelParams, spec: ModelSpec, x, train: bool = False,
            tape: Optional[nx.GradTape] = None) -> ForwardResult:
    """Logits for a batch of normalized feature maps (B x 1 x H x W).

    With ``tape``, every trainable parameter is watched and returned in
    ``param_vars``. Pass ``x`` as a watched :class:`Var` to get input
    gradients. Train mode replaces the batch-norm running statistics stored
    in ``params``.
    """
    x = nx.as_var(x)
    if x.value.ndim != 4 or x.shape[1:] != (1,) + spec.input_hw:
        raise ShapeError(f"expected input B x 1 x {spec.input_hw}, got {x.shape}")
    t = params.tensors
    pv = {n: (tape.watch(t[n]) if tape is not None else nx.Var(t[n])) for n in params.trainable}
    lca_io = []
    pad = spec.pad

    def sparse(layer, h):
        code = lca_mod.lca_encode(h, params.dictionary(layer, spec), spec.lca)
        lca_io.append((layer, h.value, code.value))
        return code

    if spec.variant == "cnn":
        h = nx.pool(nx.relu(nx.conv(x, pv["conv1.weight"], 1, pad)))
    else:
        h = nx.pool(sparse("lca1", x))
    if spec.variant == "lcanet_pp":
        state = nx.BatchNormState(t["bn.running_mean"], t["bn.running_var"])
        h = nx.batchnorm(h, pv["bn.gamma"], pv["bn.beta"], state, train)
        if train:
            t["bn.running_mean"], t["bn.running_var"] = state.running_mean, state.running_var
        h = nx.pool(sparse("lca2", h))
    else:
        h = nx.pool(nx.relu(nx.conv(h, pv["conv2.weight"], 1, pad)))
    h = nx.reshape(h, (h.shape[0], -1))
    logits = nx.affine(h, pv["fc.weight"], pv["fc.bias"])
    return ForwardResult(logits, pv, lca_io)


def logits(params: ModelParams, spec: ModelSpec, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = [forward(params, spec, x[i:i + batch_size]).logits.value
           for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, spec.n_classes), nx.DTYPE)


def predict(params: ModelParams, spec: ModelSpec, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    # argmax returns the lowest index among ties
    return logits(params, spec, x, batch_size).argmax(axis=1)


def evaluate(params: ModelParams, spec: ModelSpec, x: np.ndarray, y, batch_size: int = 64) -> float:
    """Fraction of correctly classified samples (eval mode)."""
    y = np.asarray(y)
    if len(y) == 0:
        raise DataError("cannot evaluate on an empty split")
    return float(np.mean(predict(params, spec, x, batch_size) == y))


class Classifier:
    """A trained model bundled with its spec, as seen by the attack code."""

    def __init__(self, params: ModelParams, spec: ModelSpec):
        self.params = params
        self.spec = spec

    def logits(self, x: np.ndarray) -> np.ndarray:
        return logits(self.params, self.spec, x)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return predict(self.params, self.spec, x)

    def loss_gradient(self, x: np.ndarray, labels) -> np.ndarray:
        """Gradient of the mean cross-entropy w.r.t. the input maps (eval mode)."""
        tape = nx.GradTape()
        xv = tape.watch(np.asarray(x))
        res = forward(self.params, self.spec, xv, train=False, tape=None)
        loss = nx.cross_entropy(res.logits, labels)
        (g,) = tape.gradient(loss, [xv])
        return g


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    lr: float = 1e-4
    momentum: float = 0.9
    lr_dict: float = 0.01
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch norm needs two samples)")


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    accuracy: float
    recon: dict[str, float]


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    chunks = [perm[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    return chunks


def train_epoch(params: ModelParams, spec: ModelSpec, x: np.ndarray, y, config: TrainConfig,
                opt_state: nx.OptimizerState, epoch: int = 0) -> tuple[ModelParams, EpochMetrics]:
    """One pass over the training data in a seeded random order.

    Per batch: forward pass producing the LCA codes; an unsupervised
    dictionary step per LCA layer on that layer's input and code; then a
    supervised SGD-momentum step on all non-dictionary tensors, with
    gradients taken through the unrolled LCA dynamics.
    """
    y = np.asarray(y)
    rng = np.random.default_rng([config.seed, epoch])
    params = params.copy()
    losses, correct, recon = [], 0, {layer: [] for layer in spec.lca_layers}
    for idx in _batches(len(y), config.batch_size, rng):
        xb, yb = x[idx], y[idx]
        tape = nx.GradTape()
        res = forward(params, spec, xb, train=True, tape=tape)
        loss = nx.cross_entropy(res.logits, yb)
        if not np.isfinite(loss.value):
            raise NumericError(f"non-finite training loss in epoch {epoch}")
        names = list(res.param_vars)
        grads = tape.gradient(loss, [res.param_vars[n] for n in names])
        for layer, inp, code in res.lca_io:
            d = params.dictionary(layer, spec)
            recon[layer].append(lca_mod.reconstruction_loss(inp, code, d, spec.lca.lam) / len(idx))
            params.tensors[f"{layer}.phi"] = lca_mod.dict_update(d, inp, code, config.lr_dict, rng).phi
        updated = nx.sgd_momentum_step({n: params.tensors[n] for n in names},
                                       dict(zip(names, grads)), opt_state)
        params.tensors.update(updated)
        losses.append(float(loss.value) * len(idx))
        correct += int(np.sum(res.logits.value.argmax(axis=1) == yb))
    metrics = EpochMetrics(epoch, float(np.sum(losses) / len(y)), correct / len(y),
                           {k: float(np.mean(v)) for k, v in recon.items()})
    return params, metrics


def fit(spec: ModelSpec, x: np.ndarray, y, config: TrainConfig,
        params: Optional[ModelParams] = None,
        callback: Optional[Callable[[EpochMetrics], None]] = None) -> tuple[ModelParams, list[EpochMetrics]]:
    """Train for ``config.epochs`` epochs starting from ``build(spec, config.seed)``."""
    params = build(spec, config.seed) if params is None else params
    opt = nx.OptimizerState(config.lr, config.momentum)
    history = []
    for epoch in range(config.epochs):
        params, m = train_epoch(params, spec, x, y, config, opt, epoch)
        log.info("epoch %d: loss %.4f acc %.3f recon %s", epoch, m.loss, m.accuracy, m.recon)
        history.append(m)
        if callback is not None:
            callback(m)
    return params, history


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"LCANETPP"
FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")


@dataclass
class Checkpoint:
    params: ModelParams
    spec: ModelSpec
    extras: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)


def save_checkpoint(params: ModelParams, spec: ModelSpec, path, extras: Optional[dict] = None,
                    metadata: Optional[dict] = None) -> None:
    """Write magic, manifest length, JSON manifest, then a float32 little-endian blob.

    The file is written to a temporary sibling and renamed into place.
    """
    records, chunks, offset = [], [], 0
    for group, tensors in (("params", params.tensors), ("extras", extras or {})):
        for name, arr in tensors.items():
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            records.append({"name": name, "group": group, "shape": list(np.shape(arr)),
                            "offset": offset, "length": len(data)})
            chunks.append(data)
            offset += len(data)
    manifest = json.dumps({"format_version": FORMAT_VERSION, "spec": spec.to_dict(),
                           "metadata": metadata or {}, "tensors": records,
                           "blob_length": offset}, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC + _LEN.pack(len(manifest)) + manifest)
            for c in chunks:
                f.write(c)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path, expect_variant: Optional[str] = None) -> Checkpoint:
    data = Path(path).read_bytes()
    head = len(MAGIC) + _LEN.size
    if len(data) < head or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: missing {MAGIC!r} header")
    (mlen,) = _LEN.unpack_from(data, len(MAGIC))
    if len(data) < head + mlen:
        raise CheckpointError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[head:head + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {manifest.get('format_version')} "
                              f"not supported (expected {FORMAT_VERSION})")
    blob = data[head + mlen:]
    if len(blob) != manifest["blob_length"]:
        raise CheckpointError(f"{path}: blob has {len(blob)} bytes, manifest says "
                              f"{manifest['blob_length']} (truncated or padded file)")
    spec = ModelSpec.from_dict(manifest["spec"])
    if expect_variant is not None and spec.variant != canonical_variant(expect_variant):
        raise CheckpointError(f"{path}: checkpoint holds a {spec.variant!r} model, "
                              f"expected {canonical_variant(expect_variant)!r}")
    groups: dict[str, dict[str, np.ndarray]] = {"params": {}, "extras": {}}
    for rec in manifest["tensors"]:
        n = int(np.prod(rec["shape"], dtype=np.int64))
        if rec["length"] != 4 * n or rec["offset"] + rec["length"] > len(blob):
            raise CheckpointError(f"{path}: tensor {rec['name']!r} record is inconsistent")
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=rec["offset"])
        groups[rec["group"]][rec["name"]] = arr.reshape(rec["shape"]).astype(np.float32)
    shapes = expected_shapes(spec)
    got = {k: v.shape for k, v in groups["params"].items()}
    if got != shapes:
        raise CheckpointError(f"{path}: tensors {sorted(got)} with shapes do not match the "
                              f"{spec.variant} spec")
    return Checkpoint(ModelParams(groups["params"]), spec, groups["extras"],
                      manifest.get("metadata", {}))
