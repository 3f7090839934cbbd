"""Model specs with an explicit backbone/head split.

A model is a feature-extracting backbone (MLP or small CNN) followed
by a task head (classifier or input reconstructor).  Parameters live
in one flat float64 vector; the backbone block always comes first, so
its index range is independent of the head choice.
"""

import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .autodiff import GraphBuilder, NonFiniteError, backward


class SpecError(ValueError):
    """Invalid model specification."""


@dataclass(frozen=True)
class MlpBackbone:
    hidden: tuple = (64, 32)

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise SpecError(f"mlp backbone needs positive hidden sizes, got {self.hidden}")


@dataclass(frozen=True)
class ConvBackbone:
    """Stacked 3x3 valid convolutions (stride 1), each followed by ReLU."""

    channels: tuple
    image_shape: tuple  # (channels, height, width)

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))
        if not self.channels or any(c < 1 for c in self.channels):
            raise SpecError(f"conv backbone needs positive channel counts, got {self.channels}")
        if len(self.image_shape) != 3:
            raise SpecError(f"image_shape must be (channels, height, width), got {self.image_shape}")
        c, h, w = self.image_shape
        shrink = 2 * len(self.channels)
        if h - shrink < 1 or w - shrink < 1:
            raise SpecError(f"image {h}x{w} too small for {len(self.channels)} 3x3 conv layers")


@dataclass(frozen=True)
class Classifier:
    num_classes: int

    def __post_init__(self):
        if self.num_classes < 2:
            raise SpecError(f"classifier head needs >= 2 classes, got {self.num_classes}")


@dataclass(frozen=True)
class Reconstructor:
    """Single linear head mapping backbone features back to the input."""


class LossMode(enum.Enum):
    """How the loss is formed: cross-entropy on labels, or label-free
    mean-squared input reconstruction."""

    SUPERVISED = "supervised"
    UNSUPERVISED = "unsupervised"


class InitDistribution(enum.Enum):
    UNIT = "unit"      # N(0, 1) for every weight
    FAN_IN = "fan_in"  # N(0, 1/fan_in) per weight block

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value))
        except ValueError:
            raise SpecError(f"unknown init distribution {value!r}; use 'unit' or 'fan_in'") from None


@dataclass(frozen=True)
class InitSpec:
    distribution: InitDistribution = InitDistribution.FAN_IN
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "distribution", InitDistribution.parse(self.distribution))
        if not 0 <= int(self.seed) < 2**64:
            raise SpecError(f"seed must fit in 64 unsigned bits, got {self.seed}")


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    backbone: object = None
    head: object = None

    def __post_init__(self):
        if self.input_dim < 1:
            raise SpecError(f"input_dim must be positive, got {self.input_dim}")
        if self.backbone is None:
            object.__setattr__(self, "backbone", MlpBackbone())
        if self.head is None:
            raise SpecError("model spec needs a head (Classifier or Reconstructor)")
        if isinstance(self.backbone, ConvBackbone):
            c, h, w = self.backbone.image_shape
            if c * h * w != self.input_dim:
                raise SpecError(
                    f"conv image_shape {self.backbone.image_shape} does not flatten to input_dim {self.input_dim}"
                )
        elif not isinstance(self.backbone, MlpBackbone):
            raise SpecError(f"unknown backbone {self.backbone!r}")
        if not isinstance(self.head, (Classifier, Reconstructor)):
            raise SpecError(f"unknown head {self.head!r}")

    @property
    def feature_dim(self):
        """Backbone output width (the head's input width)."""
        if isinstance(self.backbone, MlpBackbone):
            return self.backbone.hidden[-1]
        c, h, w = self.backbone.image_shape
        shrink = 2 * len(self.backbone.channels)
        return self.backbone.channels[-1] * (h - shrink) * (w - shrink)

    @property
    def output_dim(self):
        if isinstance(self.head, Classifier):
            return self.head.num_classes
        return self.input_dim

    def with_head(self, head):
        return ModelSpec(self.input_dim, self.backbone, head)

    def to_dict(self):
        if isinstance(self.backbone, MlpBackbone):
            backbone = {"kind": "mlp", "hidden": list(self.backbone.hidden)}
        else:
            backbone = {
                "kind": "cnn",
                "channels": list(self.backbone.channels),
                "image_shape": list(self.backbone.image_shape),
            }
        if isinstance(self.head, Classifier):
            head = {"kind": "classifier", "num_classes": self.head.num_classes}
        else:
            head = {"kind": "reconstructor"}
        return {"input_dim": self.input_dim, "backbone": backbone, "head": head}

    @classmethod
    def from_dict(cls, d):
        bk = d.get("backbone", {"kind": "mlp", "hidden": [64, 32]})
        if bk.get("kind") == "mlp":
            backbone = MlpBackbone(tuple(bk.get("hidden", (64, 32))))
        elif bk.get("kind") == "cnn":
            backbone = ConvBackbone(tuple(bk["channels"]), tuple(bk["image_shape"]))
        else:
            raise SpecError(f"unknown backbone kind {bk.get('kind')!r}")
        hd = d["head"]
        if hd.get("kind") == "classifier":
            head = Classifier(int(hd["num_classes"]))
        elif hd.get("kind") == "reconstructor":
            head = Reconstructor()
        else:
            raise SpecError(f"unknown head kind {hd.get('kind')!r}")
        return cls(int(d["input_dim"]), backbone, head)


@dataclass(frozen=True)
class ParamBlock:
    name: str
    shape: tuple
    offset: int
    size: int
    fan_in: int
    backbone: bool
    bias: bool


@lru_cache(maxsize=None)
def layout(spec):
    """Flat-vector layout: backbone blocks first, then head blocks."""
    blocks = []
    off = 0

    def add(name, shape, fan_in, is_backbone, is_bias):
        nonlocal off
        size = int(np.prod(shape))
        blocks.append(ParamBlock(name, tuple(shape), off, size, fan_in, is_backbone, is_bias))
        off += size

    if isinstance(spec.backbone, MlpBackbone):
        dims = (spec.input_dim,) + spec.backbone.hidden
        for i in range(len(spec.backbone.hidden)):
            add(f"backbone.{i}.weight", (dims[i], dims[i + 1]), dims[i], True, False)
            add(f"backbone.{i}.bias", (dims[i + 1],), dims[i], True, True)
    else:
        chans = (spec.backbone.image_shape[0],) + spec.backbone.channels
        for i in range(len(spec.backbone.channels)):
            add(f"backbone.{i}.weight", (chans[i + 1], chans[i], 3, 3), chans[i] * 9, True, False)
            add(f"backbone.{i}.bias", (chans[i + 1],), chans[i] * 9, True, True)
    add("head.weight", (spec.feature_dim, spec.output_dim), spec.feature_dim, False, False)
    add("head.bias", (spec.output_dim,), spec.feature_dim, False, True)
    return tuple(blocks)


def num_params(spec):
    blocks = layout(spec)
    return blocks[-1].offset + blocks[-1].size


def backbone_param_count(spec):
    return sum(b.size for b in layout(spec) if b.backbone)


@dataclass(frozen=True)
class ModelState:
    """Flat parameter vector plus the backbone/head index partition."""

    spec: ModelSpec
    params: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.params, dtype=np.float64)
        if arr.shape != (num_params(self.spec),):
            raise SpecError(
                f"parameter vector has length {arr.shape}, spec needs {num_params(self.spec)}"
            )
        arr.flags.writeable = False
        object.__setattr__(self, "params", arr)

    @property
    def backbone_len(self):
        return backbone_param_count(self.spec)

    @property
    def backbone_slice(self):
        return slice(0, self.backbone_len)

    @property
    def head_slice(self):
        return slice(self.backbone_len, self.params.shape[0])

    def partition(self):
        nb = self.backbone_len
        return (("backbone", 0, nb), ("head", nb, self.params.shape[0]))

    def with_params(self, params):
        return ModelState(self.spec, params)


def init_params(spec, init):
    """Draw a fresh parameter vector.

    Uses a counter-based generator (Philox) keyed by the seed, so the
    value at each flat index is a pure function of (seed, index): the
    backbone initialization is identical across head choices, and the
    same seed always reproduces the same state bit-for-bit.  Biases
    start at zero under both distributions.
    """
    if not isinstance(init, InitSpec):
        init = InitSpec(*init) if isinstance(init, tuple) else InitSpec(seed=int(init))
    n = num_params(spec)
    gen = np.random.Generator(np.random.Philox(key=int(init.seed)))
    flat = gen.standard_normal(n)
    for b in layout(spec):
        if b.bias:
            flat[b.offset : b.offset + b.size] = 0.0
        elif init.distribution is InitDistribution.FAN_IN:
            flat[b.offset : b.offset + b.size] *= 1.0 / np.sqrt(b.fan_in)
    return ModelState(spec, flat)


def param_views(spec, params_flat):
    """Reshaped views of each layout block (no copies)."""
    return [params_flat[b.offset : b.offset + b.size].reshape(b.shape) for b in layout(spec)]


def _build_network(g, spec, param_ids, x_in, batch_size):
    """Backbone then head; returns (feature node, output node)."""
    blocks = layout(spec)
    idx = {b.name: pid for b, pid in zip(blocks, param_ids)}
    if isinstance(spec.backbone, MlpBackbone):
        h = x_in
        for i in range(len(spec.backbone.hidden)):
            h = g.relu(g.bias_add(g.matmul(h, idx[f"backbone.{i}.weight"]), idx[f"backbone.{i}.bias"]))
    else:
        c, hh, ww = spec.backbone.image_shape
        h = g.reshape(x_in, (batch_size, c, hh, ww))
        for i in range(len(spec.backbone.channels)):
            h = g.relu(g.bias_add(g.conv2d(h, idx[f"backbone.{i}.weight"]), idx[f"backbone.{i}.bias"]))
        h = g.reshape(h, (batch_size, spec.feature_dim))
    out = g.bias_add(g.matmul(h, idx["head.weight"]), idx["head.bias"])
    return h, out


def _check_batch(spec, features):
    features = np.ascontiguousarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise SpecError(f"batch must be a non-empty (n, d) array, got shape {features.shape}")
    if features.shape[1] != spec.input_dim:
        raise SpecError(f"batch feature dim {features.shape[1]} != model input dim {spec.input_dim}")
    return features


def _check_mode(spec, mode, labels):
    mode = LossMode(mode)
    if mode is LossMode.SUPERVISED:
        if not isinstance(spec.head, Classifier):
            raise SpecError("supervised loss needs a classifier head")
        if labels is None:
            raise SpecError("supervised loss needs labels")
    elif not isinstance(spec.head, Reconstructor):
        raise SpecError("unsupervised reconstruction loss needs a reconstructor head")
    return mode


def _loss_graph(spec, params_flat, features, labels, mode, check_finite=True):
    g = GraphBuilder() if check_finite else GraphBuilder.unchecked()
    x_in = g.add_input(features)
    pids = [g.add_param(v) for v in param_views(spec, params_flat)]
    _, out = _build_network(g, spec, pids, x_in, features.shape[0])
    if mode is LossMode.SUPERVISED:
        per = g.softmax_xent(out, labels)
    else:
        per = g.mse(out, x_in)
    loss = g.mean_batch(per)
    tensor, rec = g.finish(loss)
    return tensor, rec, g.value(per)


def _locate_bad_sample(spec, params_flat, features, labels, mode):
    """Best-effort index of the first batch row with a non-finite loss."""
    import warnings

    with np.errstate(all="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            _, _, per = _loss_graph(spec, params_flat, features, labels, mode, check_finite=False)
        except Exception:
            return None
    bad = np.flatnonzero(~np.isfinite(per))
    return int(bad[0]) if bad.size else None


def loss_and_grad(state, features, labels, mode):
    """Mean batch loss and the gradient over the full parameter vector."""
    spec = state.spec
    features = _check_batch(spec, features)
    mode = _check_mode(spec, mode, labels)
    if labels is not None:
        labels = np.ascontiguousarray(labels, dtype=np.int64)
        if labels.shape != (features.shape[0],):
            raise SpecError(f"labels shape {labels.shape} != batch size {features.shape[0]}")
    try:
        loss, rec, _ = _loss_graph(spec, state.params, features, labels, mode)
    except NonFiniteError as e:
        idx = _locate_bad_sample(spec, state.params, features, labels, mode)
        where = f" (first bad batch index: {idx})" if idx is not None else ""
        raise NonFiniteError(f"loss is not finite{where}: {e}") from None
    grads = backward(rec)
    flat = np.concatenate([t.array.reshape(-1) for t in grads])
    return loss.item(), flat


def loss_and_backbone_grad(state, features, labels, mode):
    """Mean batch loss and the gradient restricted to backbone indices.

    Head gradients are computed internally and discarded; the returned
    vector length equals the backbone parameter count regardless of the
    head.
    """
    loss, flat = loss_and_grad(state, features, labels, mode)
    return loss, flat[: state.backbone_len]


def _forward_nodes(state, features):
    spec = state.spec
    features = _check_batch(spec, features)
    g = GraphBuilder()
    x_in = g.add_input(features)
    pids = [g.add_param(v) for v in param_views(spec, state.params)]
    feat, out = _build_network(g, spec, pids, x_in, features.shape[0])
    return g, feat, out


def backbone_features(state, features):
    """Backbone outputs (the head's inputs) for a batch, shape (n, feature_dim)."""
    g, feat, _ = _forward_nodes(state, features)
    return np.array(g.value(feat))


def head_outputs(state, features):
    """Raw head outputs: logits for a classifier, reconstructions otherwise."""
    g, _, out = _forward_nodes(state, features)
    return np.array(g.value(out))


def predict_labels(state, features):
    if not isinstance(state.spec.head, Classifier):
        raise SpecError("predict_labels needs a classifier head")
    return head_outputs(state, features).argmax(axis=1)
