"""MLP feature generator and twin classifiers.

Binary bundle layout (``save_bundle`` / ``load_bundle``)::

    swdda-bundle v1 generator=<w0,w1,...> classifier=<w0,w1,...> seed=<int>\\n
    <float64 little-endian payload>

The payload lists generator layers, then C1 layers, then C2 layers. Each layer
contributes its weight matrix (fan_in x fan_out, row-major) followed by its
bias (fan_out values).
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

HEADER_MAGIC = "swdda-bundle"
HEADER_VERSION = "v1"

Layer = Tuple[Tensor, Tensor]


@dataclass(frozen=True)
class MlpSpec:
    layer_widths: Tuple[int, ...]

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"an MLP needs >= 2 positive widths, got {widths}")
        object.__setattr__(self, "layer_widths", widths)

    @property
    def input_width(self):
        return self.layer_widths[0]

    @property
    def output_width(self):
        return self.layer_widths[-1]

    def parameter_count(self):
        w = self.layer_widths
        return sum(w[i] * w[i + 1] + w[i + 1] for i in range(len(w) - 1))


@dataclass
class ModelBundle:
    generator_spec: MlpSpec
    classifier_spec: MlpSpec
    generator_params: List[Layer] = field(default_factory=list)
    c1_params: List[Layer] = field(default_factory=list)
    c2_params: List[Layer] = field(default_factory=list)
    init_seed: int = 0

    def generator_tensors(self):
        return [t for layer in self.generator_params for t in layer]

    def classifier_tensors(self):
        return [t for layer in self.c1_params + self.c2_params for t in layer]

    def all_tensors(self):
        return self.generator_tensors() + self.classifier_tensors()

    def zero_grad(self):
        for t in self.all_tensors():
            t.zero_grad()

    def snapshot(self):
        """Copies of every parameter array, generator first."""
        return [t.data.copy() for t in self.all_tensors()]

    def parameter_count(self):
        return self.generator_spec.parameter_count() + 2 * self.classifier_spec.parameter_count()


def _init_layers(spec, rng):
    layers = []
    widths = spec.layer_widths
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        layers.append((Tensor(w, requires_grad=True), Tensor(np.zeros((1, fan_out)), requires_grad=True)))
    return layers


def init_bundle(gspec, cspec, seed):
    """Kaiming-uniform weights, zero biases; G, C1 and C2 use independent streams."""
    if gspec.output_width != cspec.input_width:
        raise ShapeError(
            f"generator emits {gspec.output_width} features, classifier expects {cspec.input_width}")
    g_seq, c1_seq, c2_seq = np.random.SeedSequence(seed).spawn(3)
    return ModelBundle(
        generator_spec=gspec,
        classifier_spec=cspec,
        generator_params=_init_layers(gspec, np.random.default_rng(g_seq)),
        c1_params=_init_layers(cspec, np.random.default_rng(c1_seq)),
        c2_params=_init_layers(cspec, np.random.default_rng(c2_seq)),
        init_seed=int(seed),
    )


def _mlp(layers, x, final_relu):
    h = x
    last = len(layers) - 1
    for i, (w, b) in enumerate(layers):
        if h.cols != w.rows:
            raise ShapeError(f"layer {i} expects width {w.rows}, got {h.cols}")
        h = ad.add_bias(ad.matmul(h, w), b)
        if i < last or final_relu:
            h = ad.relu(h)
    return h


def forward_generator(bundle, x):
    """Features from G; every layer, including the last, is relu-activated."""
    return _mlp(bundle.generator_params, ad._as_tensor(x), final_relu=True)


def forward_classifier(params, features):
    """Raw logits: affine + relu per hidden layer, affine output layer."""
    return _mlp(params, ad._as_tensor(features), final_relu=False)


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict_proba(bundle, x):
    """Average of the two classifiers' softmax outputs."""
    feats = forward_generator(bundle, Tensor(np.asarray(x.data if isinstance(x, Tensor) else x)))
    p1 = _softmax(forward_classifier(bundle.c1_params, feats).data)
    p2 = _softmax(forward_classifier(bundle.c2_params, feats).data)
    return (p1 + p2) / 2.0


def predict(bundle, x):
    # np.argmax returns the first maximum, i.e. ties go to the lower class
    return np.argmax(predict_proba(bundle, x), axis=1)


def save_bundle(bundle, path):
    g = ",".join(map(str, bundle.generator_spec.layer_widths))
    c = ",".join(map(str, bundle.classifier_spec.layer_widths))
    header = f"{HEADER_MAGIC} {HEADER_VERSION} generator={g} classifier={c} seed={bundle.init_seed}\n"
    chunks = []
    for layers in (bundle.generator_params, bundle.c1_params, bundle.c2_params):
        for w, b in layers:
            chunks.append(w.data.reshape(-1))
            chunks.append(b.data.reshape(-1))
    payload = np.concatenate(chunks).astype("<f8").tobytes()
    Path(path).write_bytes(header.encode("ascii") + payload)


def load_bundle(path):
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    fields = raw[:nl].decode("ascii").split()
    if len(fields) != 5 or fields[0] != HEADER_MAGIC or fields[1] != HEADER_VERSION:
        raise ValueError(f"{path}: not a {HEADER_MAGIC} {HEADER_VERSION} file")
    kv = dict(f.split("=", 1) for f in fields[2:])
    gspec = MlpSpec(tuple(int(w) for w in kv["generator"].split(",")))
    cspec = MlpSpec(tuple(int(w) for w in kv["classifier"].split(",")))
    values = np.frombuffer(raw[nl + 1:], dtype="<f8")
    expected = gspec.parameter_count() + 2 * cspec.parameter_count()
    if values.size != expected:
        raise ValueError(f"{path}: payload holds {values.size} reals, expected {expected}")

    pos = 0

    def take(spec):
        nonlocal pos
        layers = []
        w = spec.layer_widths
        for fan_in, fan_out in zip(w[:-1], w[1:]):
            weight = values[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
            pos += fan_in * fan_out
            bias = values[pos:pos + fan_out].reshape(1, fan_out)
            pos += fan_out
            layers.append((Tensor(weight, requires_grad=True), Tensor(bias, requires_grad=True)))
        return layers

    return ModelBundle(gspec, cspec, take(gspec), take(cspec), take(cspec), int(kv["seed"]))
