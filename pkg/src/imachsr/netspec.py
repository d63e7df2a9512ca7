"""Declarative segmentation nets, tap-point resolution and tapped forward passes.

Layers are numbered 1..D.  A tap at layer ``i`` observes the output of layer
``i``; the head (layer D) can never be tapped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

LAYER_KINDS = ("conv_relu", "maxpool", "upsample", "conv_head")
ANNOTATIONS = (
    "block_boundary",
    "downsample",
    "bottleneck",
    "skip_source",
    "skip_target",
    "fusion",
    "normalization_adjacent",
)
RULES = (
    "after_downsample",
    "between_blocks",
    "at_bottleneck",
    "around_attention",
    "at_skip",
    "near_normalization",
    "at_fusion",
    "explicit_indices",
    "pattern",
)
ANCHORS = ("input", "central", "output")

_RULE_FLAGS = {
    "after_downsample": ("downsample",),
    "between_blocks": ("block_boundary",),
    "at_bottleneck": ("bottleneck",),
    "at_skip": ("skip_source", "skip_target"),
    "near_normalization": ("normalization_adjacent",),
    "at_fusion": ("fusion",),
}


class SpecError(ValueError):
    pass


class TapResolutionError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    channels_out: int | None = None
    annotations: frozenset[str] = frozenset()

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise SpecError(f"unknown layer kind {self.kind!r}")
        object.__setattr__(self, "annotations", frozenset(self.annotations))
        unknown = set(self.annotations) - set(ANNOTATIONS)
        if unknown:
            raise SpecError(f"unknown annotations {sorted(unknown)}")


@dataclass(frozen=True)
class ModelSpec:
    in_channels: int
    height: int
    width: int
    num_classes: int
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))

    @property
    def depth(self) -> int:
        return len(self.layers)

    def layer_shapes(self) -> list[tuple[int, int, int]]:
        """Output (C, h, w) of every layer; raises SpecError on an inconsistent chain."""
        if self.num_classes < 2:
            raise SpecError("num_classes must be >= 2")
        if not self.layers or self.layers[-1].kind != "conv_head":
            raise SpecError("the last layer must be a conv_head")
        c, h, w = self.in_channels, self.height, self.width
        shapes = []
        for i, layer in enumerate(self.layers, start=1):
            if layer.kind == "conv_head" and i != self.depth:
                raise SpecError(f"conv_head at layer {i} is not last")
            if layer.kind in ("conv_relu", "conv_head"):
                c_out = layer.channels_out
                if layer.kind == "conv_head":
                    c_out = self.num_classes if c_out is None else c_out
                    if c_out != self.num_classes:
                        raise SpecError(f"conv_head maps to {c_out} channels, expected K={self.num_classes}")
                if not c_out or c_out < 1:
                    raise SpecError(f"layer {i} ({layer.kind}) needs channels_out >= 1")
                c = c_out
            else:
                if layer.channels_out not in (None, c):
                    raise SpecError(f"layer {i} ({layer.kind}) cannot change channels {c} -> {layer.channels_out}")
                if layer.kind == "maxpool":
                    if h % 2 or w % 2:
                        raise SpecError(f"layer {i} maxpool needs even spatial dims, got {h}x{w}")
                    h, w = h // 2, w // 2
                else:
                    h, w = h * 2, w * 2
            shapes.append((c, h, w))
        if shapes[-1][1:] != (self.height, self.width):
            raise SpecError(f"head resolution {shapes[-1][1:]} differs from input {(self.height, self.width)}")
        return shapes

    def validate(self) -> None:
        self.layer_shapes()

    def flags(self, index: int) -> frozenset[str]:
        layer = self.layers[index - 1]
        flags = set(layer.annotations)
        if layer.kind == "maxpool":
            flags.add("downsample")
        return frozenset(flags)


@dataclass(frozen=True)
class TapCriterion:
    """How to pick intermediate points.  ``pattern`` uses count/spacing/anchor."""

    rule: str
    indices: tuple[int, ...] = ()
    count: int = 0
    spacing_bases: int = 1
    anchor: str = "input"
    base_layers: int = 2

    def __post_init__(self):
        if self.rule not in RULES and self.rule != "none":
            raise TapResolutionError(f"unknown tap rule {self.rule!r}")
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))


NO_TAPS = TapCriterion("none")


@dataclass
class TapPoint:
    m: int
    layer_index: int
    feature_dims: tuple[int, int, int]
    adapter: dict[str, Tensor] | None = None


@dataclass
class ForwardResult:
    logits: Tensor
    taps: list[tuple[int, Tensor]] = field(default_factory=list)


def pattern_indices(depth: int, count: int, spacing_layers: int, anchor: str) -> list[int]:
    """Evenly spaced tap indices inside the eligible range [1, depth-1]."""
    if count < 1:
        raise TapResolutionError("pattern needs count >= 1")
    if spacing_layers < 1:
        raise TapResolutionError("pattern spacing must be >= 1 layer")
    if anchor not in ANCHORS:
        raise TapResolutionError(f"unknown anchor {anchor!r}; expected one of {ANCHORS}")
    span = (count - 1) * spacing_layers
    first, last = 1, depth - 1
    if anchor == "input":
        start = first
    elif anchor == "output":
        start = last - span
    else:
        start = math.ceil(depth / 2) - span // 2
    idx = [start + j * spacing_layers for j in range(count)]
    if idx[0] < first or idx[-1] > last:
        raise TapResolutionError(
            f"pattern (count={count}, spacing={spacing_layers} layers, anchor={anchor}) "
            f"does not fit eligible layers 1..{last}"
        )
    return idx


def resolve_taps(spec: ModelSpec, criterion: TapCriterion) -> list[TapPoint]:
    shapes = spec.layer_shapes()
    depth = spec.depth
    rule = criterion.rule
    if rule == "none":
        idx: list[int] = []
    elif rule == "explicit_indices":
        idx = list(criterion.indices)
        if not idx:
            raise TapResolutionError("explicit_indices needs at least one index")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise TapResolutionError(f"explicit indices must be strictly increasing: {idx}")
        if idx[0] < 1 or idx[-1] > depth - 1:
            raise TapResolutionError(f"explicit indices must lie in [1, {depth - 1}]: {idx}")
    elif rule == "pattern":
        idx = pattern_indices(depth, criterion.count, criterion.spacing_bases * criterion.base_layers, criterion.anchor)
    elif rule == "around_attention":
        raise TapResolutionError("around_attention: this layer vocabulary has no attention layers")
    else:
        wanted = _RULE_FLAGS[rule]
        idx = [i for i in range(1, depth) if spec.flags(i) & set(wanted)]
        if not idx:
            available = sorted({f for i in range(1, depth) for f in spec.flags(i)})
            raise TapResolutionError(f"{rule} matched no layers; available annotations: {available}")
    return [TapPoint(m, i, shapes[i - 1]) for m, i in enumerate(idx, start=1)]


def he_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Model:
    """Parameters for a ModelSpec plus one 1x1 adapter per tap point."""

    def __init__(self, spec: ModelSpec, taps: Sequence[TapPoint] = (), seed: int = 0):
        self.spec = spec
        self.shapes = spec.layer_shapes()
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.layer_params: list[dict[str, Tensor]] = []
        c_in = spec.in_channels
        for i, (layer, (c, _, _)) in enumerate(zip(spec.layers, self.shapes), start=1):
            if layer.kind in ("conv_relu", "conv_head"):
                w = he_uniform(rng, (c, c_in, 3, 3), fan_in=c_in * 9)
                self.layer_params.append(
                    {"weight": Tensor(w, requires_grad=True), "bias": Tensor(np.zeros(c), requires_grad=True)}
                )
            else:
                self.layer_params.append({})
            c_in = c
        self.taps: list[TapPoint] = []
        # adapters draw from their own stream so theta is identical for any tap set
        arng = np.random.default_rng([seed, 1])
        k = spec.num_classes
        for tap in taps:
            c_m = tap.feature_dims[0]
            tap = TapPoint(tap.m, tap.layer_index, tap.feature_dims)
            tap.adapter = {
                "weight": Tensor(he_uniform(arng, (k, c_m), fan_in=c_m), requires_grad=True),
                "bias": Tensor(np.zeros(k), requires_grad=True),
            }
            self.taps.append(tap)

    @property
    def depth(self) -> int:
        return self.spec.depth

    def theta(self) -> dict[str, Tensor]:
        return {
            f"layer{i}.{name}": t
            for i, params in enumerate(self.layer_params, start=1)
            for name, t in params.items()
        }

    def phi(self) -> dict[str, Tensor]:
        return {f"adapter{tap.m}.{name}": t for tap in self.taps for name, t in tap.adapter.items()}

    def named_parameters(self) -> dict[str, Tensor]:
        """theta then every phi_m, in a fixed order."""
        return {**self.theta(), **self.phi()}

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(t.size for t in self.theta().values())

    def zero_grad(self) -> None:
        T.zero_grad(self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        if set(state) != set(params):
            missing, extra = set(params) - set(state), set(state) - set(params)
            raise SpecError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            if params[k].shape != v.shape:
                raise SpecError(f"{k}: shape {v.shape} != {params[k].shape}")
            params[k].data = np.array(v, dtype=np.float64)


def build_model(spec: ModelSpec, seed: int, criterion: TapCriterion = NO_TAPS) -> Model:
    spec.validate()
    return Model(spec, resolve_taps(spec, criterion), seed=seed)


def forward_with_taps(model: Model, x) -> ForwardResult:
    x = T.as_tensor(x)
    spec = model.spec
    expected = (spec.in_channels, spec.height, spec.width)
    if tuple(x.shape[-3:]) != expected or x.data.ndim not in (3, 4):
        raise T.ShapeError(f"input shape {x.shape} does not match model input {expected}")
    wanted = {tap.layer_index: tap.m for tap in model.taps}
    taps = []
    h = x
    for i, (layer, params) in enumerate(zip(spec.layers, model.layer_params), start=1):
        if layer.kind == "conv_relu":
            h = T.relu(T.conv2d(h, params["weight"], params["bias"]))
        elif layer.kind == "conv_head":
            h = T.conv2d(h, params["weight"], params["bias"])
        elif layer.kind == "maxpool":
            h = T.maxpool2(h)
        else:
            hh, ww = h.shape[-2:]
            h = T.upsample_bilinear(h, 2 * hh, 2 * ww)
        if i in wanted:
            taps.append((wanted[i], h))
    return ForwardResult(logits=h, taps=taps)


def forward(model: Model, x) -> Tensor:
    return forward_with_taps(model, x).logits


# ---------------------------------------------------------------------------
# presets and a compact text form for config files


def parse_layers(text: str) -> tuple[LayerSpec, ...]:
    """Parse ``conv_relu:8@block_boundary, maxpool, ..., conv_head``."""
    layers = []
    for item in (s.strip() for s in text.split(",")):
        if not item:
            continue
        head, *flags = item.split("@")
        kind, _, ch = head.partition(":")
        layers.append(LayerSpec(kind.strip(), int(ch) if ch else None, frozenset(f.strip() for f in flags)))
    return tuple(layers)


def format_layers(layers: Sequence[LayerSpec]) -> str:
    parts = []
    for layer in layers:
        s = layer.kind + (f":{layer.channels_out}" if layer.channels_out is not None else "")
        s += "".join(f"@{f}" for f in sorted(layer.annotations))
        parts.append(s)
    return ", ".join(parts)


PRESETS = {
    # depth 12 encoder-decoder used for the desk task and the ablations
    "desk12": (
        "conv_relu:8, conv_relu:8@block_boundary, maxpool, conv_relu:16, conv_relu:16@block_boundary, "
        "maxpool, conv_relu:16@bottleneck, upsample@skip_target, conv_relu:16, upsample@skip_target, "
        "conv_relu:8, conv_head"
    ),
    # depth 6, small enough for exhaustive finite-difference checks
    "toy6": "conv_relu:4, maxpool, conv_relu:4@bottleneck, upsample, conv_relu:4, conv_head",
}


def preset_spec(name: str, in_channels: int, height: int, width: int, num_classes: int) -> ModelSpec:
    try:
        text = PRESETS[name]
    except KeyError:
        raise SpecError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None
    return ModelSpec(in_channels, height, width, num_classes, parse_layers(text))
