"""Detector graph: truncated MobileNetV2, Textual Attention Tower, DET head.

The graph is a flat, topologically ordered list of ``LayerSpec`` nodes.
The same description drives execution (``Model.forward``) and static cost
analysis (``tatdet.flops``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable

import numpy as np

from . import tensor as T
from .nn import BatchNormState, ConvSpec, batch_norm, bilinear_resize, conv2d
from .tensor import DimensionError, Tensor

# (expansion t, channels c, repeats n, first stride s) of MobileNetV2
MOBILENET_V2_STAGES = (
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
)
MOBILENET_V2_BLOCKS = sum(n for _, _, n, _ in MOBILENET_V2_STAGES)
MOBILENET_V2_HEAD_CHANNELS = 1280
EAST_MERGE_WIDTHS = (128, 64, 32)
DIST_SCALE = 1024.0

NODE_KINDS = ("input", "conv", "bn", "act", "resize", "add", "mul", "concat", "slice", "tap")
ACTIVATIONS = ("relu6", "sigmoid", "scaled_sigmoid")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    use_mobilenet: bool = True
    use_fru: bool = True
    use_tau: bool = True
    use_raw_input: bool = True
    backbone_blocks: int = 7
    fru_channels: int = 32
    tau_compress_channels: int = 8
    tau_encoder_dilations: tuple[int, ...] = (1, 3, 5, 7)
    output_stride: int = 4

    def validate(self) -> None:
        if not self.use_mobilenet:
            raise ConfigError(
                "use_mobilenet=false selects the EAST-PVAx2 baseline, which is only "
                "available as static FLOPs fixture data"
            )
        if not 1 <= self.backbone_blocks <= MOBILENET_V2_BLOCKS:
            raise ConfigError(f"backbone_blocks must be in [1, {MOBILENET_V2_BLOCKS}]")
        if self.output_stride != 4:
            raise ConfigError("only output_stride=4 is supported")
        if _stride_after_blocks(self.backbone_blocks) < 8:
            raise ConfigError("backbone must reach at least stride 8 for a tower")
        if self.use_raw_input and not self.use_fru:
            raise ConfigError("use_raw_input requires use_fru (side inputs are refined by FRUs)")
        if self.fru_channels < 4 or self.fru_channels % 4:
            raise ConfigError("fru_channels must be a positive multiple of 4")
        if self.tau_compress_channels < 1:
            raise ConfigError("tau_compress_channels must be positive")
        if not self.tau_encoder_dilations or any(r < 1 for r in self.tau_encoder_dilations):
            raise ConfigError("tau_encoder_dilations must be positive integers")

    # -- key=value text format --------------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> "ModelConfig":
        known = {f.name: f for f in fields(cls)}
        values = {}
        for key, raw in kv.items():
            if key not in known:
                continue
            default = getattr(cls(), key)
            values[key] = _coerce(key, raw, default)
        cfg = cls(**values)
        cfg.validate()
        return cfg

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return cls.from_mapping(parse_kv(text))

    @classmethod
    def load(cls, path: str | Path) -> "ModelConfig":
        return cls.from_text(Path(path).read_text())


def parse_kv(text: str) -> dict[str, str]:
    """Parse flat ``key=value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip().strip('"')
    return out


def _coerce(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, tuple):
            return tuple(int(x) for x in raw.replace(" ", "").strip("[]()").split(",") if x)
    except ValueError:
        raise ConfigError(f"invalid value for {key}: {raw!r}") from None
    return raw


def _stride_after_blocks(blocks: int) -> int:
    stride, count = 2, 0
    for _, _, n, s in MOBILENET_V2_STAGES:
        for i in range(n):
            if count == blocks:
                return stride
            stride *= s if i == 0 else 1
            count += 1
    return stride


@dataclass
class LayerSpec:
    name: str
    kind: str
    inputs: tuple[str, ...] = ()
    attrs: dict = field(default_factory=dict)


@dataclass
class Unit:
    """A named group of nodes forming one FRU/TAU/FMU/DET/backbone block."""

    kind: str
    prefix: str
    nodes: list[str] = field(default_factory=list)


@dataclass
class NetworkGraph:
    config: ModelConfig
    nodes: list[LayerSpec]
    taps: dict[int, str]
    outputs: dict[str, str]
    units: list[Unit]

    def node(self, name: str) -> LayerSpec:
        return self._index[name]

    def __post_init__(self):
        self._index = {n.name: n for n in self.nodes}

    @property
    def edges(self) -> list[tuple[str, str]]:
        return [(src, n.name) for n in self.nodes for src in n.inputs]

    def units_of(self, kind: str) -> list[Unit]:
        return [u for u in self.units if u.kind == kind]

    def backbone_nodes(self) -> list[str]:
        return [n.name for n in self.nodes if n.name.startswith("backbone.")]

    def conv_specs(self) -> dict[str, ConvSpec]:
        return {n.name: n.attrs["spec"] for n in self.nodes if n.kind == "conv"}

    def infer_shapes(self, h: int, w: int) -> dict[str, tuple[int, int, int]]:
        """Static (C, H, W) for every node at input resolution h x w."""
        shapes: dict[str, tuple[int, int, int]] = {}
        for node in self.nodes:
            try:
                shapes[node.name] = _node_shape(node, shapes, h, w)
            except (KeyError, DimensionError) as exc:
                raise DimensionError(f"cannot resolve shape of node {node.name!r}: {exc}",
                                     axis=node.name) from exc
        return shapes


def _node_shape(node: LayerSpec, shapes, h, w) -> tuple[int, int, int]:
    k = node.kind
    if k == "input":
        return (3, h, w)
    ins = [shapes[i] for i in node.inputs]
    if k == "conv":
        spec: ConvSpec = node.attrs["spec"]
        c, hh, ww = ins[0]
        if c != spec.in_channels:
            raise DimensionError(f"{c} channels into conv expecting {spec.in_channels}", axis="C")
        return (spec.out_channels, *spec.output_size(hh, ww))
    if k in ("bn", "act", "tap"):
        return ins[0]
    if k == "resize":
        c = ins[0][0]
        if "scale" in node.attrs:
            s = node.attrs["scale"]
            return (c, -(-ins[0][1] // s), -(-ins[0][2] // s))
        return (c, ins[1][1], ins[1][2])
    if k in ("add", "mul"):
        a, b = ins
        if a[1:] != b[1:] or (a[0] != b[0] and 1 not in (a[0], b[0])):
            raise DimensionError(f"{k} operands {a} vs {b}", axis="shape")
        return (max(a[0], b[0]), *a[1:])
    if k == "concat":
        if len({s[1:] for s in ins}) != 1:
            raise DimensionError(f"concat spatial mismatch {ins}", axis="HW")
        return (sum(s[0] for s in ins), *ins[0][1:])
    if k == "slice":
        lo, hi = node.attrs["channels"]
        return (hi - lo, *ins[0][1:])
    raise ValueError(f"unknown node kind {k}")


class _Builder:
    def __init__(self, config: ModelConfig):
        self.config = config
        self.nodes: list[LayerSpec] = []
        self.channels: dict[str, int] = {}
        self.units: list[Unit] = []
        self._unit: Unit | None = None

    def _add(self, name, kind, inputs, nch, **attrs) -> str:
        if name in self.channels:
            raise ValueError(f"duplicate node {name}")
        self.nodes.append(LayerSpec(name, kind, tuple(inputs), attrs))
        self.channels[name] = nch
        if self._unit is not None:
            self._unit.nodes.append(name)
        return name

    def begin(self, kind: str, prefix: str) -> None:
        self._unit = Unit(kind, prefix)
        self.units.append(self._unit)

    def end(self) -> None:
        self._unit = None

    def input(self) -> str:
        return self._add("image", "input", (), 3)

    def conv(self, name, src, spec: ConvSpec, bias=False) -> str:
        return self._add(name, "conv", (src,), spec.out_channels, spec=spec, bias=bias)

    def bn(self, name, src) -> str:
        return self._add(name, "bn", (src,), self.channels[src])

    def act(self, name, src, fn="relu6", **kw) -> str:
        return self._add(name, "act", (src,), self.channels[src], fn=fn, **kw)

    def cba(self, prefix, src, spec: ConvSpec, act=True) -> str:
        """conv -> bn -> (relu6)"""
        x = self.conv(f"{prefix}.conv", src, spec)
        x = self.bn(f"{prefix}.bn", x)
        return self.act(f"{prefix}.act", x) if act else x

    def resize_like(self, name, src, like) -> str:
        return self._add(name, "resize", (src, like), self.channels[src])

    def resize_scale(self, name, src, scale) -> str:
        return self._add(name, "resize", (src,), self.channels[src], scale=scale)

    def add(self, name, a, b) -> str:
        return self._add(name, "add", (a, b), max(self.channels[a], self.channels[b]))

    def mul(self, name, a, b) -> str:
        return self._add(name, "mul", (a, b), max(self.channels[a], self.channels[b]))

    def concat(self, name, srcs) -> str:
        return self._add(name, "concat", srcs, sum(self.channels[s] for s in srcs))

    def slice(self, name, src, lo, hi) -> str:
        return self._add(name, "slice", (src,), hi - lo, channels=(lo, hi))

    def tap(self, name, src) -> str:
        return self._add(name, "tap", (src,), self.channels[src])


def _build_backbone(b: _Builder, image: str, blocks: int) -> dict[int, str]:
    """MobileNetV2 prefix; returns {stride: output node of last block at that stride}."""
    b.begin("backbone", "backbone.stem")
    x = b.cba("backbone.stem", image, ConvSpec.same(3, 32, 3, stride=2))
    b.end()
    cin, stride, count = 32, 2, 0
    outs: dict[int, str] = {}
    for t, c, n, s in MOBILENET_V2_STAGES:
        for i in range(n):
            if count == blocks:
                break
            count += 1
            st = s if i == 0 else 1
            p = f"backbone.block{count}"
            b.begin("backbone", p)
            hidden = cin * t
            y = x
            if t != 1:
                y = b.cba(f"{p}.expand", y, ConvSpec(cin, hidden, 1))
            y = b.cba(f"{p}.dw", y, ConvSpec.same(hidden, hidden, 3, stride=st, groups=hidden))
            y = b.cba(f"{p}.project", y, ConvSpec(hidden, c, 1), act=False)
            if st == 1 and cin == c:
                y = b.add(f"{p}.residual", x, y)
            b.end()
            x, cin = y, c
            stride *= st
            outs[stride] = x
    if blocks == MOBILENET_V2_BLOCKS:
        b.begin("backbone", "backbone.head")
        x = b.cba("backbone.head", x, ConvSpec(cin, MOBILENET_V2_HEAD_CHANNELS, 1))
        b.end()
        outs[stride] = x
    return outs


def _fru(b: _Builder, prefix: str, src: str, cout: int) -> str:
    """Bottleneck residual block: 1x1 reduce, 3x3, 1x1 expand, projected shortcut."""
    cin = b.channels[src]
    mid = cout // 4
    b.begin("fru", prefix)
    y = b.cba(f"{prefix}.reduce", src, ConvSpec(cin, mid, 1))
    y = b.cba(f"{prefix}.conv3", y, ConvSpec.same(mid, mid, 3))
    y = b.cba(f"{prefix}.expand", y, ConvSpec(mid, cout, 1), act=False)
    short = src
    if cin != cout:
        short = b.cba(f"{prefix}.shortcut", src, ConvSpec(cin, cout, 1), act=False)
    y = b.add(f"{prefix}.add", short, y)
    y = b.act(f"{prefix}.out", y)
    b.end()
    return y


def _tau(b: _Builder, prefix: str, src: str, compress: int, dilations: Iterable[int]) -> str:
    c = b.channels[src]
    b.begin("tau", prefix)
    z = b.cba(f"{prefix}.compress", src, ConvSpec(c, compress, 1))
    encs = []
    for i, r in enumerate(dilations, 1):
        e = b.cba(f"{prefix}.enc{i}.dw", z, ConvSpec.same(compress, compress, 3, dilation=r, groups=compress))
        e = b.cba(f"{prefix}.enc{i}.pw", e, ConvSpec(compress, compress, 1))
        encs.append(e)
    cat = b.concat(f"{prefix}.concat", encs)
    d = b.conv(f"{prefix}.dec", cat, ConvSpec(b.channels[cat], 1, 1), bias=True)
    att = b.act(f"{prefix}.attention", d, "sigmoid")
    out = b.mul(f"{prefix}.out", src, att)
    b.end()
    return out


def build_graph(config: ModelConfig | None = None) -> NetworkGraph:
    config = config or ModelConfig()
    config.validate()
    b = _Builder(config)
    image = b.input()
    outs = _build_backbone(b, image, config.backbone_blocks)
    taps = {}
    for s in sorted(outs):
        if s >= config.output_stride:
            taps[s] = b.tap(f"tap.s{s}", outs[s])
    levels = sorted(taps, reverse=True)  # coarse -> fine

    if config.use_fru:
        prev = None
        ch = config.fru_channels
        for k, s in enumerate(levels):
            f = _fru(b, f"fru.l{k}.tap", taps[s], ch)
            if prev is not None:
                b.begin("fmu", f"fmu.l{k}.up")
                up = b.resize_like(f"fmu.l{k}.up.resize", prev, f)
                f = b.add(f"fmu.l{k}.up.add", f, up)
                b.end()
            if config.use_raw_input:
                b.begin("side", f"side.l{k}")
                side = b.resize_scale(f"side.l{k}.resize", image, s)
                b.end()
                side = _fru(b, f"side.l{k}.fru1", side, ch)
                side = _fru(b, f"side.l{k}.fru2", side, ch)
                b.begin("fmu", f"fmu.l{k}.side")
                f = b.add(f"fmu.l{k}.side.add", f, side)
                b.end()
            f = _fru(b, f"fru.l{k}.mix", f, ch)
            if config.use_tau:
                f = _tau(b, f"tau.l{k}", f, config.tau_compress_channels, config.tau_encoder_dilations)
            prev = f
        feat = prev
    else:
        # EAST-style U-shaped merging: upsample, concat, 1x1, 3x3
        h = taps[levels[0]]
        widths = EAST_MERGE_WIDTHS[-(len(levels) - 1):] if len(levels) > 1 else ()
        for k, (s, width) in enumerate(zip(levels[1:], widths), 1):
            b.begin("merge", f"merge.l{k}")
            up = b.resize_like(f"merge.l{k}.resize", h, taps[s])
            cat = b.concat(f"merge.l{k}.concat", (up, taps[s]))
            h = b.cba(f"merge.l{k}.reduce", cat, ConvSpec(b.channels[cat], width, 1))
            h = b.cba(f"merge.l{k}.conv3", h, ConvSpec.same(width, width, 3))
            b.end()
            if config.use_tau:
                h = _tau(b, f"tau.l{k}", h, max(1, width // 4), config.tau_encoder_dilations)
        b.begin("merge", "merge.out")
        feat = b.cba("merge.out", h, ConvSpec.same(b.channels[h], 32, 3))
        b.end()

    b.begin("det", "det")
    det = b.conv("det.conv", feat, ConvSpec(b.channels[feat], 6, 1), bias=True)
    score = b.act("det.score", b.slice("det.score_logit", det, 0, 1), "sigmoid")
    dist = b.act("det.dist", b.slice("det.dist_logit", det, 1, 5), "scaled_sigmoid",
                 scale=DIST_SCALE, shift=0.0)
    angle = b.act("det.angle", b.slice("det.angle_logit", det, 5, 6), "scaled_sigmoid",
                  scale=math.pi, shift=-math.pi / 2)
    b.end()
    graph = NetworkGraph(config, b.nodes, taps, {"score": score, "dist": dist, "angle": angle}, b.units)
    graph.infer_shapes(64, 64)
    return graph


# -- parameters & execution -----------------------------------------------------------

@dataclass
class DetOutput:
    score: Tensor
    dist: Tensor
    angle: Tensor


class Model:
    """A graph plus its parameters and batch-norm running statistics."""

    def __init__(self, graph: NetworkGraph, params: dict[str, Tensor], bn_state: dict[str, BatchNormState]):
        self.graph = graph
        self.params = params
        self.bn_state = bn_state

    @classmethod
    def create(cls, graph: NetworkGraph | ModelConfig | None = None, seed: int = 0,
               dtype=None) -> "Model":
        if not isinstance(graph, NetworkGraph):
            graph = build_graph(graph)
        dtype = dtype or T.get_default_dtype()
        rng = np.random.default_rng(seed)
        params: dict[str, Tensor] = {}
        bn_state: dict[str, BatchNormState] = {}
        for node in graph.nodes:
            if node.kind == "conv":
                spec: ConvSpec = node.attrs["spec"]
                fan_in = spec.weight_shape[1] * spec.kernel[0] * spec.kernel[1]
                w = rng.standard_normal(spec.weight_shape) * math.sqrt(2.0 / fan_in)
                params[f"{node.name}.weight"] = Tensor(w, requires_grad=True, dtype=dtype)
                if node.attrs.get("bias"):
                    params[f"{node.name}.bias"] = Tensor(np.zeros(spec.out_channels), requires_grad=True, dtype=dtype)
            elif node.kind == "bn":
                c = _bn_channels(graph, node)
                params[f"{node.name}.gamma"] = Tensor(np.ones(c), requires_grad=True, dtype=dtype)
                params[f"{node.name}.beta"] = Tensor(np.zeros(c), requires_grad=True, dtype=dtype)
                bn_state[node.name] = BatchNormState.fresh(c, dtype)
        return cls(graph, params, bn_state)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameters and running statistics as plain arrays (for checkpoints)."""
        out = {k: v.data for k, v in self.params.items()}
        for k, s in self.bn_state.items():
            out[f"{k}.running_mean"] = s.running_mean
            out[f"{k}.running_var"] = s.running_var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for k, p in self.params.items():
            if k not in arrays:
                raise KeyError(f"checkpoint is missing parameter {k}")
            if arrays[k].shape != p.shape:
                raise DimensionError(f"{k}: checkpoint shape {arrays[k].shape} != {p.shape}", axis=k)
            p.data = np.array(arrays[k], dtype=p.dtype)
        for k, s in self.bn_state.items():
            s.running_mean[:] = arrays[f"{k}.running_mean"]
            s.running_var[:] = arrays[f"{k}.running_var"]

    def forward(self, image, training: bool = False) -> DetOutput:
        return forward(self, image, training)

    __call__ = forward


def _bn_channels(graph: NetworkGraph, node: LayerSpec) -> int:
    src = graph.node(node.inputs[0])
    return src.attrs["spec"].out_channels


def forward(model: Model, image, training: bool = False) -> DetOutput:
    """Run the graph on an N,3,H,W image batch (H, W multiples of 32)."""
    image = T.as_tensor(image)
    if image.ndim != 4 or image.shape[1] != 3:
        raise DimensionError(f"expected N,3,H,W image, got {image.shape}", axis="C")
    h, w = image.shape[2:]
    if h % 32 or w % 32:
        raise DimensionError(
            f"input {h}x{w} is not divisible by 32; pad the image to a multiple of 32",
            axis="HW",
        )
    values = run_graph(model, image, training)
    out = model.graph.outputs
    return DetOutput(values[out["score"]], values[out["dist"]], values[out["angle"]])


def run_graph(model: Model, image: Tensor, training: bool = False,
              keep: Iterable[str] = ()) -> dict[str, Tensor]:
    graph, params = model.graph, model.params
    keep = set(keep) | set(graph.outputs.values())
    last_use: dict[str, int] = {}
    for i, node in enumerate(graph.nodes):
        for src in node.inputs:
            last_use[src] = i
    vals: dict[str, Tensor] = {}
    for i, node in enumerate(graph.nodes):
        vals[node.name] = _exec(node, vals, params, model.bn_state, image, training)
        for src in node.inputs:
            if last_use[src] == i and src not in keep:
                vals.pop(src, None)
    return vals


def _exec(node: LayerSpec, vals, params, bn_state, image, training) -> Tensor:
    k = node.kind
    ins = [vals[i] for i in node.inputs]
    if k == "input":
        return image
    if k == "conv":
        return conv2d(ins[0], params[f"{node.name}.weight"], params.get(f"{node.name}.bias"),
                      node.attrs["spec"])
    if k == "bn":
        return batch_norm(ins[0], params[f"{node.name}.gamma"], params[f"{node.name}.beta"],
                          bn_state[node.name], training)
    if k == "act":
        fn = node.attrs["fn"]
        if fn == "relu6":
            return T.relu6(ins[0])
        if fn == "sigmoid":
            return T.sigmoid(ins[0])
        if fn == "scaled_sigmoid":
            return T.affine(T.sigmoid(ins[0]), node.attrs["scale"], node.attrs["shift"])
        raise ValueError(f"unknown activation {fn}")
    if k == "resize":
        if "scale" in node.attrs:
            s = node.attrs["scale"]
            return bilinear_resize(ins[0], -(-ins[0].shape[2] // s), -(-ins[0].shape[3] // s))
        return bilinear_resize(ins[0], *ins[1].shape[2:])
    if k == "add":
        return T.add(*ins)
    if k == "mul":
        return T.mul(*ins)
    if k == "concat":
        return T.concat(ins, axis=1)
    if k == "slice":
        lo, hi = node.attrs["channels"]
        return ins[0][:, lo:hi]
    if k == "tap":
        return ins[0]
    raise ValueError(f"unknown node kind {k}")


# -- standalone Textual Attention Unit ---------------------------------------------------

@dataclass
class ConvBlock:
    """conv (+bias) -> optional batch norm -> optional relu6."""

    spec: ConvSpec
    weight: Tensor
    bias: Tensor | None = None
    gamma: Tensor | None = None
    beta: Tensor | None = None
    bn: BatchNormState | None = None
    relu: bool = True

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        y = conv2d(x, self.weight, self.bias, self.spec)
        if self.bn is not None:
            y = batch_norm(y, self.gamma, self.beta, self.bn, training)
        return T.relu6(y) if self.relu else y


@dataclass
class TAUWeights:
    compress: ConvBlock
    encoders: list[tuple[ConvBlock, ConvBlock]]
    dec: ConvBlock

    @classmethod
    def from_model(cls, model: Model, prefix: str) -> "TAUWeights":
        g, p, s = model.graph, model.params, model.bn_state

        def block(name, relu=True, bn=True):
            spec = g.node(f"{name}.conv" if bn else name).attrs["spec"]
            if not bn:
                return ConvBlock(spec, p[f"{name}.weight"], p.get(f"{name}.bias"), relu=False)
            return ConvBlock(spec, p[f"{name}.conv.weight"], None, p[f"{name}.bn.gamma"],
                             p[f"{name}.bn.beta"], s[f"{name}.bn"], relu)

        n_enc = sum(1 for n in g.nodes if n.name.startswith(f"{prefix}.enc") and n.name.endswith(".dw.conv"))
        encs = [(block(f"{prefix}.enc{i}.dw"), block(f"{prefix}.enc{i}.pw")) for i in range(1, n_enc + 1)]
        return cls(block(f"{prefix}.compress"), encs, block(f"{prefix}.dec", bn=False))

    @classmethod
    def random(cls, channels: int = 32, compress: int = 8, dilations=(1, 3, 5, 7), seed: int = 0) -> "TAUWeights":
        rng = np.random.default_rng(seed)

        def block(spec, bias=False, bn=True, relu=True):
            fan_in = spec.weight_shape[1] * spec.kernel[0] * spec.kernel[1]
            w = Tensor(rng.standard_normal(spec.weight_shape) * math.sqrt(2.0 / fan_in), requires_grad=True)
            b = Tensor(rng.standard_normal(spec.out_channels) * 0.1, requires_grad=True) if bias else None
            if not bn:
                return ConvBlock(spec, w, b, relu=relu)
            c = spec.out_channels
            return ConvBlock(spec, w, b, Tensor(np.ones(c), requires_grad=True),
                             Tensor(np.zeros(c), requires_grad=True), BatchNormState.fresh(c), relu)

        encs = [
            (block(ConvSpec.same(compress, compress, 3, dilation=r, groups=compress)),
             block(ConvSpec(compress, compress, 1)))
            for r in dilations
        ]
        dec = block(ConvSpec(compress * len(encs), 1, 1), bias=True, bn=False, relu=False)
        return cls(block(ConvSpec(channels, compress, 1)), encs, dec)

    def attention_logits(self, x: Tensor, training: bool = False) -> Tensor:
        z = self.compress(x, training)
        feats = []
        for dw, pw in self.encoders:
            feats.append(pw(dw(z, training), training))
        sizes = {f.shape[2:] for f in feats}
        if len(sizes) != 1 or z.shape[2:] not in sizes:
            raise DimensionError(
                f"encoder outputs disagree spatially {sorted(sizes)} vs input {z.shape[2:]}; "
                "check encoder padding", axis="HW")
        return self.dec(T.concat(feats, axis=1), training)


def tau_forward(x, w: TAUWeights, training: bool = False) -> Tensor:
    """x * sigmoid(dec(concat(e_1(c(x)), ..., e_k(c(x))))), attention broadcast over channels."""
    x = T.as_tensor(x)
    return T.mul(x, T.sigmoid(w.attention_logits(x, training)))
