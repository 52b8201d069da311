"""The full super-resolution network.

Layout: a front-end of transposed-conv + PReLU stages that upsamples the
luminance input to target size, two recurrent residual blocks whose conv
weights are reused every cycle, one 3x3 conv tap after each of the three
recovery stages, and a single fusion conv that merges the concatenated taps
into the output image.

The registry maps each distinct learnable array to a stable name; shared
recurrent weights appear exactly once no matter how many cycles run.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor, check_nchw

VALID_SCALES = (2, 3, 4, 8)

CHECKPOINT_MAGIC = b"DRFN"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class FormatError(ValueError):
    """Checkpoint file is malformed; carries the byte offset of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class ModelConfig:
    scale: int = 4
    channels: int = 64
    cycles: int = 10
    blocks: int = 2
    levels: int = 3

    def validate(self):
        if self.scale not in VALID_SCALES:
            raise ConfigError(f"scale must be one of {VALID_SCALES}, got {self.scale}")
        if self.cycles < 1:
            raise ConfigError("cycles must be >= 1")
        if self.blocks != 2:
            raise ConfigError("blocks is fixed at 2")
        if self.levels not in (1, 2, 3):
            raise ConfigError("levels must be 1, 2, or 3")
        if self.channels < 1:
            raise ConfigError("channels must be >= 1")


def active_levels(cfg: ModelConfig):
    """Tap ids used for fusion: full model (1,2,3); the two-level ablation
    drops the middle tap; one-level keeps only the last."""
    return {3: (1, 2, 3), 2: (1, 3), 1: (3,)}[cfg.levels]


def upsample_plan(scale):
    """(kernel, stride, padding) per front-end stage for a given scale.
    x2/x4/x8 iterate exact-doubling stages; x3 is one stride-3 stage."""
    if scale == 3:
        return [(5, 3, 1)]
    n_stages = {2: 1, 4: 2, 8: 3}[scale]
    return [(4, 2, 1)] * n_stages


@dataclass
class RecurrentResidualBlock:
    conv_a: ops.Conv2dParams
    conv_b: ops.Conv2dParams
    conv_c: ops.Conv2dParams
    prelu_a: ops.PReluParams
    prelu_b: ops.PReluParams
    cycles: int


@dataclass
class DrfnModel:
    cfg: ModelConfig
    upsample_stages: list  # [(TransposedConv2dParams, PReluParams)]
    block1: RecurrentResidualBlock
    block2: RecurrentResidualBlock
    level_convs: dict  # tap id -> Conv2dParams
    fusion_conv: ops.Conv2dParams
    registry: dict = field(default_factory=dict)


def _he_normal(rng, shape, fan_in, dtype):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)


def build_drfn(cfg: ModelConfig, seed: int, dtype=np.float32) -> DrfnModel:
    """Initialize a model: He-normal conv weights, zero biases, PReLU slopes
    at 0.33.  Deterministic for a fixed seed."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    registry = {}

    def conv(name, in_c, out_c, k=3, stride=1, padding=1):
        w = _he_normal(rng, (out_c, in_c, k, k), in_c * k * k, dtype)
        b = np.zeros(out_c, dtype=dtype)
        registry[f"{name}.weight"] = w
        registry[f"{name}.bias"] = b
        return ops.Conv2dParams(w, b, stride=stride, padding=padding)

    def tconv(name, in_c, out_c, k, stride, padding):
        w = _he_normal(rng, (in_c, out_c, k, k), in_c * k * k, dtype)
        b = np.zeros(out_c, dtype=dtype)
        registry[f"{name}.weight"] = w
        registry[f"{name}.bias"] = b
        return ops.TransposedConv2dParams(w, b, stride=stride, padding=padding)

    def prelu(name, channels):
        s = np.full(channels, 0.33, dtype=dtype)
        registry[f"{name}.slope"] = s
        return ops.PReluParams(s)

    ch = cfg.channels
    stages = []
    for i, (k, stride, pad) in enumerate(upsample_plan(cfg.scale)):
        in_c = 1 if i == 0 else ch
        stages.append(
            (tconv(f"stage{i}.tconv", in_c, ch, k, stride, pad), prelu(f"stage{i}.prelu", ch))
        )

    def block(name):
        return RecurrentResidualBlock(
            conv_a=conv(f"{name}.conv_a", ch, ch),
            conv_b=conv(f"{name}.conv_b", ch, ch),
            conv_c=conv(f"{name}.conv_c", ch, ch),
            prelu_a=prelu(f"{name}.prelu_a", ch),
            prelu_b=prelu(f"{name}.prelu_b", ch),
            cycles=cfg.cycles,
        )

    block1 = block("block1")
    block2 = block("block2")
    level_convs = {lvl: conv(f"level{lvl}.conv", ch, ch) for lvl in active_levels(cfg)}
    fusion = conv("fusion.conv", ch * cfg.levels, 1)
    return DrfnModel(cfg, stages, block1, block2, level_convs, fusion, registry)


@dataclass
class ForwardTape:
    """Every intermediate needed to run backward; single-owner."""

    x: Tensor
    stage_recs: list  # per stage: (x_in, pre_activation)
    front: Tensor
    block_recs: list  # per block: list of per-cycle (x_in, a, pa, b, pb)
    block_outs: list  # [block1_out, block2_out]
    tap_inputs: dict  # tap id -> feature tensor feeding that level conv
    fusion_in: Tensor
    hr: Tensor


def _block_forward(blk: RecurrentResidualBlock, x: Tensor):
    recs = []
    for _ in range(blk.cycles):
        a = ops.conv2d_forward(x, blk.conv_a)
        pa = ops.prelu_forward(a, blk.prelu_a)
        b = ops.conv2d_forward(pa, blk.conv_b)
        pb = ops.prelu_forward(b, blk.prelu_b)
        c = ops.conv2d_forward(pb, blk.conv_c)
        recs.append((x, a, pa, b, pb))
        x = c + x
    return x, recs


def _block_backward(blk: RecurrentResidualBlock, recs, grad, grads, name):
    for x_in, a, pa, b, pb in reversed(recs):
        gx_c, gw_c, gb_c = ops.conv2d_backward(pb, blk.conv_c, grad)
        grads[f"{name}.conv_c.weight"] += gw_c
        grads[f"{name}.conv_c.bias"] += gb_c
        gx_pb, gs_b = ops.prelu_backward(b, blk.prelu_b, gx_c)
        grads[f"{name}.prelu_b.slope"] += gs_b
        gx_b, gw_b, gb_b = ops.conv2d_backward(pa, blk.conv_b, gx_pb)
        grads[f"{name}.conv_b.weight"] += gw_b
        grads[f"{name}.conv_b.bias"] += gb_b
        gx_pa, gs_a = ops.prelu_backward(a, blk.prelu_a, gx_b)
        grads[f"{name}.prelu_a.slope"] += gs_a
        gx_a, gw_a, gb_a = ops.conv2d_backward(x_in, blk.conv_a, gx_pa)
        grads[f"{name}.conv_a.weight"] += gw_a
        grads[f"{name}.conv_a.bias"] += gb_a
        grad = gx_a + grad  # skip connection
    return grad


def forward(m: DrfnModel, x: Tensor):
    """Run the network on (n,1,H,W) luminance; returns (hr, tape) with
    hr of shape (n,1,scale*H,scale*W)."""
    check_nchw(x)
    if x.shape[1] != 1:
        raise ShapeError(f"model input must have 1 channel, got {x.shape[1]}")
    stage_recs = []
    h = x
    for tc, pr in m.upsample_stages:
        t = ops.transposed_conv2d_forward(h, tc)
        stage_recs.append((h, t))
        h = ops.prelu_forward(t, pr)
    front = h

    b1_out, b1_recs = _block_forward(m.block1, front)
    b2_out, b2_recs = _block_forward(m.block2, b1_out)

    sources = {1: front, 2: b1_out, 3: b2_out}
    taps = []
    tap_inputs = {}
    for lvl in active_levels(m.cfg):
        tap_inputs[lvl] = sources[lvl]
        taps.append(ops.conv2d_forward(sources[lvl], m.level_convs[lvl]))
    fusion_in = taps[0] if len(taps) == 1 else np.concatenate(taps, axis=1)
    hr = ops.conv2d_forward(fusion_in, m.fusion_conv)
    tape = ForwardTape(
        x=x,
        stage_recs=stage_recs,
        front=front,
        block_recs=[b1_recs, b2_recs],
        block_outs=[b1_out, b2_out],
        tap_inputs=tap_inputs,
        fusion_in=fusion_in,
        hr=hr,
    )
    return hr, tape


def backward(m: DrfnModel, tape: ForwardTape, grad_hr: Tensor) -> dict:
    """Gradients for every registry entry; shared recurrent weights receive
    the sum of all per-cycle contributions."""
    if grad_hr.shape != tape.hr.shape:
        raise ShapeError(f"backward: grad_hr {grad_hr.shape} != hr {tape.hr.shape}")
    grads = {k: np.zeros_like(v) for k, v in m.registry.items()}

    gx_fusion, gw, gb = ops.conv2d_backward(tape.fusion_in, m.fusion_conv, grad_hr)
    grads["fusion.conv.weight"] += gw
    grads["fusion.conv.bias"] += gb

    ch = m.cfg.channels
    node_grads = {1: None, 2: None, 3: None}  # front, block1 out, block2 out
    for i, lvl in enumerate(active_levels(m.cfg)):
        g_tap = gx_fusion[:, i * ch : (i + 1) * ch]
        gx, gw, gb = ops.conv2d_backward(tape.tap_inputs[lvl], m.level_convs[lvl], g_tap)
        grads[f"level{lvl}.conv.weight"] += gw
        grads[f"level{lvl}.conv.bias"] += gb
        node_grads[lvl] = gx

    def merged(a, b):
        if a is None:
            return b
        return a if b is None else a + b

    zero_like_feat = np.zeros_like(tape.block_outs[1])
    g_b2 = node_grads[3] if node_grads[3] is not None else zero_like_feat
    g_b1 = _block_backward(m.block2, tape.block_recs[1], g_b2, grads, "block2")
    g_b1 = merged(node_grads[2], g_b1)
    g_front = _block_backward(m.block1, tape.block_recs[0], g_b1, grads, "block1")
    g_front = merged(node_grads[1], g_front)

    g = g_front
    for i in reversed(range(len(m.upsample_stages))):
        tc, pr = m.upsample_stages[i]
        x_in, pre_act = tape.stage_recs[i]
        g_pre, gs = ops.prelu_backward(pre_act, pr, g)
        grads[f"stage{i}.prelu.slope"] += gs
        g, gw, gb = ops.transposed_conv2d_backward(x_in, tc, g_pre)
        grads[f"stage{i}.tconv.weight"] += gw
        grads[f"stage{i}.tconv.bias"] += gb
    return grads


def param_count(m: DrfnModel) -> int:
    """Total scalar learnables, counting each shared tensor once."""
    return sum(int(v.size) for v in m.registry.values())


def param_breakdown(m: DrfnModel) -> dict:
    return {k: int(v.size) for k, v in sorted(m.registry.items())}


def save_checkpoint(m: DrfnModel, path):
    cfg = m.cfg
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack(
        "<6I", CHECKPOINT_VERSION, cfg.scale, cfg.channels, cfg.cycles, cfg.blocks, cfg.levels
    )
    names = sorted(m.registry)
    buf += struct.pack("<I", len(names))
    for name in names:
        arr = m.registry[name]
        nb = name.encode("utf-8")
        buf += struct.pack("<I", len(nb))
        buf += nb
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(buf)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated checkpoint while reading {what}", self.pos)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path, cycles=None) -> DrfnModel:
    """Rebuild a model from a checkpoint.  `cycles` may override the stored
    value: recurrent weights are cycle-independent."""
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    if r.take(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("bad magic bytes", 0)
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    cfg = ModelConfig(
        scale=r.u32("scale"),
        channels=r.u32("channels"),
        cycles=r.u32("cycles"),
        blocks=r.u32("blocks"),
        levels=r.u32("levels"),
    )
    if cycles is not None:
        cfg.cycles = cycles
    try:
        cfg.validate()
    except ConfigError as e:
        raise FormatError(f"invalid stored config: {e}", 8) from e
    count = r.u32("tensor count")
    tensors = {}
    for _ in range(count):
        nlen = r.u32("name length")
        name = r.take(nlen, "name").decode("utf-8")
        rank = r.u32("rank")
        dims = struct.unpack(f"<{rank}Q", r.take(8 * rank, f"dims of {name}"))
        n_vals = int(np.prod(dims))
        raw = r.take(4 * n_vals, f"values of {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    model = build_drfn(cfg, seed=0)
    if set(tensors) != set(model.registry):
        missing = set(model.registry) - set(tensors)
        extra = set(tensors) - set(model.registry)
        raise FormatError(f"tensor names do not match config (missing {sorted(missing)}, "
                          f"unexpected {sorted(extra)})", r.pos)
    for name, arr in tensors.items():
        dst = model.registry[name]
        if dst.shape != arr.shape:
            raise FormatError(f"tensor {name} has shape {arr.shape}, expected {dst.shape}",
                              r.pos)
        dst[...] = arr
    return model
