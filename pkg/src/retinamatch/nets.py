"""Detector/descriptor networks at desk scale.

Two architectures share the same decoder pair:

  * teacher: a compact CNN encoder (single stem conv + three conv blocks of
    two convs, 2x2 max pool, ReLU). Optionally every encoder conv becomes
    three parallel branches with 1x1 / 3x3 / 5x5 kernels whose outputs are
    summed (``lk_block``).
  * student: a patchify (4x4) front end followed by two stages of
    non-shifted windowed self-attention, bridged into the decoders with a
    1x1 conv. No positional embeddings are used, which keeps the encoder
    translation-equivariant on the window grid.

The detector decoder upsamples back to full resolution with skip
concatenations and ends in a 3-conv head + sigmoid (heatmap P). The
descriptor decoder compresses the encoding to w/16 x h/16 x d and
transposed-convs back to full size; descriptors are L2-normalized.

Gradients are supplied by torch autograd behind a functional
``forward``/``backward`` pair operating on named numpy parameter tensors.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

ATTN_BLOCKS_PER_STAGE = 2
NUM_HEADS = 4
MLP_RATIO = 2

CHECKPOINT_MANIFEST = "manifest.json"
CHECKPOINT_BLOB = "params.bin"


class NetError(ValueError):
    """Invalid model specification, parameters, or input."""


class CheckpointError(NetError):
    """Checkpoint file is corrupt or inconsistent with its spec."""


@dataclass(frozen=True)
class ModelSpec:
    kind: str                      # "teacher" | "student"
    base_channels: int = 16        # teacher conv width / student embed dim
    descriptor_dim: int = 32
    lk_block: bool = False
    window_size: int = 4           # student attention window (tokens)
    dropout_rate: float = 0.0
    input_size: tuple[int, int] = (128, 128)   # (h, w)

    def __post_init__(self) -> None:
        if self.kind not in ("teacher", "student"):
            raise NetError(f"unknown model kind {self.kind!r}")
        h, w = self.input_size
        if h % 16 or w % 16:
            raise NetError("input_size must be divisible by 16")
        if self.descriptor_dim < 8:
            raise NetError("descriptor_dim must be >= 8")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise NetError("dropout_rate must be in [0, 1)")
        if self.base_channels < 4:
            raise NetError("base_channels must be >= 4")
        if self.kind == "student":
            if self.base_channels % NUM_HEADS:
                raise NetError(f"student base_channels must be divisible by {NUM_HEADS}")
            for scale in (4, 8):
                if (h // scale) % self.window_size or (w // scale) % self.window_size:
                    raise NetError(
                        f"window_size {self.window_size} must divide the "
                        f"attention grid at 1/{scale} of {self.input_size}")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "base_channels": self.base_channels,
            "descriptor_dim": self.descriptor_dim,
            "lk_block": self.lk_block,
            "window_size": self.window_size,
            "dropout_rate": self.dropout_rate,
            "input_size": list(self.input_size),
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        return ModelSpec(
            kind=d["kind"],
            base_channels=int(d["base_channels"]),
            descriptor_dim=int(d["descriptor_dim"]),
            lk_block=bool(d["lk_block"]),
            window_size=int(d["window_size"]),
            dropout_rate=float(d["dropout_rate"]),
            input_size=tuple(d["input_size"]),
        )

    def spec_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def default_teacher_spec(input_size=(128, 128), lk_block=False) -> ModelSpec:
    return ModelSpec(kind="teacher", base_channels=16, descriptor_dim=32,
                     lk_block=lk_block, input_size=input_size)


def default_student_spec(input_size=(128, 128), dropout_rate=0.0) -> ModelSpec:
    return ModelSpec(kind="student", base_channels=32, descriptor_dim=32,
                     window_size=4, dropout_rate=dropout_rate, input_size=input_size)


def seeded_dropout(x: torch.Tensor, rate: float, train: bool,
                   generator: torch.Generator | None) -> torch.Tensor:
    """Inverted dropout whose mask comes from an explicit generator."""
    if not train or rate <= 0.0:
        return x
    keep = (torch.rand(x.shape, generator=generator, dtype=x.dtype) >= rate).to(x.dtype)
    return x * keep / (1.0 - rate)


class LKConv2d(nn.Module):
    """Parallel 1x1 + 3x3 + 5x5 branches, summed. Only the 3x3 carries a bias,
    so zeroing the side branches reproduces a plain 3x3 conv exactly."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.b1 = nn.Conv2d(cin, cout, 1, padding=0, bias=False)
        self.b3 = nn.Conv2d(cin, cout, 3, padding=1, bias=True)
        self.b5 = nn.Conv2d(cin, cout, 5, padding=2, bias=False)

    def forward(self, x):
        return self.b1(x) + self.b3(x) + self.b5(x)


def _enc_conv(cin: int, cout: int, lk: bool) -> nn.Module:
    return LKConv2d(cin, cout) if lk else nn.Conv2d(cin, cout, 3, padding=1)


class TeacherEncoder(nn.Module):
    def __init__(self, c: int, lk: bool):
        super().__init__()
        self.stem = _enc_conv(1, c, lk)
        plan = [(c, c), (c, 2 * c), (2 * c, 4 * c)]
        self.blocks = nn.ModuleList(
            nn.ModuleList([_enc_conv(ci, co, lk), _enc_conv(co, co, lk)])
            for ci, co in plan)

    def forward(self, x):
        x = F.relu(self.stem(x))
        skips = []
        for conv_a, conv_b in self.blocks:
            x = F.relu(conv_a(x))
            x = F.relu(conv_b(x))
            skips.append(x)
            x = F.max_pool2d(x, 2)
        return x, skips  # x: 4c @ 1/8; skips at 1/1, 1/2, 1/4


class WindowAttention(nn.Module):
    def __init__(self, dim: int, window: int, heads: int):
        super().__init__()
        self.window = window
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):  # (B, H, W, C) with H, W divisible by window
        b, h, w, c = x.shape
        win = self.window
        x = x.view(b, h // win, win, w // win, win, c)
        x = x.permute(0, 1, 3, 2, 4, 5).reshape(-1, win * win, c)
        qkv = self.qkv(x).reshape(-1, win * win, 3, self.heads, self.head_dim)
        qkv = qkv.permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(-1, win * win, c)
        out = self.proj(out)
        out = out.view(b, h // win, w // win, win, win, c)
        return out.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)


class AttentionBlock(nn.Module):
    def __init__(self, dim: int, window: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, MLP_RATIO * dim)
        self.fc2 = nn.Linear(MLP_RATIO * dim, dim)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class StudentEncoder(nn.Module):
    def __init__(self, c: int, window: int, dropout_rate: float):
        super().__init__()
        self.dropout_rate = dropout_rate
        self.patch = nn.Conv2d(1, c, 4, stride=4)
        self.stage1 = nn.ModuleList(
            AttentionBlock(c, window, NUM_HEADS) for _ in range(ATTN_BLOCKS_PER_STAGE))
        self.merge = nn.Conv2d(c, 2 * c, 2, stride=2)
        self.stage2 = nn.ModuleList(
            AttentionBlock(2 * c, window, NUM_HEADS) for _ in range(ATTN_BLOCKS_PER_STAGE))
        self.bridge = nn.Conv2d(c, c, 1)

    def forward(self, x, train=False, generator=None):
        x = self.patch(x)
        t = x.permute(0, 2, 3, 1)
        for blk in self.stage1:
            t = blk(t)
        t = seeded_dropout(t, self.dropout_rate, train, generator)
        s1 = t.permute(0, 3, 1, 2)           # c @ 1/4
        t = self.merge(s1).permute(0, 2, 3, 1)
        for blk in self.stage2:
            t = blk(t)
        t = seeded_dropout(t, self.dropout_rate, train, generator)
        e = t.permute(0, 3, 1, 2)            # 2c @ 1/8
        return e, [self.bridge(s1)]


class DetectorDecoder(nn.Module):
    """Three (conv, conv, bilinear x2, optional skip concat) blocks + 3-conv head."""

    def __init__(self, in_ch: int, widths: list[int], skip_chs: list[int],
                 head_ch: int, dropout_rate: float):
        super().__init__()
        self.dropout_rate = dropout_rate
        self.skip_chs = skip_chs
        blocks = []
        cur = in_ch
        for width, skip in zip(widths, skip_chs):
            blocks.append(nn.ModuleList([
                nn.Conv2d(cur, width, 3, padding=1),
                nn.Conv2d(width, width, 3, padding=1),
            ]))
            cur = width + skip
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.ModuleList([
            nn.Conv2d(cur, head_ch, 3, padding=1),
            nn.Conv2d(head_ch, head_ch, 3, padding=1),
            nn.Conv2d(head_ch, 1, 3, padding=1),
        ])

    def forward(self, x, skips, train=False, generator=None):
        # skips ordered coarse-to-fine; entries may be None when skip_ch == 0
        for (conv_a, conv_b), skip in zip(self.blocks, skips):
            x = F.relu(conv_a(x))
            x = F.relu(conv_b(x))
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            if skip is not None:
                x = torch.cat([x, skip], dim=1)
            x = seeded_dropout(x, self.dropout_rate, train, generator)
        x = F.relu(self.head[0](x))
        x = F.relu(self.head[1](x))
        return self.head[2](x)


class DescriptorDecoder(nn.Module):
    """Compress to 1/16 scale with d channels, then transposed-conv x2 four times.

    The transposed convs overlap (k4, s2, p1) so no output pixel depends on a
    single ReLU'd location; that keeps descriptor vectors away from exact zero.
    """

    def __init__(self, in_ch: int, d: int, dropout_rate: float):
        super().__init__()
        self.dropout_rate = dropout_rate
        self.squeeze = nn.Conv2d(in_ch, d, 3, padding=1)
        self.up = nn.ModuleList(
            nn.ConvTranspose2d(d, d, 4, stride=2, padding=1) for _ in range(4))

    def forward(self, x, train=False, generator=None):
        x = F.max_pool2d(x, 2)               # 1/8 -> 1/16
        x = F.relu(self.squeeze(x))
        for i, tconv in enumerate(self.up):
            x = tconv(x)
            if i < len(self.up) - 1:
                x = F.relu(x)
                x = seeded_dropout(x, self.dropout_rate, train, generator)
        return x


class TeacherNet(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        c = spec.base_channels
        self.encoder = TeacherEncoder(c, spec.lk_block)
        self.detector = DetectorDecoder(
            4 * c, widths=[2 * c, 2 * c, c], skip_chs=[4 * c, 2 * c, c],
            head_ch=c, dropout_rate=spec.dropout_rate)
        self.descriptor = DescriptorDecoder(4 * c, spec.descriptor_dim, spec.dropout_rate)

    def forward(self, x, train=False, generator=None):
        e, skips = self.encoder(x)
        logits = self.detector(e, skips[::-1], train, generator)
        raw_d = self.descriptor(e, train, generator)
        heat = torch.sigmoid(logits)
        desc = raw_d / raw_d.norm(dim=1, keepdim=True).clamp_min(1e-8)
        return heat, desc


class StudentNet(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        c = spec.base_channels
        self.encoder = StudentEncoder(c, spec.window_size, spec.dropout_rate)
        self.detector = DetectorDecoder(
            2 * c, widths=[c, c, c], skip_chs=[c, 0, 0],
            head_ch=c, dropout_rate=spec.dropout_rate)
        self.descriptor = DescriptorDecoder(2 * c, spec.descriptor_dim, spec.dropout_rate)

    def forward(self, x, train=False, generator=None):
        e, skips = self.encoder(x, train, generator)
        logits = self.detector(e, [skips[0], None, None], train, generator)
        raw_d = self.descriptor(e, train, generator)
        heat = torch.sigmoid(logits)
        desc = raw_d / raw_d.norm(dim=1, keepdim=True).clamp_min(1e-8)
        return heat, desc


def build_model(spec: ModelSpec) -> nn.Module:
    return TeacherNet(spec) if spec.kind == "teacher" else StudentNet(spec)


@dataclass
class ModelParams:
    """Named float32 parameter tensors tied to the spec that shaped them."""

    spec: ModelSpec
    tensors: dict[str, np.ndarray] = field(repr=False, default_factory=dict)

    @property
    def spec_hash(self) -> str:
        return self.spec.spec_hash()

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, {k: v.copy() for k, v in self.tensors.items()})


def _fan_in(owner: nn.Module, pname: str, shape: tuple[int, ...]) -> int | None:
    """Fan-in for weight init; None means the parameter is not a weight matrix."""
    if pname == "bias":
        return None
    if isinstance(owner, nn.Conv2d):
        return owner.in_channels * owner.kernel_size[0] * owner.kernel_size[1]
    if isinstance(owner, nn.ConvTranspose2d):
        return owner.in_channels * owner.kernel_size[0] * owner.kernel_size[1]
    if isinstance(owner, nn.Linear):
        return owner.in_features
    if isinstance(owner, nn.LayerNorm):
        return None
    raise NetError(f"unhandled parameter owner {type(owner).__name__}")


def init_params(spec: ModelSpec, seed: int) -> ModelParams:
    """Fan-in scaled uniform init (variance 2/fan_in) for weights.

    Conv/linear biases start at a small positive constant rather than zero:
    with zero biases, convolutions over ReLU-silenced patches output exactly
    zero, parking ReLUs on their corner (which breaks gradient checks) and
    letting descriptor norms collapse. LayerNorm stays at (1, 0).
    """
    module = build_model(spec)
    owners = dict(module.named_modules())
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, p in module.named_parameters():
        prefix, _, pname = name.rpartition(".")
        owner = owners[prefix]
        shape = tuple(p.shape)
        fan = _fan_in(owner, pname, shape)
        if fan is None:
            if isinstance(owner, nn.LayerNorm):
                fill = 1.0 if pname == "weight" else 0.0
            else:
                fill = 0.01
            tensors[name] = np.full(shape, fill, dtype=np.float32)
        else:
            bound = np.sqrt(6.0 / fan)
            tensors[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return ModelParams(spec, tensors)


def param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    module = build_model(spec)
    return {name: tuple(p.shape) for name, p in module.named_parameters()}


def count_params(spec: ModelSpec) -> int:
    module = build_model(spec)
    return sum(p.numel() for p in module.parameters())


@dataclass
class ModelOutput:
    heatmap: np.ndarray       # (h, w) sigmoid output in (0, 1), run dtype
    descriptors: np.ndarray   # (h, w, d) unit L2 per pixel, run dtype


@dataclass
class Tape:
    """Everything backward() needs: the graph-bearing outputs and leaves."""

    spec: ModelSpec
    params: dict[str, torch.Tensor]
    heatmap_t: torch.Tensor
    descriptors_t: torch.Tensor


def _load_module(spec: ModelSpec, params: ModelParams, dtype: torch.dtype,
                 requires_grad: bool) -> tuple[nn.Module, dict[str, torch.Tensor]]:
    if params.spec.spec_hash() != spec.spec_hash():
        raise NetError("parameters were created for a different spec")
    module = build_model(spec).to(dtype)
    leaves: dict[str, torch.Tensor] = {}
    for name, p in module.named_parameters():
        arr = params.tensors.get(name)
        if arr is None:
            raise NetError(f"missing parameter tensor {name!r}")
        if tuple(arr.shape) != tuple(p.shape):
            raise NetError(f"shape mismatch for {name!r}: {arr.shape} vs {tuple(p.shape)}")
        if not np.all(np.isfinite(arr)):
            raise NetError(f"non-finite values in parameter {name!r}")
        with torch.no_grad():
            p.copy_(torch.from_numpy(np.ascontiguousarray(arr)).to(dtype))
        p.requires_grad_(requires_grad)
        leaves[name] = p
    return module, leaves


def forward(spec: ModelSpec, params: ModelParams, image: np.ndarray,
            train_mode: bool = False, seed: int = 0,
            dtype: torch.dtype = torch.float32) -> tuple[ModelOutput, Tape]:
    """Run a model on one preprocessed gray image.

    Dropout (train_mode only) is derived deterministically from `seed`.
    Returns the numpy outputs plus a tape for backward().
    """
    img = np.asarray(image)
    if img.shape != tuple(spec.input_size):
        raise NetError(f"image shape {img.shape} != spec input_size {spec.input_size}")
    module, leaves = _load_module(spec, params, dtype, requires_grad=True)
    x = torch.from_numpy(np.ascontiguousarray(img)).to(dtype).reshape(1, 1, *img.shape)
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    heat, desc = module(x, train=train_mode, generator=gen)
    heat2 = heat[0, 0]
    desc2 = desc[0].permute(1, 2, 0)
    # outputs keep the run dtype (float32 by default; float64 for gradient checks)
    out = ModelOutput(
        heatmap=heat2.detach().cpu().numpy(),
        descriptors=desc2.detach().cpu().numpy(),
    )
    return out, Tape(spec=spec, params=leaves, heatmap_t=heat2, descriptors_t=desc2)


def backward(tape: Tape, grad_heatmap: np.ndarray,
             grad_descriptors: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients for upstream gradients on (P, D)."""
    gp = torch.from_numpy(np.asarray(grad_heatmap)).to(tape.heatmap_t.dtype)
    gd = torch.from_numpy(np.asarray(grad_descriptors)).to(tape.descriptors_t.dtype)
    if gp.shape != tape.heatmap_t.shape or gd.shape != tape.descriptors_t.shape:
        raise NetError("gradient shapes do not match the tape outputs")
    names = list(tape.params.keys())
    grads = torch.autograd.grad(
        [tape.heatmap_t, tape.descriptors_t], [tape.params[n] for n in names],
        grad_outputs=[gp, gd], retain_graph=True, allow_unused=True)
    out = {}
    for name, g in zip(names, grads):
        if g is None:
            out[name] = np.zeros(tuple(tape.params[name].shape), dtype=np.float64)
        else:
            out[name] = g.detach().cpu().numpy().astype(np.float64)
    return out


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    """Write a checkpoint directory: JSON manifest + little-endian f32 blob."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    chunks = []
    offset = 0
    for name in sorted(params.tensors):
        arr = np.ascontiguousarray(params.tensors[name], dtype="<f4")
        nbytes = arr.nbytes
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": "float32", "offset": offset, "nbytes": nbytes})
        chunks.append(arr.tobytes())
        offset += nbytes
    manifest = {
        "format_version": 1,
        "spec": params.spec.to_dict(),
        "spec_hash": params.spec.spec_hash(),
        "blob": CHECKPOINT_BLOB,
        "tensors": entries,
    }
    (path / CHECKPOINT_BLOB).write_bytes(b"".join(chunks))
    (path / CHECKPOINT_MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))


def load_checkpoint(path: str | Path, expected_spec: ModelSpec | None = None) -> ModelParams:
    """Load and fully validate a checkpoint; never returns partial params."""
    path = Path(path)
    try:
        manifest = json.loads((path / CHECKPOINT_MANIFEST).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint manifest at {path}: {exc}") from exc
    try:
        spec = ModelSpec.from_dict(manifest["spec"])
        entries = manifest["tensors"]
        stored_hash = manifest["spec_hash"]
    except (KeyError, TypeError, NetError) as exc:
        raise CheckpointError(f"malformed checkpoint manifest: {exc}") from exc
    if spec.spec_hash() != stored_hash:
        raise CheckpointError("spec hash mismatch: manifest is inconsistent")
    if expected_spec is not None and expected_spec.spec_hash() != stored_hash:
        raise CheckpointError("spec hash mismatch: checkpoint built for a different spec")

    blob = (path / manifest.get("blob", CHECKPOINT_BLOB)).read_bytes()
    expected = param_shapes(spec)
    tensors: dict[str, np.ndarray] = {}
    for entry in entries:
        name = entry["name"]
        shape = tuple(entry["shape"])
        if name not in expected:
            raise CheckpointError(f"unexpected tensor {name!r} in checkpoint")
        if expected[name] != shape:
            raise CheckpointError(f"shape mismatch for {name!r}: "
                                  f"{shape} vs spec {expected[name]}")
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(blob):
            raise CheckpointError("checkpoint blob is truncated")
        arr = np.frombuffer(blob[start:start + nbytes], dtype="<f4")
        want = int(np.prod(shape)) if shape else 1
        if arr.size != want:
            raise CheckpointError(f"byte count mismatch for {name!r}")
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"non-finite values in tensor {name!r}")
        tensors[name] = arr.reshape(shape).astype(np.float32)
    missing = set(expected) - set(tensors)
    if missing:
        raise CheckpointError(f"checkpoint is missing tensors: {sorted(missing)}")
    return ModelParams(spec, tensors)
