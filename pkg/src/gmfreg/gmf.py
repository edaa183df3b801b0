"""Texture/structure fusion network for correspondence inlier classification.

Two RGB images are encoded into /8 token grids, the target grid attends to
the source grid (image fusion), and the per-correspondence structure tokens
then attend to the fused texture tokens (texture-structure fusion).  Both
attention inputs on the second block pass through a local convolutional
position encoding (depthwise 1-D conv along the token axis plus residual)
and a layer norm.  A small head turns each fused token into an inlier
probability.

Every layer is written against :mod:`gmfreg.diffcore` nodes so the same code
serves inference, training and gradient checking.  Parameters live in a flat
``name -> array`` mapping (:class:`GmfParams`).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import ContractError, Node, ShapeError, Tape
from .geometry import project_points

MODES = ("gmf", "structure", "concat")
CHECKPOINT_MAGIC = b"GMF1"


@dataclass(frozen=True)
class GmfConfig:
    """Network dimensions and variant.  The attention width is always
    ``c_i // 2``; there is deliberately no field for it."""

    c_i: int = 32
    c_p: int = 32
    k: int = 3
    head_hidden: int = 16
    seed: int = 0
    mode: str = "gmf"
    no_fusion1: bool = False
    no_lcpe: bool = False
    coord_channels: bool = True

    def __post_init__(self):
        if self.c_i < 2 or self.c_i % 2:
            raise ContractError(f"c_i must be even and >= 2, got {self.c_i}")
        if self.c_i % 4:
            raise ContractError(f"c_i must be a multiple of 4 for the encoder stages, got {self.c_i}")
        if self.c_p < 1 or self.head_hidden < 1:
            raise ContractError("c_p and head_hidden must be positive")
        if self.k < 1 or self.k % 2 == 0:
            raise ContractError(f"kernel width k must be odd, got {self.k}")
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def c_t(self) -> int:
        return self.c_i // 2

    @property
    def uses_images(self) -> bool:
        return self.mode == "gmf"

    @property
    def token_width(self) -> int:
        return 12 if self.mode == "concat" else 6

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "GmfConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ContractError(f"unknown config keys {sorted(extra)}")
        return cls(**d)


@dataclass
class GmfParams:
    config: GmfConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def names(self) -> list[str]:
        return list(self.arrays)

    def copy(self) -> "GmfParams":
        return GmfParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def bind(self, tape: Tape) -> dict[str, Node]:
        """Register every array as a differentiable leaf of ``tape``."""
        return {k: tape.leaf(v) for k, v in self.arrays.items()}

    def groups(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for name in self.arrays:
            out.setdefault(name.split(".")[0], []).append(name)
        return out


# --- parameter layout ---------------------------------------------------------


def _mlp_shapes(
    prefix: str, d_in: int, d_out: int, hidden: int | None = None, out_bias: bool = True
) -> list[tuple[str, tuple]]:
    h = hidden or d_out
    shapes = [(f"{prefix}.w0", (d_in, h)), (f"{prefix}.b0", (h,)), (f"{prefix}.w1", (h, d_out))]
    if out_bias:
        shapes.append((f"{prefix}.b1", (d_out,)))
    return shapes


def param_shapes(cfg: GmfConfig) -> list[tuple[str, tuple]]:
    """Ordered ``(name, shape)`` list; the order fixes the checkpoint layout."""
    ci, cp, ct, k = cfg.c_i, cfg.c_p, cfg.c_t, cfg.k
    shapes: list[tuple[str, tuple]] = []
    if cfg.uses_images:
        c_in = 5 if cfg.coord_channels else 3
        for s, (a, b) in enumerate(((c_in, ci // 4), (ci // 4, ci // 2), (ci // 2, ci))):
            shapes += [(f"enc.conv{s}.w", (9 * a, b)), (f"enc.conv{s}.b", (b,))]
    shapes += _mlp_shapes("str", cfg.token_width, cp)
    if cfg.uses_images:
        if not cfg.no_fusion1:
            shapes += _mlp_shapes("f1.q", ci, ct)
            # a key bias only shifts each softmax row by a constant, so it is omitted
            shapes += _mlp_shapes("f1.k", ci, ct, out_bias=False)
            shapes += _mlp_shapes("f1.v", ci, ct)
            shapes += _mlp_shapes("f1.o1", ct, ci)
            shapes += _mlp_shapes("f1.o2", ci, ci)
        if not cfg.no_lcpe:
            shapes += [("lcpe_i.w", (ci, k)), ("lcpe_p.w", (cp, k))]
        shapes += [("ln_i.g", (ci,)), ("ln_i.b", (ci,)), ("ln_p.g", (cp,)), ("ln_p.b", (cp,))]
        shapes += _mlp_shapes("f2.q", cp, ct)
        shapes += _mlp_shapes("f2.k", ci, ct, out_bias=False)
        shapes += _mlp_shapes("f2.v", ci, ct)
        shapes += _mlp_shapes("f2.o1", ct, cp)
        shapes += _mlp_shapes("f2.o2", cp, cp)
    shapes += _mlp_shapes("head", cp, 1, cfg.head_hidden)
    return shapes


def init_params(cfg: GmfConfig | None = None, seed: int | None = None) -> GmfParams:
    """Fan-in scaled uniform weights, zero biases, unit/zero layer-norm affine."""
    cfg = cfg or GmfConfig()
    if seed is not None and seed != cfg.seed:
        cfg = GmfConfig(**{**asdict(cfg), "seed": int(seed)})
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([cfg.seed, 0x6D66])))
    arrays: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg):
        if name.startswith("ln_"):
            fill = 1.0 if name.endswith(".g") else 0.0
            arrays[name] = np.full(shape, fill, dtype=np.float32)
        elif len(shape) == 1:
            arrays[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = shape[1] if name.startswith("lcpe") else shape[0]
            bound = np.sqrt(1.0 / fan_in)
            arrays[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return GmfParams(cfg, arrays)


# --- layers (node level) --------------------------------------------------------


def mlp2(x: Node, L: dict[str, Node], prefix: str) -> Node:
    """Linear -> GeLU -> Linear (the output bias is optional)."""
    h = dc.gelu(dc.linear(x, L[f"{prefix}.w0"], L[f"{prefix}.b0"]))
    return dc.linear(h, L[f"{prefix}.w1"], L.get(f"{prefix}.b1"))


def _coord_grid(h: int, w: int) -> np.ndarray:
    yy, xx = np.meshgrid(np.linspace(-1.0, 1.0, h), np.linspace(-1.0, 1.0, w), indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def image_tokens(img: np.ndarray, coord_channels: bool = True) -> np.ndarray:
    """Flatten an ``H x W x 3`` image to ``(H*W, 3|5)`` rows, optionally with
    normalised pixel coordinates appended as two extra channels."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"image must be H x W x 3, got {img.shape}")
    h, w = img.shape[:2]
    if h % 8 or w % 8 or h == 0 or w == 0:
        raise ShapeError(f"image dims must be positive multiples of 8, got {h}x{w}")
    rows = img.reshape(h * w, 3)
    if coord_channels:
        rows = np.concatenate([rows, _coord_grid(h, w)], axis=1)
    return rows


def encode_image_graph(x: Node, L: dict[str, Node], h: int, w: int) -> Node:
    """Three 3x3 stride-2 conv stages with GeLU on an ``(h*w, C)`` grid."""
    for s in range(3):
        x = dc.gelu(dc.linear(dc.im2col(x, h, w), L[f"enc.conv{s}.w"], L[f"enc.conv{s}.b"]))
        h, w = (h + 1) // 2, (w + 1) // 2
    return x


def encode_correspondences_graph(tokens: Node, L: dict[str, Node]) -> Node:
    return mlp2(tokens, L, "str")


def lcpe(f: Node, kern: Node) -> Node:
    """Local convolutional position encoding: ``GC(f) + f``."""
    return dc.group_conv1d(f, kern) + f


def _attend(q: Node, k: Node, v: Node, width: int) -> tuple[Node, Node]:
    w = dc.softmax_rows(dc.scale(q @ k.T, 1.0 / np.sqrt(width)))
    return w @ v, w


def fusion1(src: Node, tgt: Node, L: dict[str, Node], c_t: int) -> tuple[Node, Node]:
    """Target grid queries the source grid.  Returns ``(F_i, attention)``."""
    if src.shape != tgt.shape:
        raise ShapeError(f"fusion1: source {src.shape} and target {tgt.shape} differ")
    q = mlp2(tgt, L, "f1.q")
    k = mlp2(src, L, "f1.k")
    v = mlp2(src, L, "f1.v")
    mixed, attn = _attend(q, k, v, c_t)
    f_st = mlp2(mixed, L, "f1.o1")
    return mlp2(dc.gelu(f_st) * f_st, L, "f1.o2") + tgt, attn


def fusion2(tex: Node, struct_: Node, L: dict[str, Node], c_t: int, use_lcpe: bool = True) -> tuple[Node, Node]:
    """Correspondence tokens query the fused texture tokens.  Returns
    ``(F, W)`` with ``W`` the ``M_p x M_i`` similarity matrix."""
    if use_lcpe:
        ti, tp = lcpe(tex, L["lcpe_i.w"]), lcpe(struct_, L["lcpe_p.w"])
    else:
        ti, tp = tex, struct_
    ki = dc.layer_norm(ti, L["ln_i.g"], L["ln_i.b"])
    qp = dc.layer_norm(tp, L["ln_p.g"], L["ln_p.b"])
    mixed, w = _attend(mlp2(qp, L, "f2.q"), mlp2(ki, L, "f2.k"), mlp2(ki, L, "f2.v"), c_t)
    transfer = mlp2(mixed, L, "f2.o1")
    return mlp2(dc.gelu(transfer) * transfer, L, "f2.o2") + struct_, w


def head_logits(f: Node, L: dict[str, Node]) -> Node:
    return mlp2(f, L, "head")


@dataclass
class ForwardTrace:
    logits: Node
    fused: Node
    attn1: Node | None = None
    attn2: Node | None = None


def correspondence_tokens(scene, corrs, cfg: GmfConfig) -> np.ndarray:
    """Per-correspondence input rows: ``p||q`` or, for the concat variant, the
    12-D ``p, rgb(p), q, rgb(q)`` rows looked up through the recorded cameras."""
    p = np.asarray(corrs.p, dtype=np.float64)
    q = np.asarray(corrs.q, dtype=np.float64)
    if len(p) == 0:
        raise ContractError("correspondence set is empty")
    if cfg.mode != "concat":
        return np.concatenate([p, q], axis=1)
    return np.concatenate(
        [p, lookup_colors(scene.src_image, scene.src_camera, p), q, lookup_colors(scene.tgt_image, scene.tgt_camera, q)],
        axis=1,
    )


def lookup_colors(img: np.ndarray, cam, pts: np.ndarray) -> np.ndarray:
    """Nearest-pixel colour at each point's projection, clamped into the
    image; points behind the camera read the image centre."""
    from .geometry import project_points

    h, w = img.shape[:2]
    uv, valid = project_points(cam, pts)
    uv = np.where(valid[:, None], uv, [w / 2.0, h / 2.0])
    j = np.clip(np.floor(uv[:, 0]), 0, w - 1).astype(np.int64)
    i = np.clip(np.floor(uv[:, 1]), 0, h - 1).astype(np.int64)
    return np.asarray(img)[i, j]


def forward_graph(tape: Tape, L: dict[str, Node], cfg: GmfConfig, scene, corrs) -> ForwardTrace:
    """Record the full network for one scene on ``tape``."""
    f_p = encode_correspondences_graph(tape.const(correspondence_tokens(scene, corrs, cfg)), L)
    if not cfg.uses_images:
        return ForwardTrace(head_logits(f_p, L), f_p)
    if scene.src_image.shape != scene.tgt_image.shape:
        raise ShapeError("source and target images must share dimensions")
    h, w = scene.src_image.shape[:2]
    src = encode_image_graph(tape.const(image_tokens(scene.src_image, cfg.coord_channels)), L, h, w)
    tgt = encode_image_graph(tape.const(image_tokens(scene.tgt_image, cfg.coord_channels)), L, h, w)
    attn1 = None
    if cfg.no_fusion1:
        f_i = tgt
    else:
        f_i, attn1 = fusion1(src, tgt, L, cfg.c_t)
    fused, attn2 = fusion2(f_i, f_p, L, cfg.c_t, use_lcpe=not cfg.no_lcpe)
    return ForwardTrace(head_logits(fused, L), fused, attn1, attn2)


# --- numpy-level entry points ----------------------------------------------------


def _fresh(params: GmfParams, dtype) -> tuple[Tape, dict[str, Node]]:
    tape = Tape(dtype)
    return tape, params.bind(tape)


def encode_image(img: np.ndarray, params: GmfParams, dtype=np.float32) -> np.ndarray:
    tape, L = _fresh(params, dtype)
    h, w = np.asarray(img).shape[:2]
    x = tape.const(image_tokens(img, params.config.coord_channels))
    return encode_image_graph(x, L, h, w).value.copy()


def encode_correspondences(corrs, params: GmfParams, dtype=np.float32) -> np.ndarray:
    tape, L = _fresh(params, dtype)
    if len(corrs) == 0:
        raise ContractError("correspondence set is empty")
    return encode_correspondences_graph(tape.const(correspondence_tokens(None, corrs, params.config)), L).value.copy()


def classify(f: np.ndarray, params: GmfParams, dtype=np.float32) -> np.ndarray:
    tape, L = _fresh(params, dtype)
    return dc.sigmoid(head_logits(tape.const(f), L)).value[:, 0].copy()


def gmf_forward(scene, corrs, params: GmfParams, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Inlier probabilities and fused correspondence features for one scene."""
    tape, L = _fresh(params, dtype)
    trace = forward_graph(tape, L, params.config, scene, corrs)
    return dc.sigmoid(trace.logits).value[:, 0].copy(), trace.fused.value.copy()


# --- checkpoints ----------------------------------------------------------------


def save_checkpoint(params: GmfParams, path) -> None:
    """``GMF1`` | u32 manifest length | manifest | float32 LE arrays |
    u64 footer length | JSON config footer."""
    lines = []
    offset = 0
    blobs = []
    for name, arr in params.arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        lines.append(f"{name} {','.join(map(str, a.shape))} {offset}")
        blobs.append(a.tobytes())
        offset += a.nbytes
    manifest = ("\n".join(lines) + "\n").encode("utf-8")
    footer = json.dumps(params.config.to_json(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for b in blobs:
            fh.write(b)
        fh.write(struct.pack("<Q", len(footer)))
        fh.write(footer)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> GmfParams:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a GMF1 checkpoint")
    try:
        (mlen,) = struct.unpack_from("<I", data, 4)
        manifest = data[8:8 + mlen].decode("utf-8")
        base = 8 + mlen
        entries = []
        end = base
        for line in manifest.splitlines():
            name, shape_s, off_s = line.split(" ")
            shape = tuple(int(s) for s in shape_s.split(",")) if shape_s else ()
            entries.append((name, shape, int(off_s)))
            end = max(end, base + int(off_s) + 4 * int(np.prod(shape)))
        (flen,) = struct.unpack_from("<Q", data, end)
        footer = data[end + 8:end + 8 + flen]
        if len(footer) != flen or end + 8 + flen != len(data):
            raise CheckpointError(f"{path}: truncated or trailing bytes")
        cfg = GmfConfig.from_json(json.loads(footer.decode("utf-8")))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: malformed checkpoint ({exc})") from exc
    arrays = {}
    for name, shape, off in entries:
        n = int(np.prod(shape))
        arrays[name] = np.frombuffer(data, dtype="<f4", count=n, offset=base + off).reshape(shape).astype(np.float32)
    expected = param_shapes(cfg)
    got = [(k, v.shape) for k, v in arrays.items()]
    if got != expected:
        raise CheckpointError(f"{path}: parameter layout does not match its config")
    return GmfParams(cfg, arrays)
