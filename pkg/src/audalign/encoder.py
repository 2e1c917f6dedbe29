"""Masked-autoencoder audio student over log-mel spectrogram patches."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tape


@dataclass(frozen=True)
class EncoderConfig:
    patch_h: int = 16  # time frames per patch
    patch_w: int = 16  # mel bins per patch
    embed_dim: int = 384
    blocks: int = 4
    heads: int = 4
    mask_ratio: float = 0.7
    decoder_dim: int = 128
    decoder_heads: int = 4
    mlp_ratio: float = 1.0
    n_mels: int = 64
    max_frames: int = 800  # positional table covers this many frames
    # fixed input standardization applied before patch embedding
    norm_mean: float = 0.0
    norm_std: float = 1.0

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.decoder_dim % self.decoder_heads:
            raise ValueError(f"decoder_dim {self.decoder_dim} not divisible by decoder_heads {self.decoder_heads}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must be in (0, 1), got {self.mask_ratio}")
        if self.norm_std <= 0:
            raise ValueError("norm_std must be positive")

    @property
    def patch_dim(self) -> int:
        return self.patch_h * self.patch_w

    @property
    def grid_w(self) -> int:
        return -(-self.n_mels // self.patch_w)

    @property
    def max_grid_h(self) -> int:
        return -(-self.max_frames // self.patch_h)

    @property
    def max_patches(self) -> int:
        return self.max_grid_h * self.grid_w

    @property
    def mlp_dim(self) -> int:
        return max(1, int(round(self.embed_dim * self.mlp_ratio)))


# ------------------------------------------------------------------ patches


def patchify(spec: np.ndarray, cfg: EncoderConfig) -> tuple[np.ndarray, tuple[int, int]]:
    """Zero-pad to whole patches and flatten them in raster order."""
    spec = np.asarray(spec, dtype=np.float64)
    if spec.ndim != 2 or spec.size == 0:
        raise ValueError(f"expected a non-empty 2-D spectrogram, got shape {spec.shape}")
    t, f = spec.shape
    gh, gw = -(-t // cfg.patch_h), -(-f // cfg.patch_w)
    padded = np.zeros((gh * cfg.patch_h, gw * cfg.patch_w))
    padded[:t, :f] = spec
    patches = padded.reshape(gh, cfg.patch_h, gw, cfg.patch_w).transpose(0, 2, 1, 3)
    return patches.reshape(gh * gw, cfg.patch_dim), (gh, gw)


def unpatchify(patches: np.ndarray, grid: tuple[int, int], cfg: EncoderConfig) -> np.ndarray:
    gh, gw = grid
    x = np.asarray(patches).reshape(gh, gw, cfg.patch_h, cfg.patch_w).transpose(0, 2, 1, 3)
    return x.reshape(gh * cfg.patch_h, gw * cfg.patch_w)


def position_ids(grid: tuple[int, int], cfg: EncoderConfig) -> np.ndarray:
    gh, gw = grid
    if gw != cfg.grid_w or gh > cfg.max_grid_h:
        raise ValueError(f"patch grid {grid} exceeds positional table {cfg.max_grid_h}x{cfg.grid_w}")
    return np.arange(gh * gw)


@dataclass
class PatchMask:
    masked: np.ndarray  # bool per patch, True = hidden from the encoder

    def __post_init__(self):
        self.masked = np.asarray(self.masked, dtype=bool).reshape(-1)

    @property
    def count_masked(self) -> int:
        return int(self.masked.sum())

    @property
    def visible(self) -> np.ndarray:
        return np.flatnonzero(~self.masked)

    def validate(self):
        if self.count_masked == 0:
            raise ValueError("mask hides no patch")
        if self.count_masked == len(self.masked):
            raise ValueError("mask leaves no visible patch")


def random_mask(n_patches: int, ratio: float, rng: np.random.Generator) -> PatchMask:
    k = int(round(ratio * n_patches))
    k = min(max(k, 1), n_patches - 1)
    masked = np.zeros(n_patches, dtype=bool)
    masked[rng.permutation(n_patches)[:k]] = True
    return PatchMask(masked)


# ------------------------------------------------------------------ params


def _block_shapes(prefix: str, d: int, hidden: int) -> dict[str, tuple[int, int]]:
    shapes = {}
    for w in ("q", "k", "v", "o"):
        shapes[f"{prefix}.w{w}"] = (d, d)
        shapes[f"{prefix}.b{w}"] = (1, d)
    shapes[f"{prefix}.w1"] = (d, hidden)
    shapes[f"{prefix}.b1"] = (1, hidden)
    shapes[f"{prefix}.w2"] = (hidden, d)
    shapes[f"{prefix}.b2"] = (1, d)
    return shapes


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, int]]:
    d, dd = cfg.embed_dim, cfg.decoder_dim
    shapes = {
        "patch.w": (cfg.patch_dim, d),
        "patch.b": (1, d),
        "pos": (cfg.max_patches, d),
    }
    for i in range(cfg.blocks):
        shapes.update(_block_shapes(f"block{i}", d, cfg.mlp_dim))
    shapes.update({
        "dec.embed.w": (d, dd),
        "dec.embed.b": (1, dd),
        "dec.mask_token": (1, dd),
        "dec.pos": (cfg.max_patches, dd),
    })
    shapes.update(_block_shapes("dec.block", dd, 2 * dd))
    shapes.update({"dec.pred.w": (dd, cfg.patch_dim), "dec.pred.b": (1, cfg.patch_dim)})
    return shapes


def init_params(cfg: EncoderConfig, seed: int = 0, mode: str = "random", checkpoint=None) -> dict[str, np.ndarray]:
    """Uniform(+-1/sqrt(fan_in)) weights and zero biases, or a checkpoint load."""
    if mode == "from_checkpoint":
        if checkpoint is None:
            raise ValueError("from_checkpoint mode needs a checkpoint path")
        loaded_cfg, tensors = load_checkpoint(checkpoint)
        expected = param_shapes(cfg)
        params = {}
        for name, shape in expected.items():
            if name not in tensors:
                raise ValueError(f"checkpoint lacks tensor {name}")
            if tensors[name].shape != shape:
                raise ValueError(f"checkpoint tensor {name} has shape {tensors[name].shape}, expected {shape}")
            params[name] = tensors[name].copy()
        return params
    if mode != "random":
        raise ValueError(f"unknown init mode {mode!r}")
    rng = np.random.default_rng(seed)
    params = {}
    for name, (rows, cols) in param_shapes(cfg).items():
        if name.rsplit(".", 1)[-1].startswith("b"):
            params[name] = np.zeros((rows, cols))
        else:
            fan_in = cols if name.endswith(("pos", "mask_token")) else rows
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=(rows, cols))
    return params


# ------------------------------------------------------------------ forward


@dataclass
class EncoderOutput:
    pooled: Node  # B x embed_dim
    block_hiddens: list[Node]  # per block, B x embed_dim (visible-token means)
    recon: Node | None = None  # (B*P) x patch_dim, decoder output for every patch
    target: np.ndarray | None = None  # (B*P) x patch_dim standardized input patches
    masked_rows: np.ndarray | None = None  # bool over the B*P rows
    extras: dict = field(default_factory=dict)


def _linear(x: Node, leaves, name) -> Node:
    return ad.add(ad.matmul(x, leaves[f"{name}.w"]), leaves[f"{name}.b"])


def _block(h: Node, leaves, prefix: str, groups: int, heads: int) -> Node:
    a = ad.layer_norm_rows(h)
    q = ad.add(ad.matmul(a, leaves[f"{prefix}.wq"]), leaves[f"{prefix}.bq"])
    k = ad.add(ad.matmul(a, leaves[f"{prefix}.wk"]), leaves[f"{prefix}.bk"])
    v = ad.add(ad.matmul(a, leaves[f"{prefix}.wv"]), leaves[f"{prefix}.bv"])
    att = ad.grouped_attention(q, k, v, groups, heads)
    h = ad.add(h, ad.add(ad.matmul(att, leaves[f"{prefix}.wo"]), leaves[f"{prefix}.bo"]))
    a = ad.layer_norm_rows(h)
    f = ad.relu(ad.add(ad.matmul(a, leaves[f"{prefix}.w1"]), leaves[f"{prefix}.b1"]))
    f = ad.add(ad.matmul(f, leaves[f"{prefix}.w2"]), leaves[f"{prefix}.b2"])
    return ad.add(h, f)


def param_leaves(tape: Tape, params: dict[str, np.ndarray], frozen: bool = False, prefix: str = "") -> dict[str, Node]:
    make = tape.frozen if frozen else tape.param
    return {k: make(v, prefix + k) for k, v in params.items()}


def forward(leaves: dict[str, Node], cfg: EncoderConfig, patches, masks=None, train: bool = True) -> EncoderOutput:
    """Encode a batch of equally sized patch matrices.

    ``patches`` is a sequence (or B x P x patch_dim array) of raw patch
    matrices from :func:`patchify`. With ``masks`` (one :class:`PatchMask`
    per item, equal masked counts) the encoder sees visible patches only and
    the decoder reconstructs every position. With ``masks=None`` all patches
    are visible and the decoder is skipped.
    """
    tape = next(iter(leaves.values())).tape
    x = np.asarray(patches, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    b, p, c = x.shape
    if c != cfg.patch_dim:
        raise ValueError(f"patch width {c} != {cfg.patch_dim}")
    if p > cfg.max_patches:
        raise ValueError(f"{p} patches exceed the positional table of {cfg.max_patches}")
    xn = (x - cfg.norm_mean) / cfg.norm_std
    if masks is None:
        vis = np.tile(np.arange(p), (b, 1))
    else:
        if len(masks) != b:
            raise ValueError(f"{len(masks)} masks for {b} items")
        for m in masks:
            if len(m.masked) != p:
                raise ValueError(f"mask length {len(m.masked)} != {p} patches")
            m.validate()
        counts = {m.count_masked for m in masks}
        if len(counts) != 1:
            raise ValueError("all masks in a batch must hide the same number of patches")
        vis = np.stack([m.visible for m in masks])
    n = vis.shape[1]
    rows = (np.arange(b)[:, None] * p + vis).reshape(-1)
    tokens = tape.const(xn.reshape(b * p, c)[rows])
    h = ad.add(_linear(tokens, leaves, "patch"), ad.gather_rows(leaves["pos"], vis.reshape(-1)))
    hiddens = []
    for i in range(cfg.blocks):
        h = _block(h, leaves, f"block{i}", b, cfg.heads)
        hiddens.append(ad.group_mean_rows(h, b))
    out = EncoderOutput(pooled=hiddens[-1], block_hiddens=hiddens)
    if masks is None:
        return out
    z = _linear(ad.layer_norm_rows(h), leaves, "dec.embed")
    full = ad.place_rows(z, rows, b * p)
    masked_rows = np.concatenate([m.masked for m in masks])
    indicator = tape.const(masked_rows[:, None].astype(np.float64))
    full = ad.add(full, ad.matmul(indicator, leaves["dec.mask_token"]))
    full = ad.add(full, ad.gather_rows(leaves["dec.pos"], np.tile(np.arange(p), b)))
    full = _block(full, leaves, "dec.block", b, cfg.decoder_heads)
    out.recon = _linear(ad.layer_norm_rows(full), leaves, "dec.pred")
    out.target = xn.reshape(b * p, c)
    out.masked_rows = masked_rows
    return out


def ssm_loss(recon: Node, target, masked_rows) -> Node:
    """Mean squared error over the cells of masked patches only."""
    t = target if isinstance(target, Node) else recon.tape.const(target)
    return ad.square_error_masked(recon, t, masked_rows)


def embed(params: dict[str, np.ndarray], cfg: EncoderConfig, patches, all_blocks: bool = False):
    """Eval-mode pooled embeddings (all patches visible); returns numpy arrays."""
    tape = Tape()
    leaves = param_leaves(tape, params, frozen=True)
    out = forward(leaves, cfg, patches, None, train=False)
    res = [h.value for h in out.block_hiddens] if all_blocks else out.pooled.value
    tape.release()
    return res


# --------------------------------------------------------------- checkpoint

CKPT_MAGIC = b"ACENC01\0"
CKPT_VERSION = 1


def save_checkpoint(path, cfg: EncoderConfig, tensors: dict[str, np.ndarray], extra: dict | None = None) -> None:
    """magic, u32 version, u32-length JSON config, u32 count, then named f64 tensors."""
    meta = {"encoder": asdict(cfg), "extra": extra or {}}
    blob = json.dumps(meta, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(blob)), blob, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"tensor {name} must be 2-D")
        key = name.encode()
        parts.append(struct.pack("<I", len(key)) + key + struct.pack("<II", *arr.shape))
        parts.append(arr.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[EncoderConfig, dict[str, np.ndarray]]:
    cfg, tensors, _ = load_checkpoint_full(path)
    return cfg, tensors


def load_checkpoint_full(path) -> tuple[EncoderConfig, dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not an ACENC01 checkpoint")
    version, n = struct.unpack("<II", raw[8:16])
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(raw[16:16 + n])
    pos = 16 + n
    (count,) = struct.unpack("<I", raw[pos:pos + 4])
    pos += 4
    tensors = {}
    for _ in range(count):
        (klen,) = struct.unpack("<I", raw[pos:pos + 4])
        name = raw[pos + 4:pos + 4 + klen].decode()
        pos += 4 + klen
        rows, cols = struct.unpack("<II", raw[pos:pos + 8])
        pos += 8
        size = rows * cols * 8
        if pos + size > len(raw):
            raise ValueError(f"{path}: truncated tensor {name}")
        tensors[name] = np.frombuffer(raw[pos:pos + size], dtype="<f8").reshape(rows, cols).copy()
        pos += size
    return EncoderConfig(**meta["encoder"]), tensors, meta.get("extra", {})
