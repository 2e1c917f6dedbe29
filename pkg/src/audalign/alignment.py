"""Projection heads, CKA alignment objective and the joint training loop."""
from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import dsp
from . import encoder as enc
from .autodiff import Node, Tape

log = logging.getLogger(__name__)

AUDIO_DIM = 384
TEXT_DIM = 2048
HIDDEN_DIM = 1024
SHARED_DIM = 512
HEAD_DROPOUT = 0.2


class DegenerateBatchError(ValueError):
    pass


class CkaMode(str, enum.Enum):
    SAMPLE_GRAM = "sample"
    FEATURE_GRAM = "feature"


class LossKind(str, enum.Enum):
    CKA = "cka"
    MSE = "mse"


# ------------------------------------------------------------ projection heads


def init_head(in_dim: int, seed: int, hidden: int = HIDDEN_DIM, out_dim: int = SHARED_DIM) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    b1, b2 = 1.0 / math.sqrt(in_dim), 1.0 / math.sqrt(hidden)
    return {
        "w1": rng.uniform(-b1, b1, size=(in_dim, hidden)),
        "b1": np.zeros((1, hidden)),
        "w2": rng.uniform(-b2, b2, size=(hidden, out_dim)),
        "b2": np.zeros((1, out_dim)),
    }


def dropout_mask(rows: int, cols: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    return (rng.random((rows, cols)) >= rate).astype(np.float64)


def project(head: dict[str, Node], x: Node, mask=None, train: bool = True, rate: float = HEAD_DROPOUT) -> Node:
    """``w2 . relu(dropout(w1 . x + b1)) + b2`` per row; dropout only when training."""
    if x.shape[1] != head["w1"].shape[0]:
        raise ad.ShapeError(f"head expects input width {head['w1'].shape[0]}, got {x.shape[1]}")
    h = ad.add(ad.matmul(x, head["w1"]), head["b1"])
    if train and rate > 0:
        h = ad.dropout_with_mask(h, mask, rate)
    h = ad.relu(h)
    return ad.add(ad.matmul(h, head["w2"]), head["b2"])


def project_numpy(head: dict[str, np.ndarray], x: np.ndarray) -> np.ndarray:
    """Eval-mode projection without a tape."""
    h = np.maximum(np.asarray(x) @ head["w1"] + head["b1"], 0.0)
    return h @ head["w2"] + head["b2"]


# ------------------------------------------------------------------------ CKA


def _check_batch(ha, hl):
    if ha.shape[0] != hl.shape[0]:
        raise ad.ShapeError(f"batch sizes differ: {ha.shape[0]} vs {hl.shape[0]}")
    if ha.shape[0] < 2:
        raise DegenerateBatchError("CKA needs at least 2 samples")


def cka(ha: np.ndarray, hl: np.ndarray, mode: CkaMode = CkaMode.SAMPLE_GRAM) -> float:
    """Linear CKA between two row-sample matrices, clamped to [0, 1]."""
    ha = np.asarray(ha, dtype=np.float64)
    hl = np.asarray(hl, dtype=np.float64)
    _check_batch(ha, hl)
    a = ha - ha.mean(axis=0)
    b = hl - hl.mean(axis=0)
    if CkaMode(mode) is CkaMode.SAMPLE_GRAM:
        ka, kb = a @ a.T, b @ b.T
    else:
        ka, kb = a.T @ a, b.T @ b
    den = np.linalg.norm(ka) * np.linalg.norm(kb)
    if not den > 0:
        raise DegenerateBatchError("zero-variance representation batch")
    return float(np.clip(np.sum(ka * kb) / den, 0.0, 1.0))


def cka_node(ha: Node, hl: Node, mode: CkaMode = CkaMode.SAMPLE_GRAM) -> Node:
    _check_batch(ha.value, hl.value)
    a = ad.row_mean_center(ha)
    b = ad.row_mean_center(hl)
    if CkaMode(mode) is CkaMode.SAMPLE_GRAM:
        ka, kb = ad.matmul(a, ad.transpose(a)), ad.matmul(b, ad.transpose(b))
    else:
        ka, kb = ad.matmul(ad.transpose(a), a), ad.matmul(ad.transpose(b), b)
    den = ad.elementwise_mul(ad.frobenius_norm(ka), ad.frobenius_norm(kb))
    if not den.item() > 1e-300:
        raise DegenerateBatchError("zero-variance representation batch")
    return ad.clip(ad.scalar_div(ad.frobenius_inner(ka, kb), den), 0.0, 1.0)


def align_loss(ha: Node, hl: Node, mode: CkaMode = CkaMode.SAMPLE_GRAM, kind: LossKind = LossKind.CKA) -> Node:
    """``1 - cka`` or the mean squared gap between row-normalized embeddings."""
    if LossKind(kind) is LossKind.CKA:
        one = ha.tape.const(np.ones((1, 1)))
        return ad.sub(one, cka_node(ha, hl, mode))
    _check_batch(ha.value, hl.value)
    if ha.shape != hl.shape:
        raise ad.ShapeError(f"MSE alignment needs equal shapes, got {ha.shape} and {hl.shape}")
    d = ad.sub(ad.l2_normalize_rows(ha), ad.l2_normalize_rows(hl))
    return ad.mean_all(ad.elementwise_mul(d, d))


def align_loss_numpy(ha, hl, mode=CkaMode.SAMPLE_GRAM, kind=LossKind.CKA) -> float:
    if LossKind(kind) is LossKind.CKA:
        return 1.0 - cka(ha, hl, mode)
    a = ha / np.linalg.norm(ha, axis=1, keepdims=True)
    b = hl / np.linalg.norm(hl, axis=1, keepdims=True)
    return float(np.mean((a - b) ** 2))


def total_loss(align: Node | None, ssm: Node | None, lambda_align: float, lambda_ssm: float) -> Node:
    if lambda_align < 0 or lambda_ssm < 0:
        raise ValueError("loss weights must be non-negative")
    terms = []
    if align is not None and lambda_align > 0:
        terms.append(ad.scalar_mul(align, lambda_align))
    if ssm is not None and lambda_ssm > 0:
        terms.append(ad.scalar_mul(ssm, lambda_ssm))
    if not terms:
        raise ValueError("empty objective: both loss weights are zero")
    out = terms[0]
    for t in terms[1:]:
        out = ad.add(out, t)
    return out


# ------------------------------------------------------- schedule / optimizer


@dataclass
class TrainConfig:
    lambda_align: float = 1.0
    lambda_ssm: float = 1.0
    lr: float = 1e-5
    epochs: int = 50
    warmup_steps: int = 400
    batch_size: int = 24
    grad_accum: int = 2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    align_layers: tuple[int, ...] = ()  # 1-based blocks; empty = last block only
    augment: bool = True
    cka_mode: str = CkaMode.SAMPLE_GRAM.value
    loss_kind: str = LossKind.CKA.value
    head_dropout: float = HEAD_DROPOUT
    head_dropout_in_train: bool = True
    pooled_pass: str = "masked"  # "masked": reuse the SSM pass; "full": extra all-visible pass
    all_segments: bool = True  # False: one random segment per recording per epoch
    keep_checkpoints: int = 1
    seed: int = 0

    def validate(self, total_steps: int | None = None) -> list[str]:
        errs = []
        if self.lambda_align < 0 or self.lambda_ssm < 0:
            errs.append("loss weights must be non-negative")
        if self.lambda_align == 0 and self.lambda_ssm == 0:
            errs.append("empty objective: both loss weights are zero")
        if self.batch_size < 2:
            errs.append("batch_size must be >= 2 for CKA")
        if self.grad_accum < 1:
            errs.append("grad_accum must be >= 1")
        if self.lr <= 0:
            errs.append("lr must be positive")
        if self.epochs < 1:
            errs.append("epochs must be >= 1")
        if self.warmup_steps < 0:
            errs.append("warmup_steps must be >= 0")
        if total_steps is not None and self.warmup_steps >= total_steps:
            errs.append(f"warmup_steps {self.warmup_steps} must be below total steps {total_steps}")
        if self.cka_mode not in {m.value for m in CkaMode}:
            errs.append(f"unknown cka_mode {self.cka_mode!r}")
        if self.loss_kind not in {k.value for k in LossKind}:
            errs.append(f"unknown loss_kind {self.loss_kind!r}")
        if self.pooled_pass not in ("masked", "full"):
            errs.append(f"unknown pooled_pass {self.pooled_pass!r}")
        if not 0 <= self.head_dropout < 1:
            errs.append("head_dropout must be in [0, 1)")
        return errs


def lr_at(step: int, cfg: TrainConfig, total_steps: int) -> float:
    """Linear warmup 0 -> lr over ``warmup_steps``, then linear decay to 0."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    w = cfg.warmup_steps
    if step < w:
        return cfg.lr * step / w
    if total_steps == w:
        return cfg.lr
    return cfg.lr * (total_steps - step) / (total_steps - w)


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float,
               cfg: TrainConfig) -> tuple[dict[str, np.ndarray], AdamState]:
    """Decoupled weight decay Adam with bias-corrected moments. Returns new arrays."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.sum(~np.isfinite(g)))
            raise FloatingPointError(f"non-finite gradient in {name} ({bad} entries) at step {state.step}")
    t = state.step + 1
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    new_params = dict(params)
    m, v = dict(state.m), dict(state.v)
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ad.ShapeError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        mi = cfg.beta1 * m.get(name, 0.0) + (1.0 - cfg.beta1) * g
        vi = cfg.beta2 * v.get(name, 0.0) + (1.0 - cfg.beta2) * g * g
        p = p * (1.0 - lr * cfg.weight_decay)
        p = p - lr * (mi / c1) / (np.sqrt(vi / c2) + cfg.eps)
        new_params[name] = p
        m[name], v[name] = mi, vi
    return new_params, AdamState(t, m, v)


# ------------------------------------------------------------------- training


@dataclass
class CorpusItem:
    audio_id: str
    report: str
    spectrogram: np.ndarray | None = None
    waveform: dsp.Waveform | None = None
    label: str | None = None
    subject_id: str | None = None
    recording_id: str | None = None  # None: the item is its own recording


@dataclass
class Model:
    """Encoder parameters plus the projection heads, all keyed by tensor name."""

    cfg: enc.EncoderConfig
    encoder: dict[str, np.ndarray]
    heads: dict[str, dict[str, np.ndarray]]

    def tensors(self) -> dict[str, np.ndarray]:
        out = dict(self.encoder)
        for hname, h in self.heads.items():
            for k, v in h.items():
                out[f"head.{hname}.{k}"] = v
        return out

    @classmethod
    def from_tensors(cls, cfg: enc.EncoderConfig, tensors: dict[str, np.ndarray]) -> "Model":
        encoder = {k: v for k, v in tensors.items() if not k.startswith("head.")}
        heads: dict[str, dict[str, np.ndarray]] = {}
        for k, v in tensors.items():
            if k.startswith("head."):
                _, hname, leaf = k.split(".", 2)
                heads.setdefault(hname, {})[leaf] = v
        return cls(cfg, encoder, heads)

    def save(self, path, extra: dict | None = None) -> None:
        enc.save_checkpoint(path, self.cfg, self.tensors(), extra)

    @classmethod
    def load(cls, path) -> "Model":
        cfg, tensors = enc.load_checkpoint(path)
        return cls.from_tensors(cfg, tensors)


def head_names(cfg: TrainConfig, enc_cfg: enc.EncoderConfig) -> dict[str, int]:
    """Audio head name -> 0-based block index it reads from."""
    last = enc_cfg.blocks - 1
    layers = sorted({int(b) - 1 for b in cfg.align_layers} | {last}) if cfg.align_layers else [last]
    for b in layers:
        if not 0 <= b <= last:
            raise ValueError(f"align layer {b + 1} outside 1..{enc_cfg.blocks}")
    return {("audio" if b == last else f"audio_b{b + 1}"): b for b in layers}


def init_model(enc_cfg: enc.EncoderConfig, cfg: TrainConfig, seed: int, encoder_params=None,
               text_dim: int = TEXT_DIM) -> Model:
    params = encoder_params if encoder_params is not None else enc.init_params(enc_cfg, seed)
    heads = {"lang": init_head(text_dim, seed + 1)}
    for i, name in enumerate(head_names(cfg, enc_cfg)):
        heads[name] = init_head(enc_cfg.embed_dim, seed + 2 + i)
    return Model(enc_cfg, {k: v.copy() for k, v in params.items()}, heads)


def _batch_spectrograms(items: Sequence[CorpusItem], cfg: TrainConfig, rng) -> list[np.ndarray]:
    specs = []
    for it in items:
        if cfg.augment and it.waveform is not None:
            w, _ = dsp.augment(it.waveform, rng)
            specs.append(dsp.logmel(w))
        elif it.spectrogram is not None:
            specs.append(it.spectrogram)
        elif it.waveform is not None:
            specs.append(dsp.logmel(it.waveform))
        else:
            raise ValueError(f"item {it.audio_id} has neither waveform nor spectrogram")
    return specs


def microbatch_loss(model: Model, tape: Tape, items: Sequence[CorpusItem], teacher_vecs: np.ndarray,
                    cfg: TrainConfig, rng: np.random.Generator):
    """Build the joint objective for one micro-batch on ``tape``.

    Returns ``(total, parts)`` where ``parts`` holds the scalar nodes
    ``align``, ``ssm`` and ``cka`` (``cka`` only for the CKA loss kind).
    """
    ec = model.cfg
    specs = _batch_spectrograms(items, cfg, rng)
    patches = np.stack([enc.patchify(s, ec)[0] for s in specs])
    n_patches = patches.shape[1]
    masks = [enc.random_mask(n_patches, ec.mask_ratio, rng) for _ in items]
    eleaves = enc.param_leaves(tape, model.encoder, prefix="enc.")
    out = enc.forward(eleaves, ec, patches, masks, train=True)
    ssm = enc.ssm_loss(out.recon, out.target, out.masked_rows)
    hiddens = out.block_hiddens
    if cfg.pooled_pass == "full":
        hiddens = enc.forward(eleaves, ec, patches, None, train=True).block_hiddens
    b = len(items)
    drop = cfg.head_dropout if cfg.head_dropout_in_train else 0.0
    hl_leaves = {k: tape.param(v, f"head.lang.{k}") for k, v in model.heads["lang"].items()}
    teacher = tape.frozen(teacher_vecs, "teacher.embeddings")
    hl = project(hl_leaves, teacher, dropout_mask(b, HIDDEN_DIM, drop, rng), train=drop > 0, rate=drop)
    losses, ckas = [], []
    for name, block in head_names(cfg, ec).items():
        h_leaves = {k: tape.param(v, f"head.{name}.{k}") for k, v in model.heads[name].items()}
        ha = project(h_leaves, hiddens[block], dropout_mask(b, HIDDEN_DIM, drop, rng), train=drop > 0, rate=drop)
        losses.append(align_loss(ha, hl, CkaMode(cfg.cka_mode), LossKind(cfg.loss_kind)))
        if LossKind(cfg.loss_kind) is LossKind.CKA:
            ckas.append(1.0 - losses[-1].item())
        else:
            ckas.append(cka(ha.value, hl.value, CkaMode(cfg.cka_mode)))
    align = losses[0]
    for extra in losses[1:]:
        align = ad.add(align, extra)
    if len(losses) > 1:
        align = ad.scalar_mul(align, 1.0 / len(losses))
    total = total_loss(align, ssm, cfg.lambda_align, cfg.lambda_ssm)
    return total, {"align": align, "ssm": ssm, "cka": float(np.mean(ckas))}


def steps_per_epoch(n_items: int, cfg: TrainConfig) -> int:
    return n_items // (cfg.batch_size * cfg.grad_accum)


@dataclass
class TrainResult:
    model: Model
    metrics: list[dict]
    checkpoints: list[str]


def recording_groups(corpus: Sequence[CorpusItem]) -> list[list[int]]:
    by: dict[str, list[int]] = {}
    for i, it in enumerate(corpus):
        by.setdefault(it.recording_id or f"\0{it.audio_id}", []).append(i)
    return [by[k] for k in sorted(by)]


def epoch_order(groups: list[list[int]], n: int, cfg: TrainConfig, epoch: int) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, epoch])
    if cfg.all_segments:
        return rng.permutation(n)
    pick = np.array([g[int(rng.integers(len(g)))] for g in groups])
    return pick[rng.permutation(len(pick))]


def train(cfg: TrainConfig, corpus: Sequence[CorpusItem], model: Model, teacher,
          out_dir=None, metrics_path=None, progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Minimize ``lambda_align * align + lambda_ssm * ssm`` over encoder and heads.

    Drop-last batching: every optimizer step consumes exactly
    ``batch_size * grad_accum`` items, gradients averaged over micro-batches.
    """
    from .teacher import embed_reports, text_digest

    if not corpus:
        raise ValueError("empty corpus")
    groups = recording_groups(corpus)
    units = len(corpus) if cfg.all_segments else len(groups)
    spe = steps_per_epoch(units, cfg)
    if spe == 0:
        raise DegenerateBatchError(
            f"{units} items cannot fill one step of {cfg.batch_size}x{cfg.grad_accum}")
    total_steps = spe * cfg.epochs
    errs = cfg.validate(total_steps)
    if errs:
        raise ValueError("; ".join(errs))
    table = embed_reports(teacher, [it.report for it in corpus])
    tvecs = np.stack([table[text_digest(it.report)] for it in corpus])
    params = model.tensors()
    state = AdamState()
    metrics: list[dict] = []
    ckpts: list[str] = []
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    mfile = open(metrics_path, "w") if metrics_path else None
    step = 0
    try:
        for epoch in range(cfg.epochs):
            order = epoch_order(groups, len(corpus), cfg, epoch)
            for s in range(spe):
                acc: dict[str, np.ndarray] = {}
                connected: set[str] = set()
                vals = {"align": 0.0, "ssm": 0.0, "total": 0.0, "cka": 0.0}
                for micro in range(cfg.grad_accum):
                    start = (s * cfg.grad_accum + micro) * cfg.batch_size
                    idx = order[start:start + cfg.batch_size]
                    rng = np.random.default_rng([cfg.seed, epoch, s, micro])
                    cur = Model.from_tensors(model.cfg, params)
                    tape = Tape()
                    loss, parts = microbatch_loss(cur, tape, [corpus[i] for i in idx], tvecs[idx], cfg, rng)
                    if not np.isfinite(loss.item()):
                        raise FloatingPointError(f"non-finite loss at step {step}")
                    report = ad.backward(tape, loss, step)
                    assert not any(k.startswith("teacher") for k in report.grads)
                    dead = set(report.disconnected)
                    for k, g in report.grads.items():
                        name = k[4:] if k.startswith("enc.") else k
                        acc[name] = acc[name] + g if name in acc else g
                        if k not in dead:
                            connected.add(name)
                    vals["align"] += parts["align"].item() / cfg.grad_accum
                    vals["ssm"] += parts["ssm"].item() / cfg.grad_accum
                    vals["total"] += loss.item() / cfg.grad_accum
                    vals["cka"] += parts["cka"] / cfg.grad_accum
                    tape.release()
                # parameters outside the objective (e.g. heads when lambda_align = 0) stay untouched
                grads = {k: g / cfg.grad_accum for k, g in acc.items() if k in connected}
                lr = lr_at(step, cfg, total_steps)
                params, state = adamw_step(params, grads, state, lr, cfg)
                rec = {"step": step, "epoch": epoch, "lr": lr, "align_loss": vals["align"],
                       "ssm_loss": vals["ssm"], "total_loss": vals["total"], "cka": vals["cka"]}
                metrics.append(rec)
                if mfile:
                    mfile.write(json.dumps(rec) + "\n")
                    mfile.flush()
                if progress:
                    progress(rec)
                step += 1
            if out:
                path = out / f"checkpoint_epoch{epoch + 1:03d}.bin"
                Model.from_tensors(model.cfg, params).save(path, {"epoch": epoch + 1, "train": asdict(cfg)})
                ckpts.append(str(path))
                while cfg.keep_checkpoints > 0 and len(ckpts) > cfg.keep_checkpoints:
                    Path(ckpts.pop(0)).unlink(missing_ok=True)
    finally:
        if mfile:
            mfile.close()
    return TrainResult(Model.from_tensors(model.cfg, params), metrics, ckpts)


def epoch_means(metrics: Sequence[dict], key: str = "align_loss") -> list[float]:
    by: dict[int, list[float]] = {}
    for r in metrics:
        by.setdefault(r["epoch"], []).append(r[key])
    return [float(np.mean(by[e])) for e in sorted(by)]


def embed_items(model: Model, specs: Sequence[np.ndarray], space: str = "shared-512",
                batch: int = 64) -> np.ndarray:
    """Eval-mode embeddings: all patches visible, no dropout."""
    out = []
    for i in range(0, len(specs), batch):
        patches = np.stack([enc.patchify(s, model.cfg)[0] for s in specs[i:i + batch]])
        pooled = enc.embed(model.encoder, model.cfg, patches)
        if space == "encoder-384":
            out.append(pooled)
        elif space == "shared-512":
            out.append(project_numpy(model.heads["audio"], pooled))
        else:
            raise ValueError(f"unknown embedding space {space!r}")
    return np.concatenate(out) if out else np.zeros((0, SHARED_DIM))


def embed_texts(model: Model, teacher_vecs: np.ndarray) -> np.ndarray:
    return project_numpy(model.heads["lang"], teacher_vecs)
