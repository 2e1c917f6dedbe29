"""Command line: corpus generation, training, embedding export, probing, zero-shot.

Every command resolves its configuration (defaults < ``--config`` file <
flags), hashes it, and writes a ``run_manifest.json`` next to its outputs.
Exit codes: 0 success, 1 validation error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

log = logging.getLogger("audalign")

TOOL_VERSION = "0.1.0"
CACHE_ENV = "AUDALIGN_CACHE_DIR"
# keys that do not influence artifact contents
_DIGEST_EXCLUDE = {"out", "config", "threads", "command", "verbose", "func"}


class ValidationError(ValueError):
    pass


def cache_dir() -> Path:
    return Path(os.environ.get(CACHE_ENV, Path.home() / ".cache" / "audalign"))


def config_digest(resolved: dict) -> str:
    body = {k: v for k, v in resolved.items() if k not in _DIGEST_EXCLUDE}
    return hashlib.sha256(json.dumps(body, sort_keys=True, default=str).encode()).hexdigest()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_manifest(out_dir, command: str, resolved: dict, started: float, artifacts: list[str],
                       inputs: dict[str, str] | None = None) -> Path:
    """Timestamps live here only; every other artifact is a pure function of (config, seed)."""
    out = Path(out_dir)
    man = {
        "command": command,
        "config": {k: v for k, v in resolved.items() if k not in ("func",)},
        "config_digest": config_digest(resolved),
        "seed": resolved.get("seed"),
        "started": started,
        "finished": time.time(),
        "artifacts": sorted(artifacts),
        "inputs": inputs or {},
        "tool_version": TOOL_VERSION,
    }
    path = out / "run_manifest.json"
    path.write_text(json.dumps(man, indent=2, sort_keys=True, default=str))
    return path


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ------------------------------------------------------------------ gen-data


def cmd_gen_data(args) -> dict:
    import numpy as np

    from . import dsp, evaluation, reports, synth

    if args.schema != "icbhi":
        raise ValidationError(f"schema {args.schema!r} unknown to the synthetic generator (supported: icbhi)")
    cfg = synth.SynthConfig(classes=args.classes, subjects=args.subjects, clips=args.clips, seed=args.seed,
                            band_contrast=args.band_contrast, finding_level=args.finding_level)
    errs = cfg.validate()
    if errs:
        raise ValidationError("; ".join(errs))
    out = _out_dir(args)
    (out / "wav").mkdir(exist_ok=True)
    (out / "spec").mkdir(exist_ok=True)
    clips = synth.generate(cfg)
    report_seed = args.seed if args.report_seed is None else args.report_seed
    texts = synth.reports_for(clips, report_seed)
    if args.shuffle_reports:
        # break the audio-report pairing; labels stay with the audio
        perm = np.random.default_rng([args.seed, 99]).permutation(len(texts))
        texts = [texts[i] for i in perm]
    if args.reports_per_clip < 1:
        raise ValidationError("--reports-per-clip must be >= 1")
    # extra report variants pair the same audio with a differently seeded report
    extra = [synth.reports_for(clips, report_seed + v) for v in range(1, args.reports_per_clip)]
    entries = []
    meta_lines = []
    for i, (clip, text) in enumerate(zip(clips, texts)):
        wav_rel = f"wav/{clip.audio_id}.wav"
        spec_rel = f"spec/{clip.audio_id}.spec"
        dsp.write_wav(out / wav_rel, clip.waveform)
        dsp.write_spectrogram(out / spec_rel, dsp.logmel(clip.waveform))
        e = reports.ManifestEntry(clip.audio_id, spec_rel, text, clip.meta.label, clip.meta.dataset,
                                  clip.subject.subject_id, wav_rel, {"age": clip.subject.age},
                                  recording_id=clip.audio_id if extra else None)
        entries.append(e)
        for v, variant in enumerate(extra, 1):
            entries.append(reports.ManifestEntry(f"{clip.audio_id}_r{v}", spec_rel, variant[i], clip.meta.label,
                                                 clip.meta.dataset, clip.subject.subject_id, wav_rel,
                                                 {"age": clip.subject.age}, recording_id=clip.audio_id))
        meta_lines.append(json.dumps({"audio_id": clip.audio_id, "fields": clip.meta.fields,
                                      "digest": clip.meta.digest()}))
    reports.export_corpus(out / "manifest.jsonl", entries)
    subs = [e.subject_id for e in entries]
    tr, te = evaluation.subject_split(subs, args.test_fraction, args.seed)
    reports.export_corpus(out / "train.jsonl", [entries[i] for i in tr])
    reports.export_corpus(out / "test.jsonl", [entries[i] for i in te])
    (out / "metadata.jsonl").write_text("\n".join(meta_lines) + "\n")
    stats = {"subject_disjoint_split": True, "train_clips": len(tr), "test_clips": len(te),
             "classes": list(synth.CLASS_NAMES[:args.classes])}
    (out / "corpus.json").write_text(json.dumps(stats, indent=2, sort_keys=True))
    return {"artifacts": [str(out / n) for n in ("manifest.jsonl", "train.jsonl", "test.jsonl", "metadata.jsonl",
                                                 "corpus.json")]}


# ------------------------------------------------------------ align / pretrain


def _load_manifest(path):
    from . import reports

    return reports.import_corpus(path)


def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def load_corpus(manifest_path, need_wave: bool, corpus_filter: str | None = None):
    """CorpusItems for a manifest; spectrograms always, waveforms when augmenting."""
    from . import alignment, dsp, reports

    base = Path(manifest_path).parent
    items = []
    for e in _load_manifest(manifest_path):
        if corpus_filter and not _passes_filter(e, corpus_filter, reports):
            continue
        sp = _resolve(base, e.spectrogram_path)
        if not sp.exists():
            raise ValidationError(f"dangling audio reference {e.audio_id!r}: {sp}")
        wave = None
        if need_wave and e.wav_path:
            wave = dsp.load_wav(_resolve(base, e.wav_path))
        items.append(alignment.CorpusItem(e.audio_id, e.report, dsp.read_spectrogram(sp), wave, e.label,
                                          e.subject_id, e.recording_id))
    return items


def _passes_filter(entry, corpus_filter: str, reports) -> bool:
    family = reports.TEMPLATE_FAMILIES.get(entry.dataset)
    modality = None
    if family is not None:
        modality = "respiratory" if family.specialist == "pulmonologist" else "cardiac"
    wanted = corpus_filter.split(",")
    return entry.dataset in wanted or (modality is not None and modality in wanted)


def _make_teacher(args):
    from . import teacher

    if args.teacher == "hashed":
        return teacher.HashTeacher(args.teacher_dim, args.teacher_seed)
    if args.teacher == "file":
        if not args.teacher_file:
            raise ValidationError("--teacher file needs --teacher-file")
        recs = teacher.load_embeddings(args.teacher_file, args.teacher_dim)
        return teacher.TableTeacher({rid: e.vector for rid, e in recs}, args.teacher_dim)
    if args.teacher == "remote":
        if not args.teacher_url:
            raise ValidationError("--teacher remote needs --teacher-url")
        cfg = teacher.EndpointConfig(args.teacher_url, args.teacher_dim, cache_dir=str(cache_dir() / "teacher"))
        return teacher.RemoteTeacher(cfg)
    raise ValidationError(f"unknown teacher {args.teacher!r}")


def _train_config(args):
    from . import alignment

    layers = tuple(int(x) for x in args.align_layers.split(",")) if args.align_layers else ()
    return alignment.TrainConfig(
        lambda_align=0.0 if args.no_align else args.lambda_align,
        lambda_ssm=0.0 if args.no_ssm else args.lambda_ssm,
        lr=args.lr, epochs=args.epochs, warmup_steps=args.warmup_steps, batch_size=args.batch_size,
        grad_accum=args.grad_accum, weight_decay=args.weight_decay, align_layers=layers,
        augment=not args.no_augment, cka_mode=args.cka_mode, loss_kind=args.align_loss,
        head_dropout_in_train=not args.no_head_dropout, pooled_pass=args.pooled_pass,
        keep_checkpoints=args.keep_checkpoints, all_segments=not args.one_segment_per_epoch, seed=args.seed)


def cmd_align(args) -> dict:
    import numpy as np

    from . import alignment, encoder

    cfg = _train_config(args)
    errs = cfg.validate()
    if args.init == "checkpoint" and not args.checkpoint:
        errs.append("--init checkpoint needs --checkpoint")
    if args.init not in ("random", "checkpoint"):
        errs.append(f"unknown init {args.init!r}")
    if not Path(args.manifest).exists():
        errs.append(f"manifest {args.manifest} does not exist")
    if errs:
        raise ValidationError("; ".join(errs))
    corpus = load_corpus(args.manifest, cfg.augment, args.corpus_filter)
    if not corpus:
        raise ValidationError("corpus is empty after filtering")
    units = len(corpus) if cfg.all_segments else len(alignment.recording_groups(corpus))
    spe = alignment.steps_per_epoch(units, cfg)
    errs = cfg.validate(spe * cfg.epochs) if spe else [f"{units} clips cannot fill one optimizer step"]
    if errs:
        raise ValidationError("; ".join(errs))
    if args.init == "checkpoint":
        enc_cfg, tensors = encoder.load_checkpoint(args.checkpoint)
        enc_params = {k: v for k, v in tensors.items() if not k.startswith("head.")}
    else:
        frames = max(it.spectrogram.shape[0] for it in corpus)
        allv = np.concatenate([it.spectrogram.reshape(-1) for it in corpus])
        enc_cfg = encoder.EncoderConfig(max_frames=frames, norm_mean=round(float(allv.mean()), 6),
                                        norm_std=round(float(allv.std()), 6))
        enc_params = encoder.init_params(enc_cfg, args.seed)
    teacher = _make_teacher(args)
    model = alignment.init_model(enc_cfg, cfg, args.seed, enc_params, text_dim=teacher.dim)
    if args.init == "checkpoint":
        # carry over trained heads when the checkpoint has them
        for k, v in tensors.items():
            if k.startswith("head."):
                _, hname, leaf = k.split(".", 2)
                if hname in model.heads and model.heads[hname][leaf].shape == v.shape:
                    model.heads[hname][leaf] = v.copy()
    out = _out_dir(args)

    def progress(rec):
        if rec["step"] % max(1, spe) == spe - 1:
            log.info("epoch %d step %d align %.4f ssm %.4f", rec["epoch"] + 1, rec["step"] + 1,
                     rec["align_loss"], rec["ssm_loss"])

    res = alignment.train(cfg, corpus, model, teacher, out, out / "metrics.jsonl", progress)
    final = out / "final.bin"
    res.model.save(final, {"train": _jsonable(cfg)})
    return {"artifacts": [str(final), str(out / "metrics.jsonl"), *res.checkpoints],
            "inputs": {"manifest": file_digest(args.manifest),
                       **({"checkpoint": file_digest(args.checkpoint)} if args.init == "checkpoint" else {})}}


def _jsonable(cfg):
    from dataclasses import asdict

    return json.loads(json.dumps(asdict(cfg), default=str))


# ---------------------------------------------------------------------- embed


def cmd_embed(args) -> dict:
    from . import alignment, teacher

    if args.space not in ("encoder-384", "shared-512"):
        raise ValidationError(f"unknown space {args.space!r}")
    model = alignment.Model.load(args.checkpoint)
    items = load_corpus(args.manifest, need_wave=False)
    vecs = alignment.embed_items(model, [it.spectrogram for it in items], args.space)
    out = _out_dir(args)
    path = out / f"embeddings_{args.space}.emb"
    teacher.save_embeddings(path, [(it.audio_id, v) for it, v in zip(items, vecs)], vecs.shape[1])
    return {"artifacts": [str(path)],
            "inputs": {"checkpoint": file_digest(args.checkpoint), "manifest": file_digest(args.manifest)}}


# ---------------------------------------------------------------------- probe


def cmd_probe(args) -> dict:
    import numpy as np

    from . import evaluation, teacher

    pcfg = evaluation.ProbeConfig(task=args.task, head=args.head, hidden=args.hidden, lr=args.probe_lr,
                                  l2=args.l2, patience=args.patience, max_epochs=args.max_epochs,
                                  standardize=args.standardize)
    errs = pcfg.validate()
    if errs:
        raise ValidationError("; ".join(errs))
    _, records = teacher.read_embedding_file(args.embeddings)
    emb = {rid: v for rid, v in records}
    train_entries = _load_manifest(args.train_manifest)
    test_entries = _load_manifest(args.test_manifest) if args.test_manifest else []
    entries = train_entries + test_entries
    missing = [e.audio_id for e in entries if e.audio_id not in emb]
    if missing:
        raise ValidationError(f"{len(missing)} manifest ids have no embedding (first: {missing[0]!r})")
    x = np.stack([emb[e.audio_id] for e in entries])
    if args.target == "label":
        y = np.array([e.label for e in entries])
    else:
        try:
            y = np.array([float(e.targets[args.target]) for e in entries])
        except KeyError:
            raise ValidationError(f"manifest entries lack target {args.target!r}") from None
    subs = np.array([e.subject_id or e.audio_id for e in entries])
    seeds = list(range(args.seeds))
    results = []
    if args.task == "classification":
        if test_entries:
            tr = np.arange(len(train_entries))
            te = np.arange(len(train_entries), len(entries))
            if set(subs[tr]) & set(subs[te]):
                raise ValidationError("train and test manifests share subjects")

            def run(seed):
                return evaluation.probe_auroc(x, y, tr, te, evaluation.ProbeConfig(**{**pcfg.__dict__, "seed": seed}))
        else:
            def run(seed):
                tr, te = evaluation.subject_split(subs, 0.2, seed)
                return evaluation.probe_auroc(x, y, tr, te, evaluation.ProbeConfig(**{**pcfg.__dict__, "seed": seed}))
        results.append(evaluation.multi_seed(run, seeds, args.task_name, "auroc"))
    else:
        loso = evaluation.loso_cv(x, subs, y, pcfg)
        results.append(evaluation.EvalResult(args.task_name, "mae_loso", list(loso.per_subject.values())))
    out = _out_dir(args)
    path = out / "results.csv"
    evaluation.write_results_csv(path, results)
    evaluation.append_run_log(out / "runs.jsonl", {"task": args.task_name, "metric": results[0].metric,
                                                   "values": results[0].values, "subject_disjoint": True})
    log.info("%s %s mean %.4f", args.task_name, results[0].metric, results[0].mean)
    return {"artifacts": [str(path), str(out / "runs.jsonl")],
            "inputs": {"embeddings": file_digest(args.embeddings)}}


# ------------------------------------------------------------------- zeroshot


def cmd_zeroshot(args) -> dict:
    import numpy as np

    from . import alignment, evaluation, retrieval

    train_entries = _load_manifest(args.train_manifest)
    test_entries = _load_manifest(args.test_manifest)
    overlap = {e.audio_id for e in train_entries} & {e.audio_id for e in test_entries}
    if overlap:
        raise ValidationError(f"train and test manifests share {len(overlap)} audio ids (leakage guard)")
    names = tuple(n.strip() for n in args.class_names.split(",") if n.strip())
    zcfg = retrieval.ZeroShotConfig(names, args.k, args.aggregation)
    errs = zcfg.validate()
    if errs:
        raise ValidationError("; ".join(errs))
    model = alignment.Model.load(args.checkpoint)
    text = _make_teacher(args)
    # index over train-split report embeddings in the shared space; labels are never read here
    texts = {e.audio_id: e.report for e in train_entries}
    tv = text.embed([e.report for e in train_entries])
    rep = alignment.embed_texts(model, tv)
    items = load_corpus(args.test_manifest, need_wave=False)
    audio = alignment.embed_items(model, [it.spectrogram for it in items], "shared-512")
    if args.bridge == "procrustes":
        # fit on train (audio, report) pairs only
        train_items = load_corpus(args.train_manifest, need_wave=False)
        bridge = retrieval.fit_bridge(
            alignment.embed_items(model, [it.spectrogram for it in train_items], "shared-512"), rep)
        rep, audio = bridge.text(rep), bridge.audio(audio)
    index = retrieval.build_index([(e.audio_id, v) for e, v in zip(train_entries, rep)])
    preds, scores = retrieval.zeroshot_scores(audio, index, texts, zcfg, text)
    labels = [e.label for e in test_entries]
    auc = evaluation.auroc(scores, np.array(labels), classes=list(names))
    acc = float(np.mean([p == lab for p, lab in zip(preds, labels)]))
    out = _out_dir(args)
    retrieval.save_index(out / "report_index.emb", index, texts)
    result = {"auroc": auc, "accuracy": acc, "k": zcfg.k, "aggregation": zcfg.aggregation, "bridge": args.bridge,
              "class_names": list(names), "test_clips": len(test_entries)}
    path = out / "zeroshot.json"
    path.write_text(json.dumps(result, indent=2, sort_keys=True))
    log.info("zero-shot AUROC %.4f accuracy %.4f", auc, acc)
    return {"artifacts": [str(path), str(out / "report_index.emb")],
            "inputs": {"checkpoint": file_digest(args.checkpoint), "train": file_digest(args.train_manifest),
                       "test": file_digest(args.test_manifest)}}


# ---------------------------------------------------------------- spectrogram


def cmd_spectrogram(args) -> dict:
    from . import dsp

    w = dsp.load_wav(args.wav)
    if w.sample_rate != dsp.SAMPLE_RATE:
        w = dsp.resample(w, dsp.SAMPLE_RATE)
    out = _out_dir(args)
    stem = Path(args.wav).stem
    paths = []
    for i, seg in enumerate(dsp.segment(w, args.segment_seconds)):
        p = out / f"{stem}_{i:03d}.spec"
        dsp.write_spectrogram(p, dsp.logmel(seg))
        paths.append(str(p))
    return {"artifacts": paths, "inputs": {"wav": file_digest(args.wav)}}


# --------------------------------------------------------------------- parser


def _add_teacher_args(p):
    p.add_argument("--teacher", default="hashed", choices=["hashed", "file", "remote"])
    p.add_argument("--teacher-dim", type=int, default=2048)
    p.add_argument("--teacher-seed", type=int, default=0)
    p.add_argument("--teacher-file")
    p.add_argument("--teacher-url")


def _add_train_args(p, pretrain: bool):
    p.add_argument("--manifest", required=True)
    p.add_argument("--init", default="random" if pretrain else "checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--no-ssm", action="store_true")
    p.add_argument("--no-align", action="store_true", default=pretrain)
    p.add_argument("--lambda-align", type=float, default=1.0)
    p.add_argument("--lambda-ssm", type=float, default=1.0)
    p.add_argument("--align-loss", default="cka", choices=["cka", "mse"])
    p.add_argument("--cka-mode", default="sample", choices=["sample", "feature"])
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--no-head-dropout", action="store_true")
    p.add_argument("--pooled-pass", default="masked", choices=["masked", "full"])
    p.add_argument("--align-layers", default="")
    p.add_argument("--corpus-filter")
    p.add_argument("--one-segment-per-epoch", action="store_true",
                   help="draw one random segment per recording each epoch instead of all segments")
    p.add_argument("--lr", type=float, default=3e-4 if pretrain else 1e-5)
    p.add_argument("--epochs", type=int, default=12 if pretrain else 50)
    p.add_argument("--warmup-steps", type=int, default=33 if pretrain else 400)
    p.add_argument("--batch-size", type=int, default=24)
    p.add_argument("--grad-accum", type=int, default=2)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--keep-checkpoints", type=int, default=1)
    _add_teacher_args(p)


def synth_defaults(name):
    from . import synth

    return getattr(synth.SynthConfig, name)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="audalign", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="INI file; section per command, keys named like the long flags")
    ap.add_argument("--threads", type=int, default=None, help="BLAS thread count")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic paired corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--schema", default="icbhi")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--subjects", type=int, default=40)
    p.add_argument("--clips", type=int, default=2000)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--band-contrast", type=float, default=synth_defaults("band_contrast"))
    p.add_argument("--finding-level", type=float, default=synth_defaults("finding_level"))
    p.add_argument("--report-seed", type=int, default=None)
    p.add_argument("--reports-per-clip", type=int, default=1)
    p.add_argument("--shuffle-reports", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="masked-reconstruction pretraining from random init")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_train_args(p, pretrain=True)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("align", help="joint alignment + reconstruction training")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_train_args(p, pretrain=False)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("embed", help="export eval-mode clip embeddings")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--space", default="shared-512")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed, seed=None)

    p = sub.add_parser("probe", help="linear-probe evaluation on frozen embeddings")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--test-manifest")
    p.add_argument("--task", default="classification", choices=["classification", "regression"])
    p.add_argument("--task-name", default="synthetic")
    p.add_argument("--target", default="label")
    p.add_argument("--head", default="linear", choices=["linear", "mlp"])
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--probe-lr", type=float, default=1e-4)
    p.add_argument("--l2", type=float, default=1e-4)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--max-epochs", type=int, default=300)
    p.add_argument("--standardize", action="store_true")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_probe, seed=None)

    p = sub.add_parser("zeroshot", help="retrieval-based zero-shot classification")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--test-manifest", required=True)
    p.add_argument("--class-names", required=True, help="comma-separated")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--aggregation", default="mean-embedding", choices=["mean-embedding", "majority-vote"])
    p.add_argument("--bridge", default="procrustes", choices=["procrustes", "none"],
                   help="resolve the shift/scale/rotation CKA leaves free, fitted on train pairs")
    p.add_argument("--out", required=True)
    _add_teacher_args(p)
    p.set_defaults(func=cmd_zeroshot, seed=None)

    p = sub.add_parser("spectrogram", help="wav -> segmented log-mel spectrogram files")
    p.add_argument("--wav", required=True)
    p.add_argument("--segment-seconds", type=float, default=8.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_spectrogram, seed=None)
    return ap


def _apply_config_file(ap: argparse.ArgumentParser, argv) -> argparse.Namespace:
    pre, _ = ap.parse_known_args(argv)
    if not pre.config:
        return ap.parse_args(argv)
    cp = configparser.ConfigParser()
    if not cp.read(pre.config):
        raise ValidationError(f"cannot read config {pre.config}")
    subparsers = next(a for a in ap._actions if isinstance(a, argparse._SubParsersAction))
    sp = subparsers.choices[pre.command]
    known = {a.dest: a for a in sp._actions}
    defaults = {}
    for section in ("DEFAULT", pre.command):
        if section != "DEFAULT" and not cp.has_section(section):
            continue
        for key, raw in cp[section].items():
            dest = key.replace("-", "_")
            if dest not in known:
                if section == "DEFAULT":
                    continue
                raise ValidationError(f"unknown key {key!r} in [{section}]")
            action = known[dest]
            if isinstance(action, argparse._StoreTrueAction):
                val = cp[section].getboolean(key)
            elif action.type is not None:
                val = action.type(raw)
            else:
                val = raw
            defaults[dest] = val
            action.required = False
    sp.set_defaults(**defaults)
    return ap.parse_args(argv)


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = _apply_config_file(ap, argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    resolved = {k: v for k, v in vars(args).items() if k != "func"}
    started = time.time()
    try:
        info = args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - top-level runtime failure
        log.exception("command failed")
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    write_run_manifest(args.out, args.command, resolved, started, info.get("artifacts", []), info.get("inputs"))
    return 0


if __name__ == "__main__":
    sys.exit(main())
