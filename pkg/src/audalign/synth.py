"""Synthetic paired auscultation corpus.

Each subject carries one diagnosis, an age, a sex, a spectral pitch offset
and a gain. Clips mix breath noise whose band depends on the diagnosis with
crackle clicks and wheeze tones drawn from diagnosis-conditional finding
probabilities. Reports come from the ICBHI-like template family, so the same
class evidence exists in the audio and in the text.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import butter, sosfilt

from . import dsp
from .reports import IcbhiFamily, MetadataRecord, generate_template_report

CLASS_NAMES = IcbhiFamily.labels  # Healthy, Pneumonia, COPD, Asthma, ...
LOCATIONS = ("Anterior left", "Anterior right", "Posterior left", "Posterior right", "Lateral left", "Lateral right")
CLIP_SAMPLES = 18160  # 112 log-mel frames at the default hop

# breath-noise band (Hz), P(crackles), P(wheezes) per diagnosis
CLASS_PROFILES = {
    "Healthy": ((100.0, 500.0), 0.0, 0.0),
    "Pneumonia": ((180.0, 900.0), 0.8, 0.15),
    "COPD": ((80.0, 380.0), 0.5, 0.6),
    "Asthma": ((130.0, 650.0), 0.1, 0.85),
    "URTI": ((120.0, 600.0), 0.2, 0.2),
    "Bronchiectasis": ((150.0, 800.0), 0.8, 0.3),
    "Bronchiolitis": ((120.0, 700.0), 0.5, 0.5),
    "LRTI": ((160.0, 850.0), 0.6, 0.2),
}
BASE_BAND = (130.0, 650.0)


def class_band(label: str, contrast: float) -> tuple[float, float]:
    """Geometric interpolation between the shared base band and the class band."""
    band = np.asarray(CLASS_PROFILES[label][0])
    base = np.asarray(BASE_BAND)
    lo, hi = np.exp(np.log(base) + contrast * (np.log(band) - np.log(base)))
    return float(lo), float(hi)


@dataclass
class SynthConfig:
    classes: int = 4
    subjects: int = 40
    clips: int = 2000
    clip_samples: int = CLIP_SAMPLES
    sample_rate: int = dsp.SAMPLE_RATE
    pitch_spread: float = 0.35  # subject pitch offset, in octaves (uniform +-)
    gain_spread_db: float = 6.0
    snr_db: tuple[float, float] = (5.0, 20.0)
    finding_level: float = 1.0
    band_contrast: float = 1.0  # 0 gives every class the shared base band
    seed: int = 0

    def validate(self) -> list[str]:
        errs = []
        if not 2 <= self.classes <= len(CLASS_NAMES):
            errs.append(f"classes must be in [2, {len(CLASS_NAMES)}]")
        if self.subjects < self.classes:
            errs.append("need at least one subject per class")
        if self.clips < self.subjects:
            errs.append("need at least one clip per subject")
        if not 0.0 <= self.band_contrast <= 1.0:
            errs.append("band_contrast must be in [0, 1]")
        if self.clip_samples < dsp.WIN_LENGTH:
            errs.append("clips shorter than one analysis window")
        return errs


@dataclass
class Subject:
    subject_id: str
    label: str
    age: int
    sex: str
    pitch: float  # frequency multiplier
    gain: float


@dataclass
class Clip:
    audio_id: str
    subject: Subject
    meta: MetadataRecord
    waveform: dsp.Waveform


def make_subjects(cfg: SynthConfig) -> list[Subject]:
    rng = np.random.default_rng([cfg.seed, 1])
    out = []
    for s in range(cfg.subjects):
        label = CLASS_NAMES[s % cfg.classes]
        age = int(rng.integers(6, 85)) if label != "Healthy" else int(rng.integers(6, 60))
        sex = "M" if rng.random() < 0.5 else "F"
        pitch = 2.0 ** rng.uniform(-cfg.pitch_spread, cfg.pitch_spread)
        gain = 10 ** (rng.uniform(-cfg.gain_spread_db, cfg.gain_spread_db) / 20)
        out.append(Subject(f"S{s:03d}", label, age, sex, float(pitch), float(gain)))
    return out


def _bandpass(x, lo, hi, sr):
    hi = min(hi, 0.45 * sr)
    sos = butter(4, [lo, hi], btype="bandpass", fs=sr, output="sos")
    return sosfilt(sos, x)


def _breath(n, sr, rng, band, pitch):
    t = np.arange(n) / sr
    rate = rng.uniform(0.25, 0.45)  # breaths per second
    env = 0.35 + 0.65 * np.sin(np.pi * (rate * t + rng.random())) ** 2
    x = _bandpass(rng.normal(size=n), band[0] * pitch, band[1] * pitch, sr)
    return env * x / (np.std(x) + 1e-12)


def _crackles(n, sr, rng, pitch):
    x = np.zeros(n)
    count = int(rng.integers(6, 14)) * n // sr + 2
    length = int(0.012 * sr)
    tt = np.arange(length) / sr
    for _ in range(count):
        at = int(rng.integers(0, n - length))
        f = rng.uniform(250, 700) * pitch
        x[at:at + length] += rng.uniform(0.6, 1.4) * np.sin(2 * np.pi * f * tt) * np.exp(-tt / 0.0025)
    return x * 2.5


def _wheeze(n, sr, rng, pitch):
    t = np.arange(n) / sr
    f0 = rng.uniform(350, 650) * pitch
    drift = 1 + 0.04 * np.sin(2 * np.pi * rng.uniform(0.5, 2) * t)
    phase = 2 * np.pi * np.cumsum(f0 * drift) / sr
    tone = np.sin(phase) + 0.4 * np.sin(2 * phase) + 0.15 * np.sin(3 * phase)
    on, dur = rng.uniform(0, 0.4), rng.uniform(0.4, 0.9)
    gate = ((t >= on * t[-1]) & (t <= (on + dur) * t[-1])).astype(float)
    win = np.hanning(min(801, n))
    return tone * np.convolve(gate, win / win.sum(), mode="same") * 0.8


def synth_clip(subject: Subject, findings: dict[str, bool], cfg: SynthConfig, rng) -> np.ndarray:
    n, sr = cfg.clip_samples, cfg.sample_rate
    band = class_band(subject.label, cfg.band_contrast)
    x = _breath(n, sr, rng, band, subject.pitch)
    if findings["Crackles"]:
        x = x + cfg.finding_level * _crackles(n, sr, rng, subject.pitch)
    if findings["Wheezes"]:
        x = x + cfg.finding_level * _wheeze(n, sr, rng, subject.pitch)
    snr = rng.uniform(*cfg.snr_db)
    x = x + rng.normal(size=n) * np.std(x) * 10 ** (-snr / 20)
    x = 0.05 * subject.gain * x / (np.std(x) + 1e-12)
    return np.clip(x, -1.0, 1.0)


def generate(cfg: SynthConfig) -> list[Clip]:
    errs = cfg.validate()
    if errs:
        raise ValueError("; ".join(errs))
    subjects = make_subjects(cfg)
    clips = []
    for i in range(cfg.clips):
        subj = subjects[i % cfg.subjects]
        rng = np.random.default_rng([cfg.seed, 2, i])
        _, p_crack, p_wheeze = CLASS_PROFILES[subj.label]
        findings = {"Crackles": bool(rng.random() < p_crack), "Wheezes": bool(rng.random() < p_wheeze)}
        meta = MetadataRecord(
            "icbhi",
            [("Chest_Location", LOCATIONS[int(rng.integers(len(LOCATIONS)))]),
             ("Crackles", "Yes" if findings["Crackles"] else "No"),
             ("Wheezes", "Yes" if findings["Wheezes"] else "No"),
             ("Age", subj.age), ("Sex", subj.sex), ("Diagnosis", subj.label)],
            label=subj.label, modality="respiratory", subject_id=subj.subject_id)
        wave = dsp.Waveform(synth_clip(subj, findings, cfg, rng), cfg.sample_rate)
        clips.append(Clip(f"clip{i:05d}", subj, meta, wave))
    return clips


def reports_for(clips: list[Clip], seed: int) -> list[str]:
    return [generate_template_report(c.meta, seed).report for c in clips]


def class_spectral_means(specs: list[np.ndarray], labels: list[str]) -> dict[str, np.ndarray]:
    """Per-class mean log-mel profile (time-averaged)."""
    out: dict[str, list[np.ndarray]] = {}
    for s, lab in zip(specs, labels):
        out.setdefault(lab, []).append(s.mean(axis=0))
    return {k: np.mean(v, axis=0) for k, v in out.items()}
