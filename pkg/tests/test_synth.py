import numpy as np
import pytest

from audalign import dsp, reports, synth


def small(**kw):
    return synth.SynthConfig(**{"classes": 4, "subjects": 8, "clips": 24, "clip_samples": 4000, **kw})


def test_generate_deterministic():
    a, b = synth.generate(small()), synth.generate(small())
    assert [c.audio_id for c in a] == [c.audio_id for c in b]
    assert all(np.array_equal(x.waveform.samples, y.waveform.samples) for x, y in zip(a, b))


def test_seed_changes_audio():
    a, b = synth.generate(small()), synth.generate(small(seed=1))
    assert not np.array_equal(a[0].waveform.samples, b[0].waveform.samples)


def test_subjects_balanced_and_labels_consistent():
    clips = synth.generate(small())
    subs = {c.subject.subject_id: c.subject.label for c in clips}
    assert len(subs) == 8
    assert sorted(set(subs.values())) == sorted(synth.CLASS_NAMES[:4])
    assert all(c.meta.label == c.subject.label for c in clips)


def test_samples_bounded():
    for c in synth.generate(small()):
        assert np.max(np.abs(c.waveform.samples)) <= 1.0
        assert len(c.waveform.samples) == 4000


def test_config_validation():
    assert small(classes=1).validate()
    assert small(subjects=2).validate()
    assert small(clips=3).validate()
    assert small(band_contrast=1.5).validate()
    with pytest.raises(ValueError):
        synth.generate(small(classes=1))


def test_class_band_endpoints():
    assert synth.class_band("COPD", 1.0) == pytest.approx(synth.CLASS_PROFILES["COPD"][0])
    assert synth.class_band("COPD", 0.0) == pytest.approx(synth.BASE_BAND)
    lo, hi = synth.class_band("COPD", 0.5)
    assert lo == pytest.approx(np.sqrt(80.0 * 130.0))


def test_reports_match_findings_and_validate():
    clips = synth.generate(small())
    for c, text in zip(clips, synth.reports_for(clips, 0)):
        assert reports.validate_report(text, c.meta).ok
        assert c.meta.label.lower() in text.lower()


def test_class_spectral_means_differ():
    clips = synth.generate(synth.SynthConfig(subjects=8, clips=160))
    specs = [dsp.logmel(c.waveform) for c in clips]
    means = synth.class_spectral_means(specs, [c.meta.label for c in clips])
    names = sorted(means)
    # pairwise oracle: every class profile is separated from every other one
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            assert np.max(np.abs(means[a] - means[b])) > 0.5, (a, b)
