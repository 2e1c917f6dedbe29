import json

import pytest
from hypothesis import given, settings, strategies as st

from audalign import reports as rp


def icbhi(crackles="No", wheezes="Yes", age=66, sex="M", diag="Pneumonia", loc=None):
    fields = [("Crackles", crackles), ("Wheezes", wheezes), ("Age", age), ("Sex", sex), ("Diagnosis", diag)]
    if loc:
        fields.insert(0, ("Chest_Location", loc))
    return rp.MetadataRecord("icbhi", fields, label=diag, subject_id="S1")


def cardiac_normal():
    return rp.MetadataRecord("normal_cardiac", [("Age", 9), ("Sex", "F"), ("Diagnosis", "Normal")],
                             label="Normal", modality="cardiac")


def murmur(present=True):
    fields = [("Murmur", "Present" if present else "Absent")]
    if present:
        fields += [("Timing", "Holosystolic"), ("Pitch", "High"), ("Most_audible_location", "mitral"),
                   ("Grading", "III/VI"), ("Outcome", "Abnormal")]
    return rp.MetadataRecord("murmur", fields, label="Present" if present else "Absent", modality="cardiac")


# ----------------------------------------------------------------- metadata

def test_metadata_rejects_duplicate_keys_and_empty_values():
    with pytest.raises(ValueError):
        rp.MetadataRecord("icbhi", [("Age", 1), ("Age", 2)], label="Healthy")
    with pytest.raises(ValueError):
        rp.MetadataRecord("icbhi", [("Age", " ")], label="Healthy")


def test_render_metadata():
    assert rp.render_metadata(icbhi()) == "Crackles: No; Wheezes: Yes; Age: 66; Sex: M; Diagnosis: Pneumonia."


# ------------------------------------------------------------------- prompt

def test_prompt_cardiologist_slots():
    p = rp.build_prompt(murmur(), "cardiologist")
    assert "Cardiologist" in p
    assert "cardiac auscultation findings" in p
    assert "Murmur: Present" in p
    assert "2--3 lines" in p


def test_prompt_deterministic_and_errors():
    assert rp.build_prompt(icbhi(), "pulmonologist") == rp.build_prompt(icbhi(), "pulmonologist")
    with pytest.raises(ValueError):
        rp.build_prompt(icbhi(), "dentist")
    with pytest.raises(ValueError):
        rp.build_prompt(rp.MetadataRecord("icbhi", [], label="Healthy"), "pulmonologist")


# --------------------------------------------------------------- templates

def test_icbhi_example_semantics():
    rec = rp.generate_template_report(icbhi(), seed=0)
    text = rec.report.lower()
    assert "wheez" in text
    assert "crackles" in text
    words = text.replace(",", " ").replace(".", " ").split()
    i = words.index("crackles")
    assert {"no", "without"} & set(words[max(0, i - 4):i])
    assert "pneumonia" in text
    assert rp.validate_report(rec, icbhi()).ok
    assert rec.source == "template"


def test_normal_cardiac_no_murmur_terms():
    rec = rp.generate_template_report(cardiac_normal(), 3)
    text = rec.report.lower()
    assert "normal heart sounds" in text or "heart sounds are normal" in text
    assert "murmur" not in rec.report.lower()
    assert rp.validate_report(rec, cardiac_normal()).ok


def test_murmur_reports_validate():
    for present in (True, False):
        meta = murmur(present)
        rec = rp.generate_template_report(meta, 1)
        assert rp.validate_report(rec, meta).ok, rec.report


def test_template_deterministic_and_diverse():
    meta = icbhi(crackles="Yes", wheezes="Yes", diag="COPD", loc="Posterior left")
    assert rp.generate_template_report(meta, 5).report == rp.generate_template_report(meta, 5).report
    forms = {rp.generate_template_report(meta, s).report for s in range(10)}
    assert len(forms) >= 2


def test_template_errors():
    with pytest.raises(KeyError):
        rp.generate_template_report(rp.MetadataRecord("unknown", [("A", 1)], label="x"))
    with pytest.raises(ValueError):
        rp.generate_template_report(rp.MetadataRecord("icbhi", [("Age", 3)], label="Healthy"))


def test_serialized_single_key():
    rec = rp.generate_template_report(icbhi(), 0)
    assert list(json.loads(rec.to_json())) == ["report"]


meta_strategy = st.builds(
    icbhi,
    crackles=st.sampled_from(["Yes", "No"]),
    wheezes=st.sampled_from(["Yes", "No"]),
    age=st.integers(1, 95),
    sex=st.sampled_from(["M", "F"]),
    diag=st.sampled_from(rp.IcbhiFamily.labels),
    loc=st.sampled_from([None, "Anterior left", "Posterior right", "Trachea"]),
)


@settings(max_examples=150, deadline=None)
@given(meta_strategy, st.integers(0, 10_000))
def test_template_always_valid_with_two_or_three_sentences(meta, seed):
    rec = rp.generate_template_report(meta, seed)
    check = rp.validate_report(rec, meta)
    assert check.ok, (rec.report, check.violations)
    assert rp.sentence_count(rec.report) in (2, 3)


# ---------------------------------------------------------------- validator

def test_validator_flags_unlicensed_finding():
    check = rp.validate_report("Auscultation reveals coarse crackles. Diagnosis is pneumonia.", icbhi())
    assert not check.ok
    assert any("crackles" in v for v in check.violations)


def test_validator_accepts_negated_finding():
    assert rp.validate_report("Wheezes are heard without crackles. The patient has pneumonia.", icbhi()).ok


def test_validator_flags_new_diagnosis():
    assert not rp.validate_report("Findings suggest asthma. Wheezes are heard.", icbhi()).ok


def test_validator_demographics_only_ok():
    assert rp.validate_report("The patient is a 66 year old man. The recording is short.", icbhi()).ok


def test_sentence_count():
    assert rp.sentence_count("One. Two.") == 2
    assert rp.sentence_count("One. Two. Three.") == 3


# ----------------------------------------------------------------- LLM path

def test_llm_happy_path():
    seen = []

    def client(prompt):
        seen.append(prompt)
        return '{"report": "Wheezes are heard without crackles. Findings fit pneumonia."}'

    rec = rp.generate_llm_report(icbhi(), client)
    assert rec.source == "llm"
    assert rec.flagged == []
    assert "Conditions: Crackles: No" in seen[0]


def test_llm_python_literal_response():
    rec = rp.generate_llm_report(icbhi(), lambda p: "{'report': 'Wheezes without crackles. Pneumonia.'}")
    assert rec.report.startswith("Wheezes")


def test_llm_missing_key_is_parse_error_after_retries():
    calls = []

    def client(prompt):
        calls.append(1)
        return {"text": "nope"}

    with pytest.raises(rp.ReportParseError):
        rp.generate_llm_report(icbhi(), client, max_attempts=3)
    assert len(calls) == 3


def test_llm_retry_recovers():
    answers = iter(["garbage", {"report": "Wheezes are present. Pneumonia is documented."}])
    rec = rp.generate_llm_report(icbhi(), lambda p: next(answers), max_attempts=2)
    assert rec.report.startswith("Wheezes")


def test_llm_hallucination_flagged_or_raised():
    bad = lambda p: {"report": "Crackles and a murmur are heard. Pneumonia."}
    rec = rp.generate_llm_report(icbhi(), bad)
    assert rec.flagged
    with pytest.raises(rp.ReportValidationError):
        rp.generate_llm_report(icbhi(), bad, strict=True)


def test_llm_transport_error():
    def client(prompt):
        raise ConnectionError("down")

    with pytest.raises(rp.ReportTransportError):
        rp.generate_llm_report(icbhi(), client)


# ------------------------------------------------------------------ corpus

def entries(tmp_path, n=3):
    out = []
    for i in range(n):
        (tmp_path / f"a{i}.spec").write_bytes(b"x")
        out.append(rp.ManifestEntry(f"a{i}", f"a{i}.spec", f"report {i}.", "Healthy", "icbhi",
                                    subject_id=f"S{i}", targets={"age": 30 + i}))
    return out


def test_export_import_roundtrip(tmp_path):
    es = entries(tmp_path)
    path = tmp_path / "manifest.jsonl"
    rp.export_corpus(path, es)
    assert len(path.read_text().splitlines()) == 3
    assert rp.import_corpus(path) == es


def test_export_dangling_reference(tmp_path):
    es = entries(tmp_path)
    es[1].spectrogram_path = "missing.spec"
    with pytest.raises(FileNotFoundError, match="a1"):
        rp.export_corpus(tmp_path / "m.jsonl", es)


def test_export_duplicate_ids(tmp_path):
    es = entries(tmp_path)
    es[2].audio_id = "a0"
    with pytest.raises(ValueError):
        rp.export_corpus(tmp_path / "m.jsonl", es)


def test_coughsym_negated_symptom_list_validates():
    fields = [("Covid_Test_Result", "Positive"), ("Age", 30), ("Sex", "F")]
    fields += [(f"Symptom_{s}", "No") for s in ("Fever", "Cough", "Fatigue", "Headache")]
    meta = rp.MetadataRecord("coughsym", fields, label="Positive")
    for seed in range(10):
        rec = rp.generate_template_report(meta, seed)
        assert rp.validate_report(rec, meta).ok, rec.report
