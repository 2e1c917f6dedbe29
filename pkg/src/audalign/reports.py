"""Clinical report generation from structured recording metadata.

Reports restate metadata fields only. The default generator assembles 2-3
sentences from slot-filled clause templates with seeded wording choices; an
LLM client can be plugged in instead, and :func:`validate_report` checks
either output against a term lexicon.
"""
from __future__ import annotations

import hashlib
import json
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

# ------------------------------------------------------------------ metadata


@dataclass
class MetadataRecord:
    dataset: str
    fields: list[tuple[str, object]]
    label: str
    modality: str = "respiratory"
    subject_id: str | None = None

    def __post_init__(self):
        keys = [k for k, _ in self.fields]
        if len(set(keys)) != len(keys):
            raise ValueError(f"duplicate metadata keys in {keys}")
        for k, v in self.fields:
            if v is None or (isinstance(v, str) and not v.strip()):
                raise ValueError(f"metadata value for {k!r} is empty")

    def get(self, key, default=None):
        for k, v in self.fields:
            if k == key:
                return v
        return default

    def as_dict(self) -> dict:
        return dict(self.fields)

    def digest(self) -> str:
        blob = json.dumps([self.dataset, [[k, str(v)] for k, v in self.fields], self.label], sort_keys=False)
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class ClinicalRecord:
    report: str
    source: str  # "template" | "llm"
    metadata_digest: str
    seed: int | None = None
    flagged: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"report": self.report})


def render_metadata(meta: MetadataRecord) -> str:
    return "; ".join(f"{k}: {_fmt(v)}" for k, v in meta.fields) + "."


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "Yes" if v else "No"
    if isinstance(v, float) and v.is_integer():
        return f"{v:.1f}"
    return str(v)


POSITIVE = {"yes", "true", "present", "positive", "abnormal"}
NEGATIVE = {"no", "false", "absent", "negative", "normal", "none"}


def polarity(v) -> bool | None:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in POSITIVE:
        return True
    if s in NEGATIVE:
        return False
    return None


# ------------------------------------------------------------------- prompt

SPECIALISTS = {"pulmonologist": "respiratory", "cardiologist": "cardiac"}

PROMPT_TEMPLATE = (
    "You are a {role} tasked with interpreting {modality} auscultation findings. Based on the "
    "given conditions, write 2--3 lines report covering all clinically relevant information. "
    "Only use the information given to write about conditions. Please do NOT mention anything "
    "about further evaluation or characterization.\n\n"
    "Your output should be JSON of the following format: {{'report': ...}}\n\n"
    "Conditions: {conditions}"
)


def build_prompt(meta: MetadataRecord, specialist: str) -> str:
    if specialist not in SPECIALISTS:
        raise ValueError(f"unknown specialist {specialist!r}; expected one of {sorted(SPECIALISTS)}")
    if not meta.fields:
        raise ValueError("metadata has no fields")
    return PROMPT_TEMPLATE.format(
        role=specialist.capitalize(), modality=SPECIALISTS[specialist], conditions=render_metadata(meta))


# ------------------------------------------------------------------ lexicon


@dataclass(frozen=True)
class LexiconEntry:
    term: str
    key: str
    # lowercase values of ``key`` that license the term; None means the value must contain the term
    values: tuple[str, ...] | None = None


NEGATION_CUES = {"no", "without", "not", "absent", "absence", "negative", "denies", "denied"}
NEGATION_WINDOW = 4

_POS = tuple(sorted(POSITIVE))


def _entries(key, terms, values=_POS):
    return [LexiconEntry(t, key, values) for t in terms]


DEFAULT_LEXICON: list[LexiconEntry] = (
    _entries("Crackles", ["crackles", "crackle", "crepitations", "rales"])
    + _entries("Wheezes", ["wheezes", "wheeze", "wheezing"])
    + _entries("Murmur", ["murmur", "murmurs"])
    + [LexiconEntry(t, "Diagnosis", None) for t in ["pneumonia", "copd", "asthma", "bronchiectasis",
                                                      "bronchiolitis", "urti", "lrti", "heart failure"]]
    + [LexiconEntry("copd", "Diagnosis", ("copd",)), LexiconEntry("covid-19", "Covid_Test_Result", _POS),
       LexiconEntry("covid", "Covid_Test_Result", _POS)]
    + _entries("Symptom_Fever", ["fever"])
    + _entries("Symptom_Cough", ["cough", "coughing"])
    + _entries("Symptom_Shortness_of_breath", ["shortness of breath", "dyspnea", "breathlessness"])
    + _entries("Symptom_Sore_throat", ["sore throat"])
    + _entries("Symptom_Fatigue", ["fatigue"])
    + _entries("Symptom_Headache", ["headache"])
)


def _words(text: str) -> list[str]:
    return re.findall(r"[a-z0-9]+(?:[-/][a-z0-9]+)*", text.lower())


@dataclass
class Validation:
    ok: bool
    violations: list[str]


def validate_report(record: ClinicalRecord | str, meta: MetadataRecord,
                    lexicon: list[LexiconEntry] | None = None) -> Validation:
    """Every lexicon term in the report must be licensed by the metadata.

    A term whose field is present but negative may only occur within
    ``NEGATION_WINDOW`` tokens after a negation cue.
    """
    text = record.report if isinstance(record, ClinicalRecord) else record
    lexicon = DEFAULT_LEXICON if lexicon is None else lexicon
    words = _words(text)
    cues = [i for i, w in enumerate(words) if w in NEGATION_CUES]
    fields = {k.lower(): v for k, v in meta.fields}
    by_term: dict[str, list[LexiconEntry]] = {}
    for e in lexicon:
        by_term.setdefault(e.term.lower(), []).append(e)
    violations = []
    for term, entries in by_term.items():
        tw = _words(term)
        n = len(tw)
        for pos in range(len(words) - n + 1):
            if words[pos:pos + n] != tw:
                continue
            licensed = False
            negated_field = False
            for e in entries:
                v = fields.get(e.key.lower())
                if v is None:
                    continue
                sv = str(v).lower()
                if e.values is None:
                    if term in sv:
                        licensed = True
                    else:
                        negated_field = negated_field or polarity(v) is False
                elif sv in e.values or polarity(v) is True and any(polarity(x) for x in e.values):
                    licensed = True
                elif polarity(v) is False:
                    negated_field = True
            if licensed:
                continue
            in_scope = any(0 < pos - c <= NEGATION_WINDOW for c in cues)
            if negated_field and in_scope:
                continue
            where = "outside negation scope" if negated_field else "not licensed by metadata"
            violations.append(f"'{term}' at token {pos}: {where}")
    return Validation(not violations, violations)


# ------------------------------------------------------------------ templates


def _pick(rng: np.random.Generator, options):
    return options[int(rng.integers(len(options)))]


def _join(items: list[str]) -> str:
    if len(items) == 1:
        return items[0]
    if len(items) == 2:
        return f"{items[0]} and {items[1]}"
    return ", ".join(items[:-1]) + f", and {items[-1]}"


def _join_or(items: list[str]) -> str:
    if len(items) <= 2:
        return " or ".join(items)
    return ", ".join(items[:-1]) + f", or {items[-1]}"


def _sentence(s: str) -> str:
    s = s.strip()
    return s[0].upper() + s[1:] + ("" if s.endswith(".") else ".")


def _demographic(meta: MetadataRecord, rng) -> str | None:
    age = meta.get("Age")
    sex = meta.get("Sex", meta.get("Gender"))
    sex_word = None
    if sex is not None:
        s = str(sex).strip().lower()
        sex_word = {"m": "male", "male": "male", "f": "female", "female": "female"}.get(s, s)
    if age is None and sex_word is None:
        return None
    if age is not None:
        try:
            age_txt = f"{int(float(age))}-year-old"
        except (TypeError, ValueError):
            age_txt = f"{age} year-old"
    parts = [p for p in (age_txt if age is not None else None, sex_word) if p]
    noun = _pick(rng, ["patient", "individual", "subject"])
    return f"{_pick(rng, ['this', 'a'])} {' '.join(parts)} {noun}"


class TemplateFamily:
    """Clause templates for one dataset schema."""

    specialist = "pulmonologist"
    required: tuple[str, ...] = ()
    labels: tuple[str, ...] = ()
    label_key = "Diagnosis"

    def sentences(self, meta: MetadataRecord, rng) -> list[str]:
        raise NotImplementedError


FINDING_WORDS = {
    "Crackles": ["crackles", "crackles", "fine crackles"],
    "Wheezes": ["wheezes", "wheezing", "wheezes"],
}


class IcbhiFamily(TemplateFamily):
    specialist = "pulmonologist"
    required = ("Crackles", "Wheezes", "Diagnosis")
    labels = ("Healthy", "Pneumonia", "COPD", "Asthma", "URTI", "Bronchiectasis", "Bronchiolitis", "LRTI")

    def sentences(self, meta, rng):
        loc = meta.get("Chest_Location")
        where = f"over the {str(loc).lower()}" if loc else _pick(rng, ["of the chest", "of the lung fields"])
        opener = _pick(rng, [f"auscultation {where} reveals", f"lung auscultation {where} demonstrates",
                             f"breath sounds recorded {where} show"])
        present = [_pick(rng, FINDING_WORDS[k]) for k in ("Crackles", "Wheezes") if polarity(meta.get(k))]
        absent = [FINDING_WORDS[k][0] for k in ("Crackles", "Wheezes") if polarity(meta.get(k)) is False]
        if present:
            first = f"{opener} {_join(present)}"
            if absent:
                first += f" {_pick(rng, ['without', 'with no'])} {_join_or(absent)}"
        else:
            first = f"{opener} {_pick(rng, ['clear vesicular breath sounds', 'clear breath sounds'])}"
            first += f" {_pick(rng, ['without', 'with no'])} {_join_or(absent)}"
        demo = _demographic(meta, rng)
        diag = str(meta.get("Diagnosis"))
        healthy = diag.lower() in ("healthy", "normal")
        if demo:
            first += f" in {demo}"
            if not healthy:
                first += f" {_pick(rng, ['diagnosed with', 'with a documented diagnosis of'])} {diag.lower() if diag != 'COPD' else 'COPD'}"
        sents = [_sentence(first)]
        dname = diag if diag in ("COPD", "URTI", "LRTI") else diag.lower()
        if healthy:
            sents.append(_sentence(_pick(rng, [
                "the respiratory examination is unremarkable and consistent with a healthy status",
                "these findings are consistent with normal respiratory function in a healthy individual"])))
        elif present:
            sents.append(_sentence(_pick(rng, [
                f"the presence of {_join(present)} is consistent with the documented {dname}",
                f"these adventitious sounds are in keeping with the recorded diagnosis of {dname}"])))
        else:
            sents.append(_sentence(f"no adventitious sounds are noted despite the recorded diagnosis of {dname}"))
        if rng.random() < 0.5 and meta.get("Device"):
            sents.append(_sentence(f"the recording was acquired with the {meta.get('Device')} device"))
        return sents


class CoughSymptomFamily(TemplateFamily):
    specialist = "pulmonologist"
    required = ("Covid_Test_Result",)
    labels = ("Positive", "Negative")
    label_key = "Covid_Test_Result"

    def sentences(self, meta, rng):
        status = "COVID-19 positive" if polarity(meta.get("Covid_Test_Result")) else "COVID-19 negative"
        if not polarity(meta.get("Covid_Test_Result")):
            status = "individual who tested negative for COVID-19"
        demo = _demographic(meta, rng) or "this individual"
        sym = [(k, v) for k, v in meta.fields if k.startswith("Symptom_")]
        pos = [k[8:].replace("_", " ").lower() for k, v in sym if polarity(v)]
        neg = [k[8:].replace("_", " ").lower() for k, v in sym if polarity(v) is False]
        opener = _pick(rng, ["respiratory assessment in", "the audio recording from"])
        first = f"{opener} {demo}, a {status}" if "negative" not in status else f"{opener} {demo}, an {status}"
        sents = [_sentence(first)]
        parts = []
        if pos:
            parts.append(f"reported symptoms include {_join(pos)}")
        if neg:
            # repeat the cue so every negated symptom sits inside the negation window
            parts.append("there is no reported " + " and no ".join(neg))
        if parts:
            sents.append(_sentence("; ".join(parts)))
        else:
            sents.append(_sentence("no symptoms are recorded"))
        smoker = meta.get("Smoker_status")
        if smoker:
            sents.append(_sentence(f"smoking status is recorded as {str(smoker).lower()}"))
        return sents


class MurmurFamily(TemplateFamily):
    specialist = "cardiologist"
    required = ("Murmur",)
    labels = ("Present", "Absent")
    label_key = "Murmur"

    def sentences(self, meta, rng):
        if polarity(meta.get("Murmur")):
            desc = [str(meta.get(k)).lower() for k in ("Timing", "Pitch") if meta.get(k)]
            first = f"a {' '.join(desc + ['murmur'])} is heard"
            if meta.get("Most_audible_location"):
                first += f" most clearly at the {meta.get('Most_audible_location')} area"
            sents = [_sentence(first)]
            grade = meta.get("Grading")
            tail = f"the murmur is graded {grade}" if grade else "the murmur is clearly audible"
            sents.append(_sentence(tail + (", indicating an abnormal cardiac finding"
                                           if polarity(meta.get("Outcome")) else "")))
        else:
            sents = [_sentence(_pick(rng, ["cardiac auscultation reveals normal heart sounds without murmurs",
                                           "heart sounds are normal with no murmurs heard"]))]
            sents.append(_sentence("the cardiac examination is consistent with a normal finding"))
        return sents


class NormalCardiacFamily(TemplateFamily):
    specialist = "cardiologist"
    required = ("Diagnosis",)
    labels = ("Normal", "Abnormal")

    def sentences(self, meta, rng):
        normal = str(meta.get("Diagnosis")).lower() == "normal"
        if normal:
            s1 = _pick(rng, ["cardiac auscultation reveals normal heart sounds with a regular rhythm",
                             "heart sounds are normal with a regular rhythm"])
            s2 = "these findings are consistent with a normal cardiac examination"
        else:
            s1 = "cardiac auscultation is recorded as abnormal"
            s2 = "the recording is labelled as an abnormal cardiac examination"
        sents = [_sentence(s1), _sentence(s2)]
        if meta.get("Data_Type"):
            sents.append(_sentence(f"the recording quality is noted as {str(meta.get('Data_Type')).lower()}"))
        return sents


TEMPLATE_FAMILIES: dict[str, TemplateFamily] = {
    "icbhi": IcbhiFamily(),
    "coughsym": CoughSymptomFamily(),
    "murmur": MurmurFamily(),
    "normal_cardiac": NormalCardiacFamily(),
}


def register_family(tag: str, family: TemplateFamily) -> None:
    TEMPLATE_FAMILIES[tag] = family


def generate_template_report(meta: MetadataRecord, seed: int = 0) -> ClinicalRecord:
    family = TEMPLATE_FAMILIES.get(meta.dataset)
    if family is None:
        raise KeyError(f"no template family registered for dataset {meta.dataset!r}")
    for k in family.required:
        if meta.get(k) is None:
            raise ValueError(f"metadata for {meta.dataset!r} lacks required field {k!r}")
    if family.labels and meta.label not in family.labels:
        raise ValueError(f"label {meta.label!r} not in {family.labels}")
    rng = np.random.default_rng([seed, int(meta.digest()[:8], 16)])
    sents = family.sentences(meta, rng)[:3]
    text = " ".join(sents)
    return ClinicalRecord(text, "template", meta.digest(), seed)


def sentence_count(text: str) -> int:
    return len([s for s in re.split(r"(?<=\.)\s+", text.strip()) if s.strip().endswith(".")])


# -------------------------------------------------------------------- LLM path


class ReportError(RuntimeError):
    pass


class ReportTransportError(ReportError):
    pass


class ReportParseError(ReportError):
    pass


class ReportValidationError(ReportError):
    pass


def parse_report_response(body) -> str:
    """Accept ``{"report": ...}`` as a dict or a JSON/Python-literal string."""
    if isinstance(body, str):
        s = body.strip()
        try:
            body = json.loads(s)
        except ValueError:
            import ast

            try:
                body = ast.literal_eval(s)
            except (ValueError, SyntaxError) as exc:
                raise ReportParseError(f"unparseable response: {s[:80]!r}") from exc
    if not isinstance(body, dict) or "report" not in body:
        raise ReportParseError("response lacks the 'report' key")
    if not isinstance(body["report"], str) or not body["report"].strip():
        raise ReportParseError("'report' is not a non-empty string")
    return body["report"].strip()


def generate_llm_report(meta: MetadataRecord, client: Callable[[str], object], specialist: str | None = None,
                        max_attempts: int = 3, backoff: float = 0.0, strict: bool = False) -> ClinicalRecord:
    """Query ``client(prompt) -> response`` and parse the single-key report.

    Parse failures are retried up to ``max_attempts``. A report that fails
    validation is returned with ``flagged`` set, or raised when ``strict``.
    """
    family = TEMPLATE_FAMILIES.get(meta.dataset)
    specialist = specialist or (family.specialist if family else "pulmonologist")
    prompt = build_prompt(meta, specialist)
    last: Exception | None = None
    for attempt in range(max_attempts):
        try:
            body = client(prompt)
        except (OSError, ConnectionError, TimeoutError) as exc:
            raise ReportTransportError(str(exc)) from exc
        try:
            text = parse_report_response(body)
            break
        except ReportParseError as exc:
            last = exc
            if backoff:
                time.sleep(backoff * 2 ** attempt)
    else:
        raise last
    rec = ClinicalRecord(text, "llm", meta.digest())
    check = validate_report(rec, meta)
    if not check.ok:
        if strict:
            raise ReportValidationError("; ".join(check.violations))
        rec.flagged = check.violations
    return rec


# ------------------------------------------------------------- corpus manifest


@dataclass
class ManifestEntry:
    audio_id: str
    spectrogram_path: str
    report: str
    label: str
    dataset: str
    subject_id: str | None = None
    wav_path: str | None = None
    targets: dict = field(default_factory=dict)  # numeric side targets (e.g. age) for regression probes
    recording_id: str | None = None  # segments cut from one recording share it

    def to_dict(self) -> dict:
        d = {"audio_id": self.audio_id, "spectrogram_path": self.spectrogram_path, "report": self.report,
             "label": self.label, "dataset": self.dataset}
        if self.subject_id is not None:
            d["subject_id"] = self.subject_id
        if self.wav_path is not None:
            d["wav_path"] = self.wav_path
        if self.targets:
            d["targets"] = self.targets
        if self.recording_id is not None:
            d["recording_id"] = self.recording_id
        return d


def export_corpus(path, entries: list[ManifestEntry], base_dir=None) -> None:
    """Write a JSON-lines manifest after checking every spectrogram exists."""
    base = Path(base_dir) if base_dir else Path(path).parent
    for e in entries:
        p = Path(e.spectrogram_path)
        if not (p if p.is_absolute() else base / p).exists():
            raise FileNotFoundError(f"dangling audio reference {e.audio_id!r}: {e.spectrogram_path}")
    ids = [e.audio_id for e in entries]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate audio ids in corpus")
    with open(path, "w") as f:
        for e in entries:
            f.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")


def import_corpus(path) -> list[ManifestEntry]:
    out = []
    with open(path) as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            d = json.loads(line)
            try:
                out.append(ManifestEntry(d["audio_id"], d["spectrogram_path"], d["report"], d["label"],
                                         d["dataset"], d.get("subject_id"), d.get("wav_path"),
                                         d.get("targets", {}), d.get("recording_id")))
            except KeyError as exc:
                raise ValueError(f"{path}:{n}: missing field {exc}") from exc
    return out
