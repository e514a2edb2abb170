"""Data model and synthetic generator for candidates, posts and applications.

The generator plants two kinds of signal: an explicit one (labels follow a
score computed from skill overlap, experience, university tier and a
text-only trait) and a history one (each post's acceptance bar drifts with
the quality of the applicants it accepts, so past decisions carry
information the post text does not).
"""

from __future__ import annotations

import json
import math
import os
from bisect import bisect_left
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import resources

FORMAT_VERSION = 1

SKILL_BANK = (
    "python", "sql", "machine_learning", "data_engineering", "cloud_infra",
    "backend", "frontend", "devops", "security", "testing", "statistics",
    "nlp", "computer_vision", "distributed_systems", "mobile", "java",
)
TITLES = ("backend_engineer", "data_scientist", "ml_engineer",
          "frontend_engineer", "platform_engineer", "security_analyst")
LOCATIONS = ("north", "south", "east", "west", "remote")
DEGREES = ("bachelor", "master", "phd", "diploma")
MAJORS = ("computer_science", "statistics", "engineering", "mathematics",
          "information_systems")
SENIORITIES = ("junior", "mid", "senior", "principal")
INDUSTRIES = ("finance", "healthcare", "retail", "logistics", "media")
CERTIFICATIONS = ("cert_cloud", "cert_security", "cert_data", "none")
LANGUAGES = ("english", "mandarin", "spanish", "german")
GENDERS = ("female", "male", "nonbinary")

TRAIT_SENTENCE = "thrives on cross team collaboration and mentoring juniors"
NO_TRAIT_SENTENCE = "prefers heads down delivery of well scoped work"


class CorpusFormatError(ValueError):
    """Raised on malformed corpus files or inconsistent corpora."""


class GeneratorConfigError(ValueError):
    """Raised on out-of-range generator configuration."""


# ---------------------------------------------------------------------------
# Domain types


@dataclass
class ResumeDoc:
    """Structured sections of key-value text entries plus free-text sentences."""
    fields: dict
    sentences: list

    def __post_init__(self):
        if not self.fields:
            raise CorpusFormatError("resume must have at least one structured field")


@dataclass
class PostDoc:
    fields: dict
    sentences: list

    def __post_init__(self):
        if not self.fields:
            raise CorpusFormatError("post must have at least one structured field")


@dataclass
class ApplicationRecord:
    """One application: candidate, the resume they submitted, post and outcome."""
    candidate: int
    resume: ResumeDoc
    post: int
    label: int
    review_time: int
    seq_index: int


@dataclass
class GeneratorConfig:
    candidates: int = 900
    posts: int = 60
    applications: int = 7000
    latent_dim: int = 9          # skills drawn from the first latent_dim bank entries
    drift: float = 0.0           # acceptance-bar adaptation rate
    noise: float = 0.0           # additive score noise scale, in [0, 0.5)
    base_rate: float = 0.3       # target fraction of accepted applications
    mutate_prob: float = 0.08    # chance a repeat applicant edits one skill
    overlap_weight: float = 0.34
    quality_weight: float = 0.50
    text_weight: float = 0.16

    def validate(self):
        if self.candidates <= 0 or self.posts <= 0:
            raise GeneratorConfigError("need at least one candidate and one post")
        if self.applications <= 0:
            raise GeneratorConfigError("need at least one application")
        if not 1 <= self.latent_dim <= len(SKILL_BANK):
            raise GeneratorConfigError(
                f"latent_dim must be in [1, {len(SKILL_BANK)}]")
        if self.drift < 0:
            raise GeneratorConfigError("drift must be >= 0")
        if not 0.0 <= self.noise < 0.5:
            raise GeneratorConfigError("noise must be in [0, 0.5)")
        if not 0.0 < self.base_rate < 1.0:
            raise GeneratorConfigError("base_rate must be in (0, 1)")


@dataclass
class RecordTruth:
    """Latent state behind one application, kept for oracle-style checks."""
    skills: tuple
    years: float
    university: str
    gpa: float
    trait: int
    overlap: float
    quality: float
    raw_score: float
    noise: float
    bar_before: float


@dataclass
class GeneratorTruth:
    base_bar: float
    records: list
    post_requirements: dict


@dataclass
class Corpus:
    """Applications sorted by review time plus the referenced post documents.

    Immutable after generation/loading; the lookup indexes are built lazily
    and are safe for concurrent readers once constructed.
    """
    records: list
    posts: dict
    config: GeneratorConfig
    seed: int
    truth: GeneratorTruth | None = None
    _post_index: dict = field(default_factory=dict, repr=False)
    _cand_index: dict = field(default_factory=dict, repr=False)
    _time_to_pos: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        times = [r.review_time for r in self.records]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise CorpusFormatError("review times must be strictly increasing")
        for r in self.records:
            if r.post not in self.posts:
                raise CorpusFormatError(f"record references unknown post {r.post}")
        for pos, r in enumerate(self.records):
            self._time_to_pos[r.review_time] = pos
            self._post_index.setdefault(r.post, []).append(pos)
            self._cand_index.setdefault(r.candidate, []).append(pos)

    def position_of(self, record: ApplicationRecord) -> int:
        pos = self._time_to_pos.get(record.review_time)
        if pos is None:
            raise CorpusFormatError("record does not belong to this corpus")
        found = self.records[pos]
        # Value-equal records are accepted so serialization round-trips work.
        if found is not record and found != record:
            raise CorpusFormatError("record does not belong to this corpus")
        return pos


@dataclass
class DatasetSplit:
    """Contiguous chronological index ranges: train < validation < test."""
    train: range
    validation: range
    test: range


# ---------------------------------------------------------------------------
# Synthetic generation


def _seniority_for(years: float) -> str:
    if years < 3:
        return "junior"
    if years < 7:
        return "mid"
    if years < 12:
        return "senior"
    return "principal"


def _quality(years: float, university: str, gpa: float) -> float:
    tier = resources.university_tier(university)
    tier_score = {"top10": 1.0, "top50": 0.75, "top100": 0.5,
                  "ranked_other": 0.25, "unranked": 0.25}[tier]
    return 0.5 * (years / 15.0) + 0.3 * tier_score + 0.2 * ((gpa - 2.0) / 2.0)


def _skill_display(skill: str, rng) -> str:
    forms = resources.aliases_of().get(skill)
    if forms and rng.random() < 0.2:
        return forms[int(rng.integers(0, len(forms)))]
    return skill


def _make_resume(cand: dict, skills: tuple, rng) -> ResumeDoc:
    uni = cand["university"]
    uni_display = f"university_{uni[1:]}" if rng.random() < 0.25 else uni
    skill_display = [_skill_display(s, rng) for s in skills]
    fields = {
        "profile": {
            "age": str(cand["age"]),
            "gender": cand["gender"],
            "location": cand["location"],
            "language": cand["language"],
        },
        "education": {
            "university": uni_display,
            "degree": cand["degree"],
            "major": cand["major"],
            "gpa": f"{cand['gpa']:.2f}",
        },
        "experience": {
            "years_experience": f"{cand['years']:.1f}",
            "prior_jobs": str(cand["prior_jobs"]),
            "seniority": cand["seniority"],
            "management": cand["management"],
            "certification": cand["certification"],
            "industry": cand["industry"],
        },
        "skills": {"skills": ", ".join(skill_display)},
    }
    sentences = [
        f"completed a {cand['degree']} in {cand['major']} at {uni_display}",
        f"worked {cand['years']:.1f} years in {cand['industry']} "
        f"across {cand['prior_jobs']} roles",
        "hands on with " + ", ".join(skill_display),
        TRAIT_SENTENCE if cand["trait"] else NO_TRAIT_SENTENCE,
        f"operating at {cand['seniority']} level open to {cand['location']} roles",
    ]
    return ResumeDoc(fields=fields, sentences=sentences)


def _make_post_doc(post: dict) -> PostDoc:
    req = list(post["requirements"])
    fields = {
        "requirements": {
            "skills": ", ".join(req),
            "seniority": post["seniority"],
        },
        "meta": {
            "title": post["title"],
            "location": post["location"],
        },
    }
    sentences = [
        f"hiring a {post['seniority']} {post['title']} based {post['location']}",
        "must have " + ", ".join(req),
        "the team ships carefully reviewed production systems",
    ]
    return PostDoc(fields=fields, sentences=sentences)


def _simulate_labels(raw_scores, noises, post_ids, base_bar, drift):
    """Run the per-post drifting acceptance bar over applications in time order."""
    bars = {}
    labels = np.zeros(len(raw_scores), dtype=np.int64)
    bar_before = np.zeros(len(raw_scores))
    for k in range(len(raw_scores)):
        p = post_ids[k]
        bar = bars.get(p, base_bar)
        bar_before[k] = bar
        accept = raw_scores[k] + noises[k] > bar
        labels[k] = 1 if accept else 0
        if drift > 0.0:
            if accept:
                bar = bar + drift * (raw_scores[k] - bar)
            else:
                bar = bar + drift * (base_bar - bar)
            bars[p] = bar
    return labels, bar_before


def generate_synthetic(config: GeneratorConfig, seed: int) -> Corpus:
    """Build a corpus deterministically from (config, seed).

    All random draws happen before labels are assigned, so two runs that
    differ only in drift strength share candidates, posts, application order,
    resumes and noise, and differ purely through the acceptance bars.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    bank = SKILL_BANK[:config.latent_dim]

    candidates = []
    for i in range(config.candidates):
        top = min(6, config.latent_dim)
        n_skills = int(rng.integers(min(2, top), top + 1))
        skills = tuple(sorted(
            bank[j] for j in rng.choice(config.latent_dim, size=n_skills, replace=False)))
        years = float(rng.uniform(0.0, 15.0))
        cand = {
            "skills": set(skills),
            "years": years,
            "university": f"u{int(rng.integers(1, 41))}",
            "gpa": float(rng.uniform(2.0, 4.0)),
            "trait": int(rng.random() < 0.5),
            "gender": GENDERS[int(rng.integers(0, len(GENDERS)))],
            "location": LOCATIONS[int(rng.integers(0, len(LOCATIONS)))],
            "language": LANGUAGES[int(rng.integers(0, len(LANGUAGES)))],
            "degree": DEGREES[int(rng.integers(0, len(DEGREES)))],
            "major": MAJORS[int(rng.integers(0, len(MAJORS)))],
            "prior_jobs": int(rng.integers(0, 7)),
            "management": "yes" if rng.random() < 0.3 else "no",
            "certification": CERTIFICATIONS[int(rng.integers(0, len(CERTIFICATIONS)))],
            "industry": INDUSTRIES[int(rng.integers(0, len(INDUSTRIES)))],
            "seniority": _seniority_for(years),
            "age": int(21 + years + rng.uniform(0.0, 5.0)),
        }
        candidates.append(cand)

    posts = []
    for j in range(config.posts):
        top = min(5, config.latent_dim)
        n_req = int(rng.integers(min(2, top), top + 1))
        req = tuple(sorted(
            bank[i] for i in rng.choice(config.latent_dim, size=n_req, replace=False)))
        posts.append({
            "requirements": req,
            "title": TITLES[int(rng.integers(0, len(TITLES)))],
            "seniority": SENIORITIES[int(rng.integers(0, len(SENIORITIES)))],
            "location": LOCATIONS[int(rng.integers(0, len(LOCATIONS)))],
        })
    post_docs = {j: _make_post_doc(p) for j, p in enumerate(posts)}

    # Application stream: who applies where, resume mutations, emitted docs and
    # score noise, all drawn up front and independent of the labels.
    n = config.applications
    cand_ids = rng.integers(0, config.candidates, size=n)
    post_ids = rng.integers(0, config.posts, size=n)
    seq_counters = {}
    records_pre = []
    truths = []
    raw_scores = np.zeros(n)
    noises = config.noise * rng.normal(size=n) if config.noise > 0 else np.zeros(n)
    for k in range(n):
        ci, pj = int(cand_ids[k]), int(post_ids[k])
        cand = candidates[ci]
        seq = seq_counters.get(ci, 0) + 1
        seq_counters[ci] = seq
        if seq > 1 and rng.random() < config.mutate_prob:
            skill = bank[int(rng.integers(0, config.latent_dim))]
            if rng.random() < 0.5:
                cand["skills"].add(skill)
            elif len(cand["skills"]) > 1:
                cand["skills"].discard(skill)
        skills = tuple(sorted(cand["skills"]))
        req = posts[pj]["requirements"]
        overlap = len(set(skills) & set(req)) / max(1, len(req))
        quality = _quality(cand["years"], cand["university"], cand["gpa"])
        raw = (config.overlap_weight * overlap
               + config.quality_weight * quality
               + config.text_weight * cand["trait"])
        raw_scores[k] = raw
        resume = _make_resume(cand, skills, rng)
        records_pre.append((ci, pj, seq, resume))
        truths.append(RecordTruth(
            skills=skills, years=cand["years"], university=cand["university"],
            gpa=cand["gpa"], trait=cand["trait"], overlap=overlap,
            quality=quality, raw_score=raw, noise=float(noises[k]),
            bar_before=0.0))

    # Calibrate the global base bar to hit the target acceptance rate, then
    # simulate the drifting bars once more to fix labels.
    lo, hi = float(raw_scores.min() - 1.0), float(raw_scores.max() + 1.0)
    base_bar = float(np.quantile(raw_scores + noises, 1.0 - config.base_rate))
    if config.drift > 0.0:
        for _ in range(40):
            labels, _ = _simulate_labels(raw_scores, noises, post_ids, base_bar, config.drift)
            rate = labels.mean()
            if rate > config.base_rate:
                lo = base_bar
            else:
                hi = base_bar
            base_bar = 0.5 * (lo + hi)
    labels, bar_before = _simulate_labels(
        raw_scores, noises, post_ids, base_bar, config.drift)

    records = []
    for k, (ci, pj, seq, resume) in enumerate(records_pre):
        truths[k].bar_before = float(bar_before[k])
        records.append(ApplicationRecord(
            candidate=ci, resume=resume, post=pj, label=int(labels[k]),
            review_time=k + 1, seq_index=seq))

    truth = GeneratorTruth(
        base_bar=base_bar,
        records=truths,
        post_requirements={j: p["requirements"] for j, p in enumerate(posts)})
    return Corpus(records=records, posts=post_docs, config=config,
                  seed=seed, truth=truth)


# ---------------------------------------------------------------------------
# Splitting and history


def split_chronological(corpus, val_fraction: float, test_fraction: float) -> DatasetSplit:
    """Last block is test, the block before it validation, the rest train."""
    if val_fraction <= 0 or test_fraction <= 0 or val_fraction + test_fraction >= 1:
        raise ValueError("fractions must be positive and sum to less than 1")
    n = len(corpus.records)
    if n < 3:
        raise ValueError("corpus must have at least 3 records to split")
    n_test = max(1, int(math.floor(test_fraction * n + 0.5)))
    n_val = max(1, int(math.floor(val_fraction * n + 0.5)))
    if n_test + n_val >= n:
        raise ValueError("split leaves no training records")
    return DatasetSplit(
        train=range(0, n - n_val - n_test),
        validation=range(n - n_val - n_test, n - n_test),
        test=range(n - n_test, n))


def history_before(corpus: Corpus, record: ApplicationRecord):
    """All earlier applications to the same post and by the same candidate.

    Both lists are in review order and never include the query record itself;
    empty lists are the cold-start case.
    """
    pos = corpus.position_of(record)
    post_positions = corpus._post_index.get(record.post, [])
    cand_positions = corpus._cand_index.get(record.candidate, [])
    post_hist = [corpus.records[i] for i in post_positions[:bisect_left(post_positions, pos)]]
    cand_hist = [corpus.records[i] for i in cand_positions[:bisect_left(cand_positions, pos)]]
    return post_hist, cand_hist


# ---------------------------------------------------------------------------
# Serialization (JSONL records + posts sidecar + manifest)


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sidecar_paths(records_path):
    p = Path(records_path)
    base = p.name[:-len(".jsonl")] if p.name.endswith(".jsonl") else p.name
    return (p.with_name(base + ".posts.jsonl"),
            p.with_name(base + ".manifest.json"))


def _atomic_write(path, text: str):
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def save_corpus(corpus: Corpus, records_path):
    posts_path, manifest_path = sidecar_paths(records_path)
    lines = []
    for r in corpus.records:
        lines.append(_dumps({
            "candidate": r.candidate,
            "post": r.post,
            "label": r.label,
            "review_time": r.review_time,
            "seq_index": r.seq_index,
            "resume": {"fields": r.resume.fields, "sentences": r.resume.sentences},
        }))
    _atomic_write(records_path, "\n".join(lines) + "\n")
    post_lines = []
    for pid in sorted(corpus.posts):
        doc = corpus.posts[pid]
        post_lines.append(_dumps({
            "post": pid,
            "doc": {"fields": doc.fields, "sentences": doc.sentences},
        }))
    _atomic_write(posts_path, "\n".join(post_lines) + "\n")
    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": corpus.seed,
        "config": asdict(corpus.config),
        "records": len(corpus.records),
        "posts": len(corpus.posts),
        "base_bar": corpus.truth.base_bar if corpus.truth else None,
    }
    _atomic_write(manifest_path, _dumps(manifest) + "\n")


def load_corpus(records_path) -> Corpus:
    posts_path, manifest_path = sidecar_paths(records_path)
    try:
        manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CorpusFormatError(f"missing manifest file {manifest_path}")
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"bad manifest {manifest_path}: {exc}")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CorpusFormatError(
            f"unsupported corpus format version {manifest.get('format_version')}")

    records = []
    try:
        for line_no, line in enumerate(
                Path(records_path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                records.append(ApplicationRecord(
                    candidate=int(row["candidate"]),
                    resume=ResumeDoc(fields=row["resume"]["fields"],
                                     sentences=list(row["resume"]["sentences"])),
                    post=int(row["post"]),
                    label=int(row["label"]),
                    review_time=int(row["review_time"]),
                    seq_index=int(row["seq_index"]),
                ))
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise CorpusFormatError(f"{records_path}:{line_no}: {exc}")
    except FileNotFoundError:
        raise CorpusFormatError(f"missing corpus file {records_path}")

    posts = {}
    try:
        for line_no, line in enumerate(
                Path(posts_path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                posts[int(row["post"])] = PostDoc(
                    fields=row["doc"]["fields"],
                    sentences=list(row["doc"]["sentences"]))
            except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
                raise CorpusFormatError(f"{posts_path}:{line_no}: {exc}")
    except FileNotFoundError:
        raise CorpusFormatError(f"missing posts file {posts_path}")

    config = GeneratorConfig(**manifest["config"])
    return Corpus(records=records, posts=posts, config=config,
                  seed=manifest["seed"], truth=None)
