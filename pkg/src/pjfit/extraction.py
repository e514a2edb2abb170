"""Semantic entity extraction and sparse one-hot/standardized encoding.

A document (resume or post) is reduced to a fixed, ordered list of typed
fields. Simple fields are parsed with rules and regular expressions, complex
names (skills, universities) resolve through the bundled alias dictionary,
and derived fields (university tier) come from the bundled ranking table.
Categorical values one-hot into dedicated slot ranges, real values
standardize with train-split statistics; every document activates exactly
one slot per field.
"""

from __future__ import annotations

import json
import math
import os
import re
from dataclasses import dataclass

from . import resources
from .corpus import SKILL_BANK

SCHEMA_FORMAT_VERSION = 1
OOV = "<oov>"

_NUMBER_RE = re.compile(r"-?\d+(?:\.\d+)?")


class SchemaFitError(ValueError):
    """Raised when a schema cannot be fitted (e.g. a constant real field)."""


class SchemaFormatError(ValueError):
    """Raised on malformed schema files."""


# ---------------------------------------------------------------------------
# Field inventory


@dataclass(frozen=True)
class FieldSpec:
    """How one entity is pulled out of a document.

    kind is "categorical" or "real". For membership fields the value is
    yes/no depending on whether `member` occurs in the comma-separated list at
    (section, key). Derived fields ignore the document value and compute from
    another extracted entity instead.
    """
    name: str
    kind: str
    section: str
    key: str
    member: str | None = None
    derived: str | None = None   # currently: "university_tier"


def resume_field_specs(skills=None):
    skills = tuple(skills) if skills is not None else SKILL_BANK[:9]
    specs = [FieldSpec(f"skill_{s}", "categorical", "skills", "skills", member=s)
             for s in skills]
    specs += [
        FieldSpec("age", "real", "profile", "age"),
        FieldSpec("gender", "categorical", "profile", "gender"),
        FieldSpec("location", "categorical", "profile", "location"),
        FieldSpec("language", "categorical", "profile", "language"),
        FieldSpec("university", "categorical", "education", "university"),
        FieldSpec("university_tier", "categorical", "education", "university",
                  derived="university_tier"),
        FieldSpec("degree", "categorical", "education", "degree"),
        FieldSpec("major", "categorical", "education", "major"),
        FieldSpec("gpa", "real", "education", "gpa"),
        FieldSpec("years_experience", "real", "experience", "years_experience"),
        FieldSpec("prior_jobs", "real", "experience", "prior_jobs"),
        FieldSpec("seniority", "categorical", "experience", "seniority"),
        FieldSpec("management", "categorical", "experience", "management"),
        FieldSpec("certification", "categorical", "experience", "certification"),
        FieldSpec("industry", "categorical", "experience", "industry"),
    ]
    return specs


def post_field_specs(skills=None):
    skills = tuple(skills) if skills is not None else SKILL_BANK[:9]
    specs = [FieldSpec(f"req_skill_{s}", "categorical", "requirements", "skills",
                       member=s) for s in skills]
    specs += [
        FieldSpec("title", "categorical", "meta", "title"),
        FieldSpec("seniority", "categorical", "requirements", "seniority"),
        FieldSpec("location", "categorical", "meta", "location"),
    ]
    return specs


# ---------------------------------------------------------------------------
# Schema


@dataclass
class EntityField:
    """A fitted field: vocabulary for categorical, mean/std for real."""
    spec: FieldSpec
    vocabulary: list | None = None
    index: dict | None = None
    mean: float | None = None
    std: float | None = None

    @property
    def width(self) -> int:
        return len(self.vocabulary) if self.spec.kind == "categorical" else 1


@dataclass
class EntitySchema:
    fields: list
    side: str

    def __post_init__(self):
        self.offsets = []
        total = 0
        for f in self.fields:
            self.offsets.append(total)
            total += f.width
        self.d_x = total

    @property
    def s(self) -> int:
        return len(self.fields)


@dataclass(frozen=True)
class EntityVector:
    """One value per schema field: vocabulary index or raw real number."""
    values: tuple


@dataclass(frozen=True)
class SparseFeature:
    """Exactly s active slots (flat index, value) in a length d_x space."""
    d_x: int
    indices: tuple
    values: tuple


# ---------------------------------------------------------------------------
# Raw value extraction


def _raw_value(doc, spec: FieldSpec):
    """Pull the raw string/number for a field; None means missing."""
    section = doc.fields.get(spec.section)
    if section is None:
        return None
    text = section.get(spec.key)
    if text is None:
        return None
    if spec.member is not None:
        items = {resources.canonicalize(part) for part in str(text).split(",") if part.strip()}
        return "yes" if spec.member in items else "no"
    if spec.derived == "university_tier":
        return resources.university_tier(resources.canonicalize(str(text)))
    if spec.kind == "real":
        m = _NUMBER_RE.search(str(text))
        return float(m.group()) if m else None
    return resources.canonicalize(str(text))


def extract_entities(doc, schema: EntitySchema) -> EntityVector:
    """Total extraction: unknown categoricals map to OOV, missing reals to the mean."""
    values = []
    for f in schema.fields:
        raw = _raw_value(doc, f.spec)
        if f.spec.kind == "categorical":
            idx = f.index.get(raw if raw is not None else OOV)
            values.append(idx if idx is not None else f.index[OOV])
        else:
            values.append(float(raw) if raw is not None else f.mean)
    return EntityVector(values=tuple(values))


def encode_sparse(entities: EntityVector, schema: EntitySchema) -> SparseFeature:
    """Expand to the sparse space: one-hot categoricals, standardized reals.

    A standardized value of 0.0 still occupies its slot; slots are selected
    by schema position, not by nonzero value.
    """
    if len(entities.values) != schema.s:
        raise ValueError(f"entity count {len(entities.values)} != schema s={schema.s}")
    indices, values = [], []
    for f, off, v in zip(schema.fields, schema.offsets, entities.values):
        if f.spec.kind == "categorical":
            if not 0 <= v < len(f.vocabulary):
                raise IndexError(
                    f"field {f.spec.name!r}: index {v} out of vocabulary "
                    f"bounds [0, {len(f.vocabulary)})")
            indices.append(off + v)
            values.append(1.0)
        else:
            indices.append(off)
            values.append((v - f.mean) / f.std)
    return SparseFeature(d_x=schema.d_x, indices=tuple(indices), values=tuple(values))


# ---------------------------------------------------------------------------
# Fitting


def _fit_fields(specs, docs):
    fields = []
    for spec in specs:
        raws = [_raw_value(doc, spec) for doc in docs]
        if spec.kind == "categorical":
            vocab = sorted({r for r in raws if r is not None})
            vocab.append(OOV)
            fields.append(EntityField(
                spec=spec, vocabulary=vocab,
                index={v: i for i, v in enumerate(vocab)}))
        else:
            present = [r for r in raws if r is not None]
            if not present:
                raise SchemaFitError(f"real field {spec.name!r} has no train values")
            mean = sum(present) / len(present)
            var = sum((r - mean) ** 2 for r in present) / len(present)
            if var == 0.0:
                raise SchemaFitError(
                    f"real field {spec.name!r} is constant on the train split")
            fields.append(EntityField(spec=spec, mean=mean, std=math.sqrt(var)))
    return fields


def fit_schema(corpus, split, resume_specs=None, post_specs=None):
    """Fit resume and post schemas from the train block only.

    Post-side statistics come from the distinct posts referenced by train
    records. Returns (resume_schema, post_schema).
    """
    if len(split.train) == 0:
        raise SchemaFitError("train split is empty")
    skills = SKILL_BANK[:corpus.config.latent_dim] if corpus.config else None
    if resume_specs is None:
        resume_specs = resume_field_specs(skills)
    if post_specs is None:
        post_specs = post_field_specs(skills)
    train_records = [corpus.records[i] for i in split.train]
    resumes = [r.resume for r in train_records]
    post_ids = sorted({r.post for r in train_records})
    posts = [corpus.posts[pid] for pid in post_ids]
    resume_schema = EntitySchema(fields=_fit_fields(resume_specs, resumes), side="resume")
    post_schema = EntitySchema(fields=_fit_fields(post_specs, posts), side="post")
    return resume_schema, post_schema


# ---------------------------------------------------------------------------
# Schema files


def _field_to_json(f: EntityField):
    return {
        "name": f.spec.name,
        "kind": f.spec.kind,
        "section": f.spec.section,
        "key": f.spec.key,
        "member": f.spec.member,
        "derived": f.spec.derived,
        "vocabulary": f.vocabulary,
        "mean": f.mean,
        "std": f.std,
    }


def _field_from_json(row) -> EntityField:
    spec = FieldSpec(name=row["name"], kind=row["kind"], section=row["section"],
                     key=row["key"], member=row["member"], derived=row["derived"])
    field = EntityField(spec=spec, vocabulary=row["vocabulary"], mean=row["mean"],
                        std=row["std"])
    if field.vocabulary is not None:
        field.index = {v: i for i, v in enumerate(field.vocabulary)}
    return field


def schema_to_json(resume_schema: EntitySchema, post_schema: EntitySchema) -> str:
    payload = {
        "format_version": SCHEMA_FORMAT_VERSION,
        "resume": [_field_to_json(f) for f in resume_schema.fields],
        "post": [_field_to_json(f) for f in post_schema.fields],
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def save_schemas(path, resume_schema: EntitySchema, post_schema: EntitySchema):
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(schema_to_json(resume_schema, post_schema) + "\n")
    os.replace(tmp, path)


def load_schemas(path):
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except FileNotFoundError:
        raise SchemaFormatError(f"missing schema file {path}")
    except json.JSONDecodeError as exc:
        raise SchemaFormatError(f"bad schema file {path}: {exc}")
    if payload.get("format_version") != SCHEMA_FORMAT_VERSION:
        raise SchemaFormatError(
            f"unsupported schema format version {payload.get('format_version')}")
    resume = EntitySchema(
        fields=[_field_from_json(r) for r in payload["resume"]], side="resume")
    post = EntitySchema(
        fields=[_field_from_json(r) for r in payload["post"]], side="post")
    return resume, post
