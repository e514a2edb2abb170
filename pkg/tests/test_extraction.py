import math

import pytest

from pjfit import corpus as cp
from pjfit import extraction as ex
from pjfit import resources


def make_corpus(applications=300, seed=7, **kw):
    config = cp.GeneratorConfig(candidates=40, posts=8, applications=applications,
                                latent_dim=6, **kw)
    return cp.generate_synthetic(config, seed=seed)


def fitted(corpus, val=0.2, test=0.2):
    split = cp.split_chronological(corpus, val, test)
    resume_schema, post_schema = ex.fit_schema(corpus, split)
    return split, resume_schema, post_schema


def doc(fields):
    return cp.ResumeDoc(fields=fields, sentences=["x"])


# ---------------------------------------------------------------------------
# Fitting


def test_categorical_vocabulary_with_oov():
    spec = ex.FieldSpec("skill", "categorical", "skills", "primary")
    docs = [doc({"skills": {"primary": "ml"}}), doc({"skills": {"primary": "db"}}),
            doc({"skills": {"primary": "ml"}})]
    fields = ex._fit_fields([spec], docs)
    assert fields[0].vocabulary == ["db", "machine_learning", ex.OOV]
    assert len(fields[0].vocabulary) == 3


def test_real_field_population_stats():
    spec = ex.FieldSpec("years_experience", "real", "experience", "years_experience")
    docs = [doc({"experience": {"years_experience": "2"}}),
            doc({"experience": {"years_experience": "4"}})]
    fields = ex._fit_fields([spec], docs)
    assert fields[0].mean == 3.0
    assert fields[0].std == 1.0


def test_constant_real_field_names_field():
    spec = ex.FieldSpec("gpa", "real", "education", "gpa")
    docs = [doc({"education": {"gpa": "3.0"}}), doc({"education": {"gpa": "3.0"}})]
    with pytest.raises(ex.SchemaFitError, match="gpa"):
        ex._fit_fields([spec], docs)


def test_university_tier_derived_from_bundled_table():
    assert resources.university_ranking()["u7"] == 30
    spec = ex.FieldSpec("university_tier", "categorical", "education", "university",
                        derived="university_tier")
    assert ex._raw_value(doc({"education": {"university": "U7"}}), spec) == "top50"
    assert ex._raw_value(doc({"education": {"university": "u3"}}), spec) == "ranked_other"
    assert ex._raw_value(doc({"education": {"university": "nowhere_tech"}}), spec) == "unranked"


def test_fit_schema_train_only_refit_noop():
    corpus = make_corpus()
    split, resume_schema, post_schema = fitted(corpus)
    truncated = cp.Corpus(records=corpus.records[:split.train.stop],
                          posts=corpus.posts, config=corpus.config,
                          seed=corpus.seed)
    trunc_split = cp.DatasetSplit(train=split.train,
                                  validation=range(split.train.stop, split.train.stop),
                                  test=range(split.train.stop, split.train.stop))
    r2, p2 = ex.fit_schema(truncated, trunc_split)
    assert ex.schema_to_json(resume_schema, post_schema) == ex.schema_to_json(r2, p2)


def test_fit_schema_empty_train_rejected():
    corpus = make_corpus(applications=10)
    split = cp.DatasetSplit(train=range(0, 0), validation=range(0, 5), test=range(5, 10))
    with pytest.raises(ex.SchemaFitError):
        ex.fit_schema(corpus, split)


def test_default_field_counts():
    corpus = make_corpus()
    _, resume_schema, post_schema = fitted(corpus)
    assert resume_schema.s == 6 + 15
    assert post_schema.s == 6 + 3
    # latent_dim=9 default inventory matches the desk-scale shape
    assert len(ex.resume_field_specs()) == 24
    assert len(ex.post_field_specs()) == 12


# ---------------------------------------------------------------------------
# Extraction


def test_total_extraction_with_fallbacks():
    corpus = make_corpus()
    _, resume_schema, _ = fitted(corpus)
    by_name = {f.spec.name: (f, i) for i, f in enumerate(resume_schema.fields)}
    strange = doc({
        "profile": {"age": "27"},
        "education": {"university": "galactic polytechnic"},
    })
    entities = ex.extract_entities(strange, resume_schema)
    age_field, age_pos = by_name["age"]
    assert entities.values[age_pos] == 27.0
    uni_field, uni_pos = by_name["university"]
    assert uni_field.vocabulary[entities.values[uni_pos]] == ex.OOV
    # missing real values standardize to zero
    gpa_field, gpa_pos = by_name["gpa"]
    assert entities.values[gpa_pos] == gpa_field.mean


def test_post_skill_membership_lookup():
    corpus = make_corpus()
    _, _, post_schema = fitted(corpus)
    post = cp.PostDoc(fields={
        "requirements": {"skills": "python, ml", "seniority": "mid"},
        "meta": {"title": "ml_engineer", "location": "north"},
    }, sentences=["y"])
    entities = ex.extract_entities(post, post_schema)
    by_name = {f.spec.name: i for i, f in enumerate(post_schema.fields)}
    for name, expected in [("req_skill_python", "yes"),
                           ("req_skill_machine_learning", "yes"),
                           ("req_skill_sql", "no")]:
        pos = by_name[name]
        field = post_schema.fields[pos]
        assert field.vocabulary[entities.values[pos]] == expected


def test_extracted_skills_match_planted_truth():
    corpus = make_corpus(applications=1000, seed=3)
    split, resume_schema, _ = fitted(corpus)
    bank = cp.SKILL_BANK[:corpus.config.latent_dim]
    skill_pos = {s: i for i, f in enumerate(resume_schema.fields)
                 for s in bank if f.spec.name == f"skill_{s}"}
    for rec, truth in zip(corpus.records, corpus.truth.records):
        entities = ex.extract_entities(rec.resume, resume_schema)
        extracted = set()
        for s in bank:
            field = resume_schema.fields[skill_pos[s]]
            if field.vocabulary[entities.values[skill_pos[s]]] == "yes":
                extracted.add(s)
        assert extracted == set(truth.skills), f"record at t={rec.review_time}"


def test_extraction_deterministic():
    corpus = make_corpus()
    _, resume_schema, _ = fitted(corpus)
    rec = corpus.records[0]
    assert (ex.extract_entities(rec.resume, resume_schema)
            == ex.extract_entities(rec.resume, resume_schema))


# ---------------------------------------------------------------------------
# Sparse encoding


def tiny_schema():
    cat = ex.EntityField(
        spec=ex.FieldSpec("color", "categorical", "a", "color"),
        vocabulary=["blue", "red", ex.OOV],
        index={"blue": 0, "red": 1, ex.OOV: 2})
    real = ex.EntityField(
        spec=ex.FieldSpec("age", "real", "a", "age"), mean=30.0, std=5.0)
    return ex.EntitySchema(fields=[cat, real], side="resume")


def test_encode_sparse_examples():
    schema = tiny_schema()
    assert schema.d_x == 4
    sf = ex.encode_sparse(ex.EntityVector(values=(1, 30.0)), schema)
    assert sf.indices == (1, 3)
    assert sf.values == (1.0, 0.0)
    sf = ex.encode_sparse(ex.EntityVector(values=(0, 35.0)), schema)
    assert sf.indices == (0, 3)
    assert sf.values == (1.0, 1.0)


def test_encode_sparse_index_bounds_hard_failure():
    schema = tiny_schema()
    with pytest.raises(IndexError, match="color"):
        ex.encode_sparse(ex.EntityVector(values=(7, 30.0)), schema)


def test_active_slot_count_and_bounds_on_real_corpus():
    corpus = make_corpus()
    _, resume_schema, post_schema = fitted(corpus)
    for rec in corpus.records[:100]:
        sf = ex.encode_sparse(ex.extract_entities(rec.resume, resume_schema),
                              resume_schema)
        assert len(sf.indices) == resume_schema.s
        assert list(sf.indices) == sorted(sf.indices)
        assert sf.indices[-1] < resume_schema.d_x
    for post in corpus.posts.values():
        sf = ex.encode_sparse(ex.extract_entities(post, post_schema), post_schema)
        assert len(sf.indices) == post_schema.s
        assert sf.indices[-1] < post_schema.d_x


def test_standardized_train_stats():
    corpus = make_corpus()
    split, resume_schema, _ = fitted(corpus)
    train = [corpus.records[i] for i in split.train]
    real_positions = [i for i, f in enumerate(resume_schema.fields)
                      if f.spec.kind == "real"]
    columns = {i: [] for i in real_positions}
    for rec in train:
        sf = ex.encode_sparse(ex.extract_entities(rec.resume, resume_schema),
                              resume_schema)
        for i in real_positions:
            columns[i].append(sf.values[i])
    for i, col in columns.items():
        mean = sum(col) / len(col)
        var = sum((v - mean) ** 2 for v in col) / len(col)
        assert abs(mean) < 1e-9
        assert abs(var - 1.0) < 1e-9


def test_roundtrip_all_categorical_random_schemas():
    # Oracle: decode the active slots back to vocabulary indices by scanning
    # the slot layout; must reproduce the input entity vector exactly.
    import numpy as np
    rng = np.random.default_rng(5)
    for trial in range(50):
        n_fields = int(rng.integers(1, 6))
        fields = []
        for i in range(n_fields):
            size = int(rng.integers(1, 5))
            vocab = [f"v{i}_{j}" for j in range(size)] + [ex.OOV]
            fields.append(ex.EntityField(
                spec=ex.FieldSpec(f"f{i}", "categorical", "a", f"k{i}"),
                vocabulary=vocab, index={v: k for k, v in enumerate(vocab)}))
        schema = ex.EntitySchema(fields=fields, side="resume")
        entities = ex.EntityVector(values=tuple(
            int(rng.integers(0, len(f.vocabulary))) for f in fields))
        sf = ex.encode_sparse(entities, schema)
        decoded = []
        for f, off, flat in zip(schema.fields, schema.offsets, sf.indices):
            assert off <= flat < off + f.width
            decoded.append(flat - off)
        assert tuple(decoded) == entities.values
