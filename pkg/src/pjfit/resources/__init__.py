"""Bundled lookup tables: university ranking and entity alias canonicalization."""

from __future__ import annotations

from functools import lru_cache
from importlib import resources


def _read_tsv(name: str):
    path = resources.files("pjfit.resources").joinpath(name)
    lines = path.read_text(encoding="utf-8").strip().splitlines()
    rows = [line.split("\t") for line in lines[1:]]
    return rows


@lru_cache(maxsize=None)
def university_ranking() -> dict:
    """Canonical university name -> integer rank."""
    return {name: int(rank) for name, rank in _read_tsv("university_ranking.tsv")}


@lru_cache(maxsize=None)
def alias_table() -> dict:
    """Alias form -> canonical entity name (skills and universities)."""
    return {alias: canonical for alias, canonical in _read_tsv("entity_aliases.tsv")}


@lru_cache(maxsize=None)
def aliases_of() -> dict:
    """Canonical name -> tuple of alias forms (for synthetic document emission)."""
    reverse: dict = {}
    for alias, canonical in alias_table().items():
        reverse.setdefault(canonical, []).append(alias)
    return {k: tuple(sorted(v)) for k, v in reverse.items()}


def canonicalize(value: str) -> str:
    """Lowercase, strip and resolve through the alias table."""
    v = value.strip().lower()
    return alias_table().get(v, v)


def university_tier(university: str) -> str:
    """Rank bucket for a canonical university name; unknown names are unranked."""
    rank = university_ranking().get(university)
    if rank is None:
        return "unranked"
    if rank <= 10:
        return "top10"
    if rank <= 50:
        return "top50"
    if rank <= 100:
        return "top100"
    return "ranked_other"
