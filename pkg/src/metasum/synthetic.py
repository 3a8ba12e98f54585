"""Template-generated article/summary corpora with shared structure.

Articles are short sequences of "<subject> <verb> the <object> near the
<place> ." sentences. The summary compresses one sentence to its content
words; which sentence depends on the corpus style:

  first  - summary restates the first sentence (pretraining default)
  second - summary restates the second sentence (the task family's shared
           twist, so a freshly pretrained trainable set starts with the
           wrong retrieval prior)
  last   - summary restates the last sentence

Different corpora draw their subjects and objects from different pool
slices, giving the domain shift that source-selection criteria and
meta-learning are supposed to handle.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import Vocabulary, write_jsonl

SUBJECTS = [
    "alice", "bob", "carol", "david", "erin", "frank", "grace", "henry",
    "irene", "jack", "karen", "liam", "mona", "nate", "olga", "peter",
    "quinn", "rosa", "sam", "tina", "ursula", "victor", "wendy", "xavier",
]
VERBS = [
    "visited", "painted", "repaired", "sold", "bought", "found",
    "cleaned", "measured", "borrowed", "returned", "opened", "closed",
]
OBJECTS = [
    "house", "car", "bridge", "garden", "boat", "mill", "tower", "fence",
    "barn", "library", "market", "workshop", "cabin", "orchard", "well",
    "windmill", "granary", "cottage", "stable", "forge", "dock", "chapel",
    "silo", "greenhouse",
]
PLACES = [
    "river", "hill", "village", "forest", "meadow", "harbor",
    "valley", "square", "road", "lake", "field", "canal",
]

STYLES = ("first", "second", "last")


def all_template_words() -> list[str]:
    structural = ["the", "near", "."]
    return sorted(set(SUBJECTS + VERBS + OBJECTS + PLACES + structural))


def family_vocabulary(size_cap: int = 128) -> Vocabulary:
    """Vocabulary covering every template word (deterministic)."""
    return Vocabulary.build([" ".join(all_template_words())], size_cap=size_cap)


def generate_records(
    rng: np.random.Generator,
    n: int,
    style: str,
    subjects: list[str] | None = None,
    objects: list[str] | None = None,
    min_sentences: int = 2,
    max_sentences: int = 3,
) -> list[dict]:
    """n article/summary pairs in the given style."""
    if style not in STYLES:
        raise ValueError(f"style must be one of {STYLES}, got {style!r}")
    subjects = subjects or SUBJECTS
    objects = objects or OBJECTS
    records = []
    for _ in range(n):
        n_sent = int(rng.integers(min_sentences, max_sentences + 1))
        sentences = []
        for _ in range(n_sent):
            s = subjects[rng.integers(len(subjects))]
            v = VERBS[rng.integers(len(VERBS))]
            o = objects[rng.integers(len(objects))]
            p = PLACES[rng.integers(len(PLACES))]
            sentences.append((s, v, o, p))
        article = " ".join(f"{s} {v} the {o} near the {p} ." for s, v, o, p in sentences)
        pick = {"first": 0, "second": 1, "last": n_sent - 1}[style]
        s, v, o, _ = sentences[pick]
        records.append({"article": article, "summary": f"{s} {v} {o}"})
    return records


def _pool_slice(pool: list[str], index: int, width: int) -> list[str]:
    start = (index * width // 2) % len(pool)
    doubled = pool + pool
    return doubled[start : start + width]


def make_family(
    out_dir,
    seed: int = 0,
    n_pretrain: int = 512,
    n_source: int = 64,
    n_val: int = 48,
    n_target: int = 48,
    n_sources: int = 3,
    pretrain_style: str = "first",
    family_style: str = "second",
) -> dict[str, Path]:
    """Write the full experiment family of JSONL corpora; returns the paths.

    Pretraining uses one style over every pool; sources, validation, and
    target share the family style with per-corpus pool slices.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng((seed, 0xFA))
    paths: dict[str, Path] = {}

    paths["pretrain"] = out_dir / "pretrain.jsonl"
    write_jsonl(paths["pretrain"], generate_records(rng, n_pretrain, pretrain_style))

    for i in range(n_sources):
        name = f"src_{chr(ord('a') + i)}"
        records = generate_records(
            rng, n_source, family_style,
            subjects=_pool_slice(SUBJECTS, i, 12),
            objects=_pool_slice(OBJECTS, i, 12),
        )
        paths[name] = out_dir / f"{name}.jsonl"
        write_jsonl(paths[name], records)

    paths["validation"] = out_dir / "validation.jsonl"
    write_jsonl(paths["validation"], generate_records(
        rng, n_val, family_style,
        subjects=_pool_slice(SUBJECTS, n_sources, 12),
        objects=_pool_slice(OBJECTS, n_sources, 12),
    ))

    paths["target"] = out_dir / "target.jsonl"
    write_jsonl(paths["target"], generate_records(
        rng, n_target, family_style,
        subjects=_pool_slice(SUBJECTS, n_sources + 1, 12),
        objects=_pool_slice(OBJECTS, n_sources + 1, 12),
    ))
    return paths
