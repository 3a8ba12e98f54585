"""Source-corpus affinity under five criteria, plus average-rank selection.

The criteria at article level:

  embedding        - normalized inner product of mean-pooled encoder outputs
  cosine           - n(S_A & S_B) / sqrt(n(S_A) * n(S_B)) over word sets
  length           - abs(L_A - L_B) over token counts (smaller = more similar)
  rouge2_recall    - clipped common bigrams / target bigrams
  rouge2_precision - clipped common bigrams / source bigrams

Corpus level: embedding and cosine are means over a seeded sample of article
pairs, rouge2 is computed on the concatenated sampled articles, and length
compares mean article lengths. Selection ranks candidates by the mean rank
of cosine, rouge2_precision, and length.
"""

from __future__ import annotations

import csv
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .data import Corpus, Example, PAD_ID

CRITERIA = ("embedding", "cosine", "length", "rouge2_recall", "rouge2_precision")
SELECTION_CRITERIA = ("cosine", "rouge2_precision", "length")
DEFAULT_PAIR_SAMPLE = 500

# length ranks ascending (smaller difference = more similar); the rest descend
_ASCENDING = {"length"}


@dataclass
class SimilarityScore:
    criterion: str
    source: str
    value: float


@dataclass
class RankingReport:
    target: str
    orderings: dict[str, list[str]]
    scores: dict[str, dict[str, float]]
    average_rank: dict[str, float]
    selected: list[str]
    flags: list[str] = field(default_factory=list)


def cosine_set_similarity(a: set, b: set) -> float:
    """n(A & B) / sqrt(n(A) * n(B)); symmetric, 1.0 iff identical sets."""
    if not a or not b:
        raise ValueError("word sets must be nonempty")
    return len(a & b) / np.sqrt(len(a) * len(b))


def _bigram_counts(tokens: Sequence) -> Counter:
    return Counter(zip(tokens, tokens[1:]))


def _clipped_overlap(a: Counter, b: Counter) -> int:
    return sum(min(count, b[gram]) for gram, count in a.items())


def rouge2_recall(source_tokens: Sequence, target_tokens: Sequence) -> float:
    """Clipped common bigrams over target bigrams (coverage)."""
    if len(source_tokens) < 2 or len(target_tokens) < 2:
        warnings.warn("text shorter than a bigram; similarity defined as 0")
        return 0.0
    src, tgt = _bigram_counts(source_tokens), _bigram_counts(target_tokens)
    return _clipped_overlap(src, tgt) / sum(tgt.values())


def rouge2_precision(source_tokens: Sequence, target_tokens: Sequence) -> float:
    """Clipped common bigrams over source bigrams (information density)."""
    if len(source_tokens) < 2 or len(target_tokens) < 2:
        warnings.warn("text shorter than a bigram; similarity defined as 0")
        return 0.0
    src, tgt = _bigram_counts(source_tokens), _bigram_counts(target_tokens)
    return _clipped_overlap(src, tgt) / sum(src.values())


def length_similarity(length_a: float, length_b: float) -> float:
    if length_a < 0 or length_b < 0:
        raise ValueError("token counts must be nonnegative")
    return abs(length_a - length_b)


def mean_pool(hidden: np.ndarray, token_ids: np.ndarray) -> np.ndarray:
    """Average encoder states over non-pad positions."""
    keep = token_ids != PAD_ID
    if not keep.any():
        raise ValueError("cannot pool an all-pad sequence")
    return hidden[keep].mean(axis=0)


def normalized_inner_product(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0.0:
        return 0.0
    return float(a @ b / denom)


def embedding_similarity(
    embed_fn: Callable[[np.ndarray], np.ndarray],
    articles_a: Sequence[np.ndarray],
    articles_b: Sequence[np.ndarray],
) -> float:
    """Mean normalized inner product over paired document embeddings."""
    n = min(len(articles_a), len(articles_b))
    if n == 0:
        raise ValueError("need at least one article pair")
    values = [
        normalized_inner_product(embed_fn(articles_a[i]), embed_fn(articles_b[i]))
        for i in range(n)
    ]
    return float(np.mean(values))


def model_document_embedder(model) -> Callable[[np.ndarray], np.ndarray]:
    """Embed one article id sequence via the encoder, mean-pooled."""

    def embed(ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids)
        hidden = model.encode(ids[None, :]).data[0]
        return mean_pool(hidden, ids)

    return embed


_N_SPECIALS = 6  # [PAD] [UNK] [CLS] [SEP] [BOS] [EOS] carry no word content


def _article_words(example: Example) -> set[int]:
    return {int(t) for t in example.article if t >= _N_SPECIALS}


def _content_tokens(example: Example) -> list[int]:
    return [int(t) for t in example.article if t >= _N_SPECIALS]


def _sample(corpus: Corpus, size: int, rng: np.random.Generator) -> list[Example]:
    n = min(size, len(corpus))
    idx = rng.choice(len(corpus), size=n, replace=False)
    return [corpus.examples[i] for i in idx]


def corpus_similarity(
    target: Corpus,
    candidate: Corpus,
    criterion: str,
    rng: np.random.Generator,
    embed_fn: Callable[[np.ndarray], np.ndarray] | None = None,
    sample_size: int = DEFAULT_PAIR_SAMPLE,
) -> float:
    """One corpus-level score; the rng drives the article sample."""
    tgt_sample = _sample(target, sample_size, rng)
    cand_sample = _sample(candidate, sample_size, rng)
    if criterion == "cosine":
        n = min(len(tgt_sample), len(cand_sample))
        vals = [
            cosine_set_similarity(_article_words(cand_sample[i]), _article_words(tgt_sample[i]))
            for i in range(n)
        ]
        return float(np.mean(vals))
    if criterion == "length":
        mean_tgt = float(np.mean([ex.article.size for ex in tgt_sample]))
        mean_cand = float(np.mean([ex.article.size for ex in cand_sample]))
        return length_similarity(mean_cand, mean_tgt)
    if criterion == "rouge2_recall":
        src = [t for ex in cand_sample for t in _content_tokens(ex)]
        tgt = [t for ex in tgt_sample for t in _content_tokens(ex)]
        return rouge2_recall(src, tgt)
    if criterion == "rouge2_precision":
        src = [t for ex in cand_sample for t in _content_tokens(ex)]
        tgt = [t for ex in tgt_sample for t in _content_tokens(ex)]
        return rouge2_precision(src, tgt)
    if criterion == "embedding":
        if embed_fn is None:
            raise ValueError("embedding criterion needs an encoder")
        return embedding_similarity(
            embed_fn,
            [ex.article for ex in cand_sample],
            [ex.article for ex in tgt_sample],
        )
    raise ValueError(f"unknown criterion {criterion!r}")


def _order(values: Mapping[str, float], criterion: str) -> list[str]:
    ascending = criterion in _ASCENDING
    return sorted(values, key=lambda name: (values[name] if ascending else -values[name], name))


def rank_and_select(
    target: Corpus,
    candidates: Sequence[Corpus],
    k: int,
    embed_fn: Callable[[np.ndarray], np.ndarray] | None = None,
    seed: int = 0,
    sample_size: int = DEFAULT_PAIR_SAMPLE,
    encoder_trained: bool = True,
) -> RankingReport:
    """Rank candidates under all five criteria; select top-k by average rank.

    The average uses cosine, rouge2_precision, and length; ties break by
    corpus name ascending. Deterministic for a fixed seed.
    """
    if k > len(candidates):
        raise ValueError(f"k={k} exceeds {len(candidates)} candidates")
    names = [c.name for c in candidates]
    if len(set(names)) != len(names):
        raise ValueError("candidate corpus names must be unique")

    flags = []
    if embed_fn is None:
        flags.append("embedding criterion skipped: no encoder supplied")
    elif not encoder_trained:
        flags.append("embedding criterion computed with an untrained encoder")

    scored: list[SimilarityScore] = []
    for criterion in CRITERIA:
        if criterion == "embedding" and embed_fn is None:
            continue
        for cand in candidates:
            rng = np.random.default_rng((seed, CRITERIA.index(criterion), names.index(cand.name)))
            value = corpus_similarity(
                target, cand, criterion, rng, embed_fn=embed_fn, sample_size=sample_size
            )
            scored.append(SimilarityScore(criterion=criterion, source=cand.name, value=value))
    scores: dict[str, dict[str, float]] = {}
    for s in scored:
        scores.setdefault(s.criterion, {})[s.source] = s.value

    orderings = {crit: _order(vals, crit) for crit, vals in scores.items()}
    ranks: dict[str, dict[str, int]] = {
        crit: {name: i + 1 for i, name in enumerate(order)}
        for crit, order in orderings.items()
    }
    average_rank = {
        name: float(np.mean([ranks[c][name] for c in SELECTION_CRITERIA]))
        for name in names
    }
    selected = sorted(names, key=lambda n: (average_rank[n], n))[:k]
    return RankingReport(
        target=target.name,
        orderings=orderings,
        scores=scores,
        average_rank=average_rank,
        selected=selected,
        flags=flags,
    )


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

REPORT_HEADER = ["criterion", "rank", "corpus", "value"]


def write_report_csv(report: RankingReport, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_HEADER)
        for criterion, order in report.orderings.items():
            for rank, name in enumerate(order, start=1):
                writer.writerow([criterion, rank, name, f"{report.scores[criterion][name]:.6f}"])
        for name in sorted(report.average_rank, key=lambda n: (report.average_rank[n], n)):
            writer.writerow(["average_rank", "", name, f"{report.average_rank[name]:.3f}"])
        for name in report.selected:
            writer.writerow(["selected", "", name, ""])


def read_report_csv(path) -> dict[str, list[tuple[str, str]]]:
    """Parse a ranking CSV back into criterion -> [(corpus, value), ...]."""
    out: dict[str, list[tuple[str, str]]] = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != REPORT_HEADER:
            raise ValueError(f"unexpected ranking report header: {header}")
        for criterion, _, name, value in reader:
            out.setdefault(criterion, []).append((name, value))
    return out


def write_report_text(report: RankingReport, path) -> None:
    """Human-readable summary: one 'criterion: high -> low' line per criterion."""
    lines = [f"target: {report.target}", ""]
    lines.append("similarity (high -> low):")
    for criterion, order in report.orderings.items():
        lines.append(f"  {criterion:<17} {', '.join(order)}")
    lines.append("")
    lines.append("average rank (cosine, rouge2_precision, length):")
    for name in sorted(report.average_rank, key=lambda n: (report.average_rank[n], n)):
        lines.append(f"  {name:<20} {report.average_rank[name]:.3f}")
    lines.append("")
    lines.append(f"selected top-{len(report.selected)}: {', '.join(report.selected)}")
    for flag in report.flags:
        lines.append(f"note: {flag}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


RANKING_SECTIONS = ((1, 3), (3, 5), (4, 6), (5, 7), (7, 9))


def section_manifests(order: Sequence[str]) -> dict[str, list[str]]:
    """The five overlapping rank sections used for the criterion sweep."""
    out = {}
    for lo, hi in RANKING_SECTIONS:
        if hi > len(order):
            raise ValueError(f"section [{lo}-{hi}] needs >= {hi} ranked corpora")
        out[f"{lo}-{hi}"] = list(order[lo - 1 : hi])
    return out
