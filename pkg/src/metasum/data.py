"""Vocabulary, corpus ingestion, and MAML task sampling.

Corpora are JSON Lines files of {"article": ..., "summary": ...} objects.
Tokenization is word-level (whitespace + punctuation, lowercased) with a
frequency-ranked vocabulary; article sides get [CLS]/[SEP] per sentence,
summary sides get [BOS]/[EOS].
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[BOS]", "[EOS]")
PAD_ID, UNK_ID, CLS_ID, SEP_ID, BOS_ID, EOS_ID = range(6)

_TOKEN_RE = re.compile(r"[a-z0-9']+|[^a-z0-9\s]")
_SENTENCE_END = {".", "!", "?"}

DEFAULT_CORPUS_CAP = 40_000


class CorpusFormatError(ValueError):
    """A corpus file line failed to parse; carries the 1-based line number."""

    def __init__(self, path, line_no: int, reason: str):
        super().__init__(f"{path}: line {line_no}: {reason}")
        self.line_no = line_no


def tokenize(text: str) -> list[str]:
    """Lowercased word/punctuation tokens."""
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: Iterable[str]) -> str:
    return " ".join(tokens)


def split_sentences(tokens: Sequence[str]) -> list[list[str]]:
    """Split a token stream after sentence-final . ! ? marks."""
    sentences: list[list[str]] = []
    current: list[str] = []
    for tok in tokens:
        current.append(tok)
        if tok in _SENTENCE_END:
            sentences.append(current)
            current = []
    if current:
        sentences.append(current)
    return sentences


class Vocabulary:
    """Dense token ids with the special tokens pinned to the lowest ids."""

    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the special tokens")
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")

    @property
    def size(self) -> int:
        return len(self.tokens)

    @classmethod
    def build(cls, texts: Iterable[str], size_cap: int) -> "Vocabulary":
        """Frequency-ranked vocabulary; ties broken alphabetically."""
        if size_cap <= len(SPECIAL_TOKENS):
            raise ValueError(f"size_cap must exceed {len(SPECIAL_TOKENS)}")
        counts: dict[str, int] = {}
        for text in texts:
            for tok in tokenize(text):
                counts[tok] = counts.get(tok, 0) + 1
        ranked = sorted(counts, key=lambda t: (-counts[t], t))
        room = size_cap - len(SPECIAL_TOKENS)
        return cls(list(SPECIAL_TOKENS) + ranked[:room])

    def encode_tokens(self, tokens: Iterable[str]) -> list[int]:
        unk = UNK_ID
        return [self.index.get(tok, unk) for tok in tokens]

    def decode(self, ids: Iterable[int], skip_special: bool = True) -> str:
        toks = []
        for i in ids:
            if skip_special and i < len(SPECIAL_TOKENS):
                continue
            toks.append(self.tokens[int(i)])
        return detokenize(toks)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([line for line in lines if line])


@dataclass
class Example:
    """One tokenized article/summary pair tagged with its origin."""

    article: np.ndarray
    summary: np.ndarray
    source_corpus: str
    index: int

    @property
    def uid(self) -> tuple[str, int]:
        return (self.source_corpus, self.index)


@dataclass
class Corpus:
    name: str
    examples: list[Example] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.examples)


def encode_article(text: str, vocab: Vocabulary, max_len: int) -> np.ndarray:
    """[CLS] sentence [SEP] per sentence, truncated to max_len."""
    ids: list[int] = []
    for sentence in split_sentences(tokenize(text)):
        ids.append(CLS_ID)
        ids.extend(vocab.encode_tokens(sentence))
        ids.append(SEP_ID)
    return np.array(ids[:max_len], dtype=np.int64)


def encode_summary(text: str, vocab: Vocabulary, max_len: int) -> np.ndarray:
    body = vocab.encode_tokens(tokenize(text))[: max_len - 2]
    return np.array([BOS_ID] + body + [EOS_ID], dtype=np.int64)


def load_corpus(
    path,
    vocab: Vocabulary,
    name: str | None = None,
    max_examples: int = DEFAULT_CORPUS_CAP,
    max_src_len: int = 512,
    max_tgt_len: int = 128,
) -> Corpus:
    """Read a JSON Lines corpus, tokenize, truncate, and cap (first-seen order)."""
    path = Path(path)
    corpus = Corpus(name=name or path.stem)
    with path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if len(corpus.examples) >= max_examples:
                break
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(path, line_no, f"invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise CorpusFormatError(path, line_no, "expected a JSON object")
            for key in ("article", "summary"):
                if key not in obj or not isinstance(obj[key], str):
                    raise CorpusFormatError(path, line_no, f'missing string field "{key}"')
            article = encode_article(obj["article"], vocab, max_src_len)
            summary = encode_summary(obj["summary"], vocab, max_tgt_len)
            if article.size == 0 or summary.size <= 2:
                raise CorpusFormatError(path, line_no, "article or summary empty after tokenization")
            corpus.examples.append(
                Example(article, summary, corpus.name, len(corpus.examples))
            )
    if not corpus.examples:
        raise CorpusFormatError(path, 0, "corpus is empty")
    return corpus


@dataclass
class Task:
    """K-shot adaptation task: disjoint train/test splits from one corpus."""

    train: list[Example]
    test: list[Example]
    corpus: str


@dataclass
class MetaBatch:
    tasks: list[Task]


def sample_task(corpus: Corpus, k: int, rng: np.random.Generator) -> Task:
    """Draw 2K distinct examples without replacement; split K/K train/test."""
    if len(corpus) < 2 * k:
        raise ValueError(
            f"corpus {corpus.name!r} has {len(corpus)} examples, needs >= {2 * k}"
        )
    picks = rng.choice(len(corpus), size=2 * k, replace=False)
    train = [corpus.examples[i] for i in picks[:k]]
    test = [corpus.examples[i] for i in picks[k:]]
    return Task(train=train, test=test, corpus=corpus.name)


@dataclass
class RoundRobinState:
    """Cursor into the corpus cycle so long-run task counts stay balanced."""

    position: int = 0


def build_meta_batch(
    corpora: Sequence[Corpus],
    tasks_per_batch: int,
    k: int,
    state: RoundRobinState,
    rng: np.random.Generator,
) -> MetaBatch:
    if not corpora:
        raise ValueError("no corpora registered")
    if tasks_per_batch < 1:
        raise ValueError("tasks_per_batch must be >= 1")
    tasks = []
    for _ in range(tasks_per_batch):
        corpus = corpora[state.position % len(corpora)]
        state.position += 1
        tasks.append(sample_task(corpus, k, rng))
    return MetaBatch(tasks=tasks)


def collate(examples: Sequence[Example]) -> tuple[np.ndarray, np.ndarray]:
    """Pad a batch of examples to rectangular (src, tgt) id arrays."""
    if not examples:
        raise ValueError("cannot collate an empty batch")
    s_max = max(ex.article.size for ex in examples)
    t_max = max(ex.summary.size for ex in examples)
    src = np.full((len(examples), s_max), PAD_ID, dtype=np.int64)
    tgt = np.full((len(examples), t_max), PAD_ID, dtype=np.int64)
    for i, ex in enumerate(examples):
        src[i, : ex.article.size] = ex.article
        tgt[i, : ex.summary.size] = ex.summary
    return src, tgt


def write_jsonl(path, records: Iterable[dict]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def iter_batches(
    examples: Sequence[Example], batch_size: int, rng: np.random.Generator
) -> Iterator[list[Example]]:
    """Endless shuffled mini-batches (reshuffles each epoch)."""
    n = len(examples)
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            chunk = order[start : start + batch_size]
            yield [examples[i] for i in chunk]
