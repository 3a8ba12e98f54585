"""Summary generation (greedy/beam) and ROUGE-1/2/L scoring.

ROUGE is computed on token id sequences (the vocabulary is lowercased
word-level, so this matches tokenized lowercase text), with clipped
multiset n-gram overlap and sentence-level LCS. No stemming, no stopword
removal.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import BOS_ID, EOS_ID, PAD_ID, Example


@dataclass
class RougeScore:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_counts(cls, overlap: float, hyp_total: float, ref_total: float) -> "RougeScore":
        p = overlap / hyp_total if hyp_total else 0.0
        r = overlap / ref_total if ref_total else 0.0
        f = 2 * p * r / (p + r) if (p + r) else 0.0
        return cls(precision=p, recall=r, f1=f)


@dataclass
class RougeTriple:
    rouge1: RougeScore
    rouge2: RougeScore
    rougeL: RougeScore


@dataclass
class DecodeConfig:
    strategy: str = "greedy"
    beam_width: int = 4
    max_len: int = 128
    length_penalty: float = 1.0

    def __post_init__(self):
        if self.strategy not in ("greedy", "beam"):
            raise ValueError(f"strategy must be greedy or beam, got {self.strategy!r}")
        if self.beam_width < 1 or self.max_len < 1:
            raise ValueError("beam_width and max_len must be >= 1")


def _ngram_counts(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(hyp_tokens: Sequence, ref_tokens: Sequence, n: int) -> RougeScore:
    """Clipped n-gram overlap: precision over hyp n-grams, recall over ref."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(hyp_tokens) < n or len(ref_tokens) < n:
        return RougeScore(0.0, 0.0, 0.0)
    hyp = _ngram_counts(hyp_tokens, n)
    ref = _ngram_counts(ref_tokens, n)
    overlap = sum(min(count, ref[gram]) for gram, count in hyp.items())
    return RougeScore.from_counts(overlap, sum(hyp.values()), sum(ref.values()))


def _lcs_length(a: Sequence, b: Sequence) -> int:
    la, lb = len(a), len(b)
    prev = [0] * (lb + 1)
    for i in range(1, la + 1):
        row = [0] * (lb + 1)
        ai = a[i - 1]
        for j in range(1, lb + 1):
            if ai == b[j - 1]:
                row[j] = prev[j - 1] + 1
            else:
                row[j] = max(prev[j], row[j - 1])
        prev = row
    return prev[lb]


def rouge_l(hyp_tokens: Sequence, ref_tokens: Sequence) -> RougeScore:
    """Sentence-level LCS: P = LCS/|hyp|, R = LCS/|ref|."""
    if not hyp_tokens or not ref_tokens:
        return RougeScore(0.0, 0.0, 0.0)
    lcs = _lcs_length(hyp_tokens, ref_tokens)
    return RougeScore.from_counts(lcs, len(hyp_tokens), len(ref_tokens))


def score_pair(hyp_tokens: Sequence, ref_tokens: Sequence) -> RougeTriple:
    return RougeTriple(
        rouge1=rouge_n(hyp_tokens, ref_tokens, 1),
        rouge2=rouge_n(hyp_tokens, ref_tokens, 2),
        rougeL=rouge_l(hyp_tokens, ref_tokens),
    )


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------


def _penalized(logprob: float, steps: int, penalty: float) -> float:
    return logprob / (steps**penalty) if steps else -np.inf


def _step_logprobs(model, memory, src_ids: np.ndarray, prefix: list[int]) -> np.ndarray:
    tgt_in = np.array([prefix], dtype=np.int64)
    logits = model.decode_logits(memory, src_ids, tgt_in).data[0, -1].copy()
    logits[[PAD_ID, BOS_ID]] = -1e30  # structural tokens are never generated
    shifted = logits - logits.max()
    return shifted - np.log(np.exp(shifted).sum())


def strip_sequence(ids: Sequence[int]) -> list[int]:
    """Drop [BOS]/[EOS]/[PAD] framing from a decoded or reference sequence."""
    return [int(t) for t in ids if int(t) not in (BOS_ID, EOS_ID, PAD_ID)]


def _greedy(model, memory, src_ids: np.ndarray, max_len: int) -> tuple[list[int], float, int]:
    prefix = [BOS_ID]
    logprob = 0.0
    steps = 0
    for _ in range(max_len):
        lp = _step_logprobs(model, memory, src_ids, prefix)
        nxt = int(lp.argmax())
        logprob += float(lp[nxt])
        steps += 1
        if nxt == EOS_ID:
            break
        prefix.append(nxt)
    return prefix[1:], logprob, steps


def decode(model, src_ids: np.ndarray, config: DecodeConfig) -> list[int]:
    """Generate a summary for one source sequence.

    The returned ids exclude [BOS]/[EOS]. Beam search returns the completed
    hypothesis with the best length-penalized score; the greedy rollout is
    kept in the candidate pool, so beam never scores below greedy.
    """
    src_ids = np.asarray(src_ids)
    if src_ids.ndim == 1:
        src_ids = src_ids[None, :]
    memory = model.encode(src_ids)
    max_len = min(config.max_len, model.cfg.max_tgt_len - 1)

    greedy_tokens, greedy_lp, greedy_steps = _greedy(model, memory, src_ids, max_len)
    if config.strategy == "greedy" or config.beam_width == 1:
        return greedy_tokens

    width = config.beam_width
    beams: list[tuple[list[int], float, int]] = [([BOS_ID], 0.0, 0)]
    finished: list[tuple[list[int], float, int]] = [
        ([BOS_ID] + greedy_tokens, greedy_lp, greedy_steps)
    ]
    for _ in range(max_len):
        candidates: list[tuple[list[int], float, int]] = []
        for prefix, logprob, steps in beams:
            lp = _step_logprobs(model, memory, src_ids, prefix)
            top = np.argsort(-lp)[:width]
            for tok in top:
                tok = int(tok)
                cand = (prefix + [tok], logprob + float(lp[tok]), steps + 1)
                if tok == EOS_ID:
                    finished.append((cand[0][:-1], cand[1], cand[2]))
                else:
                    candidates.append(cand)
        if not candidates:
            break
        candidates.sort(key=lambda c: (-c[1], c[0]))
        beams = candidates[:width]
    pool = finished if finished else beams
    best = max(pool, key=lambda c: _penalized(c[1], c[2], config.length_penalty))
    return [t for t in best[0] if t != BOS_ID]


def decode_score(model, src_ids: np.ndarray, config: DecodeConfig) -> tuple[list[int], float]:
    """Decoded tokens plus their length-penalized log-probability."""
    tokens = decode(model, src_ids, config)
    src = np.asarray(src_ids)
    if src.ndim == 1:
        src = src[None, :]
    memory = model.encode(src)
    prefix = [BOS_ID]
    logprob = 0.0
    for tok in tokens + [EOS_ID]:
        lp = _step_logprobs(model, memory, src, prefix)
        logprob += float(lp[tok])
        prefix.append(tok)
    return tokens, _penalized(logprob, len(tokens) + 1, config.length_penalty)


# ---------------------------------------------------------------------------
# corpus evaluation
# ---------------------------------------------------------------------------

EVAL_HEADER = [
    "example",
    "r1_p", "r1_r", "r1_f",
    "r2_p", "r2_r", "r2_f",
    "rl_p", "rl_r", "rl_f",
]


def evaluate_corpus(model, examples: Sequence[Example], config: DecodeConfig):
    """Decode and score every example; returns (per-example rows, mean triple)."""
    if not examples:
        raise ValueError("cannot evaluate an empty example list")
    rows = []
    for ex in examples:
        hyp = strip_sequence(decode(model, ex.article, config))
        ref = strip_sequence(ex.summary)
        rows.append((f"{ex.source_corpus}:{ex.index}", score_pair(hyp, ref)))
    mean = RougeTriple(
        rouge1=_mean_score([t.rouge1 for _, t in rows]),
        rouge2=_mean_score([t.rouge2 for _, t in rows]),
        rougeL=_mean_score([t.rougeL for _, t in rows]),
    )
    return rows, mean


def _mean_score(scores: Sequence[RougeScore]) -> RougeScore:
    return RougeScore(
        precision=float(np.mean([s.precision for s in scores])),
        recall=float(np.mean([s.recall for s in scores])),
        f1=float(np.mean([s.f1 for s in scores])),
    )


def _score_row(name: str, triple: RougeTriple) -> list:
    return [name] + [
        f"{v:.6f}"
        for s in (triple.rouge1, triple.rouge2, triple.rougeL)
        for v in (s.precision, s.recall, s.f1)
    ]


def write_eval_csv(rows, mean: RougeTriple, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(EVAL_HEADER)
        for name, triple in rows:
            writer.writerow(_score_row(name, triple))
        writer.writerow(_score_row("aggregate", mean))


def read_eval_csv(path) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != EVAL_HEADER:
            raise ValueError(f"unexpected eval report header: {header}")
        for row in reader:
            out[row[0]] = {k: float(v) for k, v in zip(header[1:], row[1:])}
    return out
