"""Shared test utilities: oracles, tiny fixtures, the end-to-end grad probe."""

from functools import lru_cache

import numpy as np

import metasum.autodiff as ad
from metasum import model as M


def oracle_rouge_n(hyp, ref, n):
    """Clipped counting via explicit list removal (no Counter)."""
    hyp_grams = [tuple(hyp[i : i + n]) for i in range(len(hyp) - n + 1)]
    ref_grams = [tuple(ref[i : i + n]) for i in range(len(ref) - n + 1)]
    pool = list(ref_grams)
    overlap = 0
    for gram in hyp_grams:
        if gram in pool:
            pool.remove(gram)
            overlap += 1
    p = overlap / len(hyp_grams) if hyp_grams else 0.0
    r = overlap / len(ref_grams) if ref_grams else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def oracle_lcs(a, b):
    """Top-down memoized recursion, independent of the iterative DP."""
    a, b = tuple(a), tuple(b)

    @lru_cache(maxsize=None)
    def rec(i, j):
        if i == 0 or j == 0:
            return 0
        if a[i - 1] == b[j - 1]:
            return rec(i - 1, j - 1) + 1
        return max(rec(i - 1, j), rec(i, j - 1))

    return rec(len(a), len(b))


def tiny_grad_check_model(seed=0):
    """hidden 8, 2 heads, vocab 50 model plus a seq-12 batch."""
    cfg = M.ModelConfig.tiny(
        hidden_dim=8, num_heads=2, ff_dim=16, adapter_dim=2,
        vocab_size=50, max_src_len=12, max_tgt_len=12,
    )
    model = M.Summarizer.build(cfg, seed=seed)
    rng = np.random.default_rng(1000 + seed)
    src = rng.integers(6, cfg.vocab_size, size=(2, 12))
    src[:, 0] = 2  # [CLS]
    tgt = rng.integers(6, cfg.vocab_size, size=(2, 8))
    tgt[:, 0] = 4  # [BOS]
    tgt[:, -1] = 5  # [EOS]
    return model, src, tgt


def end_to_end_grad_check(model, src, tgt, seed, probes_per_tensor=8,
                          eps=1e-5, tol=1e-4, max_tensors=None):
    """grad_check of the full encode+decode NLL w.r.t. each parameter tensor.

    Returns the worst relative error across the probed coordinates.
    """
    rng = np.random.default_rng(seed)
    names = sorted(model.store.all())
    if max_tensors is not None and len(names) > max_tensors:
        names = [names[i] for i in rng.choice(len(names), size=max_tensors, replace=False)]
    worst = 0.0
    for name in names:
        original = model.store.all()[name]

        def loss_fn(x, name=name, original=original):
            total, n = model.batch_nll(src, tgt, params={name: x})
            return ad.scale(total, 1.0 / n)

        report = ad.grad_check(
            loss_fn, original, eps=eps, tol=tol,
            rng=rng, max_probes=probes_per_tensor,
        )
        worst = max(worst, report.max_rel_error)
        assert report.passed, f"{name}: {report}"
    return worst
