#!/usr/bin/env python3
"""Gradient-norm dynamics: adapter-only vs full-model meta-training.

Runs both trainable modes on the synthetic family (the full-model run on a
deepened config) and writes the two gradient-norm logs plus a comparison
plot. The full-model run may abort on gradient overflow; that outcome is
reported rather than treated as a failure.
"""

import argparse
import sys
from pathlib import Path

import numpy as np

from metasum import metatrain as MT, synthetic
from metasum.data import load_corpus
from metasum.model import ModelConfig, Summarizer


def run_mode(mode, corpora, vocab, steps, seed, enc_layers, dec_layers):
    cfg = ModelConfig.tiny(
        hidden_dim=16, num_heads=2, ff_dim=32, adapter_dim=4,
        vocab_size=vocab.size, max_src_len=40, max_tgt_len=8,
        enc_layers=enc_layers, dec_layers=dec_layers,
    )
    model = Summarizer.build(cfg, seed=seed)
    config = MT.MetaTrainConfig(
        tasks_per_batch=3, task_batch_size=4, inner_steps=4,
        inner_lr=1e-2, outer_lr=3e-3, meta_steps=steps,
        trainable_mode=mode, meta_val_every=10_000,
    )
    sources = [corpora["src_a"], corpora["src_b"], corpora["src_c"]]
    aborted = None
    try:
        log = MT.meta_train(model, sources, config, seed=seed)
    except MT.GradientOverflowError as exc:
        log = exc.log
        aborted = str(exc)
    return log, aborted


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/grad_norm")
    parser.add_argument("--steps", type=int, default=500)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--deep-enc", type=int, default=4,
                        help="encoder layers for the full-model run")
    parser.add_argument("--deep-dec", type=int, default=2,
                        help="decoder layers for the full-model run")
    args = parser.parse_args()

    out = Path(args.out)
    paths = synthetic.make_family(out / "data", seed=args.seed, n_pretrain=64)
    vocab = synthetic.family_vocabulary()
    corpora = {k: load_corpus(p, vocab, max_src_len=40, max_tgt_len=8)
               for k, p in paths.items()}

    print(f"adapter-only, {args.steps} steps ...")
    log_a, abort_a = run_mode("adapter-only", corpora, vocab, args.steps,
                              args.seed, enc_layers=1, dec_layers=1)
    log_a.write_csv(out / "grad_norms_adapter_only.csv")

    print(f"full model (enc {args.deep_enc} / dec {args.deep_dec}), "
          f"{args.steps} steps ...")
    log_f, abort_f = run_mode("full", corpora, vocab, args.steps,
                              args.seed, enc_layers=args.deep_enc,
                              dec_layers=args.deep_dec)
    log_f.write_csv(out / "grad_norms_full.csv")

    norms_a = [r.grad_norm for r in log_a.records]
    norms_f = [r.grad_norm for r in log_f.records]
    print(f"adapter-only: {len(norms_a)} steps, var {np.var(norms_a):.4g}"
          + (f" (aborted: {abort_a})" if abort_a else ""))
    print(f"full model:   {len(norms_f)} steps, var {np.var(norms_f):.4g}"
          + (f" (aborted: {abort_f})" if abort_f else ""))
    if norms_a and norms_f and not abort_f:
        print(f"variance ratio full/adapter: {np.var(norms_f) / np.var(norms_a):.2f}x")

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot([r.step for r in log_a.records], norms_a, label="adapter-only", lw=0.9)
    ax.plot([r.step for r in log_f.records], norms_f, label="full model", lw=0.9)
    ax.set_xlabel("meta-step")
    ax.set_ylabel("trainable-gradient norm")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "grad_norm_dynamics.png", dpi=120)
    print(f"wrote {out / 'grad_norm_dynamics.png'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
