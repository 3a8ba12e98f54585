#!/usr/bin/env python3
"""Does meta-learning the trainable set beat starting it from scratch?

Pretrains a base model, meta-trains the adapter/layer-norm set on three
source corpora, then compares post-adaptation test NLL on held-out target
tasks against a freshly initialized trainable set, over several seeds.
"""

import argparse
import csv
import sys
import time
from pathlib import Path

import numpy as np

from metasum import metatrain as MT, synthetic
from metasum.data import load_corpus, sample_task
from metasum.model import ModelConfig, Summarizer


def run_seed(seed, corpora, vocab, meta_steps, n_tasks):
    cfg = ModelConfig.tiny(
        hidden_dim=32, num_heads=4, ff_dim=64, adapter_dim=8,
        vocab_size=vocab.size, max_src_len=40, max_tgt_len=8,
    )
    model = Summarizer.build(cfg, seed=seed)
    MT.pretrain_base(model, corpora["pretrain"], steps=1200, lr=3e-3,
                     batch_size=16, seed=seed)
    mtc = MT.MetaTrainConfig(
        tasks_per_batch=3, task_batch_size=4, inner_steps=4,
        inner_lr=1e-2, outer_lr=3e-3, meta_steps=meta_steps,
        meta_val_every=10_000, meta_val_batches=1,
    )
    sources = [corpora["src_a"], corpora["src_b"], corpora["src_c"]]
    MT.meta_train(model, sources, mtc, seed=seed)
    psi_meta = {n: t.data.copy() for n, t in model.store.meta.items()}
    psi_rand = {n: t.data.copy()
                for n, t in Summarizer.build(cfg, seed=seed + 1000).store.meta.items()}

    def post_adapt(psi, task):
        for n, t in model.store.meta.items():
            t.data[...] = psi[n]
        phi, _ = MT.inner_adapt(model, task, mtc, MT.AdamState(mtc.inner_lr))
        return MT.batch_loss(model, task.test, params=phi).item()

    rng = np.random.default_rng((seed, 77))
    metas, rands = [], []
    for _ in range(n_tasks):
        task = sample_task(corpora["target"], 4, rng)
        metas.append(post_adapt(psi_meta, task))
        rands.append(post_adapt(psi_rand, task))
    return float(np.mean(metas)), float(np.mean(rands))


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/meta_benefit")
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--meta-steps", type=int, default=200)
    parser.add_argument("--tasks", type=int, default=20)
    args = parser.parse_args()

    out = Path(args.out)
    paths = synthetic.make_family(out / "data", seed=0)
    vocab = synthetic.family_vocabulary()
    corpora = {k: load_corpus(p, vocab, max_src_len=40, max_tgt_len=8)
               for k, p in paths.items()}

    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in range(args.seeds):
        t0 = time.time()
        meta, rand = run_seed(seed, corpora, vocab, args.meta_steps, args.tasks)
        reduction = 100 * (1 - meta / rand)
        rows.append((seed, meta, rand, reduction))
        print(f"seed {seed}: meta {meta:.4f} random {rand:.4f} "
              f"reduction {reduction:.1f}% ({time.time() - t0:.0f}s)")

    meta_avg = float(np.mean([r[1] for r in rows]))
    rand_avg = float(np.mean([r[2] for r in rows]))
    print(f"\naverage: meta {meta_avg:.4f} random {rand_avg:.4f} "
          f"reduction {100 * (1 - meta_avg / rand_avg):.1f}%")

    with (out / "meta_benefit.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["seed", "meta_nll", "random_nll", "reduction_pct"])
        for row in rows:
            writer.writerow([row[0], f"{row[1]:.6f}", f"{row[2]:.6f}", f"{row[3]:.2f}"])
        writer.writerow(["mean", f"{meta_avg:.6f}", f"{rand_avg:.6f}",
                         f"{100 * (1 - meta_avg / rand_avg):.2f}"])
    print(f"wrote {out / 'meta_benefit.csv'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
