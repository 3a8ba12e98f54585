#!/usr/bin/env python3
"""End-to-end demo on the synthetic corpus family.

Generates the template corpora, then drives the operator CLI through
pretrain -> rank -> meta-train -> finetune-eval -> grad-report. Everything
lands under --out; rerunning with the same seed reproduces the reports.
"""

import argparse
import sys
from pathlib import Path

import yaml

from metasum import cli, synthetic


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/synthetic", help="output directory")
    parser.add_argument("--seed", type=int, default=17)
    parser.add_argument("--meta-steps", type=int, default=150)
    parser.add_argument("--pretrain-steps", type=int, default=400)
    parser.add_argument("--n-examples", type=int, default=10,
                        help="labeled target examples for finetuning")
    args = parser.parse_args()

    out = Path(args.out)
    data_dir = out / "data"
    paths = synthetic.make_family(data_dir, seed=args.seed)
    vocab = synthetic.family_vocabulary()
    vocab.save(data_dir / "vocab.txt")

    config = {
        "seed": args.seed,
        "model": {
            "hidden_dim": 32, "num_heads": 4, "ff_dim": 64, "adapter_dim": 8,
            "enc_layers": 1, "dec_layers": 1, "vocab_size": vocab.size,
            "max_src_len": 40, "max_tgt_len": 8,
            "enc_dropout": 0.0, "dec_dropout": 0.0,
        },
        "train": {
            "tasks_per_batch": 3, "task_batch_size": 4, "inner_steps": 4,
            "inner_lr": 1e-2, "outer_lr": 3e-3, "meta_steps": args.meta_steps,
            "meta_val_every": 50, "meta_val_batches": 5,
        },
        "decode": {"strategy": "beam", "beam_width": 3, "max_len": 8},
        "pretrain": {"steps": args.pretrain_steps, "lr": 3e-3, "batch_size": 16},
        "finetune": {"steps": 100, "lr": 1e-2, "n_examples": args.n_examples},
        "paths": {
            "pretrain_corpus": str(paths["pretrain"]),
            "source_corpora": [str(paths["src_a"]), str(paths["src_b"]),
                               str(paths["src_c"])],
            "validation_corpus": str(paths["validation"]),
            "target_corpus": str(paths["target"]),
            "vocab": str(data_dir / "vocab.txt"),
            "output_dir": str(out),
        },
    }
    cfg_path = out / "run_config.yaml"
    cfg_path.write_text(yaml.safe_dump(config), encoding="utf-8")
    print(f"config written to {cfg_path}")

    stages = [
        ["pretrain", "-c", str(cfg_path)],
        ["rank", "-c", str(cfg_path), "--k", "3",
         "--set", f"paths.checkpoint={out / 'pretrain_checkpoint.bin'}"],
        ["meta-train", "-c", str(cfg_path),
         "--set", f"paths.checkpoint={out / 'pretrain_checkpoint.bin'}"],
        ["finetune-eval", "-c", str(cfg_path), "--paired",
         "--set", f"paths.checkpoint={out / 'meta_checkpoint.bin'}"],
        ["grad-report", "-c", str(cfg_path), "--format", "png"],
    ]
    for argv in stages:
        print(f"\n=== metasum {' '.join(argv[:1] + argv[1:3])} ===")
        rc = cli.main(argv)
        if rc != cli.EXIT_OK:
            print(f"stage {argv[0]} failed with exit code {rc}", file=sys.stderr)
            return rc
    print(f"\nall stages complete; reports in {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
