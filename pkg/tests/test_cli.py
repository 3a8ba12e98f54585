import json

import numpy as np
import pytest
import yaml

from metasum import cli, synthetic
from metasum.metatrain import read_train_csv
from metasum.evalrouge import read_eval_csv
from metasum.model import checkpoint_hash, load_checkpoint
from metasum.similarity import read_report_csv


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data_dir = root / "data"
    paths = synthetic.make_family(data_dir, seed=0, n_pretrain=96, n_source=32,
                                  n_val=24, n_target=24)
    vocab = synthetic.family_vocabulary()
    vocab_path = data_dir / "vocab.txt"
    vocab.save(vocab_path)
    return root, paths, vocab_path, vocab


def make_config(workspace, out_name, **tweaks):
    root, paths, vocab_path, vocab = workspace
    cfg = {
        "seed": 11,
        "model": {
            "hidden_dim": 16, "num_heads": 2, "ff_dim": 32, "adapter_dim": 4,
            "enc_layers": 1, "dec_layers": 1, "vocab_size": vocab.size,
            "max_src_len": 40, "max_tgt_len": 8,
            "enc_dropout": 0.0, "dec_dropout": 0.0,
        },
        "train": {
            "tasks_per_batch": 2, "task_batch_size": 3, "inner_steps": 2,
            "inner_lr": 5e-3, "outer_lr": 5e-3, "meta_steps": 8,
            "meta_val_every": 4, "meta_val_batches": 2,
        },
        "decode": {"strategy": "greedy", "max_len": 8},
        "pretrain": {"steps": 30, "lr": 3e-3, "batch_size": 8},
        "finetune": {"steps": 20, "lr": 1e-2, "n_examples": 5},
        "paths": {
            "pretrain_corpus": str(paths["pretrain"]),
            "source_corpora": [str(paths["src_a"]), str(paths["src_b"]),
                               str(paths["src_c"])],
            "validation_corpus": str(paths["validation"]),
            "target_corpus": str(paths["target"]),
            "vocab": str(vocab_path),
            "output_dir": str(root / out_name),
        },
    }
    for dotted, value in tweaks.items():
        section = cfg
        keys = dotted.split(".")
        for k in keys[:-1]:
            section = section[k]
        section[keys[-1]] = value
    path = root / f"{out_name}.yaml"
    path.write_text(yaml.safe_dump(cfg), encoding="utf-8")
    return path, root / out_name


def test_missing_corpus_path_names_field(workspace, capsys):
    cfg_path, out = make_config(workspace, "missing",
                                **{"paths.pretrain_corpus": "/nonexistent.jsonl"})
    rc = cli.main(["pretrain", "-c", str(cfg_path)])
    assert rc == cli.EXIT_CONFIG
    err = capsys.readouterr().err
    assert "paths.pretrain_corpus" in err
    assert not out.exists()  # no side effects before validation


def test_validation_problems_listed_all_at_once(workspace, capsys):
    cfg_path, out = make_config(
        workspace, "multibad",
        **{"paths.pretrain_corpus": "/nope.jsonl", "paths.vocab": "/alsonope.txt"})
    rc = cli.main(["pretrain", "-c", str(cfg_path)])
    assert rc == cli.EXIT_CONFIG
    err = capsys.readouterr().err
    assert "paths.pretrain_corpus" in err and "paths.vocab" in err
    assert not out.exists()


def test_unknown_config_key_rejected(workspace, capsys):
    cfg_path, _ = make_config(workspace, "typo", **{"train.meta_stepz": 5})
    rc = cli.main(["pretrain", "-c", str(cfg_path)])
    assert rc == cli.EXIT_CONFIG
    assert "meta_stepz" in capsys.readouterr().err


def test_target_in_sources_rejected(workspace, capsys):
    root, paths, _, _ = workspace
    cfg_path, _ = make_config(workspace, "overlap",
                              **{"paths.target_corpus": str(paths["src_a"])})
    rc = cli.main(["rank", "-c", str(cfg_path), "--k", "1"])
    assert rc == cli.EXIT_CONFIG
    assert "target_corpus" in capsys.readouterr().err


def test_pretrain_smoke_writes_two_artifacts(workspace):
    cfg_path, out = make_config(workspace, "pre_smoke", **{"pretrain.steps": 100})
    rc = cli.main(["pretrain", "-c", str(cfg_path)])
    assert rc == cli.EXIT_OK
    artifacts = sorted(p.name for p in out.iterdir())
    assert artifacts == ["pretrain_checkpoint.bin", "pretrain_loss.csv"]
    records = read_train_csv(out / "pretrain_loss.csv")
    assert len(records) == 100


def test_pretrain_checkpoint_hash_deterministic(workspace):
    cfg_a, out_a = make_config(workspace, "det_a")
    cfg_b, out_b = make_config(workspace, "det_b")
    assert cli.main(["pretrain", "-c", str(cfg_a)]) == cli.EXIT_OK
    assert cli.main(["pretrain", "-c", str(cfg_b)]) == cli.EXIT_OK
    assert checkpoint_hash(out_a / "pretrain_checkpoint.bin") == \
        checkpoint_hash(out_b / "pretrain_checkpoint.bin")


def test_set_override_wins(workspace):
    cfg_path, out = make_config(workspace, "override")
    rc = cli.main(["pretrain", "-c", str(cfg_path), "--set", "pretrain.steps=3"])
    assert rc == cli.EXIT_OK
    assert len(read_train_csv(out / "pretrain_loss.csv")) == 3


def test_output_dir_env_override(workspace, tmp_path, monkeypatch):
    cfg_path, default_out = make_config(workspace, "envdir", **{"pretrain.steps": 2})
    env_out = tmp_path / "redirected"
    monkeypatch.setenv(cli.OUTPUT_DIR_ENV, str(env_out))
    rc = cli.main(["pretrain", "-c", str(cfg_path)])
    assert rc == cli.EXIT_OK
    assert (env_out / "pretrain_checkpoint.bin").exists()
    assert not default_out.exists()


def test_rank_reports_and_k_all(workspace):
    cfg_path, out = make_config(workspace, "rank")
    rc = cli.main(["rank", "-c", str(cfg_path), "--k", "3"])
    assert rc == cli.EXIT_OK
    parsed = read_report_csv(out / "rank_report.csv")
    assert len(parsed["selected"]) == 3
    assert set(parsed) >= {"embedding", "cosine", "length",
                           "rouge2_recall", "rouge2_precision"}
    text = (out / "rank_report.txt").read_text()
    assert "untrained" in text  # no checkpoint given: flag recorded


def test_rank_planted_candidate_first(workspace):
    # a candidate built from the target's own records must rank first under
    # cosine and rouge2_precision
    root, paths, vocab_path, vocab = workspace
    planted = root / "planted.jsonl"
    planted.write_text((paths["target"]).read_text())
    disjoint_rows = []
    rng = np.random.default_rng(0)
    for i in range(24):
        disjoint_rows.append(json.dumps({
            "article": " ".join(f"zz{rng.integers(50)} qq{rng.integers(50)}" for _ in range(6)) + " .",
            "summary": f"zz{rng.integers(50)} qq{rng.integers(50)}",
        }))
    disjoint = root / "disjoint.jsonl"
    disjoint.write_text("\n".join(disjoint_rows) + "\n")
    cfg_path, out = make_config(
        workspace, "rank_planted",
        **{"paths.source_corpora": [str(planted), str(disjoint), str(paths["src_a"])]})
    rc = cli.main(["rank", "-c", str(cfg_path), "--k", "1"])
    assert rc == cli.EXIT_OK
    parsed = read_report_csv(out / "rank_report.csv")
    assert parsed["cosine"][0][0] == "planted"
    assert parsed["rouge2_precision"][0][0] == "planted"
    assert parsed["cosine"][-1][0] == "disjoint"
    assert parsed["selected"][0][0] == "planted"


def test_rank_sections_emit_five_manifests(workspace):
    root, paths, vocab_path, vocab = workspace
    nine = []
    rng = np.random.default_rng(1)
    for i in range(9):
        p = root / f"cand_{i}.jsonl"
        rows = synthetic.generate_records(
            rng, 16, "second",
            subjects=synthetic._pool_slice(synthetic.SUBJECTS, i, 10),
            objects=synthetic._pool_slice(synthetic.OBJECTS, i, 10),
        )
        p.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
        nine.append(str(p))
    cfg_path, out = make_config(workspace, "rank_sections",
                                **{"paths.source_corpora": nine})
    rc = cli.main(["rank", "-c", str(cfg_path), "--k", "3", "--sections"])
    assert rc == cli.EXIT_OK
    manifests = sorted(out.glob("meta_dataset_section_*.json"))
    assert len(manifests) == 5
    for m in manifests:
        content = json.loads(m.read_text())
        assert len(content["corpora"]) == 3
        assert len(content["paths"]) == 3


def _pretrained(workspace, name="base", steps=60):
    cfg_path, out = make_config(workspace, name, **{"pretrain.steps": steps})
    assert cli.main(["pretrain", "-c", str(cfg_path)]) == cli.EXIT_OK
    return out / "pretrain_checkpoint.bin"


def test_meta_train_smoke_finite_norms(workspace):
    ckpt = _pretrained(workspace, "meta_base")
    cfg_path, out = make_config(workspace, "meta_run",
                                **{"paths.checkpoint": str(ckpt),
                                   "train.meta_steps": 50})
    rc = cli.main(["meta-train", "-c", str(cfg_path)])
    assert rc == cli.EXIT_OK
    records = read_train_csv(out / "train_log.csv")
    assert len(records) == 50
    assert all(np.isfinite(r.grad_norm) for r in records)
    assert (out / "meta_val.csv").exists()
    _, _, extra = load_checkpoint(out / "meta_checkpoint.bin")
    assert extra["meta_step"] == 50


def test_meta_train_requires_checkpoint_or_flag(workspace, capsys):
    cfg_path, _ = make_config(workspace, "meta_nockpt")
    rc = cli.main(["meta-train", "-c", str(cfg_path)])
    assert rc == cli.EXIT_CONFIG
    assert "checkpoint" in capsys.readouterr().err


def test_meta_train_resume_continues_numbering(workspace):
    ckpt = _pretrained(workspace, "resume_base")
    cfg_path, out = make_config(workspace, "resume_run",
                                **{"paths.checkpoint": str(ckpt),
                                   "train.meta_steps": 4})
    assert cli.main(["meta-train", "-c", str(cfg_path)]) == cli.EXIT_OK
    first = read_train_csv(out / "train_log.csv")
    assert [r.step for r in first] == [1, 2, 3, 4]

    cfg2, out2 = make_config(workspace, "resume_run2",
                             **{"paths.checkpoint": str(ckpt),
                                "train.meta_steps": 3})
    rc = cli.main(["meta-train", "-c", str(cfg2),
                   "--resume", str(out / "meta_checkpoint.bin")])
    assert rc == cli.EXIT_OK
    second = read_train_csv(out2 / "train_log.csv")
    assert [r.step for r in second] == [5, 6, 7]
    _, _, extra = load_checkpoint(out2 / "meta_checkpoint.bin")
    assert extra["meta_step"] == 7


def test_meta_train_full_deep_completes_or_aborts_no_nan(workspace):
    # TL-FULL-style run on a deliberately deep tiny config: success and
    # overflow abort are both acceptable; NaN rows in the log are not
    ckpt_cfg, ckpt_out = make_config(
        workspace, "deep_base",
        **{"model.enc_layers": 3, "model.dec_layers": 2, "pretrain.steps": 20})
    assert cli.main(["pretrain", "-c", str(ckpt_cfg)]) == cli.EXIT_OK
    cfg_path, out = make_config(
        workspace, "deep_full",
        **{"model.enc_layers": 3, "model.dec_layers": 2,
           "paths.checkpoint": str(ckpt_out / "pretrain_checkpoint.bin"),
           "train.meta_steps": 12, "train.inner_lr": 0.05,
           "train.outer_lr": 0.05})
    rc = cli.main(["meta-train", "-c", str(cfg_path), "--trainable", "full"])
    assert rc in (cli.EXIT_OK, cli.EXIT_NUMERICAL)
    records = read_train_csv(out / "train_log.csv")
    assert all(np.isfinite(r.grad_norm) and np.isfinite(r.outer_loss)
               for r in records)


def test_finetune_eval_report_rows_and_determinism(workspace):
    ckpt = _pretrained(workspace, "ft_base")
    cfg_path, out = make_config(workspace, "ft_run",
                                **{"paths.checkpoint": str(ckpt)})
    rc = cli.main(["finetune-eval", "-c", str(cfg_path), "--n-examples", "5"])
    assert rc == cli.EXIT_OK
    report = read_eval_csv(out / "rouge_report.csv")
    selection = json.loads((out / "finetune_selection.json").read_text())
    assert len(selection["train_indices"]) == 5
    assert len(report) == selection["test_size"] + 1  # rows + aggregate
    assert "aggregate" in report

    cfg2, out2 = make_config(workspace, "ft_run2",
                             **{"paths.checkpoint": str(ckpt)})
    assert cli.main(["finetune-eval", "-c", str(cfg2), "--n-examples", "5"]) == cli.EXIT_OK
    again = read_eval_csv(out2 / "rouge_report.csv")
    assert again["aggregate"] == report["aggregate"]


def test_finetune_eval_paired_report(workspace):
    ckpt = _pretrained(workspace, "paired_base")
    cfg_path, out = make_config(workspace, "paired_run",
                                **{"paths.checkpoint": str(ckpt),
                                   "finetune.steps": 6})
    rc = cli.main(["finetune-eval", "-c", str(cfg_path), "--n-examples", "4",
                   "--paired"])
    assert rc == cli.EXIT_OK
    assert (out / "rouge_report.csv").exists()
    assert (out / "rouge_report_random_init.csv").exists()
    selection = json.loads((out / "finetune_selection.json").read_text())
    assert set(selection["results"]) == {"meta", "random_init"}


def test_finetune_eval_too_few_examples(workspace, capsys):
    ckpt = _pretrained(workspace, "toofew_base")
    cfg_path, _ = make_config(workspace, "toofew",
                              **{"paths.checkpoint": str(ckpt)})
    rc = cli.main(["finetune-eval", "-c", str(cfg_path), "--n-examples", "999"])
    assert rc == cli.EXIT_CONFIG
    assert "needs >=" in capsys.readouterr().err


def test_finetune_eval_exhausting_target_evals_on_train(workspace):
    root, paths, vocab_path, vocab = workspace
    ckpt = _pretrained(workspace, "exhaust_base")
    small = root / "small_target.jsonl"
    lines = paths["target"].read_text().splitlines()[:6]
    small.write_text("\n".join(lines) + "\n")
    cfg_path, out = make_config(workspace, "exhaust",
                                **{"paths.checkpoint": str(ckpt),
                                   "paths.target_corpus": str(small),
                                   "finetune.steps": 4})
    rc = cli.main(["finetune-eval", "-c", str(cfg_path), "--n-examples", "6"])
    assert rc == cli.EXIT_OK
    selection = json.loads((out / "finetune_selection.json").read_text())
    assert selection["eval_on_train"] is True
    assert selection["test_size"] == 6


def test_grad_report_text_and_png(workspace):
    ckpt = _pretrained(workspace, "gr_base")
    cfg_path, out = make_config(workspace, "gr_run",
                                **{"paths.checkpoint": str(ckpt),
                                   "train.meta_steps": 5})
    assert cli.main(["meta-train", "-c", str(cfg_path)]) == cli.EXIT_OK
    assert cli.main(["grad-report", "-c", str(cfg_path)]) == cli.EXIT_OK
    text = (out / "grad_report.txt").read_text()
    assert "gradient norm over 5 steps" in text
    assert cli.main(["grad-report", "-c", str(cfg_path), "--format", "png"]) == cli.EXIT_OK
    assert (out / "grad_report.png").stat().st_size > 0


def test_grad_report_missing_log(workspace, capsys):
    cfg_path, _ = make_config(workspace, "gr_missing")
    rc = cli.main(["grad-report", "-c", str(cfg_path)])
    assert rc == cli.EXIT_CONFIG
    assert "not found" in capsys.readouterr().err


def test_rank_sections_needs_nine_candidates(workspace, capsys):
    cfg_path, out = make_config(workspace, "sections_few")
    rc = cli.main(["rank", "-c", str(cfg_path), "--k", "1", "--sections"])
    assert rc == cli.EXIT_CONFIG
    assert "at least 9" in capsys.readouterr().err
    assert not out.exists()


def test_pretrain_extractive_encoder_flag_refused(workspace, capsys):
    cfg_path, out = make_config(workspace, "extractive")
    rc = cli.main(["pretrain", "-c", str(cfg_path), "--extractive-encoder"])
    assert rc == cli.EXIT_CONFIG
    assert "out of scope" in capsys.readouterr().err
    assert not out.exists()


def test_meta_train_periodic_checkpoints(workspace):
    ckpt = _pretrained(workspace, "periodic_base")
    cfg_path, out = make_config(workspace, "periodic_run",
                                **{"paths.checkpoint": str(ckpt),
                                   "train.meta_steps": 6,
                                   "train.checkpoint_every": 2})
    assert cli.main(["meta-train", "-c", str(cfg_path)]) == cli.EXIT_OK
    steps = sorted(int(p.stem.rsplit("step", 1)[1])
                   for p in out.glob("meta_checkpoint_step*.bin"))
    assert steps == [2, 4, 6]


def test_meta_val_csv_reparseable(workspace):
    from metasum.metatrain import read_val_csv

    ckpt = _pretrained(workspace, "valcsv_base")
    cfg_path, out = make_config(workspace, "valcsv_run",
                                **{"paths.checkpoint": str(ckpt),
                                   "train.meta_steps": 8,
                                   "train.meta_val_every": 4})
    assert cli.main(["meta-train", "-c", str(cfg_path)]) == cli.EXIT_OK
    parsed = read_val_csv(out / "meta_val.csv")
    assert [step for step, _ in parsed] == [4, 8]
