"""The end-to-end CLI pipeline, shared by the acceptance suite and the CLI tests."""
import json
import os

from slaterl.cli import main

SMALL_CONFIG = {
    "n_items": 20, "n_chains": 2, "n_sessions": 300, "max_pages": 2, "rl_fraction": 0.3,
    "split_mode": "sl-rl", "um_epochs": 100, "seq_epochs": 100, "seq_width": 30, "seq_test_users": 20,
    "bc_epochs": 50, "fqi_iterations": 10, "pg_batches": 10, "pg_batch_episodes": 8,
    "eval_episodes": 50, "cpe_value_samples": 1, "cpe_max_trajectories": 10,
}

REPORTS = ("log_summary.txt", "validation.json", "split.json", "fit_report.json", "sim_metrics.txt",
           "sim_metrics.json", "understand.txt", "understand.json", "bc_report.json", "bcq_report.json",
           "pg_report.json", "eval_online.txt", "eval_online.json", "runlog.jsonl", "cpe.txt", "cpe.json")


def run_pipeline(out, config=SMALL_CONFIG, seed=0):
    """Run every batch subcommand in order; returns the list of exit codes."""
    os.makedirs(out, exist_ok=True)
    cfg_path = os.path.join(out, "run_config.json")
    with open(cfg_path, "w") as fh:
        json.dump(config, fh)
    f = lambda name: os.path.join(out, name)
    base = ["--config", cfg_path, "--seed", str(seed), "--out", out]
    steps = [
        ["gen"],
        ["validate", "--log", f("log.tsv")],
        ["transform", "--log", f("log.tsv"), "--catalog", f("catalog.json")],
        ["split", "--log", f("log.tsv"), "--catalog", f("catalog.json"), "--samples", f("samples.jsonl")],
        ["fit-sim", "--log", f("train_log.tsv"), "--catalog", f("catalog.json")],
        ["eval-sim", "--log", f("test_log.tsv"), "--model", f("user_model.npz"), "--world", f("world.json")],
        ["understand", "--log", f("log.tsv"), "--catalog", f("catalog.json")],
        ["train-bc", "--samples", f("train_samples.jsonl"), "--catalog", f("catalog.json")],
        ["train-bcq", "--samples", f("train_samples.jsonl"), "--catalog", f("catalog.json"),
         "--bc", f("bc_policy.npz")],
        ["train-pg", "--model", f("user_model.npz"), "--log", f("train_log.tsv")],
        ["eval-online", "--world", f("world.json"), "--policy", "uniform", "--policy", "behavior",
         "--policy", f("bc_policy.npz"), "--policy", f("bcq_policy.npz"), "--policy", f("pg_policy.npz")],
        ["cpe", "--samples", f("test_samples.jsonl"), "--model", f("user_model.npz"),
         "--policy", f("bc_policy.npz"), "--policy", f("bcq_policy.npz"), "--policy", "uniform"],
    ]
    codes = []
    for step in steps:
        codes.append(main(step[:1] + base + step[1:]))
        if codes[-1]:
            break
    return codes
