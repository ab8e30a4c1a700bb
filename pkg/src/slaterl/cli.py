"""Command line pipeline: ``python -m slaterl <subcommand> [options]``.

Each subcommand reads and writes documented file formats (tab separated
logs, JSON-lines MDP samples, JSON worlds, ``.npz`` checkpoints, text and
JSON reports) in ``--out``. Configuration is a flat JSON object; values
resolve as defaults < ``--config`` file < ``--set KEY=VALUE`` < ``--seed``.
The resolved configuration is written next to the outputs as
``<subcommand>.config.json``.

On failure the command exits nonzero and prints one JSON error record on
stderr (also saved as ``error.json`` in ``--out`` when possible).
"""
import argparse
import hashlib
import io
import json
import os
import signal
import sys
import threading

import numpy as np

from . import cpe, logged_data, policies, synth, understanding, user_model
from .catalog import Catalog
from .env import EpisodeConfig, SlateEnv, state_vector_dim
from .errors import ConfigurationError, SlateRLError
from .fileio import append_jsonl, atomic_write_json, atomic_write_text
from .policies_base import UniformPolicy

SUBCOMMANDS = ("gen", "validate", "transform", "split", "fit-sim", "eval-sim", "understand",
               "train-bc", "train-bcq", "train-pg", "eval-online", "cpe", "serve-env")

DEFAULTS = {
    "seed": 0,
    # world and logs
    "world": "myopic",
    "n_items": 40,
    "n_chains": 4,
    "chain_length": 5,
    "n_sessions": 1000,
    "page_size": 9,
    "row_size": 3,
    "max_pages": 4,
    "behavior_temperature": 1.0,
    "policy_id": "sl-softmax",
    "rl_fraction": 0.0,
    # episode discounts
    "gamma": 0.95,
    "batch_gamma": 1.0,
    # split
    "split_mode": "by-user",
    "test_fraction": 0.2,
    "split_cutoff": 0,
    # user model
    "um_hidden": 0,
    "um_epochs": 300,
    "um_learning_rate": 0.5,
    "um_l2": 1e-4,
    # data understanding
    "seq_K": 5,
    "seq_width": 100,
    "seq_hot_size": 10,
    "seq_epochs": 300,
    "seq_learning_rate": 0.05,
    "seq_test_users": 100,
    "understand_sessions": 3000,
    "understand_pages": 10,
    # learners
    "bc_epochs": 200,
    "bc_learning_rate": 0.05,
    "bcq_threshold": 0.3,
    "fqi_iterations": 30,
    "pg_batches": 100,
    "pg_batch_episodes": 32,
    "pg_learning_rate": 0.05,
    "l2": 1e-4,
    # evaluation
    "eval_episodes": 500,
    "cpe_value_samples": 4,
    "cpe_clip_lo": 0.1,
    "cpe_clip_hi": 10.0,
    "cpe_max_trajectories": 0,
    # server
    "host": "127.0.0.1",
    "port": 0,
}


class UsageError(SlateRLError):
    pass


def _coerce(key, value):
    default = DEFAULTS[key]
    if isinstance(value, str) and not isinstance(default, str):
        try:
            value = json.loads(value)
        except ValueError:
            raise ConfigurationError(f"config key {key!r}: cannot parse {value!r}") from None
    if isinstance(default, bool) or isinstance(default, str):
        ok = isinstance(value, type(default))
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    if not ok:
        raise ConfigurationError(f"config key {key!r} expects {type(default).__name__}, got {value!r}")
    return value


def resolve_config(path=None, overrides=(), seed=None):
    cfg = dict(DEFAULTS)
    layers = []
    if path:
        if not os.path.exists(path):
            raise FileNotFoundError(f"config file not found: {path}")
        with open(path) as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ConfigurationError("config file must hold a flat JSON object")
        layers.append(data)
    flags = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        flags[k.strip()] = v
    layers.append(flags)
    if seed is not None:
        layers.append({"seed": seed})
    for layer in layers:
        for k, v in layer.items():
            if k not in DEFAULTS:
                raise ConfigurationError(f"unknown config key {k!r}")
            cfg[k] = _coerce(k, v)
    return cfg


def episode_config(cfg, gamma_key="gamma"):
    return EpisodeConfig(gamma=cfg[gamma_key], page_size=cfg["page_size"], max_pages=cfg["max_pages"],
                         row_size=cfg["row_size"])


def _need(path, what):
    if not path:
        raise UsageError(f"--{what} is required")
    if not os.path.exists(path):
        raise FileNotFoundError(f"{what} file not found: {path}")
    return path


def _read_log(path, cfg):
    with open(_need(path, "log"), encoding="utf-8") as fh:
        return logged_data.parse_log(fh, logged_data.SchemaConfig(cfg["page_size"], cfg["row_size"]))


def _write_log(path, rows):
    buf = io.StringIO()
    logged_data.write_log(rows, buf)
    atomic_write_text(path, buf.getvalue())


def _read_samples(path):
    with open(_need(path, "samples"), encoding="utf-8") as fh:
        return logged_data.read_mdp_samples(fh)


def _write_samples(path, samples):
    buf = io.StringIO()
    logged_data.write_mdp_samples(samples, buf)
    atomic_write_text(path, buf.getvalue())


def _load_catalog(path):
    """A catalog from either a world file or a catalog file."""
    with open(_need(path, "catalog"), encoding="utf-8") as fh:
        d = json.load(fh)
    return Catalog.from_dict(d["catalog"] if "catalog" in d else d)


def _context_dim(samples, ec):
    return len(samples[0].state) - state_vector_dim(ec, 0)


def _pad(rows, cfg, catalog):
    return logged_data.sessionize_and_pad(rows, cfg["max_pages"], catalog.n_items, seed=cfg["seed"])


def _make_world(cfg):
    make = {"myopic": synth.myopic_world, "long-term": synth.long_term_world}.get(cfg["world"])
    if make is None:
        raise ConfigurationError(f"unknown world preset {cfg['world']!r}; use myopic or long-term")
    return make(cfg["seed"], n_items=cfg["n_items"], page_size=cfg["page_size"], n_chains=cfg["n_chains"],
                chain_length=cfg["chain_length"])


def _response_model(args):
    """The environment's response model: ``--world`` (ground truth) or ``--model`` (fitted)."""
    if args.world:
        w = synth.load_world(_need(args.world, "world"))
        return w, w.catalog, w.sample_user
    if args.model:
        m = user_model.load_user_model(_need(args.model, "model"))
        return m, m.catalog, None
    raise UsageError("either --world or --model is required")


def _user_pool(args, cfg, catalog):
    """Sampler over logged user contexts (needed when the model cannot draw users)."""
    rows = _read_log(args.log, cfg)
    users = []
    seen = set()
    for r in rows:
        ctx = r.user_portrait + r.click_history
        if r.session_id not in seen:
            seen.add(r.session_id)
            users.append(ctx)
    pool = np.array(users, dtype=float)
    return lambda rng: pool[rng.integers(len(pool))]


def _env_factory(args, cfg, gamma_key="gamma"):
    model, catalog, sampler = _response_model(args)
    if sampler is None:
        if not args.log:
            raise UsageError("a fitted model needs --log to draw user contexts")
        sampler = _user_pool(args, cfg, catalog)
    ec = episode_config(cfg, gamma_key)
    return (lambda: SlateEnv(model, catalog, ec, sampler)), model, catalog


def _load_policies(paths, world=None):
    out = []
    for p in paths:
        if p == "uniform":
            out.append(("uniform", UniformPolicy()))
        elif p == "behavior":
            if world is None:
                raise UsageError("the behavior policy is only defined for --world")
            out.append(("behavior", synth.WorldSoftmaxPolicy(world)))
        elif p == "greedy":
            if world is None:
                raise UsageError("the greedy policy is only defined for --world")
            out.append(("greedy", synth.GreedyWorldPolicy(world)))
        else:
            name = os.path.splitext(os.path.basename(p))[0]
            out.append((name, policies.load_policy(_need(p, "policy"))))
    if not out:
        raise UsageError("at least one --policy is required")
    return out


def cmd_gen(args, cfg, out):
    world = _make_world(cfg)
    synth.save_world(world, os.path.join(out, "world.json"))
    atomic_write_json(os.path.join(out, "catalog.json"), world.catalog.to_dict())
    n_rl = int(round(cfg["rl_fraction"] * cfg["n_sessions"]))
    base = dict(max_pages=cfg["max_pages"], page_size=cfg["page_size"], row_size=cfg["row_size"])
    rows = synth.simulate_logs(world, synth.GenConfig(
        n_sessions=cfg["n_sessions"] - n_rl, seed=cfg["seed"], policy_id=cfg["policy_id"],
        behavior=synth.WorldSoftmaxPolicy(world, cfg["behavior_temperature"]), **base))
    if n_rl:
        rows += synth.simulate_logs(world, synth.GenConfig(
            n_sessions=n_rl, seed=(cfg["seed"], "rl"), policy_id="rl-softmax", session_prefix="r",
            behavior=synth.WorldSoftmaxPolicy(world, cfg["behavior_temperature"] / 2),
            start_time=1_700_000_000, **base))
    _write_log(os.path.join(out, "log.tsv"), rows)
    atomic_write_text(os.path.join(out, "log_summary.txt"),
                      synth.format_summary(synth.log_summary(rows, world.catalog)))
    return 0


def cmd_validate(args, cfg, out):
    with open(_need(args.log, "log"), encoding="utf-8") as fh:
        rows, errors = logged_data.validate_log(fh, logged_data.SchemaConfig(cfg["page_size"], cfg["row_size"]))
    report = {"rows": len(rows), "errors": [{"line": e.line, "kind": type(e).__name__, "message": str(e)}
                                            for e in errors]}
    atomic_write_json(os.path.join(out, "validation.json"), report)
    if errors:
        raise logged_data.ParseError(f"{len(errors)} invalid line(s), see validation.json", errors[0].line)
    return 0


def cmd_transform(args, cfg, out):
    rows = _read_log(args.log, cfg)
    catalog = _load_catalog(args.catalog)
    ec = episode_config(cfg, "batch_gamma")
    samples = [x for s in _pad(rows, cfg, catalog) for x in logged_data.to_mdp_samples(s, ec, catalog)]
    _write_samples(os.path.join(out, "samples.jsonl"), samples)
    return 0


def cmd_split(args, cfg, out):
    rows = _read_log(args.log, cfg)
    catalog = _load_catalog(args.catalog)
    sessions = _pad(rows, cfg, catalog)
    params = {"test_fraction": cfg["test_fraction"], "seed": cfg["seed"], "cutoff": cfg["split_cutoff"]}
    split = logged_data.split_dataset(sessions, cfg["split_mode"], params)
    test_ids = {s.session_id for s in split.test}
    _write_log(os.path.join(out, "train_log.tsv"), [r for r in rows if r.session_id not in test_ids])
    _write_log(os.path.join(out, "test_log.tsv"), [r for r in rows if r.session_id in test_ids])
    if args.samples:
        samples = _read_samples(args.samples)
        _write_samples(os.path.join(out, "train_samples.jsonl"), [x for x in samples if x.mdp_id not in test_ids])
        _write_samples(os.path.join(out, "test_samples.jsonl"), [x for x in samples if x.mdp_id in test_ids])
    atomic_write_json(os.path.join(out, "split.json"), {
        "mode": split.mode, "train_sessions": len(split.train), "test_sessions": len(split.test)})
    return 0


def cmd_fit_sim(args, cfg, out):
    rows = _read_log(args.log, cfg)
    catalog = _load_catalog(args.catalog)
    hp = user_model.UserModelHyperparams(cfg["um_hidden"], cfg["um_epochs"], cfg["um_learning_rate"],
                                         cfg["um_l2"], cfg["seed"])
    model, report = user_model.fit_user_model(_pad(rows, cfg, catalog), catalog, episode_config(cfg), hp,
                                              trained_on=os.path.basename(args.log))
    user_model.save_user_model(model, os.path.join(out, "user_model.npz"))
    atomic_write_json(os.path.join(out, "fit_report.json"), {
        "epochs_run": report.epochs_run, "final_loss": report.final_loss,
        "loss_first": report.loss_history[0] if report.loss_history else None})
    return 0


def cmd_eval_sim(args, cfg, out):
    rows = _read_log(args.log, cfg)
    ec = episode_config(cfg)
    table = {}
    if args.model:
        m = user_model.load_user_model(_need(args.model, "model"))
        table["fitted"] = user_model.evaluate_user_model(m, _pad(rows, cfg, m.catalog), m.catalog, ec)
    if args.world:
        w = synth.load_world(_need(args.world, "world"))
        table["ground truth"] = user_model.evaluate_user_model(w, _pad(rows, cfg, w.catalog), w.catalog, ec)
    if not table:
        raise UsageError("eval-sim needs --model and/or --world")
    atomic_write_text(os.path.join(out, "sim_metrics.txt"), user_model.format_metric_tables(table))
    atomic_write_json(os.path.join(out, "sim_metrics.json"), table)
    return 0


def cmd_understand(args, cfg, out):
    hp = understanding.SeqHyperparams(cfg["seq_epochs"], cfg["seq_learning_rate"], 1e-4, cfg["seed"])
    K, width, hot = cfg["seq_K"], cfg["seq_width"], cfg["seq_hot_size"]
    if args.log:
        rows = _read_log(args.log, cfg)
        catalog = _load_catalog(args.catalog)
        sessions = _pad(rows, cfg, catalog)
        n_hold = max(1, min(cfg["seq_test_users"], len(sessions) // 5))
        model = understanding.fit_seq_model(sessions[:-n_hold], catalog.n_items, K, hp)
        users = np.array([s.user_context for s in sessions[-n_hold:]])
        rep = understanding.understanding_report(model, users, K, width, hot)
        name = os.path.splitext(os.path.basename(args.log))[0]
    elif args.world:
        world = synth.load_world(_need(args.world, "world"))
        rep = understanding.diagnose_world(world, cfg["seed"], cfg["understand_sessions"],
                                           cfg["understand_pages"], cfg["seq_test_users"], K, width, hot, hp)
        name = world.name
    else:
        raise UsageError("understand needs --log (with --catalog) or --world")
    atomic_write_text(os.path.join(out, "understand.txt"),
                      rep.score_table(name) + "\n" + rep.correlation_table(name))
    atomic_write_json(os.path.join(out, "understand.json"), rep.to_dict())
    return 0


def _learner(cfg, epochs_key="bc_epochs", lr_key="bc_learning_rate"):
    return policies.LearnerConfig(learning_rate=cfg[lr_key], epochs=cfg.get(epochs_key, 0),
                                  gamma=cfg["batch_gamma"], seed=cfg["seed"],
                                  bcq_threshold=cfg["bcq_threshold"], l2=cfg["l2"],
                                  fqi_iterations=cfg["fqi_iterations"],
                                  batch_episodes=cfg["pg_batch_episodes"], n_batches=cfg["pg_batches"])


def cmd_train_bc(args, cfg, out):
    samples = _read_samples(args.samples)
    catalog = _load_catalog(args.catalog)
    ec = episode_config(cfg, "batch_gamma")
    pol = policies.bc_fit(samples, catalog, ec, _context_dim(samples, ec), _learner(cfg))
    pol.greedy = True
    policies.save_policy(pol, os.path.join(out, "bc_policy.npz"))
    atomic_write_json(os.path.join(out, "bc_report.json"), {"final_loss": pol.info["loss_history"][-1]
                                                            if pol.info["loss_history"] else None})
    return 0


def cmd_train_bcq(args, cfg, out):
    samples = _read_samples(args.samples)
    catalog = _load_catalog(args.catalog)
    ec = episode_config(cfg, "batch_gamma")
    bc = policies.load_policy(args.bc) if args.bc else None
    if bc is not None:
        bc.greedy = False
    pol = policies.batch_q_learn(samples, catalog, ec, _context_dim(samples, ec), _learner(cfg), bc)
    policies.save_policy(pol, os.path.join(out, "bcq_policy.npz"))
    atomic_write_json(os.path.join(out, "bcq_report.json"), {"filter_fallbacks": pol.info["filter_fallbacks"]})
    return 0


def cmd_train_pg(args, cfg, out):
    factory, _, _ = _env_factory(args, cfg)
    lc = policies.LearnerConfig(learning_rate=cfg["pg_learning_rate"], gamma=cfg["gamma"], seed=cfg["seed"],
                                batch_episodes=cfg["pg_batch_episodes"], n_batches=cfg["pg_batches"])
    pol = policies.reinforce_online(factory, lc)
    policies.save_policy(pol, os.path.join(out, "pg_policy.npz"))
    atomic_write_json(os.path.join(out, "pg_report.json"), {"training_curve": pol.info["training_curve"]})
    return 0


def _file_id(path):
    """Location-independent id for a run-log record: file name plus content digest."""
    with open(path, "rb") as fh:
        digest = hashlib.blake2b(fh.read(), digest_size=8).hexdigest()
    return f"{os.path.basename(path)}@{digest}"


def cmd_eval_online(args, cfg, out):
    factory, model, _ = _env_factory(args, cfg)
    world = model if isinstance(model, synth.WorldSpec) else None
    results = {}
    lines = ["Policy\tReward"]
    env_id = _file_id(args.world or args.model)
    for name, pol in _load_policies(args.policy, world):
        res = policies.evaluate_online(pol, factory, cfg["eval_episodes"], cfg["seed"])
        results[name] = res.to_dict()
        lines.append(f"{name}\t{res}")
        append_jsonl(os.path.join(out, "runlog.jsonl"), {
            "policy": name, "env": env_id, "seed": cfg["seed"], **res.to_dict()})
    atomic_write_text(os.path.join(out, "eval_online.txt"), "\n".join(lines) + "\n")
    atomic_write_json(os.path.join(out, "eval_online.json"), results)
    return 0


def cmd_cpe(args, cfg, out):
    samples = _read_samples(args.samples)
    ec = episode_config(cfg)
    m = user_model.load_user_model(_need(args.model, "model"))
    trajs = cpe.trajectories_from_samples(samples, ec, _context_dim(samples, ec))
    if cfg["cpe_max_trajectories"]:
        trajs = trajs[:cfg["cpe_max_trajectories"]]
    vm = user_model.ValueModel(m, m.catalog, ec, n_samples=cfg["cpe_value_samples"], seed=cfg["seed"])
    reports = []
    for name, pol in _load_policies(args.policy):
        reports.append(cpe.evaluate_policy(trajs, pol, ec.gamma, vm, (cfg["cpe_clip_lo"], cfg["cpe_clip_hi"]),
                                           name=name))
    atomic_write_text(os.path.join(out, "cpe.txt"), cpe.format_reports(reports))
    atomic_write_json(os.path.join(out, "cpe.json"), [r.to_dict() for r in reports])
    return 0


def cmd_serve_env(args, cfg, out):
    from .server import EnvServer

    factory, _, _ = _env_factory(args, cfg)
    server = EnvServer((cfg["host"], cfg["port"]), factory)
    host, port = server.server_address[:2]
    print(json.dumps({"type": "listening", "host": host, "port": port}), flush=True)

    def stop(signum, frame):
        threading.Thread(target=server.shutdown, daemon=True).start()

    signal.signal(signal.SIGINT, stop)
    signal.signal(signal.SIGTERM, stop)
    try:
        server.serve_forever()
    finally:
        server.server_close()
    return 0


COMMANDS = {
    "gen": cmd_gen, "validate": cmd_validate, "transform": cmd_transform, "split": cmd_split,
    "fit-sim": cmd_fit_sim, "eval-sim": cmd_eval_sim, "understand": cmd_understand,
    "train-bc": cmd_train_bc, "train-bcq": cmd_train_bcq, "train-pg": cmd_train_pg,
    "eval-online": cmd_eval_online, "cpe": cmd_cpe, "serve-env": cmd_serve_env,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="slaterl", description="Slate recommendation RL pipeline.")
    p.add_argument("subcommand", help=", ".join(SUBCOMMANDS))
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", default=".")
    for name in ("log", "catalog", "samples", "world", "model", "bc"):
        p.add_argument(f"--{name}")
    p.add_argument("--policy", action="append", default=[],
                   help="policy checkpoint, or uniform / behavior / greedy (repeatable)")
    return p


def _error_record(exc, subcommand):
    rec = {"error": type(exc).__name__, "message": str(exc), "subcommand": subcommand}
    for attr in ("line", "epoch", "episode"):
        if getattr(exc, attr, None) is not None:
            rec[attr] = getattr(exc, attr)
    return rec


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    sub, out = None, None
    try:
        args = build_parser().parse_args(argv)
        sub, out = args.subcommand, args.out
        if sub not in COMMANDS:
            raise UsageError(f"unknown subcommand {sub!r}; expected one of {', '.join(SUBCOMMANDS)}")
        cfg = resolve_config(args.config, args.set, args.seed)
        os.makedirs(out, exist_ok=True)
        atomic_write_json(os.path.join(out, f"{sub}.config.json"), cfg)
        return COMMANDS[sub](args, cfg, out)
    except (SlateRLError, OSError, ValueError) as exc:
        rec = _error_record(exc, sub)
        print(json.dumps(rec, sort_keys=True), file=sys.stderr)
        if out and os.path.isdir(out):
            try:
                atomic_write_json(os.path.join(out, "error.json"), rec)
            except OSError:
                pass
        return 2 if isinstance(exc, (UsageError, ConfigurationError)) else 1


if __name__ == "__main__":
    sys.exit(main())
