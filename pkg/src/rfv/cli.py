"""Command-line entry points.

Exit codes: 0 success, 1 internal error, 2 user error (bad input, bad config).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .bank import Bank, load_bank, save_bank
from .config import RunConfig, with_seed
from .errors import RfvError, UserError
from .retriever import EmbedderConfig, build_index, embed_text, mips_topk

log = logging.getLogger("rfv")


def _out_dir(args, cfg: RunConfig, default: str) -> Path:
    out = Path(args.out or cfg.path("out") or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_cfg(args) -> RunConfig:
    return with_seed(RunConfig.load(args.config), getattr(args, "seed", None))


def _bank_path(args, cfg: RunConfig) -> str:
    path = args.bank or cfg.path("bank")
    if not path:
        raise UserError("no bank given (use --bank or paths.bank in the config)")
    return path


# ------------------------------------------------------------------ commands


def cmd_bank_build(args) -> int:
    from .midlevel import load_detections

    cfg = _load_cfg(args)
    dim = cfg.data["embedder"]["dim"]
    entries = load_detections(args.input, args.iou, args.smoothing)
    bank = Bank(embedding_dim=dim)
    for e in entries:
        bank.add_entry(e)
    root = save_bank(bank, args.out)
    print(f"{len(bank)} entries -> {root}")
    return 0


def cmd_bank_synth(args) -> int:
    from .sim.humanbank import synthesize_human_bank
    from .sim.world import TASK_TYPES, TaskSpec

    cfg = _load_cfg(args)
    tasks = args.tasks.split(",") if args.tasks else list(TASK_TYPES)
    bad = [t for t in tasks if t not in TASK_TYPES]
    if bad:
        raise UserError(f"unknown task types {bad}; choose from {list(TASK_TYPES)}")
    n = args.n_per_task or cfg.data["sim"]["bank_per_task"]
    pc = cfg.policy_config()
    bank = synthesize_human_bank([TaskSpec(t) for t in tasks], n, cfg.seed, pc.embed_dim,
                                 view_id=pc.views[0])
    root = save_bank(bank, args.out)
    print(f"{len(bank)} entries -> {root}")
    return 0


def cmd_retrieve(args) -> int:
    if args.k < 1:
        raise UserError("--k must be >= 1")
    bank = load_bank(args.bank)
    index = build_index(bank, EmbedderConfig(bank.embedding_dim or 64))
    q = embed_text(args.query, EmbedderConfig(index.dim))
    ranked = mips_topk(index.for_view(args.view), q, args.k)
    print(json.dumps(ranked.to_json()))
    return 0


def _experiment(cfg: RunConfig, args):
    from .sim.evaluate import Experiment, load_demos

    ecfg = cfg.experiment_config()
    bank = load_bank(args.bank) if getattr(args, "bank", None) else None
    demos = load_demos(args.demos) if getattr(args, "demos", None) else None
    if demos is not None and not demos:
        raise UserError(f"no episodes found in {args.demos}")
    return Experiment(ecfg, bank=bank, demos=demos, log=lambda m: log.info(m))


def _write_losses(path: Path, losses) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    out = _out_dir(args, cfg, "runs/train")
    exp = _experiment(cfg, args)
    pc = exp.cfg.policy
    if args.steps is not None:
        pc = replace(pc, steps=args.steps)
    if args.no_retrieval:
        pc = replace(pc, use_retrieval=False)
    policy = exp.policy(pc)
    policy.save(out / "checkpoint")
    _write_losses(out / "loss.csv", policy.losses)
    if args.save_demos:
        from .sim.evaluate import save_demos
        save_demos(exp.demos, out / "demos")
    if not args.bank:
        save_bank(exp.bank, out / "bank")
    print(f"final loss {policy.losses[-1]:.6f} -> {out / 'checkpoint'}")
    return 0


def cmd_eval(args) -> int:
    from .policy import Policy, RetrievalContext
    from .sim.evaluate import ExpertAgent, PolicyAgent, default_suite, evaluate

    cfg = _load_cfg(args)
    out = _out_dir(args, cfg, "runs/eval")
    sim = cfg.data["sim"]
    seeds = tuple(sim["seeds"])
    episodes = args.episodes or sim["episodes"]
    if args.expert:
        agent, views = ExpertAgent(), ("top",)
    else:
        ckpt = args.checkpoint or cfg.path("checkpoint")
        if not ckpt:
            raise UserError("eval needs --checkpoint or --expert")
        policy = Policy.load(ckpt)
        ctx = None
        if policy.cfg.use_retrieval:
            bank = load_bank(_bank_path(args, cfg))
            ctx = RetrievalContext(bank, build_index(bank, policy.cfg.embedder), policy.cfg)
        agent, views = PolicyAgent(policy, ctx), policy.cfg.views
    tab = evaluate(agent, default_suite(), seeds, episodes, sim["max_steps"], views)
    (out / "success.csv").write_text(tab.to_csv(), encoding="utf-8")
    (out / "success.txt").write_text(tab.to_text(), encoding="utf-8")
    print(tab.to_text(), end="")
    return 0


def cmd_ablate(args) -> int:
    from .sim.evaluate import ablation_k, ablation_midlevel

    cfg = _load_cfg(args)
    out = _out_dir(args, cfg, f"runs/ablate-{args.which}")
    exp = _experiment(cfg, args)
    if args.which == "k":
        ks = [int(k) for k in args.ks.split(",")]
        table = ablation_k(exp, ks)
    else:
        table = ablation_midlevel(exp)
    (out / f"ablation_{args.which}.csv").write_text(table.to_csv(), encoding="utf-8")
    (out / f"ablation_{args.which}.txt").write_text(table.to_text(), encoding="utf-8")
    for name, tab in table.tables.items():
        slug = name.replace("=", "").replace("-", "no_").strip("_")
        (out / f"success_{slug}.csv").write_text(tab.to_csv(), encoding="utf-8")
    print(table.to_text(), end="")
    return 0


def cmd_demos(args) -> int:
    from .sim.evaluate import collect_demos, default_suite, save_demos

    cfg = _load_cfg(args)
    pc = cfg.policy_config()
    n = args.n_per_task or cfg.data["sim"]["demos_per_task"]
    demos = collect_demos(default_suite(), n, cfg.seed, pc.views, cfg.data["sim"]["max_steps"])
    root = save_demos(demos, args.out)
    print(f"{len(demos)} episodes -> {root}")
    return 0


def cmd_serve(args) -> int:
    from .service import RetrievalService, make_server

    cfg = _load_cfg(args)
    bank = load_bank(_bank_path(args, cfg))
    srv = make_server(RetrievalService(bank), args.host, args.port)
    print(f"serving {len(bank)} entries on http://{args.host}:{srv.server_address[1]}", flush=True)
    try:
        srv.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        srv.server_close()
    return 0


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rfv", description="Retrieval-augmented imitation learning toolkit.")
    p.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="run config JSON (default: $RFV_CONFIG)")
        if seed:
            sp.add_argument("--seed", type=int, default=None)

    bank = sub.add_parser("bank", help="build or synthesize a memory bank")
    bsub = bank.add_subparsers(dest="bank_command", required=True)
    b = bsub.add_parser("build", help="ingest detector outputs (JSONL)")
    b.add_argument("--input", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--iou", type=float, default=0.1)
    b.add_argument("--smoothing", type=float, default=1.0)
    common(b)
    b.set_defaults(func=cmd_bank_build)
    s = bsub.add_parser("synth", help="synthesize a human-video bank from the simulator")
    s.add_argument("--out", required=True)
    s.add_argument("--tasks", help="comma-separated task types (default: all)")
    s.add_argument("--n-per-task", type=int, default=None)
    common(s)
    s.set_defaults(func=cmd_bank_synth)

    r = sub.add_parser("retrieve", help="top-k entries for a query")
    r.add_argument("--query", required=True)
    r.add_argument("--k", type=int, default=3)
    r.add_argument("--bank", required=True)
    r.add_argument("--view", default=None)
    r.set_defaults(func=cmd_retrieve)

    t = sub.add_parser("train", help="behaviour cloning in the simulator")
    t.add_argument("--out")
    t.add_argument("--bank")
    t.add_argument("--demos", help="demo dataset directory (default: collect from the expert)")
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--no-retrieval", action="store_true")
    t.add_argument("--save-demos", action="store_true")
    common(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="success-rate table for a checkpoint")
    e.add_argument("--checkpoint")
    e.add_argument("--bank")
    e.add_argument("--out")
    e.add_argument("--episodes", type=int, default=None)
    e.add_argument("--expert", action="store_true", help="evaluate the scripted expert instead")
    common(e)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="retrieved-count or mid-level channel ablation")
    a.add_argument("--which", choices=("k", "midlevel"), required=True)
    a.add_argument("--ks", default="1,3,5,7")
    a.add_argument("--out")
    a.add_argument("--bank")
    a.add_argument("--demos")
    common(a)
    a.set_defaults(func=cmd_ablate)

    d = sub.add_parser("demos", help="record expert demonstrations")
    d.add_argument("--out", required=True)
    d.add_argument("--n-per-task", type=int, default=None)
    common(d)
    d.set_defaults(func=cmd_demos)

    v = sub.add_parser("serve", help="HTTP retrieval service")
    v.add_argument("--bank")
    v.add_argument("--port", type=int, default=8080)
    v.add_argument("--host", default="127.0.0.1")
    common(v, seed=False)
    v.set_defaults(func=cmd_serve)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UserError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except RfvError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
