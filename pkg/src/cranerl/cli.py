"""Command-line entry point: train, eval, sensitivity, export-trajectory, print-config."""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import checkpoint as ckpt_io
from . import plotting, reporting
from .config import RunConfig, dump_config, load_config
from .curriculum import build_schedule, schedule_csv
from .evaluation import (ScriptedGrasp, default_suite, evaluate, mean_action_policy,
                         relative_energy, sensitivity_suite, zero_policy)
from .training import EPISODE_FIELDS, LOG_FIELDS, Trainer, episode_dicts, policy_from_checkpoint
from .world import ConfigurationError, perturbation_from_overrides

THREADS_ENV = "CRANE_RL_THREADS"


class CliError(Exception):
    pass


def parse_perturb(items: list[str] | None) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise CliError(f"--perturb expects NAME=VALUE, got {item!r}")
        name, value = item.split("=", 1)
        low = value.strip().lower()
        if low in ("true", "false"):
            out[name.strip()] = low == "true"
        else:
            try:
                out[name.strip()] = float(value)
            except ValueError as exc:
                raise CliError(f"--perturb {name}: {value!r} is not a number") from exc
    return out


def _config_from_args(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "mode", None) is not None:
        changes["mode"] = args.mode
    if getattr(args, "steps", None) is not None:
        changes["budget"] = args.steps
    if getattr(args, "out", None) is not None:
        changes["out_dir"] = args.out
    perturb = parse_perturb(getattr(args, "perturb", None))
    if perturb:
        changes["perturbation"] = perturbation_from_overrides(cfg.perturbation, perturb)
    return replace(cfg, **changes) if changes else cfg


# -- commands --------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    total = cfg.budget
    if args.resume:
        # the run continues under its saved configuration; --steps only moves the stop point
        trainer = Trainer.from_checkpoint(ckpt_io.load(args.resume))
        total = args.steps if args.steps is not None else trainer.cfg.budget
    else:
        trainer = Trainer(cfg)
    ckpt_io.atomic_write_text(out / "config.yaml", dump_config(trainer.cfg))
    ckpt_io.atomic_write_text(out / "schedule.csv", schedule_csv(trainer.lessons))

    def progress(tr, row):
        if not args.quiet:
            print(f"step {row['step']} lesson {row['lesson']} h={row['plane_height']:g} "
                  f"return {row['mean_return']:.4f} success20 {row['success_rate_20']:.2f}",
                  flush=True)

    trainer.train(total, callback=progress)
    ckpt_io.save(out / "checkpoint.ckpt", trainer.to_checkpoint())
    log = trainer.log
    reporting.write_dict_rows(out / "training_log.csv", LOG_FIELDS, log)
    reporting.write_csv(out / "return_curve.csv", ("step", "mean_return", "success_rate_20"),
                        [(r["step"], r["mean_return"], r["success_rate_20"]) for r in log])
    reporting.write_csv(out / "plane_height.csv", ("step", "lesson", "plane_height"),
                        [(r["step"], r["lesson"], r["plane_height"]) for r in log])
    reporting.write_dict_rows(out / "episodes.csv", EPISODE_FIELDS, episode_dicts(trainer.episodes))
    if log:
        plotting.training_curves(log, out / "training_curves.png")
    print(f"wrote {out / 'checkpoint.ckpt'}")
    return 0


def _load_policy(args):
    """Returns (config, policy callable, frozen stats, label)."""
    kind = args.policy
    if kind == "checkpoint":
        if not args.checkpoint:
            raise CliError("--checkpoint is required (or choose --policy scripted|zero)")
        cfg, net, stats = policy_from_checkpoint(ckpt_io.load(args.checkpoint))
        cfg = _apply_overrides(cfg, args)
        return cfg, mean_action_policy(net), stats, Path(args.checkpoint).stem
    cfg = _config_from_args(args)
    policy = ScriptedGrasp() if kind == "scripted" else zero_policy
    return cfg, policy, None, kind


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    perturb = parse_perturb(getattr(args, "perturb", None))
    if perturb:
        cfg = replace(cfg, perturbation=perturbation_from_overrides(cfg.perturbation, perturb))
    return cfg


def _eval_setup(args):
    cfg, policy, stats, label = _load_policy(args)
    crane = cfg.crane()
    lessons = build_schedule(cfg.curriculum, crane)
    lesson = lessons[args.lesson if args.lesson is not None else cfg.eval.lesson]
    n = args.episodes if args.episodes is not None else cfg.eval.episodes
    seed = args.seed if args.seed is not None else cfg.seed + cfg.eval.seed_offset
    out = Path(args.out or cfg.out_dir)
    return cfg, policy, stats, label, crane, lesson, n, seed, out


def cmd_eval(args) -> int:
    cfg, policy, stats, label, crane, lesson, n, seed, out = _eval_setup(args)
    kw = dict(config=cfg.env, crane=crane, seed=seed)
    summary, records = evaluate(policy, n, lesson, stats=stats, perturbation=cfg.perturbation,
                                record=args.record, label=label, **kw)
    summaries = [summary]
    energies = {label: [r.energy for r in records if r.success]}
    if args.reference:
        rcfg, rnet, rstats = policy_from_checkpoint(ckpt_io.load(args.reference))
        ref, ref_records = evaluate(mean_action_policy(rnet), n, lesson, stats=rstats,
                                    perturbation=cfg.perturbation, label=Path(args.reference).stem,
                                    **kw)
        summary.relative_energy = relative_energy(summary, ref)
        summaries.append(ref)
        energies[ref.label] = [r.energy for r in ref_records if r.success]
    reporting.write_summary(out / "summary.csv", summaries)
    reporting.write_csv(out / "eval_episodes.csv",
                        ("episode", "success", "cycle_time_s", "energy_J", "cause"),
                        [(r.index, r.success, r.cycle_time, r.energy, r.cause) for r in records])
    recorded = [r for r in records if r.trace]
    for r in recorded:
        reporting.write_trajectory(out / f"trajectory_{r.index}.csv", r)
    if recorded:
        plotting.tip_profiles({f"episode {r.index}": r for r in recorded[:3]},
                              out / "tip_profiles.png")
    plotting.energy_histogram(energies, out / "energy_histogram.png")
    print(f"{label}: success {summary.success_rate:.3f} over {n} episodes, "
          f"mean time {summary.mean_time:.2f} s, mean energy {summary.mean_energy:.1f} J")
    return 0


def cmd_sensitivity(args) -> int:
    cfg, policy, stats, label, crane, lesson, n, seed, out = _eval_setup(args)
    suite = [] if args.suite == "none" else default_suite(cfg.env.log.radius)
    rows = sensitivity_suite(policy, n, lesson, suite, config=cfg.env, crane=crane,
                             stats=stats, seed=seed)
    reporting.write_sensitivity(out / "sensitivity.csv", rows)
    if rows:
        plotting.sensitivity_bars(rows, out / "sensitivity.png")
    for r in rows:
        print(f"{r.perturbation}: baseline {r.baseline:.3f} perturbed {r.perturbed:.3f} "
              f"retention {r.retention:.3f}")
    return 0


def cmd_export(args) -> int:
    cfg, policy, stats, label, crane, lesson, n, seed, out = _eval_setup(args)
    k = args.episode
    _, records = evaluate(policy, k + 1, lesson, config=cfg.env, crane=crane, stats=stats,
                          perturbation=cfg.perturbation, seed=seed, record=[k], label=label)
    rec = records[k]
    path = reporting.write_trajectory(out / f"trajectory_{k}.csv", rec)
    if len(rec.trace) >= 3:
        plotting.tip_profiles({f"episode {k}": rec}, out / f"trajectory_{k}.png")
    print(f"wrote {path} ({rec.cause}, {rec.sim_steps} sim steps)")
    return 0


def cmd_print_config(args) -> int:
    sys.stdout.write(dump_config(_config_from_args(args)))
    return 0


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cranerl", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, steps=False):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
        sp.add_argument("--mode", choices=("plain", "energy"), help="reward mode")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--perturb", nargs="+", metavar="NAME=VALUE",
                        help="perturbation overrides, e.g. slope_grade=0.176")
        if steps:
            sp.add_argument("--steps", type=int, help="training budget in simulation steps")

    t = sub.add_parser("train", help="run PPO with the curriculum")
    common(t, steps=True)
    t.add_argument("--resume", help="continue from a checkpoint")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    def evaluation(sp):
        common(sp)
        sp.add_argument("--checkpoint", help="trained policy checkpoint")
        sp.add_argument("--policy", choices=("checkpoint", "scripted", "zero"),
                        default="checkpoint", help="policy to evaluate")
        sp.add_argument("--episodes", type=int, help="number of evaluation episodes")
        sp.add_argument("--lesson", type=int, help="lesson index (default: final lesson)")

    e = sub.add_parser("eval", help="success rate, cycle time and energy")
    evaluation(e)
    e.add_argument("--reference", help="checkpoint used as the relative-energy reference")
    e.add_argument("--record", type=int, default=0,
                   help="write trajectories of the first N episodes")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sensitivity", help="success retention under perturbations")
    evaluation(s)
    s.add_argument("--suite", choices=("default", "none"), default="default")
    s.set_defaults(func=cmd_sensitivity)

    x = sub.add_parser("export-trajectory", help="write one evaluation episode's trace")
    evaluation(x)
    x.add_argument("--episode", type=int, default=0, help="episode index")
    x.set_defaults(func=cmd_export)

    c = sub.add_parser("print-config", help="print the effective configuration as YAML")
    common(c, steps=True)
    c.set_defaults(func=cmd_print_config)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        threads = int(os.environ.get(THREADS_ENV, "1"))
        if threads < 1:
            raise ValueError
    except ValueError:
        print(f"error: {THREADS_ENV} must be a positive integer", file=sys.stderr)
        return 2
    try:
        with threadpool_limits(limits=threads):
            return args.func(args)
    except (ConfigurationError, ckpt_io.CheckpointError, CliError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc.strerror}: {exc.filename}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
