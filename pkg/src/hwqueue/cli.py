"""Command-line front end for the experiment pipeline.

Subcommands: validate (scenario diagnostics), converge (simulated marginals
vs solver marginals with the KS trend), lemmas (idle-metric trend plus the
ordering-concentration estimates and bounds), compare (policy table plus
dominance audits), rerun (re-execute a previously written manifest).

Every command writes a manifest capturing all inputs and the resolved seed
next to its outputs; outputs are plain CSV/JSON with deterministic
formatting, so re-running a manifest reproduces them byte for byte.

Exit codes: 0 success, 2 configuration error, 3 runtime error, 4 a check
requested via --assert failed.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import analysis, diffusion
from .errors import ConfigurationError
from .replicate import default_workers
from .scenario import (ScenarioConfig, arrival_rate_for_n, build_rate_profile,
                       load_scenario, scenario_from_mapping, scenario_to_mapping,
                       validate_scenario)
from .simcore import PolicyKind, parse_policy

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_ASSERT = 4


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_manifest(outdir: str, command: str, cfg: ScenarioConfig, args: dict) -> str:
    os.makedirs(outdir, exist_ok=True)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "scenario": scenario_to_mapping(cfg),
        "args": args,
        "master_seed": cfg.master_seed,
    }
    path = os.path.join(outdir, "manifest.json")
    _write_json(path, manifest)
    return path


def _resolve_scenario(ns) -> ScenarioConfig:
    pre = getattr(ns, "cfg", None)
    cfg = pre if pre is not None else load_scenario(ns.scenario)
    overrides = {}
    if getattr(ns, "ladder", None):
        overrides["ladder"] = tuple(int(x) for x in ns.ladder.split(","))
    if getattr(ns, "reps", None) is not None:
        overrides["reps"] = ns.reps
    if getattr(ns, "t_probe", None) is not None:
        overrides["t_probe"] = ns.t_probe
    if getattr(ns, "seed", None) is not None:
        overrides["master_seed"] = ns.seed
    if getattr(ns, "sde_samples", None) is not None:
        overrides["sde_samples"] = ns.sde_samples
    if getattr(ns, "sde_dt", None) is not None:
        overrides["sde_dt"] = ns.sde_dt
    cfg = cfg.with_overrides(**overrides)
    errs = validate_scenario(cfg)
    if errs:
        raise ConfigurationError("\n".join(errs))
    return cfg


# ---------------------------------------------------------------------------
# validate


def cmd_validate(ns) -> int:
    cfg = load_scenario(ns.scenario)
    errs = validate_scenario(cfg)
    if errs:
        for e in errs:
            print(f"invalid: {e}", file=sys.stderr)
        return EXIT_CONFIG
    lim = cfg.limit_params()
    print(f"scenario {cfg.name}: valid")
    print(f"  lambda   = {lim.lam!r}")
    print(f"  sigma^2  = {lim.sigma2!r}")
    print(f"  beta     = {lim.beta_drift!r}")
    print(f"  mu_star  = {lim.mu_star!r}")
    print(f"  mu_hat   = {lim.mu_hat!r} (at n_ref={max(cfg.ladder)})")
    for n in cfg.ladder:
        profile = build_rate_profile(cfg.pool_spec, n)
        lam_n = arrival_rate_for_n(cfg.pool_spec.mu, cfg.lambda_hat, profile.n_realized)
        print(f"  n={n}: realized {profile.n_realized} servers, lambda_n={lam_n!r}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# converge


def _ks_trend_checks(ks_values: list[float], n_sim: int, n_sde: int,
                     final_bound: float = 0.10) -> dict:
    # one inversion is tolerated if it stays within twice the two-sample
    # Monte-Carlo noise floor (never below the 0.01 criterion allowance)
    noise = math.sqrt(1.0 / max(n_sim, 1) + 1.0 / max(n_sde, 1))
    allowed_excess = max(0.01, noise)
    inversions = []
    for i in range(len(ks_values) - 1):
        if ks_values[i + 1] > ks_values[i]:
            inversions.append(ks_values[i + 1] - ks_values[i])
    trend_ok = len(inversions) <= 1 and all(e <= allowed_excess for e in inversions)
    final_ok = ks_values[-1] <= final_bound if ks_values else False
    return {
        "ks_values": ks_values,
        "inversions": inversions,
        "allowed_excess": allowed_excess,
        "trend_ok": trend_ok,
        "final_ks": ks_values[-1] if ks_values else None,
        "final_ok": final_ok,
        "ok": trend_ok and final_ok,
    }


def cmd_converge(ns) -> int:
    cfg = _resolve_scenario(ns)
    outdir = os.path.join(ns.outdir, "converge")
    _write_manifest(outdir, "converge", cfg, {
        "workers": ns.workers, "assert": ns.assert_, "thin_grid": ns.thin_grid,
    })
    if cfg.reps < 2:
        print("warning: KS distance over a single replication is meaningless",
              file=sys.stderr)
    sde_vals, params = diffusion.sde_batch_for_scenario(cfg, cfg.t_probe)
    diffusion.export_sde_samples(
        os.path.join(outdir, "sde_samples.csv"), sde_vals, params, cfg.sde_dt,
        cfg.t_probe, f"master={cfg.master_seed} tag=sde")
    per_n = []
    for n in cfg.ladder:
        samples = diffusion.marginal_samples(cfg, n, PolicyKind.PI0, cfg.t_probe,
                                             cfg.reps, workers=ns.workers)
        ndir = os.path.join(outdir, str(n))
        os.makedirs(ndir, exist_ok=True)
        with open(os.path.join(ndir, "samples.csv"), "w", encoding="utf-8") as fh:
            fh.write("rep,xhat\n")
            for rep, v in enumerate(samples):
                fh.write(f"{rep},{float(v)!r}\n")
        if ns.thin_grid:
            from .replicate import run_one
            from .simcore import RecordOptions
            example = run_one(cfg, n, PolicyKind.PI0, 0,
                              record=RecordOptions(mode="grid", grid_step=ns.thin_grid))
            example.to_csv(os.path.join(ndir, "example_path.csv"))
        ks = analysis.ks_distance(samples, sde_vals)
        per_n.append({
            "n": n,
            "reps": int(len(samples)),
            "ks": ks,
            "sim_mean": float(samples.mean()),
            "sim_sd": float(samples.std(ddof=1)) if len(samples) > 1 else None,
        })
        print(f"n={n}: KS={ks:.4f} over {len(samples)} replications")
    checks = _ks_trend_checks([row["ks"] for row in per_n], cfg.reps, len(sde_vals))
    summary = {
        "schema_version": SCHEMA_VERSION,
        "kind": "converge",
        "scenario": cfg.name,
        "ladder": list(cfg.ladder),
        "t_probe": cfg.t_probe,
        "reps": cfg.reps,
        "sde": {
            "samples": int(len(sde_vals)),
            "dt": cfg.sde_dt,
            "sigma": params.sigma,
            "beta": params.beta_drift,
            "mu_star": params.mu_star,
            "xi0": params.xi0,
            "mean": float(sde_vals.mean()),
            "sd": float(sde_vals.std(ddof=1)),
        },
        "per_n": per_n,
        "checks": checks,
    }
    _write_json(os.path.join(outdir, "summary.json"), summary)
    if ns.assert_ and not checks["ok"]:
        print("assert: KS trend check failed", file=sys.stderr)
        return EXIT_ASSERT
    return EXIT_OK


# ---------------------------------------------------------------------------
# lemmas


def cmd_lemmas(ns) -> int:
    cfg = _resolve_scenario(ns)
    if cfg.lemma2 is None:
        raise ConfigurationError("scenario has no lemma2 section")
    l2cfg = analysis.Lemma2Config.from_mapping(cfg.lemma2)
    outdir = os.path.join(ns.outdir, "lemmas")
    _write_manifest(outdir, "lemmas", cfg, {
        "workers": ns.workers, "assert": ns.assert_, "mc_max_n": ns.mc_max_n,
    })

    profile_ref = build_rate_profile(cfg.pool_spec, max(cfg.ladder))
    if cfg.partition:
        eps = float(cfg.partition["epsilon"])
        alpha = float(cfg.partition["alpha"])
    else:
        part = analysis.ClassPartition.default(profile_ref)
        eps, alpha = part.epsilon, part.alpha
    lemma1_rows = []
    medians = []
    for n in cfg.ladder:
        metrics = analysis.lemma1_campaign(cfg, n, cfg.reps, (eps, alpha),
                                           cfg.horizon, workers=ns.workers)
        for rep, v in enumerate(metrics):
            lemma1_rows.append((n, rep, float(v)))
        med = float(np.median(metrics))
        medians.append({"n": n, "median": med, "mean": float(metrics.mean())})
        print(f"lemma1 n={n}: median idle metric {med:.4f}")
    with open(os.path.join(outdir, "lemma1.csv"), "w", encoding="utf-8") as fh:
        fh.write("n,rep,idle_metric\n")
        for n, rep, v in lemma1_rows:
            fh.write(f"{n},{rep},{v!r}\n")

    from .seeds import stream
    mc_rows = []
    lemma2_per_n = []
    for n in l2cfg.mc_ladder:
        bounds = analysis.lemma2_bounds(l2cfg, n)
        entry = {
            "n": n,
            "bound1": bounds.bound1, "bound2": bounds.bound2,
            "log_bound1": bounds.log_bound1, "log_bound2": bounds.log_bound2,
            "vacuous1": bounds.vacuous1, "vacuous2": bounds.vacuous2,
        }
        if n <= ns.mc_max_n:
            mc = analysis.lemma2_mc(l2cfg, n, l2cfg.reps,
                                    stream(cfg.master_seed, n, 0, "lemma2"))
            for rep in range(mc.reps):
                mc_rows.append((n, rep, int(mc.counts1[rep]), int(mc.counts2[rep]),
                                int(mc.counts1[rep] <= mc.thresh1),
                                int(mc.counts2[rep] >= mc.thresh2)))
            entry.update(p1_hat=mc.p1_hat, p2_hat=mc.p2_hat, reps=mc.reps,
                         se1=mc.se(mc.p1_hat), se2=mc.se(mc.p2_hat),
                         degenerate1=mc.degenerate1)
            print(f"lemma2 n={n}: p1_hat={mc.p1_hat:.3f} (bound {bounds.bound1:.3g}), "
                  f"p2_hat={mc.p2_hat:.3f} (bound {bounds.bound2:.3g})")
        else:
            print(f"lemma2 n={n}: bounds only "
                  f"(log {bounds.log_bound1:.1f}, {bounds.log_bound2:.1f})")
        lemma2_per_n.append(entry)
    with open(os.path.join(outdir, "lemma2_mc.csv"), "w", encoding="utf-8") as fh:
        fh.write("n,rep,count1,count2,event1,event2\n")
        for row in mc_rows:
            fh.write(",".join(str(v) for v in row) + "\n")

    med_vals = [m["median"] for m in medians]
    mc_entries = [e for e in lemma2_per_n if "p1_hat" in e]
    checks = {
        "lemma1_medians": med_vals,
        "lemma1_ok": (len(med_vals) >= 2 and med_vals[-1] <= 0.5 * med_vals[0]
                      and all(m >= 0 and math.isfinite(m) for m in med_vals)),
        "lemma2_estimates_ok": all(e["p1_hat"] <= 0.05 and e["p2_hat"] <= 0.05
                                   for e in mc_entries),
        "lemma2_bounds_dominate": all(
            e["bound1"] >= e["p1_hat"] - 3 * e["se1"]
            and e["bound2"] >= e["p2_hat"] - 3 * e["se2"] for e in mc_entries),
        "lemma2_bounds_decreasing": (
            all(a["log_bound1"] > b["log_bound1"] for a, b in
                zip(lemma2_per_n, lemma2_per_n[1:]))
            and all(a["log_bound2"] > b["log_bound2"] for a, b in
                    zip(lemma2_per_n, lemma2_per_n[1:]))),
    }
    checks["ok"] = all(v for k, v in checks.items()
                       if k.endswith("_ok") or k.startswith("lemma2_bounds"))
    summary = {
        "schema_version": SCHEMA_VERSION,
        "kind": "lemmas",
        "scenario": cfg.name,
        "ladder": list(cfg.ladder),
        "reps": cfg.reps,
        "partition": {"epsilon": eps, "alpha": alpha},
        "lemma1_per_n": medians,
        "lemma2_per_n": lemma2_per_n,
        "checks": checks,
    }
    _write_json(os.path.join(outdir, "summary.json"), summary)
    if ns.assert_ and not checks["ok"]:
        print("assert: lemma checks failed", file=sys.stderr)
        return EXIT_ASSERT
    return EXIT_OK


# ---------------------------------------------------------------------------
# compare


def cmd_compare(ns) -> int:
    cfg = _resolve_scenario(ns)
    policies = [parse_policy(p) for p in ns.policies.split(",")]
    n = ns.n
    outdir = os.path.join(ns.outdir, "compare")
    _write_manifest(outdir, "compare", cfg, {
        "n": n, "policies": [p.value for p in policies],
        "workers": ns.workers, "assert": ns.assert_, "audit_reps": ns.audit_reps,
    })
    rows, raw = analysis.policy_comparison(cfg, n, policies, cfg.t_probe,
                                           cfg.reps, workers=ns.workers)
    ndir = os.path.join(outdir, str(n))
    os.makedirs(ndir, exist_ok=True)
    with open(os.path.join(ndir, "replications.csv"), "w", encoding="utf-8") as fh:
        fh.write("policy,rep,xhat_probe,qhat_integral\n")
        for p in policies:
            xh = raw[p.value]["xhat"]; qi = raw[p.value]["qint"]
            for rep in range(len(xh)):
                fh.write(f"{p.value},{rep},{float(xh[rep])!r},{float(qi[rep])!r}\n")
    audits = {}
    for p in policies:
        audits[p.value] = analysis.dominance_campaign(
            cfg, n, p, min(cfg.reps, ns.audit_reps), workers=ns.workers)
    per_policy = []
    for row in rows:
        per_policy.append({
            "policy": row.policy, "reps": row.reps,
            "mean_xhat": row.mean_xhat, "ci_xhat": row.ci_xhat,
            "se_xhat": row.se_xhat,
            "mean_qint": row.mean_qint, "ci_qint": row.ci_qint,
            "dominance": audits[row.policy],
        })
        print(f"{row.policy:>13}: mean xhat({cfg.t_probe}) = {row.mean_xhat:+.4f} "
              f"+- {row.ci_xhat:.4f}, mean buffer integral = {row.mean_qint:.4f} "
              f"+- {row.ci_qint:.4f}, dominance violations: "
              f"{audits[row.policy]['violations']}")
    checks = {"dominance_clean": all(a["violations"] == 0 and
                                     a["conservation_breaches"] == 0
                                     for a in audits.values())}
    stats = {r.policy: r for r in rows}
    if "PI0" in stats and "SlowestFirst" in stats:
        a, b = stats["SlowestFirst"], stats["PI0"]
        z = ((a.mean_xhat - b.mean_xhat)
             / math.sqrt(a.se_xhat**2 + b.se_xhat**2))
        checks["slowest_above_pi0_z"] = z
        checks["slowest_above_pi0"] = z >= 1.645
    if "PI0" in stats and "FSF" in stats:
        a, b = stats["PI0"], stats["FSF"]
        pooled = math.sqrt(a.se_xhat**2 + b.se_xhat**2)
        checks["pi0_fsf_gap"] = abs(a.mean_xhat - b.mean_xhat)
        checks["pi0_fsf_close"] = abs(a.mean_xhat - b.mean_xhat) <= 2 * pooled
    checks["ok"] = all(v for k, v in checks.items()
                       if isinstance(v, bool))
    summary = {
        "schema_version": SCHEMA_VERSION,
        "kind": "compare",
        "scenario": cfg.name,
        "n": n,
        "t_probe": cfg.t_probe,
        "reps": cfg.reps,
        "per_policy": per_policy,
        "checks": checks,
    }
    _write_json(os.path.join(outdir, "summary.json"), summary)
    if ns.assert_ and not checks["ok"]:
        print("assert: comparison checks failed", file=sys.stderr)
        return EXIT_ASSERT
    return EXIT_OK


# ---------------------------------------------------------------------------
# rerun


def cmd_rerun(ns) -> int:
    with open(ns.manifest, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    cfg = scenario_from_mapping(manifest["scenario"])
    command = manifest["command"]
    args = manifest["args"]

    class NS:
        pass

    sub = NS()
    sub.cfg = cfg
    sub.scenario = None
    sub.outdir = ns.outdir
    sub.workers = ns.workers or args.get("workers") or default_workers()
    sub.assert_ = args.get("assert", False)
    sub.ladder = None
    sub.reps = None
    sub.t_probe = None
    sub.seed = None
    sub.sde_samples = None
    sub.sde_dt = None
    sub.thin_grid = args.get("thin_grid")
    if command == "converge":
        return cmd_converge(sub)
    if command == "lemmas":
        sub.mc_max_n = args.get("mc_max_n", 100_000_000)
        return cmd_lemmas(sub)
    if command == "compare":
        sub.n = args["n"]
        sub.policies = ",".join(args["policies"])
        sub.audit_reps = args.get("audit_reps", 50)
        return cmd_compare(sub)
    raise ConfigurationError(f"manifest command {command!r} is not rerunnable")


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hwqueue", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, needs_outdir=True):
        p.add_argument("--scenario", required=True, help="scenario YAML file")
        if needs_outdir:
            p.add_argument("--outdir", default="out", help="output directory root")
            p.add_argument("--workers", type=int, default=None,
                           help="worker processes (default: HWQUEUE_WORKERS or CPU count)")
            p.add_argument("--seed", type=int, default=None, help="override master seed")
            p.add_argument("--reps", type=int, default=None, help="override replications")
            p.add_argument("--t-probe", dest="t_probe", type=float, default=None)
            p.add_argument("--ladder", default=None, help="comma-separated system sizes")
            p.add_argument("--assert", dest="assert_", action="store_true",
                           help="exit 4 when the command's acceptance checks fail")
            p.add_argument("--thin-grid", dest="thin_grid", type=float, default=None,
                           help="recording grid step for large systems")

    p = sub.add_parser("validate", help="parse and check a scenario file")
    p.add_argument("--scenario", required=True)
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("converge", help="KS trend of simulated vs solver marginals")
    common(p)
    p.add_argument("--sde-samples", dest="sde_samples", type=int, default=None)
    p.add_argument("--sde-dt", dest="sde_dt", type=float, default=None)
    p.set_defaults(fn=cmd_converge)

    p = sub.add_parser("lemmas", help="idle-metric trend and ordering concentration")
    common(p)
    p.add_argument("--mc-max-n", dest="mc_max_n", type=int, default=100_000_000,
                   help="largest n at which the Monte-Carlo estimator runs")
    p.set_defaults(fn=cmd_lemmas)

    p = sub.add_parser("compare", help="policy comparison and dominance audits")
    common(p)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--policies", default="PI0,FSF,RandomIdle,SlowestFirst")
    p.add_argument("--audit-reps", dest="audit_reps", type=int, default=50)
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("rerun", help="re-execute a written manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--outdir", default="out")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(fn=cmd_rerun)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    ns = ap.parse_args(argv)
    if getattr(ns, "workers", None) is None and ns.command not in ("validate", "rerun"):
        ns.workers = default_workers()
    try:
        return ns.fn(ns)
    except (ConfigurationError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
