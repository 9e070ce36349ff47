"""Experiment runner: theory checks, gate training, policy evaluation, survival.

Subcommands `theory`, `train`, `eval`, `survival` each take a JSON config
(`--config`), a mandatory `--seed`, and an output directory (`--out`).
Exit codes: 0 success, 1 assertion or theory violation, 2 config error.
Outputs are plain CSV/JSON for external plotting; aside from wall-clock
timing columns, (config, seed) determines every output byte.

The only environment variable honored is RETAINKV_THREADS, which sizes the
thread pool used for independent (policy, budget) evaluation cells.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import theory
from .backbone import student_forward
from .eviction import TraceRow
from .evaluate import POLICIES, SelectionRecorder, decode_sequence, evaluate_policies
from .gates import init_gate_params, load_gates, save_gates
from .tasks import TaskSpec, build_task_model, default_shape, generate_dataset
from .theory import (
    PersistenceConfig,
    StabilityError,
    check_reweighting_identity,
    check_dilution_bound,
    fit_var1,
    pca_project,
    random_near_tie_instance,
    simulate_persistence,
    spectral_radius,
    survival_curve,
)
from .training import DivergenceError, train_gates

CONFIG_VERSION = 1

DEFAULT_CONFIG = {
    "version": CONFIG_VERSION,
    "task": {"context_len": 96, "n_keys": 8, "n_values": 4, "n_queries": 4,
             "n_distractor_vocab": 16, "vocab": 64},
    "model": {"gate_hidden": 16},
    "train": {"steps": 500, "batch_size": 4, "lr": 0.005, "lambda_cap": 1.0,
              "budget_fraction": 0.15, "tied": True, "gate_input": "embedding",
              "n_sequences": 64},
    "eviction": {"horizon": 2, "cadence": 1},
    "eval": {"budgets": [0.0625, 0.25], "policies": list(POLICIES), "samples": 30,
             "trace": False},
    "survival": {"samples": 4, "top_k": [1, 2, 4], "tau": [0.99],
                 "horizons": [1, 2, 4, 8, 16, 32, 64]},
    "theory": {"bound_instances": 1000, "identity_instances": 1000,
               "persistence_configs": 5, "persistence_trials": 2000,
               "n_max": 200, "var_fits": 10, "var_radius": 0.76,
               "force_unstable": False},
}

PRESETS = {
    "default": {},
    "tying_off": {"train": {"tied": False}},
    "gate_input_kv": {"train": {"gate_input": "kv"}},
    "lookahead1": {"eviction": {"horizon": 1}},
    "lookahead2": {"eviction": {"horizon": 2}},
    "lookahead5": {"eviction": {"horizon": 5}},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = val
    return out


def load_config(path: str | None, preset: str = "default") -> dict:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; options: {sorted(PRESETS)}")
    cfg = _merge(DEFAULT_CONFIG, PRESETS[preset])
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config root must be a JSON object")
        cfg = _merge(cfg, user)
    if cfg.get("version") != CONFIG_VERSION:
        raise ConfigError(f"config version must be {CONFIG_VERSION}")
    unknown = set(cfg) - set(DEFAULT_CONFIG)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for section in ("task", "model", "train", "eviction", "eval", "survival", "theory"):
        extra = set(cfg[section]) - set(DEFAULT_CONFIG[section])
        if extra:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(extra)}")
    for policy in cfg["eval"]["policies"]:
        if policy not in POLICIES:
            raise ConfigError(f"unknown policy {policy!r}")
    return cfg


# -- schema-checked writers ---------------------------------------------------

EVAL_COLUMNS = ("policy", "budget", "accuracy", "mean_retained", "peak_entries", "seconds")
LOSS_COLUMNS = ("step", "quality", "cap", "total")
SURVIVAL_COLUMNS = ("criterion", "layer", "head", "horizon", "fraction")
TRACE_COLUMNS = ("step", "layer", "head", "token_birth", "score", "action")


def _check_rows(rows: list[dict], columns: tuple, name: str) -> None:
    for row in rows:
        if set(row) != set(columns):
            raise AssertionError(f"{name} row keys {sorted(row)} != {sorted(columns)}")
        for key, val in row.items():
            if isinstance(val, float) and not np.isfinite(val):
                raise AssertionError(f"{name} row has non-finite {key}")


def write_csv(path: str, rows: list[dict], columns: tuple, name: str) -> None:
    _check_rows(rows, columns, name)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(columns))
            writer.writeheader()
            writer.writerows(rows)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: str, payload: dict) -> None:
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- theory suite ---------------------------------------------------------------


def random_persistence_config(rng: np.random.Generator) -> PersistenceConfig:
    """Stable dynamics with a reachable, frequently-exited survival region."""
    m = int(rng.integers(2, 4))
    a = rng.normal(size=(m, m))
    a *= rng.uniform(0.3, 0.85) / spectral_radius(a)
    n_tokens = int(rng.integers(6, 14))
    compat = rng.normal(size=(n_tokens, m))
    compat /= np.linalg.norm(compat, axis=1, keepdims=True)
    return PersistenceConfig(
        transition=a,
        offset=0.2 * rng.normal(size=m),
        noise_scale=float(rng.uniform(0.6, 1.2)),
        compat=compat,
        token=int(rng.integers(0, n_tokens)),
        top_k=int(rng.integers(1, min(4, n_tokens))),
        slack=float(rng.uniform(0.0, 0.4)),
        block=int(rng.integers(1, 3)),
    )


def _backbone_query_var(cfg: dict, rng: np.random.Generator) -> dict:
    """Fit query-state dynamics of the toy model: PCA projection, then VAR(1)."""
    spec = TaskSpec(**cfg["task"])
    bb = build_task_model(spec, rng)
    trajs = []
    pooled = []
    for sample in generate_dataset(spec, 8, rng):
        _, trace = student_forward(bb, None, sample.tokens)
        q = trace.per_head[0][0]["q"]
        pooled.append(q)
        trajs.append(q)
    states = np.concatenate(pooled)
    _, _, spectrum = pca_project(states, states.shape[1])
    effective_rank = int(np.sum(spectrum > 1e-10 * spectrum.sum()))
    k = max(1, min(8, effective_rank))
    _, comps, _ = pca_project(states, k)
    fit = fit_var1([(t - states.mean(axis=0)) @ comps.T for t in trajs])
    return {"pca_dims": k, "spectral_radius": fit.spectral_radius,
            "stable": fit.stable, "residual_rms": fit.residual_rms}


def run_theory_suite(cfg: dict, seed: int) -> dict:
    tcfg = cfg["theory"]
    master = np.random.SeedSequence(seed)
    rng_bound, rng_ident, rng_pers, rng_var, rng_bb = \
        [np.random.default_rng(s) for s in master.spawn(5)]

    bound_viol = 0
    bound_margin = np.inf
    for _ in range(tcfg["bound_instances"]):
        res = check_dilution_bound(random_near_tie_instance(rng_bound))
        bound_margin = min(bound_margin, res.delta - res.bound)
        if not res.holds:
            bound_viol += 1

    ident_viol = 0
    ident_err = 0.0
    for _ in range(tcfg["identity_instances"]):
        n = int(rng_ident.integers(2, 65))
        z = rng_ident.normal(0.0, 2.0, size=n)
        n_useful = int(rng_ident.integers(1, n))
        useful = theory.UsefulSet.of(rng_ident.choice(n, size=n_useful, replace=False))
        r = rng_ident.random(n)
        res = check_reweighting_identity(z, useful, r)
        err = abs(res.direct - res.formula)
        ident_err = max(ident_err, err)
        if err >= 1e-12:
            ident_viol += 1

    pers_viol = 0
    pers_vacuous = 0
    pers_details = []
    pers_rows = []
    assumption_violated = False
    for i in range(tcfg["persistence_configs"]):
        if tcfg.get("force_unstable") and i == 0:
            m = 3
            bad = np.eye(m) * 1.05
            try:
                pcfg = PersistenceConfig(
                    transition=bad, offset=np.zeros(m), noise_scale=1.0,
                    compat=np.eye(m), token=0, top_k=1)
                simulate_persistence(pcfg, n_max=10, trials=1000,
                                     seed=int(rng_pers.integers(2 ** 31)))
            except StabilityError as exc:
                assumption_violated = True
                pers_details.append({"config": i, "assumption_violated": str(exc)})
            continue
        pcfg = random_persistence_config(rng_pers)
        res = simulate_persistence(pcfg, n_max=tcfg["n_max"],
                                   trials=tcfg["persistence_trials"],
                                   seed=int(rng_pers.integers(2 ** 31)))
        detail = {"config": i, "epsilon_hat": res.epsilon_hat, "beta": res.beta,
                  "vacuous": res.vacuous, "holds": res.holds}
        if res.vacuous:
            pers_vacuous += 1
        elif not res.holds:
            pers_viol += 1
        else:
            detail["margin"] = res.margin()
        pers_details.append(detail)
        for n in range(res.survival.shape[0]):
            pers_rows.append({"config": i, "horizon": n + 1, "criterion": "survival",
                              "fraction": float(res.survival[n])})
            pers_rows.append({"config": i, "horizon": n + 1, "criterion": "bound",
                              "fraction": float(min(1.0, res.bound[n]))})

    radii = []
    target = tcfg["var_radius"]
    for _ in range(tcfg["var_fits"]):
        m = 4
        a = rng_var.normal(size=(m, m))
        a *= target / spectral_radius(a)
        b = 0.1 * rng_var.normal(size=m)
        steps = 1500
        states = np.zeros((steps + 1, m))
        for t in range(steps):
            states[t + 1] = a @ states[t] + b + 0.1 * rng_var.normal(size=m)
        radii.append(fit_var1([states]).spectral_radius)
    walk = np.cumsum(rng_var.normal(size=(1000, 3)), axis=0)
    walk_fit = fit_var1([walk])

    report = {
        "seed": seed,
        "dilution_bound": {"instances": tcfg["bound_instances"], "violations": bound_viol,
                  "min_margin": bound_margin},
        "reweighting": {"instances": tcfg["identity_instances"], "violations": ident_viol,
                 "max_abs_error": ident_err},
        "persistence": {"configs": tcfg["persistence_configs"],
                        "violations": pers_viol, "vacuous": pers_vacuous,
                        "assumption_violated": assumption_violated,
                        "details": pers_details},
        "var1": {"fits": tcfg["var_fits"], "target_radius": target,
                 "median_fitted_radius": float(np.median(radii)),
                 "random_walk_radius": walk_fit.spectral_radius,
                 "random_walk_flagged_unstable": not walk_fit.stable},
        "backbone_query_var": _backbone_query_var(cfg, rng_bb),
        "violations_total": bound_viol + ident_viol + pers_viol,
    }
    return report, pers_rows


# -- subcommand bodies ----------------------------------------------------------


def _prepare(cfg: dict, seed: int):
    spec = TaskSpec(**cfg["task"])
    master = np.random.SeedSequence(seed)
    s_model, s_data, s_gates, s_train, s_eval = master.spawn(5)
    bb = build_task_model(spec, np.random.default_rng(s_model))
    return spec, bb, (s_data, s_gates, s_train, s_eval)


PERSISTENCE_COLUMNS = ("config", "horizon", "criterion", "fraction")


def cmd_theory(cfg: dict, seed: int, out: str, args) -> int:
    report, pers_rows = run_theory_suite(cfg, seed)
    write_json(os.path.join(out, "theory_report.json"), report)
    if pers_rows:
        write_csv(os.path.join(out, "persistence.csv"), pers_rows,
                  PERSISTENCE_COLUMNS, "persistence")
    print(f"theory: {report['violations_total']} violations "
          f"({report['dilution_bound']['violations']} bound, {report['reweighting']['violations']} identity, "
          f"{report['persistence']['violations']} persistence)")
    return 0 if report["violations_total"] == 0 else 1


def cmd_train(cfg: dict, seed: int, out: str, args) -> int:
    spec, bb, (s_data, s_gates, s_train, _) = _prepare(cfg, seed)
    tr = cfg["train"]
    data_rng = np.random.default_rng(s_data)
    sequences = [s.tokens for s in generate_dataset(spec, tr["n_sequences"], data_rng)]
    d_in = bb.shape.d_model if tr["gate_input"] == "embedding" else 2 * bb.shape.head_dim
    gates = init_gate_params(default_shape(spec, cfg["model"]["gate_hidden"]), d_in,
                             np.random.default_rng(s_gates), tied=tr["tied"],
                             gate_input=tr["gate_input"], seed=seed)
    m_global = tr["budget_fraction"] * spec.seq_len * bb.shape.head_count
    try:
        result = train_gates(bb, gates, sequences, lam=tr["lambda_cap"],
                             m_global=m_global, lr=tr["lr"], steps=tr["steps"],
                             batch_size=tr["batch_size"],
                             seed=int(np.random.default_rng(s_train).integers(2 ** 31)))
    except DivergenceError as exc:
        print(f"train: diverged: {exc}", file=sys.stderr)
        return 1
    save_gates(os.path.join(out, "gates.ckpt"), result.params)
    write_csv(os.path.join(out, "loss.csv"), result.loss_rows(), LOSS_COLUMNS, "loss")
    print(f"train: final total {result.final.total:.4f} "
          f"(quality {result.final.quality:.4f}, cap {result.final.cap:.4f})")
    return 0


def cmd_eval(cfg: dict, seed: int, out: str, args) -> int:
    spec, bb, (s_data, _, _, s_eval) = _prepare(cfg, seed)
    ecfg = cfg["eval"]
    gates = load_gates(args.checkpoint) if args.checkpoint else None
    gated = {"global", "per_head"} & set(ecfg["policies"])
    if gates is None and gated:
        raise ConfigError(f"policies {sorted(gated)} require --checkpoint")
    samples = generate_dataset(spec, ecfg["samples"], np.random.default_rng(s_eval))
    trace: list[TraceRow] | None = [] if ecfg.get("trace") else None

    threads = int(os.environ.get("RETAINKV_THREADS", "1"))
    cells = []
    if threads > 1:
        grid = [(p, b) for b in ecfg["budgets"] for p in ecfg["policies"]]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(evaluate_policies, bb, gates, samples, [p], [b],
                                   cfg["eviction"]["horizon"], cfg["eviction"]["cadence"])
                       for p, b in grid]
            for fut in futures:
                cells.extend(fut.result())
    else:
        cells = evaluate_policies(bb, gates, samples, ecfg["policies"], ecfg["budgets"],
                                  cfg["eviction"]["horizon"], cfg["eviction"]["cadence"],
                                  trace)
    rows = [{"policy": c.policy, "budget": c.budget, "accuracy": c.accuracy,
             "mean_retained": c.mean_retained, "peak_entries": c.peak_entries,
             "seconds": round(c.seconds, 4)} for c in cells]
    write_csv(os.path.join(out, "eval.csv"), rows, EVAL_COLUMNS, "eval")
    if trace:
        trows = [{"step": r.step, "layer": r.layer, "head": r.head,
                  "token_birth": r.token_birth, "score": r.score, "action": r.action}
                 for r in trace]
        write_csv(os.path.join(out, "eviction_trace.csv"), trows, TRACE_COLUMNS, "trace")
    for row in rows:
        print(f"eval: {row['policy']:>9} budget {row['budget']:.3f} "
              f"accuracy {row['accuracy']:.3f}")
    return 0


def cmd_survival(cfg: dict, seed: int, out: str, args) -> int:
    spec, bb, (s_data, _, _, s_eval) = _prepare(cfg, seed)
    scfg = cfg["survival"]
    gates = load_gates(args.checkpoint) if args.checkpoint else None
    samples = generate_dataset(spec, scfg["samples"], np.random.default_rng(s_eval))
    recorder = SelectionRecorder(top_k=scfg["top_k"], tau=scfg["tau"])
    for sample in samples:
        decode_sequence(bb, gates, sample, "full", 1.0, recorder=recorder)
    horizons = scfg["horizons"]
    rows = []
    shape = bb.shape
    n_tokens = spec.seq_len
    for criterion in recorder.criteria():
        pooled = []
        for l in range(shape.layers):
            for h in range(shape.heads):
                events = recorder.events.get((l, h, criterion), {})
                recs = [theory.SurvivalRecord(b, tuple(events.get(b, ())), criterion, l, h)
                        for b in range(n_tokens)]
                pooled.extend(recs)
                frac = survival_curve(recs, horizons)
                rows.extend({"criterion": criterion, "layer": l, "head": h,
                             "horizon": int(hz), "fraction": float(f)}
                            for hz, f in zip(horizons, frac))
        frac = survival_curve(pooled, horizons)
        rows.extend({"criterion": criterion, "layer": -1, "head": -1,
                     "horizon": int(hz), "fraction": float(f)}
                    for hz, f in zip(horizons, frac))
    write_csv(os.path.join(out, "survival.csv"), rows, SURVIVAL_COLUMNS, "survival")
    print(f"survival: wrote {len(rows)} rows over {len(recorder.criteria())} criteria")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="retainkv",
        description="Retention-gated KV eviction engine: experiments and theory checks")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("theory", cmd_theory), ("train", cmd_train),
                     ("eval", cmd_eval), ("survival", cmd_survival)):
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config path")
        p.add_argument("--seed", type=int, required=True)
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--preset", default="default", choices=sorted(PRESETS))
        if name in ("eval", "survival"):
            p.add_argument("--checkpoint", default=None, help="gate checkpoint path")
        p.set_defaults(fn=fn)
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.preset)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    os.makedirs(args.out, exist_ok=True)
    try:
        return args.fn(cfg, args.seed, args.out, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except AssertionError as exc:
        print(f"violation: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
