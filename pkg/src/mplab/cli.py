"""Command-line experiment harness.

Exit codes: 0 success, 2 usage or configuration error, 3 a verdict or band
check failed, 4 a run diverged.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .algorithms import RunConfig, run_amp, run_oamp, trace_to_csv
from .ensembles import (
    DISCRETE_ATOMS,
    MP_SAMPLED,
    SpectrumSpec,
    build_operator,
    empirical_moments,
    spectrum_singular_values,
)
from .error_model import (
    NORM_GAP_STATS,
    ORTHOGONALITY_STATS,
    fraction_within,
    median_magnitude,
    probe_orthogonality,
    sweep_to_csv,
)
from .errors import MPLabError, SimulationDivergedError
from .models import Denoiser, NoiseModel, Prior
from .moments import MomentSequence, mp_eta, mp_moments
from .onsager import amp_convergence_verdict, default_tolerance, g_table
from .se import amp_se, oamp_se

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DEVIATES = 3
EXIT_DIVERGED = 4

OUTPUT_ENV = "MPLAB_OUTPUT_DIR"
DEFAULT_OUTPUT = "mplab-out"


class ConfigError(MPLabError, ValueError):
    pass


# -- config -------------------------------------------------------------------

def _line_of(text: str, key: str) -> int | None:
    needle = f'"{key}"'
    for i, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return i
    return None


def load_config(path) -> dict:
    """Parse and validate a JSON experiment config.

    Errors mention the line of the offending key where it can be found.
    """
    text = Path(path).read_text()
    try:
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")

    def fail(key, msg):
        line = _line_of(text, key)
        where = f"{path}:{line}" if line else str(path)
        raise ConfigError(f"{where}: {key}: {msg}")

    for key in ("spectrum", "prior", "noise"):
        if key in cfg and not isinstance(cfg[key], dict):
            fail(key, "must be an object")
    try:
        if "spectrum" in cfg:
            cfg["_spectrum"] = SpectrumSpec.from_dict(cfg["spectrum"])
        if "prior" in cfg:
            cfg["_prior"] = Prior.from_dict(cfg["prior"])
        cfg["_noise"] = NoiseModel.from_dict(cfg.get("noise", {"variance": 0.0}))
        if "denoiser" in cfg:
            cfg["_denoiser"] = Denoiser.from_dict(cfg["denoiser"])
        elif "_prior" in cfg:
            cfg["_denoiser"] = Denoiser.mmse_for(cfg["_prior"])
    except (KeyError, TypeError) as exc:
        fail(str(exc).strip("'"), f"missing or malformed field ({exc})")
    except ValueError as exc:
        key = next((k for k in ("spectrum", "prior", "noise", "denoiser")
                    if k in cfg and f"_{k}" not in cfg), "spectrum")
        fail(key, str(exc))
    n_list = cfg.get("N", cfg.get("n"))
    if n_list is not None:
        n_list = [n_list] if isinstance(n_list, int) else n_list
        if not n_list or not all(isinstance(n, int) and n > 0 for n in n_list):
            fail("N", "must be a nonempty list of positive integers")
        cfg["_n"] = list(n_list)
    seeds = cfg.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds:
        fail("seeds", "must be a nonempty list")
    if len({json.dumps(s) for s in seeds}) != len(seeds):
        fail("seeds", "must be distinct")
    cfg["_seeds"] = [seed_triple(s) for s in seeds]
    if "T" in cfg and not (isinstance(cfg["T"], int) and cfg["T"] >= 1):
        fail("T", "must be a positive integer")
    cfg["_hash"] = config_hash(cfg)
    return cfg


def config_hash(cfg: dict) -> str:
    public = {k: v for k, v in cfg.items() if not k.startswith("_")}
    blob = json.dumps(public, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def seed_triple(seed):
    """``(seed_u, seed_v, seed_instance)`` from an integer or an explicit triple."""
    if isinstance(seed, (list, tuple)):
        if len(seed) != 3:
            raise ConfigError("explicit seeds must be [u, v, instance] triples")
        return tuple(int(s) for s in seed)
    state = np.random.SeedSequence(int(seed)).generate_state(3)
    return tuple(int(s) for s in state)


def output_dir(args_dir=None, cfg=None) -> Path:
    out = args_dir or (cfg or {}).get("output_dir") or os.environ.get(OUTPUT_ENV) \
        or DEFAULT_OUTPUT
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_output(path: Path, text: str, meta: dict):
    """Write ``text`` plus a ``.meta.json`` sidecar (no timestamps)."""
    path.write_text(text, newline="\n")
    side = dict(meta, version=__version__, file=path.name)
    path.with_name(path.name + ".meta.json").write_text(
        json.dumps(side, sort_keys=True, indent=2) + "\n", newline="\n")


def _meta(cfg, command, **extra) -> dict:
    public = {k: v for k, v in cfg.items() if not k.startswith("_")}
    return dict(command=command, config=public, config_hash=cfg["_hash"], **extra)


def _map(fn, jobs, workers):
    if workers is None:
        workers = os.cpu_count() or 1
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*jobs)))


# -- moments ------------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, Fraction):
        return str(value.numerator) if value.denominator == 1 else str(value)
    return f"{value:.17g}"


def cmd_moments(args) -> int:
    ms = mp_moments(args.delta, args.max_order, exact=True if args.exact else None)
    if args.json:
        print(json.dumps(ms.to_dict()))
    else:
        for k, mu in enumerate(ms.mu):
            print(f"{k}\t{_fmt(mu)}")
    return EXIT_OK


# -- onsager-check ------------------------------------------------------------

def _spectrum_arg(value: str) -> dict:
    if os.path.exists(value):
        return json.loads(Path(value).read_text())
    return json.loads(value)


def check_moments(args) -> tuple:
    if args.source == "analytic":
        if args.delta is None:
            raise ConfigError("--delta is required for analytic moments")
        return mp_moments(args.delta, args.T + 1), None
    if args.source == "file":
        if not args.file:
            raise ConfigError("--file is required for file moments")
        return MomentSequence.from_dict(json.loads(Path(args.file).read_text())), None
    if not args.spectrum or not args.n:
        raise ConfigError("--spectrum and --n are required for empirical moments")
    spec = SpectrumSpec.from_dict(_spectrum_arg(args.spectrum))
    su, sv, _ = seed_triple(args.seed)
    op = build_operator(spec, args.n, su, sv)
    return empirical_moments(op, args.T + 1), args.n


def cmd_onsager_check(args) -> int:
    ms, n = check_moments(args)
    tol = args.tol
    if tol is None:
        tol = default_tolerance(n) if n else 1e-12
    verdict = amp_convergence_verdict(ms, args.T, tol)
    table = g_table(ms, args.T)
    print("tau\tg[tau][0]")
    for tau, row in enumerate(table.rows):
        print(f"{tau}\t{_fmt(row[0])}")
    print(f"verdict: {verdict}")
    if args.json:
        report = {"verdict": verdict.to_dict(), "tolerance": tol,
                  "table": table.to_dict(), "moments": ms.to_dict()}
        Path(args.json).write_text(json.dumps(report, indent=2) + "\n")
    return EXIT_OK if verdict.matched else EXIT_DEVIATES


# -- run ----------------------------------------------------------------------

def run_one(algorithm: str, spec: SpectrumSpec, n: int, seeds: tuple,
            prior: Prior, noise: NoiseModel, cfg: RunConfig):
    """Build the operator and instance for one seed triple and run."""
    from .models import sample_instance
    su, sv, si = seeds
    op = build_operator(spec, n, su, sv)
    inst = sample_instance(prior, noise, op, si)
    runner = run_amp if algorithm == "amp" else run_oamp
    return runner(inst, cfg)


def mean_curve(results, T: int) -> np.ndarray:
    """Per-iteration mean MSE over runs that reached each iteration."""
    out = []
    for t in range(T):
        vals = [r.records[t].mse for r in results if len(r.records) > t]
        if len(vals) < len(results):
            break
        out.append(float(np.mean(vals)))
    return np.array(out)


def is_monotone(mse, steps: int) -> bool:
    mse = np.asarray(mse)
    return len(mse) > steps and bool(np.all(np.diff(mse[:steps + 1]) < 0))


def _apply_seed(cfg, args):
    if getattr(args, "seed", None) is not None:
        cfg["seeds"] = [args.seed]
        cfg["_seeds"] = [seed_triple(args.seed)]
        cfg["_hash"] = config_hash(cfg)
    return cfg


def cmd_run(args) -> int:
    cfg = _apply_seed(load_config(args.config), args)
    for key in ("_spectrum", "_prior", "_n"):
        if key not in cfg:
            raise ConfigError(f"{args.config}: missing {key[1:]}")
    if "T" not in cfg:
        raise ConfigError(f"{args.config}: missing T")
    out = output_dir(args.output, cfg)
    rc = RunConfig(cfg["T"], cfg["_denoiser"], cfg.get("divergence_threshold"),
                   cfg.get("onsager", True))
    alg = args.algorithm
    summary = {"algorithm": alg, "runs": []}
    any_div = False
    for n in cfg["_n"]:
        jobs = [(alg, cfg["_spectrum"], n, s, cfg["_prior"], cfg["_noise"], rc)
                for s in cfg["_seeds"]]
        results = _map(run_one, jobs, args.workers)
        for (seeds, res), raw in zip(zip(cfg["_seeds"], results), cfg["seeds"]):
            name = out / f"trace_{alg}_N{n}_seed{_seed_label(raw)}.csv"
            write_output(name, trace_to_csv(res),
                         _meta(cfg, f"run {alg}", N=n, seeds=list(seeds)))
            summary["runs"].append({"N": n, "seed": raw, "diverged": res.diverged,
                                    "iterations": len(res.records)})
            any_div |= res.diverged
        mean = mean_curve(results, cfg["T"])
        lines = ["t,mse"] + [f"{t},{m:.17g}" for t, m in enumerate(mean)]
        write_output(out / f"mean_{alg}_N{n}.csv", "\n".join(lines) + "\n",
                     _meta(cfg, f"run {alg}", N=n))
    (out / f"summary_{alg}.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n")
    n_div = sum(r["diverged"] for r in summary["runs"])
    print(f"{alg}: {n_div}/{len(summary['runs'])} runs diverged")
    return EXIT_DIVERGED if any_div else EXIT_OK


def _seed_label(raw) -> str:
    if isinstance(raw, (list, tuple)):
        return "-".join(str(s) for s in raw)
    return str(raw)


# -- probe --------------------------------------------------------------------

def cmd_probe(args) -> int:
    cfg = _apply_seed(load_config(args.config), args)
    for key in ("_spectrum", "_prior", "_n"):
        if key not in cfg:
            raise ConfigError(f"{args.config}: missing {key[1:]}")
    out = output_dir(args.output, cfg)
    mode = cfg.get("mode", "oamp")
    T = cfg.get("T", 5)
    scale = args.tol if args.tol is not None else cfg.get("band_scale", 5.0)
    min_fraction = cfg.get("min_fraction", 0.95)
    ratio_band = cfg.get("ratio_band", [0.2, 1.2])
    kinds = ORTHOGONALITY_STATS + NORM_GAP_STATS

    jobs = [(cfg["_spectrum"], mode, T, [n], [s], cfg["_prior"], cfg["_noise"],
             cfg["_denoiser"]) for n in cfg["_n"] for s in cfg["_seeds"]]
    parts = _map(probe_orthogonality, jobs, args.workers)
    results = {}
    for part in parts:
        for n, reps in part.items():
            results.setdefault(n, []).extend(reps)
    for n, reports in results.items():
        for rep, raw in zip(reports, cfg["seeds"]):
            rep.seeds["label"] = raw
    meta = _meta(cfg, "probe")
    write_output(out / "probe_sweep.csv", sweep_to_csv(results), meta)
    report = {str(n): [r.to_dict() for r in reps] for n, reps in results.items()}
    write_output(out / "probe_reports.json",
                 json.dumps(report, indent=2, sort_keys=True) + "\n", meta)
    frac = fraction_within(results, lambda n: scale / math.sqrt(n), kinds)
    ok = frac >= min_fraction
    print(f"fraction within {scale}/sqrt(N): {frac:.4f} (need {min_fraction})")
    ns = sorted(results)
    if len(ns) > 1:
        ratio = (median_magnitude(results[ns[-1]], ORTHOGONALITY_STATS)
                 / median_magnitude(results[ns[0]], ORTHOGONALITY_STATS))
        in_band = ratio_band[0] <= ratio <= ratio_band[1]
        ok &= in_band
        print(f"median ratio N={ns[-1]}/N={ns[0]}: {ratio:.4f} "
              f"(band {ratio_band[0]}..{ratio_band[1]})")
    if any(r.degenerate for reps in results.values() for r in reps):
        print("warning: degenerate rank encountered", file=sys.stderr)
    return EXIT_OK if ok else EXIT_DEVIATES


# -- se -----------------------------------------------------------------------

def spectrum_eta_for(spec: SpectrumSpec, n: int | None = None, seed=0):
    """eta-transform of ``A^T A`` for a spectrum recipe.

    Marchenko-Pastur uses the analytic transform; other recipes use the
    realised eigenvalues at dimension ``n`` (atoms need no ``n``).
    """
    if spec.kind == MP_SAMPLED:
        return lambda x: mp_eta(x, spec.delta)
    if spec.kind == DISCRETE_ATOMS and n is None:
        vals = np.asarray(spec.values)
        w = np.asarray(spec.weights)
        frac = min(spec.delta, 1.0)

        def eta(x):
            return float(1.0 - frac + frac * np.dot(w, 1.0 / (1.0 + x * vals)))
        return eta
    if n is None:
        raise ConfigError(f"{spec.kind} spectrum needs N for state evolution")
    s = spectrum_singular_values(spec, n, seed)
    lam = np.zeros(n)
    lam[:s.size] = s ** 2

    def eta(x):
        return float(np.mean(1.0 / (1.0 + x * lam)))
    return eta


def se_curve(cfg: dict, algorithm: str):
    spec = cfg["_spectrum"]
    if algorithm == "amp":
        return amp_se(cfg["_prior"], cfg["_noise"], spec.delta, cfg["_denoiser"],
                      cfg["T"])
    n = cfg["_n"][0] if "_n" in cfg else None
    return oamp_se(cfg["_prior"], cfg["_noise"], spectrum_eta_for(spec, n),
                   spec.delta, cfg["T"], cfg["_denoiser"])


def cmd_se(args) -> int:
    cfg = load_config(args.config)
    for key in ("_spectrum", "_prior"):
        if key not in cfg:
            raise ConfigError(f"{args.config}: missing {key[1:]}")
    if "T" not in cfg:
        raise ConfigError(f"{args.config}: missing T")
    alg = args.algorithm or cfg.get("algorithm", "amp")
    curve = se_curve(cfg, alg)
    out = output_dir(args.output, cfg)
    write_output(out / f"se_{alg}.csv", curve.to_csv(), _meta(cfg, f"se {alg}"))
    print(curve.to_csv(), end="")
    return EXIT_OK


# -- compare ------------------------------------------------------------------

def _read_csv(path) -> list:
    lines = Path(path).read_text().strip().splitlines()
    head = lines[0].split(",")
    return [dict(zip(head, line.split(","))) for line in lines[1:]]


def compare_rows(trace_rows, se_rows) -> list:
    se = {int(r["t"]): float(r["mse"]) for r in se_rows}
    out = []
    for r in trace_rows:
        t = int(r["t"])
        if t in se:
            mse = float(r["mse"])
            out.append((t, mse, se[t], (mse - se[t]) / se[t]))
    return out


def cmd_compare(args) -> int:
    rows = compare_rows(_read_csv(args.trace), _read_csv(args.se))
    text = "t,mse,se_mse,rel_err\n" + "".join(
        f"{t},{a:.17g},{b:.17g},{e:.17g}\n" for t, a, b, e in rows)
    if args.out:
        Path(args.out).write_text(text, newline="\n")
    else:
        print(text, end="")
    if args.tol is not None and any(abs(e) > args.tol for *_, e in rows):
        return EXIT_DEVIATES
    return EXIT_OK


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mplab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"mplab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("moments", help="Marchenko-Pastur moments")
    s.add_argument("--delta", type=float, required=True)
    s.add_argument("--max-order", type=int, required=True)
    s.add_argument("--exact", action="store_true", help="rational arithmetic")
    s.add_argument("--json", action="store_true", help="emit JSON instead of a table")
    s.set_defaults(func=cmd_moments)

    s = sub.add_parser("onsager-check", help="g-table verdict for a moment source")
    s.add_argument("--source", choices=("analytic", "file", "empirical"),
                   default="analytic")
    s.add_argument("--delta", type=float)
    s.add_argument("--file", help="MomentSequence JSON")
    s.add_argument("--spectrum", help="spectrum JSON (inline or path)")
    s.add_argument("--n", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--T", type=int, default=6)
    s.add_argument("--tol", type=float)
    s.add_argument("--json", help="write the JSON report here")
    s.set_defaults(func=cmd_onsager_check)

    s = sub.add_parser("run", help="Monte Carlo AMP or OAMP runs")
    s.add_argument("algorithm", choices=("amp", "oamp"))
    s.add_argument("config")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("probe", help="finite-N orthogonality probes")
    s.add_argument("config")
    s.add_argument("--tol", type=float, help="band scale c in c/sqrt(N)")
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("se", help="state-evolution curve")
    s.add_argument("config")
    s.add_argument("--algorithm", choices=("amp", "oamp"))
    s.set_defaults(func=cmd_se)

    s = sub.add_parser("compare", help="relative error of a trace against SE")
    s.add_argument("trace")
    s.add_argument("se")
    s.add_argument("--out")
    s.add_argument("--tol", type=float, help="exit 3 if any |rel_err| exceeds this")
    s.set_defaults(func=cmd_compare)

    for name in ("run", "probe", "se"):
        s = sub.choices[name]
        s.add_argument("--output", help=f"output directory (default ${OUTPUT_ENV})")
        s.add_argument("--workers", type=int, default=None,
                       help="parallel workers (default: logical cores)")
        if name != "se":
            s.add_argument("--seed", type=int,
                           help="run this single seed instead of the config list")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not hasattr(args, "workers"):
        args.workers = 1
    try:
        return args.func(args)
    except SimulationDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (MPLabError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
