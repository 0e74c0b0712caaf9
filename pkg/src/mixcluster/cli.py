"""Command-line interface: simulate, fit, select, evaluate.

Exit codes: 0 success, 2 usage or invalid input, 3 every chain failed,
4 file I/O or unreadable data.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, simulate
from .data import (
    DataParseError,
    DataValidationError,
    IngestSpec,
    emit,
    ingest,
    read_keyvalue,
    split_list,
)
from .evaluation import adjusted_rand_index, confusion, rank_outcomes
from .fitting import FitConfig, FitOutcome, fit
from .model import Hyperparameters, Structure

EXIT_OK, EXIT_USAGE, EXIT_FAILED, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("mixcluster")


class UsageError(Exception):
    pass


class AllChainsFailed(Exception):
    pass


def fmt(x) -> str:
    """Numbers in output files: 6 significant digits."""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.6g}"


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in row])


def write_manifest(path: Path, payload: dict) -> None:
    payload = {"version": __version__, **payload}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


def parse_grid(text: str) -> list[int]:
    """'2,3,4' or '1-9' or a mix of both."""
    out: list[int] = []
    try:
        for part in split_list(text):
            if "-" in part:
                lo, hi = (int(v) for v in part.split("-", 1))
                if lo > hi:
                    raise ValueError
                out.extend(range(lo, hi + 1))
            else:
                out.append(int(part))
    except ValueError:
        raise UsageError(f"malformed cluster grid {text!r}") from None
    if not out or min(out) < 1:
        raise UsageError(f"malformed cluster grid {text!r}")
    return sorted(set(out))


def parse_structures(text: str) -> list[Structure]:
    try:
        return [Structure.parse(s) for s in split_list(text)]
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# run configuration


RUN_KEYS = {
    "data_spec", "csv", "categorical", "ignore", "log_transform", "structure", "G", "grid", "structures",
    "chains", "T", "t_star", "k_percentile", "seed", "output", "jobs", "bootstrap", "spike_concentration",
}
_HYPER_FIELDS = set(Hyperparameters.__dataclass_fields__) - {"G", "alpha_slab", "alpha_spike", "S", "S0", "nu"}


def load_config(path) -> tuple[dict, dict]:
    """Flat key=value run config; ``hyper.<name>`` keys override priors."""
    conf = read_keyvalue(path)
    run, hyper = {}, {}
    for key, value in conf.items():
        if key.startswith("hyper."):
            name = key[len("hyper."):]
            if name not in _HYPER_FIELDS:
                raise UsageError(f"{path}: unknown hyperparameter {name!r}")
            hyper[name] = _hyper_value(name, value)
        elif key in RUN_KEYS:
            run[key] = value
        else:
            raise UsageError(f"{path}: unknown key {key!r}")
    return run, hyper


def _hyper_value(name: str, text: str):
    if name == "halve_spike_rate":
        if text.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise UsageError(f"hyper.{name} must be a boolean")
        return text.lower() in ("true", "1", "yes")
    try:
        vals = [float(v) for v in split_list(text)]
    except ValueError:
        raise UsageError(f"hyper.{name}: not a number: {text!r}") from None
    if name == "delta_dirichlet":
        return np.array(vals)
    if len(vals) != 1:
        raise UsageError(f"hyper.{name} takes a single value")
    return int(vals[0]) if name == "k_percentile" else vals[0]


def _merged(args, run: dict, name: str, default=None, cast=str):
    value = getattr(args, name, None)
    if value is None:
        value = run.get(name, default)
    if value is None:
        return None
    try:
        return cast(value)
    except (TypeError, ValueError):
        raise UsageError(f"invalid value for {name}: {value!r}") from None


def resolve_dataset(args, run: dict):
    spec_path = _merged(args, run, "data_spec")
    csv_path = _merged(args, run, "csv")
    if bool(spec_path) == bool(csv_path):
        raise UsageError("give exactly one of --data-spec or --csv")
    if spec_path:
        spec = IngestSpec.from_file(spec_path)
        source = Path(spec_path)
    else:
        csv_path = Path(csv_path)
        with open(csv_path, newline="") as fh:
            header = next(csv.reader(fh), None)
        if not header:
            raise DataParseError(f"{csv_path}: no header row")
        categorical = split_list(_merged(args, run, "categorical", ""))
        ignore = split_list(_merged(args, run, "ignore", ""))
        missing = [c for c in categorical + ignore if c not in header]
        if missing:
            raise DataValidationError(f"{csv_path}: columns not found: {missing}")
        continuous = [c for c in header if c not in categorical and c not in ignore]
        spec = IngestSpec(
            path=csv_path, continuous=continuous, categorical=categorical, ignore=ignore,
            log_transform=split_list(_merged(args, run, "log_transform", "")),
        )
        source = csv_path
    ds = ingest(spec)
    inputs = {str(spec.path): file_digest(spec.path)}
    if source != spec.path:
        inputs[str(source)] = file_digest(source)
    return ds, inputs


def fit_config(args, run: dict, hyper: dict, *, G=None, structure=None) -> FitConfig:
    T = _merged(args, run, "T", 500, int)
    t_star = _merged(args, run, "t_star", None, int)
    if t_star is None:
        t_star = 200 if T == 500 else T // 2
    try:
        return FitConfig(
            G=G if G is not None else _merged(args, run, "G", 3, int),
            structure=structure if structure is not None else _merged(args, run, "structure", "VVV"),
            chains=_merged(args, run, "chains", 4, int),
            T=T,
            t_star=t_star,
            seed=_merged(args, run, "seed", 0, int),
            k_percentile=_merged(args, run, "k_percentile", 75, int),
            bootstrap=_merged(args, run, "bootstrap", 50, int),
            spike_concentration=_merged(args, run, "spike_concentration", 1000.0, float),
            overrides=hyper,
            n_jobs=_merged(args, run, "jobs", 1, int),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _output_dir(args, run: dict) -> Path:
    out = Path(_merged(args, run, "output", "mixcluster-out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config_dict(cfg: FitConfig) -> dict:
    d = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__ if k != "overrides"}
    d["structure"] = cfg.structure.value
    d["overrides"] = {k: np.asarray(v).tolist() for k, v in cfg.overrides.items()}
    return d


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    spec = simulate.ScenarioSpec(structure=args.scenario, n=args.n, censor_level=args.censor, seed=args.seed)
    ds, truth = simulate.generate(spec)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    data_path = out / "data.csv"
    truth_path = out / "truth.csv"
    emit(ds, data_path)
    write_csv(truth_path, ["row", "label"], ((i + 1, int(g) + 1) for i, g in enumerate(truth.labels)))
    write_manifest(out / "manifest.json", {
        "command": "simulate",
        "scenario": f"Data{spec.structure}",
        "n": spec.n,
        "censor_level": spec.censor_level,
        "seed": spec.seed,
        "categorical": list(ds.column_names[ds.q:]),
        "roles": truth.roles,
        "dominant": [name for name, role in truth.roles.items() if role == "dominant"],
        "files": {"data": data_path.name, "truth": truth_path.name},
        "digests": {data_path.name: file_digest(data_path), truth_path.name: file_digest(truth_path)},
    })
    print(f"wrote {data_path}, {truth_path}, {out / 'manifest.json'}")
    return EXIT_OK


def write_fit_outputs(out: Path, ds, outcome: FitOutcome, inputs: dict) -> None:
    res = outcome.result
    G = res.G
    write_csv(
        out / "assignments.csv",
        ["row", "cluster"] + [f"p{g + 1}" for g in range(G)],
        ([i + 1, int(res.z_hat[i]) + 1, *res.posterior_probs[i]] for i in range(ds.n)),
    )
    write_csv(out / "importance.csv", ["variable", "importance"], zip(ds.column_names, res.importance))
    rows = [["tau", g + 1, "", "", res.tau[g]] for g in range(G)]
    names = ds.column_names
    for m in range(ds.q):
        rows += [["mean", g + 1, names[m], "", res.mu[m, g]] for g in range(G)]
    sigma = res.sigma
    if res.structure is Structure.EEI:
        rows += [["variance", "", names[m], "", sigma[m]] for m in range(ds.q)]
    else:
        covs = sigma[None] if res.structure is Structure.EEE else sigma
        for g, cov in enumerate(covs):
            label = "" if res.structure is Structure.EEE else g + 1
            rows += [["covariance", label, f"{names[a]}:{names[b]}", "", cov[a, b]]
                     for a in range(ds.q) for b in range(a, ds.q)]
    for j, th in enumerate(res.theta):
        name = names[ds.q + j]
        rows += [["level_prob", g + 1, name, ds.level_labels[j][l], th[g, l]]
                 for g in range(G) for l in range(th.shape[1])]
    write_csv(out / "parameters.csv", ["parameter", "cluster", "variable", "level", "value"], rows)

    sc = outcome.score
    lines = [
        f"structure: {res.structure.value}",
        f"clusters: {G}",
        f"observations: {ds.n}",
        f"censored cells: {ds.n_censored}",
        f"omega: {fmt(outcome.hyper.omega)}",
        f"chains run: {outcome.config.chains}",
        f"chains failed: {len(outcome.failures)}",
    ]
    lines += [f"  chain {f.chain_id}: iteration {f.iteration}: {f.cause}" for f in outcome.failures]
    excluded = res.diagnostics.get("excluded_chains", [])
    lines.append(f"chains excluded from pooling: {len(excluded)}")
    lines += [f"  chain {e['chain']}: ARI {fmt(e['ari'])} against reference" for e in excluded]
    if outcome.convergence is not None:
        lines.append(f"MPSRF: {fmt(outcome.convergence.mpsrf)}")
    else:
        lines.append("MPSRF: n/a (" + res.diagnostics.get("mpsrf_error", "fewer than two chains") + ")")
    lines += [
        f"observed log-likelihood: {fmt(sc.loglik_observed)}",
        f"complete log-likelihood: {fmt(sc.loglik_complete)}",
        f"degrees of freedom: {sc.dof}",
        f"BIC: {fmt(sc.bic)}",
        f"ICL: {fmt(sc.icl)}",
        "cluster sizes: " + " ".join(fmt(c) for c in np.bincount(res.z_hat, minlength=G)),
    ]
    (out / "diagnostics.txt").write_text("\n".join(lines) + "\n")
    write_manifest(out / "manifest.json", {
        "command": "fit",
        "config": _config_dict(outcome.config),
        "inputs": inputs,
        "dataset": ds.digest(),
        "omega": outcome.hyper.omega,
        "failed_chains": [f.chain_id for f in outcome.failures],
        "files": ["assignments.csv", "importance.csv", "parameters.csv", "diagnostics.txt"],
    })


def cmd_fit(args) -> int:
    run, hyper = load_config(args.config) if args.config else ({}, {})
    ds, inputs = resolve_dataset(args, run)
    cfg = fit_config(args, run, hyper)
    out = _output_dir(args, run)
    outcome = fit(ds, cfg)
    if not outcome.ok:
        raise AllChainsFailed(outcome.score.failure)
    write_fit_outputs(out, ds, outcome, inputs)
    print(f"fit {cfg.structure.value} G={cfg.G}: BIC {fmt(outcome.score.bic)}, ICL {fmt(outcome.score.icl)}, "
          f"{len(outcome.failures)} of {cfg.chains} chains failed; outputs in {out}")
    return EXIT_OK


def cmd_select(args) -> int:
    run, hyper = load_config(args.config) if args.config else ({}, {})
    grid = parse_grid(_merged(args, run, "grid", "1-9"))
    structures = parse_structures(_merged(args, run, "structures", "EEI,EEE,VVV"))
    ds, inputs = resolve_dataset(args, run)
    base = fit_config(args, run, hyper, G=grid[0], structure=structures[0])
    out = _output_dir(args, run)
    outcomes = [fit(ds, base.replace(G=G, structure=s)) for s in structures for G in grid]
    ranked = rank_outcomes(outcomes)
    rows = []
    for rank, o in enumerate(ranked, 1):
        s = o.score
        rows.append([rank, s.G, s.structure.value, s.bic, s.icl, s.dof, s.loglik_observed,
                     s.failed, s.failure])
    write_csv(out / "selection.csv",
              ["rank", "G", "structure", "BIC", "ICL", "dof", "loglik", "failed", "failure"], rows)
    write_manifest(out / "manifest.json", {
        "command": "select",
        "config": _config_dict(base),
        "grid": grid,
        "structures": [s.value for s in structures],
        "inputs": inputs,
        "dataset": ds.digest(),
        "files": ["selection.csv"],
    })
    print(f"{'rank':>4} {'G':>3} {'structure':>9} {'BIC':>12} {'ICL':>12}")
    for r in rows:
        flag = "  FAILED" if r[7] else ""
        print(f"{r[0]:>4} {r[1]:>3} {r[2]:>9} {fmt(r[3]):>12} {fmt(r[4]):>12}{flag}")
    if all(o.score.failed for o in outcomes):
        raise AllChainsFailed("every model in the grid failed")
    return EXIT_OK


def read_labels(path, column: str) -> dict[str, str]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "row" not in reader.fieldnames:
            raise DataParseError(f"{path}: expected a 'row' column")
        col = column if column in reader.fieldnames else None
        if col is None:
            others = [c for c in reader.fieldnames if c != "row"]
            if not others:
                raise DataParseError(f"{path}: no label column")
            col = others[0]
        return {r["row"]: r[col] for r in reader}


def cmd_evaluate(args) -> int:
    pred = read_labels(args.assignments, "cluster")
    truth = read_labels(args.truth, "label")
    if len(pred) != len(truth) or set(pred) != set(truth):
        raise DataValidationError(
            f"row mismatch: {len(pred)} assignments vs {len(truth)} truth rows"
        )
    rows = sorted(truth, key=lambda r: (len(r), r))
    a = [pred[r] for r in rows]
    b = [truth[r] for r in rows]
    ari = adjusted_rand_index(a, b)
    pred_levels, truth_levels = sorted(set(a), key=lambda v: (len(v), v)), sorted(set(b), key=lambda v: (len(v), v))
    cm = confusion(b, a)
    print(f"ARI: {fmt(ari)}")
    print("confusion (rows: truth, columns: assigned)")
    print("       " + " ".join(f"{p:>7}" for p in pred_levels))
    for lab, row in zip(truth_levels, cm):
        print(f"{lab:>6} " + " ".join(f"{v:>7}" for v in row))
    print("assigned cluster sizes: " + ", ".join(f"{p}={a.count(p)}" for p in pred_levels))
    print("true cluster sizes: " + ", ".join(f"{t}={b.count(t)}" for t in truth_levels))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value run config")
    p.add_argument("--data-spec", dest="data_spec", help="key=value dataset spec")
    p.add_argument("--csv", help="CSV with header; columns not listed as categorical are continuous")
    p.add_argument("--categorical", help="comma-separated categorical columns (with --csv)")
    p.add_argument("--ignore", help="comma-separated columns to skip (with --csv)")
    p.add_argument("--log-transform", dest="log_transform", help="continuous columns to log before standardizing")
    p.add_argument("--chains", type=int)
    p.add_argument("-T", "--iterations", dest="T", type=int, help="Gibbs iterations per chain")
    p.add_argument("--burn-in", dest="t_star", type=int, help="discarded iterations (default 200 for T=500, else T/2)")
    p.add_argument("--k-percentile", dest="k_percentile", type=int)
    p.add_argument("--bootstrap", type=int, help="bootstrap K-means resamples")
    p.add_argument("--spike-concentration", dest="spike_concentration", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int, help="chains run in parallel processes")
    p.add_argument("-o", "--output", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixcluster", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a three-cluster mixed-data scenario")
    p.add_argument("--scenario", required=True, type=str.upper, choices=["EEI", "EEE", "VVV"])
    p.add_argument("--censor", type=int, default=0, choices=[0, 20, 40])
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", default="scenario")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit one mixture model")
    _add_data_args(p)
    p.add_argument("--structure", type=str.upper, choices=["EEI", "EEE", "VVV"])
    p.add_argument("-G", "--clusters", dest="G", type=int)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", help="fit a grid of models and rank them by ICL")
    _add_data_args(p)
    p.add_argument("--grid", help="cluster counts, e.g. 1-9 or 2,3,4")
    p.add_argument("--structures", help="comma-separated structures (default EEI,EEE,VVV)")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("evaluate", help="compare assignments with true labels")
    p.add_argument("assignments")
    p.add_argument("truth")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))  # exits 2
    except AllChainsFailed as exc:
        print(f"error: all chains failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except DataValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, DataParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
