"""Command-line pipeline driver.

One subcommand per stage: gen-data, train-surrogates, train-ddpm, sample,
guide, cmaes, evaluate, report. Every stage writes its outputs plus the
fully resolved config and a provenance record (version, seed, input file
hashes) into the --out directory, and is deterministic given identical
inputs, so re-runs are byte-identical.

Exit codes: 0 success, 2 bad config or arguments, 3 missing input
artifact, 4 numeric failure (a diagnostics file is written when possible).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from importlib import metadata
from pathlib import Path

import numpy as np

from . import cmaes as cmaes_mod
from . import config as config_mod
from . import diffusion, guidance, oracle, rng, surrogate
from .autodiff import CheckpointError, NonFiniteError
from .config import ConfigError, RunConfig
from .geometry import DESIGN_DIM, GeometryError, validate

REPORT_CAPS = (400.0, 425.0, 450.0, 475.0, 500.0, 550.0)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4


class MissingArtifactError(FileNotFoundError):
    pass


def _version() -> str:
    try:
        return "sinkgen-" + metadata.version("sinkgen")
    except metadata.PackageNotFoundError:
        return "sinkgen-unknown"


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingArtifactError(str(p))
    return p


def _resolve_out(args, cfg: RunConfig) -> Path:
    root = os.environ.get("SINKGEN_OUT_ROOT", cfg.paths.out_root)
    out = Path(args.out)
    if root and not out.is_absolute():
        out = Path(root) / out
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_provenance(out: Path, cfg: RunConfig, command: str, seed, inputs) -> None:
    record = {
        "command": command,
        "version": _version(),
        "seed": seed,
        "input_hashes": {str(p): _sha256(p) for p in inputs},
    }
    with open(out / "provenance.json", "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")
    config_mod.write_config(out / "config.toml", cfg)


def _apply_threads(cfg: RunConfig) -> None:
    n = cfg.run.threads
    if n and n > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(n))
        try:
            import torch

            torch.set_num_threads(n)
        except ImportError:
            pass


def _write_designs_csv(path, designs: np.ndarray) -> None:
    header = ",".join(f"d_{i}" for i in range(DESIGN_DIM))
    np.savetxt(path, np.atleast_2d(designs), fmt="%.17g", delimiter=",",
               header=header, comments="", newline="\n")


def _read_designs_csv(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
    expected = [f"d_{i}" for i in range(DESIGN_DIM)]
    if header[: len(expected)] != expected:
        raise ConfigError(f"{path} is not a designs file")
    cols = tuple(range(DESIGN_DIM))
    return np.loadtxt(path, delimiter=",", skiprows=1, usecols=cols, ndmin=2)


# ---- commands ----


def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = _resolve_out(args, cfg)
    bounds = config_mod.parameter_bounds(cfg)
    ocfg = config_mod.oracle_config(cfg)
    seed = args.seed if args.seed is not None else cfg.run.master_seed
    dataset = oracle.generate_dataset(args.n, seed, bounds=bounds, config=ocfg)
    oracle.write_dataset_csv(out / "dataset.csv", dataset)
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump({
            "n": len(dataset),
            "seed": seed,
            "rejection_rate": dataset.rejection_rate,
        }, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_provenance(out, cfg, "gen-data", seed, [])
    print(f"wrote {len(dataset)} rows to {out / 'dataset.csv'} "
          f"(rejection {dataset.rejection_rate:.2%})")
    return EXIT_OK


def cmd_train_surrogates(args, cfg: RunConfig) -> int:
    out = _resolve_out(args, cfg)
    data_path = _require(args.data)
    dataset = oracle.read_dataset_csv(data_path)
    designs = np.asarray(dataset.designs)
    t_cfg, p_cfg = config_mod.surrogate_configs(cfg)
    for tag, target, scfg, stream_index in (
        ("temperature", np.asarray(dataset.temp), t_cfg, rng.SURROGATE_T),
        ("pressure", np.asarray(dataset.dp), p_cfg, rng.SURROGATE_P),
    ):
        model = surrogate.train_surrogate(designs, target, scfg,
                                          stream_index=stream_index)
        surrogate.save_surrogate(out / f"{tag}.ckpt", model)
        surrogate.write_metrics_json(out / f"metrics_{tag}.json", model.metrics)
        surrogate.write_residual_histogram_csv(out / f"residuals_{tag}.csv",
                                               model.metrics)
        print(f"{tag}: R2 {model.metrics.r2:.4f} rmse {model.metrics.rmse:.4g} "
              f"on {model.metrics.n_test} held-out rows")
    _write_provenance(out, cfg, "train-surrogates", cfg.run.master_seed, [data_path])
    return EXIT_OK


def cmd_train_ddpm(args, cfg: RunConfig) -> int:
    out = _resolve_out(args, cfg)
    data_path = _require(args.data)
    dataset = oracle.read_dataset_csv(data_path)
    designs = np.asarray(dataset.designs)
    ucfg = config_mod.unet_config(cfg)
    tcfg = config_mod.train_config(cfg)
    schedule = diffusion.cosine_schedule(cfg.ddpm.t_steps, cfg.ddpm.s)
    result = diffusion.train_ddpm(designs, ucfg, tcfg, schedule)
    diffusion.save_model(out / "model.ckpt", result.model)
    with open(out / "losses.csv", "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "loss"])
        for i, loss in enumerate(result.step_losses):
            writer.writerow([i, f"{loss:.17g}"])
        writer.writerow([])
        writer.writerow(["epoch", "val_loss"])
        for i, loss in enumerate(result.val_losses):
            writer.writerow([i, f"{loss:.17g}"])
    _write_provenance(out, cfg, "train-ddpm", tcfg.seed, [data_path])
    print(f"trained {len(result.step_losses)} steps; "
          f"final val loss {result.val_losses[-1]:.6f}")
    return EXIT_OK


def cmd_sample(args, cfg: RunConfig) -> int:
    out = _resolve_out(args, cfg)
    model_path = _require(args.model)
    model = diffusion.load_model(model_path)
    seed = args.seed if args.seed is not None else cfg.run.master_seed
    designs = diffusion.sample(model, args.n, seed)
    _write_designs_csv(out / "designs.csv", designs)
    _write_provenance(out, cfg, "sample", seed, [model_path])
    print(f"sampled {args.n} designs to {out / 'designs.csv'}")
    return EXIT_OK


def _load_surrogate_pair(surrogates_dir):
    d = _require(surrogates_dir)
    t_path = _require(Path(d) / "temperature.ckpt")
    p_path = _require(Path(d) / "pressure.ckpt")
    return (surrogate.load_surrogate(t_path), surrogate.load_surrogate(p_path),
            [t_path, p_path])


def cmd_guide(args, cfg: RunConfig) -> int:
    out = _resolve_out(args, cfg)
    model_path = _require(args.model)
    model = diffusion.load_model(model_path)
    t_model, p_model, surrogate_paths = _load_surrogate_pair(args.surrogates)
    seed = args.seed if args.seed is not None else cfg.run.master_seed
    g = cfg.guidance
    gcfg = guidance.GuidanceConfig(
        t_fixed=args.tfixed,
        eta=args.eta if args.eta is not None else g.eta,
        lambda_p=args.lp if args.lp is not None else g.lambda_p,
        lambda_t=args.lt if args.lt is not None else g.lambda_t,
        delta_t=g.delta_t,
        n_samples=args.n if args.n is not None else g.n_samples,
    )
    report = guidance.generate_guided(model, p_model, t_model,
                                      config_mod.oracle_config(cfg), gcfg, seed)
    _write_designs_csv(out / "designs.csv", report.designs)
    guidance.write_report_csv(out / "samples.csv", report)
    guidance.write_report_json(out / "report.json", report)
    for tag, values in (("temp", report.t_pred), ("pressure", report.p_pred)):
        if values.size >= 2:
            table = guidance.density_report(values)
            guidance.write_density_csv(out / f"kde_{tag}.csv", table)
    _write_provenance(out, cfg, "guide", seed, [model_path, *surrogate_paths])
    print(f"guided {gcfg.n_samples} chains at cap {gcfg.t_fixed:g} K, "
          f"eta {gcfg.eta:g}: feasibility {report.feasibility_rate:.1%}")
    return EXIT_OK


def cmd_cmaes(args, cfg: RunConfig) -> int:
    out = _resolve_out(args, cfg)
    seed = args.seed if args.seed is not None else cfg.run.master_seed
    lam = cfg.cmaes.population if cfg.cmaes.population > 0 else None
    result = cmaes_mod.run(args.tfixed, args.budget, seed,
                           bounds=config_mod.parameter_bounds(cfg),
                           config=config_mod.oracle_config(cfg),
                           rho=cfg.cmaes.rho, delta_t=cfg.cmaes.delta_t, lam=lam)
    cmaes_mod.write_trace_csv(out / "trace.csv", result.trace)
    cmaes_mod.write_elite_json(out / "elite.json", result)
    _write_provenance(out, cfg, "cmaes", seed, [])
    found = "none" if result.elite_design is None else f"{result.elite_dp:.4g} Pa"
    print(f"cmaes cap {args.tfixed:g} K, {result.evals} evals: elite {found}")
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    out = _resolve_out(args, cfg)
    designs_path = _require(args.designs)
    designs = _read_designs_csv(designs_path)
    ocfg = config_mod.oracle_config(cfg)
    valid, dp, temp = oracle.evaluate_many(designs, ocfg)
    with open(out / "labels.csv", "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["dp_pa", "temp_k", "valid"])
        for i in range(designs.shape[0]):
            writer.writerow([f"{dp[i]:.17g}", f"{temp[i]:.17g}", int(valid[i])])
    summary = {
        "n": int(designs.shape[0]),
        "n_valid": int(valid.sum()),
        "validity_rate": float(valid.mean()) if valid.size else 0.0,
    }
    with open(out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_provenance(out, cfg, "evaluate", cfg.run.master_seed, [designs_path])
    print(f"evaluated {summary['n']} designs: {summary['validity_rate']:.1%} valid")
    return EXIT_OK


def _load_run(run_dir):
    d = Path(run_dir)
    prov_path = d / "provenance.json"
    if not prov_path.exists():
        raise MissingArtifactError(str(prov_path))
    with open(prov_path, "r", encoding="utf-8") as fh:
        prov = json.load(fh)
    record = {"dir": d, "command": prov.get("command")}
    if record["command"] == "guide":
        with open(d / "report.json", "r", encoding="utf-8") as fh:
            record["report"] = json.load(fh)
    elif record["command"] == "cmaes":
        with open(d / "elite.json", "r", encoding="utf-8") as fh:
            record["elite"] = json.load(fh)
    return record


def cmd_report(args, cfg: RunConfig) -> int:
    out = _resolve_out(args, cfg)
    runs = [_load_run(r) for r in args.runs]

    guided = {}
    for r in runs:
        if r["command"] != "guide":
            continue
        rcfg = r["report"]["config"]
        cap = float(rcfg["t_fixed"])
        elite = r["report"].get("elite")
        prev = guided.get(cap)
        if prev is None or (elite is not None and (
                prev.get("elite") is None
                or elite["dp_pa"] < prev["elite"]["dp_pa"])):
            guided[cap] = {"elite": elite, "eta": float(rcfg["eta"]),
                           "feasibility_rate": r["report"]["feasibility_rate"],
                           "dir": r["dir"]}
    cma = {}
    for r in runs:
        if r["command"] != "cmaes":
            continue
        cap = float(r["elite"]["t_fixed"])
        cma[cap] = r["elite"].get("elite")

    caps = [c for c in REPORT_CAPS if c in guided or c in cma]
    extra = sorted((set(guided) | set(cma)) - set(caps))
    caps += extra

    with open(out / "elite_table.csv", "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method"] + [f"{c:g}" for c in caps])
        rows = {"guided_dp_pa": [], "cmaes_dp_pa": [], "improvement_pct": []}
        for c in caps:
            ge = guided.get(c, {}).get("elite")
            ce = cma.get(c)
            gdp = ge["dp_pa"] if ge else None
            cdp = ce["dp_pa"] if ce else None
            rows["guided_dp_pa"].append("" if gdp is None else f"{gdp:.6g}")
            rows["cmaes_dp_pa"].append("" if cdp is None else f"{cdp:.6g}")
            if gdp is None or cdp is None or cdp == 0:
                rows["improvement_pct"].append("")
            else:
                rows["improvement_pct"].append(f"{100.0 * (cdp - gdp) / cdp:.2f}")
        for name, cells in rows.items():
            writer.writerow([name] + cells)

    # feasibility vs guidance strength, grouped by cap
    fea = {}
    for r in runs:
        if r["command"] != "guide":
            continue
        rcfg = r["report"]["config"]
        key = (float(rcfg["t_fixed"]), float(rcfg["eta"]))
        fea[key] = r["report"]["feasibility_rate"]
    with open(out / "feasibility_vs_eta.csv", "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["t_fixed", "eta", "feasibility_rate"])
        for (cap, eta) in sorted(fea):
            writer.writerow([f"{cap:g}", f"{eta:g}", f"{fea[(cap, eta)]:.6f}"])

    # KDE tables are copied from each guided run for one-stop plotting
    for r in runs:
        if r["command"] != "guide":
            continue
        rcfg = r["report"]["config"]
        for tag in ("temp", "pressure"):
            src = r["dir"] / f"kde_{tag}.csv"
            if src.exists():
                dst = out / (f"kde_{tag}_cap{rcfg['t_fixed']:g}"
                             f"_eta{rcfg['eta']:g}.csv")
                dst.write_bytes(src.read_bytes())

    inputs = []
    for r in runs:
        for name in ("report.json", "elite.json"):
            p = r["dir"] / name
            if p.exists():
                inputs.append(p)
    _write_provenance(out, cfg, "report", cfg.run.master_seed, inputs)
    print(f"report over {len(caps)} caps written to {out}")
    return EXIT_OK


# ---- argument parsing ----


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sinkgen",
        description="Heat-sink design generation and optimization pipeline.")
    parser.add_argument("--config", help="TOML configuration file")
    parser.add_argument("--threads", type=int,
                        help="cap worker threads for linear algebra")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a labeled design dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-surrogates", help="fit both label regressors")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_surrogates)

    p = sub.add_parser("train-ddpm", help="train the denoising generator")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_ddpm)

    p = sub.add_parser("sample", help="draw unguided designs")
    p.add_argument("--model", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("guide", help="draw guided designs under a heat cap")
    p.add_argument("--model", required=True)
    p.add_argument("--surrogates", required=True,
                   help="directory holding temperature.ckpt and pressure.ckpt")
    p.add_argument("--tfixed", type=float, required=True)
    p.add_argument("--eta", type=float)
    p.add_argument("--lp", type=float)
    p.add_argument("--lt", type=float)
    p.add_argument("--n", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_guide)

    p = sub.add_parser("cmaes", help="evolution-strategy baseline run")
    p.add_argument("--tfixed", type=float, required=True)
    p.add_argument("--budget", type=int, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_cmaes)

    p = sub.add_parser("evaluate", help="label designs with the oracle")
    p.add_argument("--designs", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("report", help="aggregate runs into comparison tables")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)

    return parser


def _write_diagnostics(args, exc) -> None:
    out = getattr(args, "out", None)
    if out is None:
        return
    try:
        path = Path(out)
        path.mkdir(parents=True, exist_ok=True)
        with open(path / "diagnostics.json", "w", encoding="utf-8") as fh:
            json.dump({"error": type(exc).__name__, "message": str(exc)},
                      fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError:
        pass


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = config_mod.load_config(args.config)
        if args.threads is not None:
            cfg.run.threads = args.threads
        _apply_threads(cfg)
        return args.fn(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NonFiniteError, CheckpointError, FloatingPointError,
            diffusion.TrainingDivergedError, surrogate.SurrogateDivergenceError,
            oracle.OracleError, GeometryError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        _write_diagnostics(args, exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
