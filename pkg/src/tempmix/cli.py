"""Command-line entry point: ``tempmix {probs,fsweep,run,gradvar}``.

Exit status: 0 on success, 1 when a run diverged or an output could not be
written, 2 for usage and configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from .analysis import race_table, variance_gap_curve, variance_rows_to_csv
from .config import ExperimentConfig
from .errors import ConfigError, TempmixError
from .mixture import DomainCatalog, equivalent_weights, f_tau_sweep, temperature_probs, variance_factor, zipf_catalog
from .models import build_model
from .rng import make_rng
from .trainer import TrainConfig, resolve_data, train_many

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals:
        raise UsageError("expected at least one number")
    return vals


def _grid(text: str) -> list[float]:
    """``a,b,c`` or an inclusive range ``start:stop:step``."""
    if ":" not in text:
        return _floats(text)
    parts = text.split(":")
    if len(parts) != 3:
        raise UsageError(f"range must be start:stop:step, got {text!r}")
    start, stop, step = _floats(",".join(parts))
    if not step > 0 or stop < start:
        raise UsageError(f"empty or invalid range {text!r}")
    n = int(math.floor((stop - start) / step + 1e-9)) + 1
    return [round(start + i * step, 12) for i in range(n)]


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


# -- probs / fsweep -----------------------------------------------------------------


def cmd_probs(args) -> int:
    sizes = _floats(args.sizes)
    names = [n.strip() for n in args.names.split(",")] if args.names else None
    try:
        catalog = DomainCatalog.from_sizes(sizes, names)
        p = temperature_probs(catalog, args.tau)
        w = equivalent_weights(catalog, args.tau)
        F = variance_factor(catalog, args.tau)
    except TempmixError as exc:
        raise UsageError(str(exc)) from None
    out = sys.stdout
    out.write(f"# tau={args.tau!r} K={catalog.K}\n")
    out.write("id\tname\tsize\tp\tw\n")
    for d, pi, wi in zip(catalog.domains, p, w):
        out.write(f"{d.id}\t{d.name}\t{d.size:g}\t{float(pi)!r}\t{float(wi)!r}\n")
    out.write(f"F\t{F!r}\n")
    return EXIT_OK


def cmd_fsweep(args) -> int:
    alphas = _floats(args.alphas)
    taus = _grid(args.taus)
    if args.K < 1:
        raise UsageError("K must be >= 1")
    rows = []
    try:
        for a in alphas:
            catalog = zipf_catalog(args.K, a, args.unit)
            rows.extend((a, t, F) for t, F in f_tau_sweep(catalog, taus))
    except TempmixError as exc:
        raise UsageError(str(exc)) from None
    buf = io.StringIO()
    digest = _digest({"alphas": alphas, "taus": taus, "K": args.K, "unit": args.unit})
    buf.write(f"# config_hash={digest} seed=none K={args.K} unit={args.unit}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["alpha", "tau", "F"])
    for a, t, F in rows:
        w.writerow([repr(float(a)), repr(float(t)), repr(float(F))])
    try:
        Path(args.out).write_text(buf.getvalue(), encoding="utf-8")
    except OSError as exc:
        print(f"error: cannot write {args.out}: {exc.strerror}", file=sys.stderr)
        return EXIT_FAILED
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


# -- run ---------------------------------------------------------------------------------


def _load(path: str) -> tuple[ExperimentConfig, Path]:
    cfg = ExperimentConfig.load(path)
    return cfg, Path(path).resolve().parent


def _fresh_dir(path: Path) -> None:
    if path.exists():
        raise UsageError(f"output directory {path} already exists; refusing to mix results")
    try:
        path.mkdir(parents=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {path}: {exc.strerror}") from None


def build_run_configs(cfg: ExperimentConfig, base_dir: Path) -> list[list[TrainConfig]]:
    """``[arm][seed]`` grid of training configs over the shared dataset."""
    source = cfg.data_source(base_dir)
    e = cfg.experiment
    grid = []
    for arm in cfg.arms:
        row = []
        for seed in e.seeds:
            catalog = resolve_data(source, seed).catalog
            plan = arm.build_plan(catalog, e.steps)
            row.append(TrainConfig(cfg.model_spec, source, plan, arm.mode, cfg.optimizer_spec, e.batch_size,
                                   e.steps, e.eval_interval, int(seed), e.homogeneous_batches, label=arm.name))
        grid.append(row)
    return grid


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def cmd_run(args) -> int:
    cfg, base = _load(args.config)
    e = cfg.experiment
    grid = build_run_configs(cfg, base)
    out = Path(args.out or e.output_dir)
    _fresh_dir(out)
    digest = cfg.digest()
    (out / "config.ini").write_text(cfg.to_text(), encoding="utf-8")
    runs_dir = out / "runs"
    runs_dir.mkdir()

    flat = [c for row in grid for c in row]
    records = train_many(flat, e.workers)
    by_arm = [records[i * len(e.seeds):(i + 1) * len(e.seeds)] for i in range(len(cfg.arms))]

    for arm, recs in zip(cfg.arms, by_arm):
        for rec in recs:
            rec.config_hash = digest
            stem = runs_dir / f"{arm.name}_seed{rec.seed}"
            rec.write(stem.with_suffix(".csv"))
            np.save(stem.with_suffix(".npy"), rec.final_params)

    source = cfg.data_source(base)
    thresholds = [cfg.thresholds_for(resolve_data(source, s)) for s in e.seeds]
    table = race_table([a.name for a in cfg.arms], by_arm, e.seeds, thresholds)
    (out / "race.csv").write_text(table.to_csv(f"config_hash={digest} seed={','.join(map(str, e.seeds))}"),
                                  encoding="utf-8")

    diverged = [(arm.name, r.seed, r.diverged_step) for arm, recs in zip(cfg.arms, by_arm) for r in recs
                if r.diverged]
    med = table.median_steps()
    summary = {
        "config_hash": digest,
        "name": e.name,
        "seeds": list(e.seeds),
        "domains": list(table.names),
        "thresholds": {str(s): [float(v) for v in t] for s, t in zip(e.seeds, thresholds)},
        "arms": [
            {
                "name": arm.name,
                "plan": arm.plan,
                "mode": arm.mode,
                "median_steps": [_jsonable(float(v)) for v in med[i]],
                "wins": [int(v) for v in table.wins()[i]],
                "runs": [
                    {
                        "seed": int(seed),
                        "steps_to_threshold": rep.steps_to_threshold,
                        "final_valid": [_jsonable(float(v)) for v in rep.final_loss],
                        "min_valid": [_jsonable(float(v)) for v in rep.min_loss],
                        "overfit_gap": [_jsonable(float(v)) for v in rep.overfit_gap],
                        "diverged": rep.diverged,
                        "diverged_step": by_arm[i][j].diverged_step,
                    }
                    for j, (seed, rep) in enumerate(zip(e.seeds, table.reports[i]))
                ],
            }
            for i, arm in enumerate(cfg.arms)
        ],
        "diverged": [{"arm": a, "seed": s, "step": t} for a, s, t in diverged],
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")

    print(f"{len(records)} runs written to {out}")
    for i, arm in enumerate(cfg.arms):
        meds = ", ".join(f"{n}={v:g}" for n, v in zip(table.names, med[i]))
        print(f"  {arm.name:<16} median steps-to-threshold: {meds}")
    if diverged:
        for a, s, t in diverged:
            print(f"error: arm {a} seed {s} diverged at step {t}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


# -- gradvar -------------------------------------------------------------------------------


def cmd_gradvar(args) -> int:
    cfg, base = _load(args.config)
    g = cfg.gradvar
    if g is None:
        raise ConfigError("missing required section [gradvar]", "gradvar")
    seed = g.seed if g.seed is not None else cfg.experiment.seeds[0]
    data = resolve_data(cfg.data_source(base), seed)
    model = build_model(cfg.model_spec, data.width, make_rng(seed, "init"))
    if g.checkpoint != "fresh-init":
        path = base / g.checkpoint
        try:
            params = np.load(path)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"gradvar.checkpoint: cannot load {path}: {exc}", "gradvar.checkpoint") from None
        if params.shape != model.params.shape:
            raise ConfigError(f"gradvar.checkpoint holds {params.shape} parameters, model needs "
                              f"{model.params.shape}", "gradvar.checkpoint")
        model.params[:] = params
    if g.n_samples < 2 or g.batch_size < 1:
        raise ConfigError("gradvar.n_samples must be >= 2 and batch_size >= 1", "gradvar.n_samples")

    out = Path(args.out or Path(cfg.experiment.output_dir) / "gradvar.csv")
    if out.exists():
        raise UsageError(f"{out} already exists; refusing to overwrite")
    try:
        rows = variance_gap_curve(model, data, g.tau_grid, g.n_samples, make_rng(seed, "gradvar"), g.batch_size)
    except TempmixError as exc:
        raise ConfigError(f"gradvar.tau_grid: {exc}", "gradvar.tau_grid") from None
    text = variance_rows_to_csv(rows, f"config_hash={cfg.digest()} seed={seed} checkpoint={g.checkpoint}")
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
    except OSError as exc:
        print(f"error: cannot write {out}: {exc.strerror}", file=sys.stderr)
        return EXIT_FAILED
    print(f"wrote {len(rows)} rows to {out}")
    return EXIT_OK


# -- entry ---------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tempmix", description="Temperature sampling and scalarization experiments.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("probs", help="sampling probabilities, equivalent weights and F for a catalog")
    p.add_argument("--sizes", required=True, help="comma-separated domain sizes, e.g. 900,100")
    p.add_argument("--tau", type=float, required=True)
    p.add_argument("--names", help="comma-separated domain names")
    p.set_defaults(func=cmd_probs)

    p = sub.add_parser("fsweep", help="F(tau) over Zipf catalogs, as CSV")
    p.add_argument("--alphas", default="0,0.5,1,2")
    p.add_argument("--K", type=int, default=100)
    p.add_argument("--unit", type=int, default=1_000_000, help="size of the largest domain")
    p.add_argument("--taus", default="1:10:0.1", help="start:stop:step (inclusive) or a comma list")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fsweep)

    p = sub.add_parser("run", help="train every arm under every seed of an experiment config")
    p.add_argument("config")
    p.add_argument("--out", help="output directory (overrides experiment.output_dir)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("gradvar", help="scalarization vs sampling gradient variance at a frozen model")
    p.add_argument("config")
    p.add_argument("--out", help="output CSV (default: <output_dir>/gradvar.csv)")
    p.set_defaults(func=cmd_gradvar)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
