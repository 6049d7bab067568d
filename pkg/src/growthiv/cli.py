"""Command-line driver: sweep, counterfactual, countfit, synth, validate.

Runs are configured by a JSON file; flags override config keys. Every run
writes a manifest with the resolved config, its hash, the seed, and package
versions, so a run can be reproduced byte-for-byte from its manifest.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .countmodels import Battery, fit_window_battery
from .counterfactual import (CounterfactualError, InterventionScenario,
                             median_prediction, median_prediction_filter,
                             select_best_spec, simulate_intervention)
from .ingest import (COUNTRIES, MODELS, OUTCOMES, ValidationError,
                     build_growth_observations, load_deflator, load_panel,
                     load_price_quotes, preprocess_prices, write_deflator_csv,
                     write_panel_csv, write_price_quotes_csv)
from .sweep import (DEFAULT_FILTERS, FilterCriteria, enumerate_sets,
                    figure_data, filter_specs, fmt17, run_sweep, summarize,
                    write_figure_csv, write_specs_csv, write_summary_csv)
from .synth import StructuralParams, generate_panel, make_diarrhea_windows

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NO_QUALIFYING_SPEC = 3

DEFAULT_INCREMENTS = {"energy_kcal_per_day": 300.0, "protein_g_per_day": 10.0,
                      "nonprotein_kcal_per_day": 250.0}


class ConfigError(ValueError):
    pass


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(p, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    if "config" in cfg and "config_hash" in cfg:
        # a manifest was passed; re-run its resolved config
        cfg = cfg["config"]
    return cfg


def parse_filter_flag(text: str) -> FilterCriteria:
    """Parse 'cd>3,hjp>0.05[,overid]' into filter criteria."""
    min_cd, min_hj_p, overid = 0.0, 0.0, False
    for tok in text.split(","):
        tok = tok.strip().lower()
        if not tok:
            continue
        if tok == "overid":
            overid = True
        elif tok.startswith("cd>"):
            min_cd = float(tok[3:])
        elif tok.startswith("hjp>"):
            min_hj_p = float(tok[4:])
        else:
            raise ConfigError(f"cannot parse filter token {tok!r}")
    return FilterCriteria(label=text, overidentified_only=overid,
                          min_cd=min_cd, min_hj_p=min_hj_p)


def resolve_config(args) -> dict:
    cfg = load_config(args.config)
    for key in ("country", "model", "outcome", "workers", "seed", "out"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if getattr(args, "data", None) is not None:
        cfg["data"] = args.data
    if getattr(args, "prices", None) is not None:
        cfg["prices"] = args.prices
    if getattr(args, "filter", None):
        cfg["filters"] = [dataclasses.asdict(parse_filter_flag(args.filter))]
    cfg.setdefault("workers", 1)
    cfg.setdefault("seed", 0)
    cfg.setdefault("out", "out")
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


def write_manifest(outdir: Path, cfg: dict, extra: dict) -> None:
    import scipy
    manifest = {
        "config": cfg,
        "config_hash": config_hash(cfg),
        "seed": cfg.get("seed", 0),
        "versions": {"growthiv": __version__, "numpy": np.__version__,
                     "scipy": scipy.__version__,
                     "python": sys.version.split()[0]},
    }
    manifest.update(extra)
    with open(outdir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True, default=str)
        fh.write("\n")


def _filters_from_config(cfg: dict) -> list[FilterCriteria]:
    if "filters" not in cfg:
        return list(DEFAULT_FILTERS)
    out = []
    for f in cfg["filters"]:
        out.append(FilterCriteria(
            label=f.get("label", "custom"),
            overidentified_only=bool(f.get("overidentified_only", False)),
            min_cd=float(f.get("min_cd", 0.0)),
            min_hj_p=float(f.get("min_hj_p", 0.0))))
    return out


def _require(cfg: dict, key: str):
    if key not in cfg or cfg[key] in (None, ""):
        raise ConfigError(f"config key {key!r} is required")
    return cfg[key]


def _load_inputs(cfg: dict):
    country = _require(cfg, "country")
    if country not in COUNTRIES:
        raise ConfigError(f"unknown country {country!r}")
    data_path = Path(_require(cfg, "data"))
    if not data_path.exists():
        raise ConfigError(f"panel file not found: {data_path}")
    panel = load_panel(data_path, country)
    prices = None
    if cfg.get("prices"):
        price_path = Path(cfg["prices"])
        if not price_path.exists():
            raise ConfigError(f"price file not found: {price_path}")
        prices = preprocess_prices(load_price_quotes(price_path),
                                   cfg.get("unit_grams"))
    deflator = None
    if cfg.get("deflator"):
        defl_path = Path(cfg["deflator"])
        if not defl_path.exists():
            raise ConfigError(f"deflator file not found: {defl_path}")
        deflator = load_deflator(defl_path)
    battery = None
    if cfg.get("battery"):
        bat_path = Path(cfg["battery"])
        if not bat_path.exists():
            raise ConfigError(f"battery file not found: {bat_path}")
        battery = Battery.from_json(bat_path.read_text(encoding="utf-8"))
    return country, panel, prices, deflator, battery


def _growth_table(cfg: dict):
    country, panel, prices, deflator, battery = _load_inputs(cfg)
    from .ingest import impute_intakes_fe
    panel = impute_intakes_fe(panel)
    return build_growth_observations(panel, prices, country,
                                     model=cfg.get("model", "protein_split"),
                                     deflator=deflator, battery=battery)


def _intake_coefficients(model: str) -> list[str]:
    return ["energy"] if model == "energy" else ["protein", "nonprotein"]


def _sweep_for(cfg: dict, outcome: str, table=None):
    country = _require(cfg, "country")
    model = cfg.get("model", "protein_split")
    if model not in MODELS:
        raise ConfigError(f"unknown model {model!r}")
    if table is None:
        table = _growth_table(cfg)
    price_names = cfg.get("price_names")
    sets = enumerate_sets(country, model, outcome,
                          price_names=tuple(price_names) if price_names else None)
    results = run_sweep(table, sets, workers=int(cfg.get("workers", 1)))
    return table, results


def cmd_sweep(cfg: dict) -> int:
    outcome = _require(cfg, "outcome")
    if outcome not in OUTCOMES:
        raise ConfigError(f"unknown outcome {outcome!r}")
    model = cfg.get("model", "protein_split")
    t0 = time.time()
    outdir = Path(cfg["out"])
    outdir.mkdir(parents=True, exist_ok=True)
    _table, results = _sweep_for(cfg, outcome)
    write_specs_csv(outdir / "specs.csv", results)
    display_scale = 1000.0 if outcome == "height" else 1.0
    summaries = []
    for crit in _filters_from_config(cfg):
        subset = filter_specs(results, crit)
        for coef in _intake_coefficients(model):
            summaries.append(summarize(subset, coef, filter_label=crit.label,
                                       display_scale=display_scale))
    write_summary_csv(outdir / "summary.csv", summaries)
    fig_filter = FilterCriteria("CD>1 P-val HJ>5", overidentified_only=True,
                                min_cd=1.0, min_hj_p=0.05)
    fig_subset = filter_specs(results, fig_filter)
    primary = _intake_coefficients(model)[0]
    write_figure_csv(outdir / "figure.csv", figure_data(fig_subset, primary))
    if model == "protein_split":
        write_figure_csv(outdir / "figure_nonprotein.csv",
                         figure_data(fig_subset, "nonprotein"))
    counts = {}
    for r in results:
        counts[r.status] = counts.get(r.status, 0) + 1
    wall = time.time() - t0
    write_manifest(outdir, cfg, {
        "command": "sweep", "n_specs": len(results), "status_counts": counts,
        "wall_time_s": round(wall, 3),
        "outputs": ["specs.csv", "summary.csv", "figure.csv"]})
    print(f"sweep: {len(results)} specifications "
          f"({counts.get('ok', 0)} ok) in {wall:.1f}s -> {outdir}")
    for status, cnt in sorted(counts.items()):
        print(f"  {status}: {cnt}")
    return EXIT_OK


def _scenario_from_config(cfg: dict) -> InterventionScenario:
    block = cfg.get("counterfactual", {})
    scen = block.get("scenario")
    if scen is None or scen == "egg":
        days = 60 if cfg.get("country") == "philippines" else 90
        n_periods = int(block.get("n_periods", 9 if days == 60 else 6))
        return InterventionScenario.one_egg_per_week(days_per_period=days,
                                                     n_periods=n_periods)
    if not isinstance(scen, dict):
        raise ConfigError("counterfactual.scenario must be an object or 'egg'")
    try:
        schedule = scen.get("schedule")
        return InterventionScenario(
            protein_kcal_per_day=float(scen.get("protein_kcal_per_day", 0.0)),
            nonprotein_kcal_per_day=float(
                scen.get("nonprotein_kcal_per_day", 0.0)),
            days_per_period=int(scen.get("days_per_period", 90)),
            n_periods=int(scen.get("n_periods", 1)),
            schedule=(tuple(tuple(map(float, pair)) for pair in schedule)
                      if schedule else None),
            allow_negative=bool(scen.get("allow_negative", False)))
    except (TypeError, ValueError, CounterfactualError) as exc:
        raise ConfigError(f"malformed scenario block: {exc}") from exc


def cmd_counterfactual(cfg: dict) -> int:
    cfg = dict(cfg)
    cfg["model"] = "protein_split"
    scenario = _scenario_from_config(cfg)
    outdir = Path(cfg["out"])
    outdir.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    table = _growth_table(cfg)
    results = {}
    for outcome in OUTCOMES:
        _t, results[outcome] = _sweep_for(cfg, outcome, table=table)

    block = cfg.get("counterfactual", {})
    increments = dict(DEFAULT_INCREMENTS)
    increments.update(block.get("increments", {}))
    days = scenario.days_per_period
    import csv as _csv
    with open(outdir / "median_prediction.csv", "w", newline="",
              encoding="utf-8") as fh:
        w = _csv.writer(fh, lineterminator="\n")
        w.writerow(["outcome", "coefficient", "n_specs", "filter",
                    "median_coef", "increment_per_day", "increment_unit",
                    "days_per_period", "predicted_change"])
        for outcome in OUTCOMES:
            filtered, label = median_prediction_filter(results[outcome])
            for coef, inc, unit in (
                    ("protein", increments["protein_g_per_day"], "g_protein"),
                    ("nonprotein", increments["nonprotein_kcal_per_day"],
                     "kcal")):
                if not filtered:
                    w.writerow([outcome, coef, 0, label, "", fmt17(inc), unit,
                                str(days), ""])
                    continue
                med = median_prediction(filtered, coef, inc, days,
                                        increment_unit=unit)
                coefs = [r.fit.coef[coef] for r in filtered]
                from .sweep import percentile
                w.writerow([outcome, coef, len(filtered), label,
                            fmt17(percentile(np.asarray(coefs), 50)),
                            fmt17(inc), unit, str(days), fmt17(med)])

    try:
        best = {oc: select_best_spec(results[oc]) for oc in OUTCOMES}
    except CounterfactualError as exc:
        print(f"counterfactual: {exc}", file=sys.stderr)
        return EXIT_NO_QUALIFYING_SPEC
    delta = simulate_intervention(
        best["height"].fit, best["weight"].fit,
        baseline_periods=scenario.n_periods, scenario=scenario,
        cross_lag_feedback=bool(block.get("cross_lag_feedback", True)))
    with open(outdir / "counterfactual.csv", "w", newline="",
              encoding="utf-8") as fh:
        w = _csv.writer(fh, lineterminator="\n")
        w.writerow(["period", "delta_height_cm", "delta_weight_g",
                    "cum_height_cm", "cum_weight_g"])
        ch = delta.cumulative_height_cm
        cw = delta.cumulative_weight_g
        for t in range(scenario.n_periods):
            w.writerow([str(t + 1), fmt17(delta.height_per_period_cm[t]),
                        fmt17(delta.weight_per_period_g[t]),
                        fmt17(ch[t]), fmt17(cw[t])])
    write_manifest(outdir, cfg, {
        "command": "counterfactual",
        "best_spec": {oc: best[oc].set.id for oc in OUTCOMES},
        "wall_time_s": round(time.time() - t0, 3),
        "outputs": ["median_prediction.csv", "counterfactual.csv"]})
    print(f"counterfactual: best specs "
          f"height=#{best['height'].set.id} weight=#{best['weight'].set.id}; "
          f"total {delta.total_height_cm:.3f} cm, "
          f"{delta.total_weight_g:.1f} g -> {outdir}")
    return EXIT_OK


def cmd_synth(cfg: dict) -> int:
    outdir = Path(cfg["out"])
    outdir.mkdir(parents=True, exist_ok=True)
    block = dict(cfg.get("synth", {}))
    block.setdefault("country", cfg.get("country", "guatemala"))
    try:
        params = StructuralParams(**block)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid synth parameters: {exc}") from exc
    spanel = generate_panel(params, seed=int(cfg.get("seed", 0)))
    write_panel_csv(spanel.panel, outdir / "panel.csv")
    write_price_quotes_csv(spanel.prices, outdir / "prices.csv")
    if params.country == "guatemala":
        write_deflator_csv(spanel.deflator, outdir / "deflator.csv")
    truth = {k: (v.tolist() if isinstance(v, np.ndarray) else v)
             for k, v in spanel.truth.items()}
    with open(outdir / "truth.json", "w", encoding="utf-8") as fh:
        json.dump(truth, fh, sort_keys=True)
        fh.write("\n")
    write_manifest(outdir, cfg, {
        "command": "synth", "n_children": params.n_children,
        "outputs": ["panel.csv", "prices.csv", "truth.json"]})
    print(f"synth: {params.n_children} children ({params.country}) -> {outdir}")
    return EXIT_OK


def cmd_countfit(cfg: dict) -> int:
    outdir = Path(cfg["out"])
    outdir.mkdir(parents=True, exist_ok=True)
    block = cfg.get("countfit", {})
    windows = make_diarrhea_windows(
        seed=int(block.get("seed", cfg.get("seed", 0))),
        n_per_window=int(block.get("n_per_window", 250)))
    battery = fit_window_battery(
        windows, selector=block.get("selector", "r2"),
        scale_factor=float(block.get("scale_factor", 1.0)))
    (outdir / "battery.json").write_text(battery.to_json() + "\n",
                                         encoding="utf-8")
    n_ok = sum(1 for w in battery.windows.values()
               if w.fit is not None and not w.flagged)
    write_manifest(outdir, cfg, {
        "command": "countfit", "n_windows": len(battery.windows),
        "n_ok": n_ok, "outputs": ["battery.json"]})
    print(f"countfit: {n_ok}/{len(battery.windows)} windows fit -> {outdir}")
    return EXIT_OK


def cmd_validate(cfg: dict) -> int:
    country, panel, prices, deflator, battery = _load_inputs(cfg)
    print(f"validate: panel ok ({len(panel)} rows, {country})")
    if prices is not None:
        print(f"validate: prices ok ({len(prices)} series points)")
    if deflator is not None:
        print(f"validate: deflator ok ({len(deflator)} years)")
    if battery is not None:
        print(f"validate: battery ok ({len(battery.windows)} windows)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="growthiv",
        description="Growth production functions with endogenous intakes: "
                    "IV sweeps, diagnostics, counterfactuals, synthesis.")
    sub = parser.add_subparsers(dest="command")
    for name, help_text in (
            ("sweep", "run the instrument-set specification sweep"),
            ("counterfactual", "median predictions and intake simulation"),
            ("countfit", "fit and serialize the diarrhea count battery"),
            ("synth", "generate a synthetic panel"),
            ("validate", "validate config and input files")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--data", help="panel CSV path")
        p.add_argument("--prices", help="price CSV path")
        p.add_argument("--country", choices=COUNTRIES)
        p.add_argument("--model", choices=MODELS)
        p.add_argument("--outcome", choices=OUTCOMES)
        p.add_argument("--filter", help='e.g. "cd>3,hjp>0.05"')
        p.add_argument("--workers", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
    return parser


COMMANDS = {"sweep": cmd_sweep, "counterfactual": cmd_counterfactual,
            "synth": cmd_synth, "countfit": cmd_countfit,
            "validate": cmd_validate}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code not in (0, None) else 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_VALIDATION
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except (ConfigError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
