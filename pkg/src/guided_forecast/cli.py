"""Command-line entry point: ``guided-forecast <subcommand> ...``.

Exit codes: 0 success or certified, 3 NSF, 1 error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .data import PredictionTask, SeasonSet, ingest_wili, synth_seasons, write_wili
from .errors import GuidedForecastError
from .evaluation import dumps, emit_report, evaluate, read_external, score_external, write_json
from .forecaster import Arch, TrainConfig, load_model, save_model
from .guidance import Guidance, parse_guidances
from .modes import (
    DEFAULT_GRID,
    AutoGuidanceSpec,
    SplitParams,
    WeekResult,
    parse_weeks,
    weekly_sweep,
)
from .seldonian import SeldonianConfig, safety_test

EXIT_OK, EXIT_ERROR, EXIT_NSF = 0, 1, 3

logger = logging.getLogger("guided_forecast")


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text() if not path.lstrip().startswith("{") else path
    return json.loads(text)


def _seldonian_config(args, extra: dict) -> SeldonianConfig:
    train = TrainConfig(
        learning_rate=extra.get("learning_rate", TrainConfig.learning_rate),
        epochs=args.epochs if args.epochs is not None else extra.get("epochs", TrainConfig.epochs),
        beta_weight=extra.get("beta_weight", TrainConfig.beta_weight),
        seed=args.seed,
        grad_clip=extra.get("grad_clip", TrainConfig.grad_clip),
        optimizer=extra.get("optimizer", TrainConfig.optimizer),
    )
    arch = Arch(extra.get("hidden", Arch.hidden), extra.get("embed", Arch.embed),
                extra.get("k", Arch.k))
    return SeldonianConfig(
        lam=extra.get("lambda", SeldonianConfig.lam),
        u_loss=extra.get("u_loss"),
        inflation=extra.get("inflation", SeldonianConfig.inflation),
        train=train,
        arch=arch,
    )


def _split_params(args, extra: dict) -> SplitParams:
    return SplitParams(
        test_fraction=extra.get("test_fraction", 0.2),
        candidate_fraction=extra.get("candidate_fraction", 0.5),
        group_by_year=extra.get("group_by_year", False),
    )


def _data(args) -> SeasonSet:
    regions = args.regions.split(",") if getattr(args, "regions", None) else None
    data = ingest_wili(args.data, regions)
    exclude = getattr(args, "exclude_seasons", None)
    if exclude:
        data = data.filter(exclude_years=exclude.split(","))
    return data


def _with_delta(guidances: list[Guidance], delta: float | None) -> list[Guidance]:
    if delta is None:
        return guidances
    return [Guidance(g.kind, g.epsilon, delta, g.regions, g.quality, g.window) for g in guidances]


# ------------------------------------------------------------------ commands


def cmd_ingest(args) -> int:
    data = _data(args)
    summary = {
        "seasons": len(data),
        "regions": sorted(data.regions),
        "years": data.year_labels(),
    }
    sys.stdout.write(dumps(summary))
    if args.out:
        write_wili(data, args.out)
    return EXIT_OK


def cmd_synth(args) -> int:
    data = synth_seasons(args.n, args.dip_week, args.dip_depth, args.noise_sd, args.seed,
                         region=args.region, jitter=args.jitter)
    write_wili(data, args.out)
    return EXIT_OK


def _sweep(args, mode: str):
    extra = _load_config(args.config)
    data = _data(args)
    config = _seldonian_config(args, extra)
    weeks = parse_weeks(args.weeks)
    if mode == "auto":
        base = parse_guidances(args.guidance)[0]
        grid = ([float(x) for x in args.epsilon_grid.split(",")] if args.epsilon_grid
                else list(DEFAULT_GRID))
        target = AutoGuidanceSpec(base.kind, args.delta if args.delta is not None else base.delta,
                                  tuple(grid), args.requirement, base.regions, base.quality,
                                  base.window)
    else:
        target = _with_delta(parse_guidances(args.guidance), args.delta)
    results = weekly_sweep(data, target, config, weeks, mode, _split_params(args, extra),
                           args.seed, with_baseline=(mode == "direct" and args.command
                                                     == "evaluate"), jobs=args.jobs)
    return data, target, results


def _exit_code(results) -> int:
    if any(r.status == "error" for r in results):
        return EXIT_ERROR
    if any(r.status == "nsf" for r in results):
        return EXIT_NSF
    return EXIT_OK


def _recertify(args) -> list[WeekResult]:
    """Safety-test a saved model for each requested week, without training."""
    extra = _load_config(args.config)
    data = _data(args)
    model = load_model(args.load_model)
    config = _seldonian_config(args, extra).replace(
        guidances=tuple(_with_delta(parse_guidances(args.guidance), args.delta)))
    data_split = _split_params(args, extra).apply(data, args.seed)
    results = []
    for w in parse_weeks(args.weeks):
        task = PredictionTask(w)
        outcome = safety_test(model, data_split, config, task)
        outcome.metadata = {"week_index": w, "epiweek": task.epiweek, "seed": args.seed,
                            "split": data_split.describe(), "model_path": args.load_model}
        results.append(WeekResult(w, task.epiweek, outcome))
    return results


def cmd_run(args) -> int:
    mode = args.command
    if getattr(args, "load_model", None):
        results = _recertify(args)
    else:
        _, _, results = _sweep(args, mode)
    weeks = []
    for r in results:
        entry = r.to_dict()
        if args.save_model and r.model is not None:
            path = _model_path(args.save_model, r.epiweek, len(results))
            save_model(r.model, path)
            entry["model_path"] = str(path)
        weeks.append(entry)
    report = {"mode": mode, "seed": args.seed, "weeks": weeks}
    if args.report:
        write_json(report, args.report)
    else:
        sys.stdout.write(dumps(report))
    return _exit_code(results)


def _model_path(base: str, epiweek: int, n_weeks: int) -> Path:
    """``base`` itself for a single week, else ``base`` with ``-wNN`` before the suffix."""
    path = Path(base)
    if n_weeks == 1:
        return path
    return path.with_name(f"{path.stem}-w{epiweek:02d}{path.suffix}")


def cmd_evaluate(args) -> int:
    _, guidances, results = _sweep(args, "direct")
    first = next((r for r in results if r.outcome is not None), None)
    if first is None:
        raise GuidedForecastError("every week failed; nothing to evaluate")
    report = evaluate([r for r in results if r.outcome is not None], first.outcome.split.test,
                      guidances[0])
    emit_report(report, args.report, args.format)
    return EXIT_OK


def cmd_score_external(args) -> int:
    truth = ingest_wili(args.data)
    guidance = parse_guidances(args.guidance)[0]
    target = (args.year, args.week) if args.week is not None else None
    scores = score_external(read_external(args.forecasts), truth, guidance, target)
    if args.report:
        write_json(scores, args.report)
    else:
        sys.stdout.write(dumps(scores))
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="JSON file or inline JSON with training options")

    parser = argparse.ArgumentParser(prog="guided-forecast", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="validate and summarize a wILI CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--regions")
    p.add_argument("--out", help="re-emit the parsed seasons as CSV")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", parents=[common], help="write synthetic seasons as wILI CSV")
    p.add_argument("--n", type=int, default=20)
    p.add_argument("--dip-week", type=int)
    p.add_argument("--dip-depth", type=float, default=0.0)
    p.add_argument("--noise-sd", type=float, default=0.1)
    p.add_argument("--jitter", type=float, default=1.0)
    p.add_argument("--region", default="synthetic")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    def sweep_flags(p, auto=False):
        p.add_argument("--data", required=True)
        p.add_argument("--regions", help="comma-separated region filter")
        p.add_argument("--exclude-seasons", help="comma-separated year labels to drop")
        p.add_argument("--guidance", required=True, help="guidance JSON (file or inline)")
        p.add_argument("--delta", type=float)
        p.add_argument("--weeks", default="40:17",
                       help="epiweeks of the last observation, inclusive (default 40:17, "
                            "i.e. the whole season)")
        p.add_argument("--epochs", type=int)
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--report")
        if auto:
            p.add_argument("--epsilon-grid", help="comma-separated ascending epsilons")
            p.add_argument("--requirement", type=float, default=1.0,
                           help="max guided/unconstrained RMSE ratio")

    p = sub.add_parser("direct", parents=[common], help="direct guidance")
    sweep_flags(p)
    p.add_argument("--save-model", help="checkpoint path (suffixed -wNN per week for sweeps)")
    p.add_argument("--load-model", help="safety-test this checkpoint instead of training")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("auto", parents=[common], help="automatic guidance (epsilon search)")
    sweep_flags(p, auto=True)
    p.add_argument("--save-model")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("evaluate", parents=[common],
                       help="direct sweep plus unconstrained baseline, scored on the test set")
    sweep_flags(p)
    p.add_argument("--format", choices=["json", "csv"], default="json")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("score-external", parents=[common], help="score external forecasts")
    p.add_argument("--data", required=True, help="ground-truth wILI CSV")
    p.add_argument("--forecasts", required=True, help="team,region,year,week,value CSV")
    p.add_argument("--guidance", required=True)
    p.add_argument("--year", type=int)
    p.add_argument("--week", type=int)
    p.add_argument("--report")
    p.set_defaults(func=cmd_score_external)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("GF_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.command == "evaluate" and not args.report:
        args.report = "/dev/stdout"
    try:
        return args.func(args)
    except (GuidedForecastError, OSError, json.JSONDecodeError) as exc:
        logger.error("%s", exc)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
