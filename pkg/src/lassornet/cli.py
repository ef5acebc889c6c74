"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .data import (
    Cohort,
    GeneStats,
    SynthSpec,
    load_cohort,
    normalize,
    prepare_split,
    synth_cohort,
    write_long_csv,
)
from .baselines import read_panel
from .dlmo import PersonPredictions, apply_dlmo_state
from .errors import BadSpec, DataError, InconsistentGenes, NumericalError
from .evaluation import (
    FittedMethod,
    MethodSpec,
    ProtocolOptions,
    config_digest,
    fit_method,
    load_model_document,
    model_document,
    read_reports,
    render_table,
    run_protocol,
    score,
    FitReport,
    write_reports,
)
from .trainer import TrainConfig, random_search, train

logger = logging.getLogger("lassornet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class _VersionAction(argparse.Action):
    def __init__(self, option_strings, dest=argparse.SUPPRESS, default=argparse.SUPPRESS, help=None):
        super().__init__(option_strings, dest=dest, default=default, nargs=0, help=help)

    def __call__(self, parser, namespace, values, option_string=None):
        print(json.dumps({"name": "lassornet", "version": __version__}))
        parser.exit(EXIT_OK)


# ---------------------------------------------------------------------------
# helpers


def _read_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        text = sys.stdin.read() if path == "-" else Path(path).read_text(encoding="utf-8")
        cfg = json.loads(text)
    except json.JSONDecodeError as exc:
        raise BadSpec(f"config {path}: invalid JSON ({exc})") from exc
    if not isinstance(cfg, dict):
        raise BadSpec(f"config {path}: expected a JSON object")
    return cfg


def _relative(base: Optional[str], value: str) -> str:
    if value == "-" or base in (None, "-") or Path(value).is_absolute():
        return value
    return str(Path(base).parent / value)


@contextlib.contextmanager
def _output(path: Optional[str]):
    if path in (None, "-"):
        yield sys.stdout
        sys.stdout.flush()
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            yield fh


def _provenance(args, cfg: dict) -> dict:
    return {"seed": args.seed, "config_digest": config_digest(cfg), "version": __version__}


def _cohort_from(args, cfg: dict) -> Cohort:
    """``--data`` wins; otherwise the config's ``data`` path or ``synth`` block."""
    if args.data:
        return load_cohort(args.data)
    if "data" in cfg:
        return load_cohort(_relative(args.config, cfg["data"]))
    if "synth" in cfg:
        return synth_cohort(SynthSpec.from_dict(cfg["synth"]), args.seed)
    raise UsageError("no cohort given: pass --data or put 'data' or 'synth' in the config")


def _options(args, cfg: dict) -> ProtocolOptions:
    opts = dict(cfg.get("options", {}))
    panel = opts.get("panel")
    if isinstance(panel, str):
        opts["panel"] = read_panel(_relative(args.config, panel))
    if getattr(args, "panel", None):
        opts["panel"] = read_panel(args.panel)
    return ProtocolOptions.from_dict(opts)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = _read_config(args.config)
    spec = SynthSpec.from_dict(cfg.get("synth", cfg))
    cohort = synth_cohort(spec, args.seed)
    with _output(args.out) as fh:
        write_long_csv(cohort, fh, meta=_provenance(args, spec.to_dict()))
    return EXIT_OK


def _fixed_fit(spec: MethodSpec, split, cfg: dict, seed: int, opts: ProtocolOptions) -> FittedMethod:
    """One fit at the hyperparameters given in the config (no search)."""
    from .baselines import fit_elastic_net, fit_plsr, intercept_model

    hp = dict(cfg.get("hyperparameters", {}))
    if spec.name == "lassornet":
        config = TrainConfig.from_dict({**hp, "seed": seed, "zt_augmented": spec.augmented})
        fit = train(config, split)
        return FittedMethod(spec, fit, config.to_dict(), fit.n_selected)
    if spec.name in ("timesignature", "timemachine"):
        try:
            lam, alpha = float(hp["lam"]), float(hp["alpha"])
        except KeyError as exc:
            raise BadSpec(f"elastic net needs hyperparameter {exc.args[0]!r}") from None
        panel = opts.panel if spec.name == "timemachine" else None
        if spec.name == "timemachine" and not panel:
            raise BadSpec("timemachine needs a gene panel")
        m = fit_elastic_net(split, lam, alpha, panel, spec.augmented, opts.ridge)
        return FittedMethod(spec, m, {"lam": lam, "alpha": alpha, "ridge": opts.ridge}, m.n_selected)
    if spec.name == "plsr":
        try:
            a, k = int(hp["n_latent"]), int(hp["K"])
        except KeyError as exc:
            raise BadSpec(f"PLSR needs hyperparameter {exc.args[0]!r}") from None
        m = fit_plsr(split, a, k, spec.augmented)
        return FittedMethod(spec, m, {"n_latent": m.n_latent, "K": m.K}, m.n_selected)
    return FittedMethod(spec, intercept_model(split), {}, 0)


def _fit_and_save(args, cfg: dict, search: bool) -> int:
    cohort = _cohort_from(args, cfg)
    opts = _options(args, cfg)
    spec = MethodSpec.parse(cfg.get("method", "lassornet"))
    split = prepare_split(cohort, args.seed, opts.normalization)
    if search:
        if spec.name == "lassornet":
            space = opts.search
            space = type(space).from_dict({**space.to_dict(), "zt_augmented": spec.augmented})
            fit, trials = random_search(space, split, args.seed, args.threads)
            fitted = FittedMethod(spec, fit, {**fit.config.to_dict(), "trials": len(trials)}, fit.n_selected)
            if args.audit:
                prov = _provenance(args, cfg)
                with open(args.audit, "w", encoding="utf-8") as fh:
                    for t in trials:
                        fh.write(json.dumps({**t, **prov}, sort_keys=True) + "\n")
        else:
            fitted = fit_method(spec, split, opts, args.seed, args.threads)
    else:
        fitted = _fixed_fit(spec, split, cfg, args.seed, opts)

    report = FitReport(method=spec.name, variant=spec.variant, seed=args.seed)
    state = score(fitted, split, opts, report)
    doc = model_document(fitted, split.train.gene_ids, split.train.stats, state, args.seed, config_digest(cfg))
    doc["metrics"] = {
        "mae_ict": dict(report.mae_ict),
        "auc_ict": dict(report.auc_ict),
        "mae_dlmo_test": report.mae_dlmo,
        "auc_dlmo_test": report.auc_dlmo,
    }
    with _output(args.out) as fh:
        fh.write(json.dumps(doc, sort_keys=True) + "\n")
    print(
        f"{spec.tag}: {fitted.n_selected} inputs selected; MAE_ICT "
        + ", ".join(f"{k} {v:.3f} h" for k, v in report.mae_ict.items()),
        file=sys.stderr,
    )
    return EXIT_OK


def cmd_train(args) -> int:
    return _fit_and_save(args, _read_config(args.config), search=False)


def cmd_search(args) -> int:
    return _fit_and_save(args, _read_config(args.config), search=True)


def cmd_evaluate(args) -> int:
    cfg = _read_config(args.config)
    cohort = _cohort_from(args, cfg)
    opts = _options(args, cfg)
    if args.timing:
        opts.timing = True
    methods = args.methods or cfg.get("methods") or ["intercept", "timesignature", "plsr", "lassornet"]
    reports = []
    for i in range(args.repeats):
        reports += run_protocol(cohort, methods, args.seed + i, opts, args.threads)
    with _output(args.out) as fh:
        write_reports(reports, fh)
    failed = [r for r in reports if r.error]
    for r in failed:
        print(f"{r.method}/{r.variant}: {r.error}", file=sys.stderr)
    return EXIT_OK


def _align(cohort: Cohort, doc: dict) -> Cohort:
    """Reorder the cohort's genes to the model's list; a missing gene is a data error."""
    index = {g: k for k, g in enumerate(cohort.gene_ids)}
    missing = [g for g in doc["gene_ids"] if g not in index]
    if missing:
        raise InconsistentGenes(
            f"cohort lacks gene {missing[0]!r} required by the model"
            + (f" (and {len(missing) - 1} more)" if len(missing) > 1 else "")
        )
    cols = [index[g] for g in doc["gene_ids"]]
    people = []
    for p in cohort.people:
        q = type(p)(p.person_id, p.zt, p.expression[:, cols], p.dlmo, p.sample_ids)
        people.append(q)
    aligned = Cohort(people, list(doc["gene_ids"]))
    if doc.get("normalization"):
        aligned = normalize(aligned, GeneStats.from_dict(doc["normalization"]))
    return aligned


def cmd_predict(args) -> int:
    if not args.model:
        raise UsageError("predict needs --model")
    try:
        doc = json.loads(Path(args.model).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise BadSpec(f"model {args.model}: invalid JSON ({exc})") from exc
    fitted = load_model_document(doc)
    cohort = _align(load_cohort(args.data or "-"), doc)
    hours = fitted.predict_people(cohort)
    people = [PersonPredictions(p.person_id, p.zt, h) for p, h in zip(cohort.people, hours)]
    dlmo = {}
    state = doc.get("dlmo")
    if state:
        for pp in people:
            try:
                dlmo[pp.person_id] = float(apply_dlmo_state([pp], state)[0])
            except DataError as exc:
                logger.info("no DLMO for %s: %s", pp.person_id, exc)
    prov = {"seed": doc.get("seed"), "config_digest": doc.get("config_digest"), "version": __version__}
    with _output(args.out) as fh:
        fh.write("# " + " ".join(f"{k}={v}" for k, v in prov.items()) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["person_id", "sample_index", "zt", "predicted_ict", "flagged", "predicted_dlmo"])
        for p, pp in zip(cohort.people, people):
            sids = p.sample_ids or [str(j) for j in range(p.n_samples)]
            d = dlmo.get(p.person_id)
            for j in range(p.n_samples):
                h = pp.pred_ict[j]
                flagged = bool(np.isnan(h))
                w.writerow(
                    [
                        p.person_id,
                        sids[j],
                        repr(float(p.zt[j])),
                        "" if flagged else repr(float(h)),
                        int(flagged),
                        "" if d is None else repr(d),
                    ]
                )
    return EXIT_OK


def cmd_report(args) -> int:
    src = args.input or "-"
    if src == "-":
        reports = read_reports(sys.stdin)
    else:
        with open(src, encoding="utf-8") as fh:
            reports = read_reports(fh)
    if not reports:
        raise BadSpec(f"no reports found in {src}")
    table = render_table(reports)
    seeds = sorted({r.seed for r in reports})
    digests = sorted({r.config_digest for r in reports})
    footer = f"seeds={','.join(map(str, seeds))} config_digest={','.join(digests)} version={__version__}\n"
    with _output(args.out) as fh:
        fh.write(table + footer)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file ('-' for stdin)")
    common.add_argument("--seed", type=int, default=0, help="single source of all randomness (default 0)")
    common.add_argument("--out", help="output file (default: stdout)")
    common.add_argument("--threads", type=int, default=1, help="worker processes for trials (default 1)")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="cohort in long CSV format ('-' for stdin)")
    data.add_argument("--panel", help="gene panel file for timemachine (one gene per line)")

    parser = _Parser(prog="lassornet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action=_VersionAction, help="print version as JSON and exit")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("synth", parents=[common], help="write a synthetic cohort as long CSV")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common, data], help="fit one method at fixed hyperparameters")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("search", parents=[common, data], help="hyperparameter search for one method")
    p.add_argument("--audit", help="JSON-lines file receiving one record per search trial")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("evaluate", parents=[common, data], help="run the full split/select/test protocol")
    p.add_argument("--methods", nargs="+", help="methods to run, e.g. lassornet timesignature/augmented")
    p.add_argument("--repeats", type=int, default=1, help="number of splits; seeds seed..seed+repeats-1")
    p.add_argument("--timing", action="store_true", help="record wall time in reports (breaks byte identity)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", parents=[common, data], help="apply a saved model to a cohort")
    p.add_argument("--model", help="model JSON written by train or search")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("report", parents=[common], help="render a JSON-lines report file as a table")
    p.add_argument("--in", dest="input", help="report file (default: stdin)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.threads < 1:
        print("lassornet: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    if getattr(args, "repeats", 1) < 1:
        print("lassornet: error: --repeats must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"lassornet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"lassornet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"lassornet: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
