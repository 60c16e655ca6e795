"""Command-line entry point.

Subcommands: simulate, fit, validate, roc, bootstrap.  Every run resolves
its settings from (in increasing precedence) hard defaults, a key-value
config file or a previously written manifest, and command-line flags, then
validates them before any work starts.  Every run ends by writing a
manifest recording the resolved config and the SHA-256 of each output
file; re-running from that manifest reproduces the outputs byte for byte.

No randomness is drawn from the wall clock: all stochastic commands take
an explicit seed.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import artifacts
from .cohort import load_cohort, save_cohort
from .config import (
    BootstrapConfig,
    FitConfig,
    RocConfig,
    RunConfig,
    SimulateConfig,
    ValidateConfig,
    parse_config_file,
    pick,
)
from .errors import ConfigError, LongpredError
from .glmm import GlmmSettings, IntegrationSpec, fit_glmm
from .lmm import LmmSettings, fit_lmm
from .rules import roc_to_csv, roc_to_svg
from .simulate import london_like_spec, simulate
from .validation import (
    ValidationSettings,
    bootstrap_ci,
    render_report_text,
    run_validation,
)

log = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="longpred",
        description="Prediction-based classification for longitudinal biomarkers",
    )
    parser.add_argument("--verbose", action="store_true", help="log progress details")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key-value config file")
        p.add_argument("--from-manifest", dest="from_manifest",
                       help="replay the resolved config of a previous run")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=None)
        p.add_argument("--knot", dest="knot_months", type=float, default=None)
        p.add_argument("--manifest", default=None, help="manifest output path")
        for key in ("subject-id", "time-months", "cd4", "wbc", "lymph-pct"):
            p.add_argument(f"--col-{key}", dest=f"col_{key.replace('-', '_')}",
                           default=None, help=f"column name for {key.replace('-', '_')}")

    p = sub.add_parser("simulate", help="generate a synthetic cohort")
    common(p)
    p.add_argument("--n-subjects", dest="n_subjects", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--truth-out", dest="truth_out", default=None)
    p.add_argument("--role-label", dest="role_label", default=None)

    p = sub.add_parser("fit", help="fit a mixed model and write the artifact")
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--model", choices=("lmm", "glmm"), default=None)
    p.add_argument("--k", dest="threshold_k", type=float, default=None)
    p.add_argument("--integration", dest="integration_method",
                   choices=("laplace", "adaptive_gh"), default=None)
    p.add_argument("--nodes", dest="integration_nodes", type=int, default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("validate", help="learning/test protocol with rule selection")
    common(p)
    p.add_argument("--learning", default=None)
    p.add_argument("--test", default=None)
    p.add_argument("--model", choices=("lmm", "glmm"), default=None)
    p.add_argument("--thresholds", default=None, help="comma-separated K values")
    p.add_argument("--budgets", default=None, help="comma-separated FP budgets")
    p.add_argument("--out-dir", dest="out_dir", default=None)
    p.add_argument("--resub-re", dest="resub_random_effects",
                   choices=("auto", "zero", "posterior"), default=None)
    p.add_argument("--variance-mode", dest="lmm_variance_mode",
                   choices=("new_individual_simple", "new_individual_with_re"),
                   default=None)

    p = sub.add_parser("roc", help="resubstitution ROC curve export")
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--model", choices=("lmm", "glmm"), default=None)
    p.add_argument("--k", dest="threshold_k", type=float, default=None)
    p.add_argument("--out-csv", dest="out_csv", default=None)
    p.add_argument("--out-svg", dest="out_svg", default=None)

    p = sub.add_parser("bootstrap", help="subject-bootstrap confidence intervals")
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--model", choices=("lmm", "glmm"), default=None)
    p.add_argument("--k", dest="threshold_k", type=float, default=None)
    p.add_argument("--budget", dest="fp_budget", type=float, default=None)
    p.add_argument("--replicates", type=int, default=None)
    p.add_argument("--out", default=None)

    return parser


def _config_layer(args) -> dict:
    if getattr(args, "config", None) and getattr(args, "from_manifest", None):
        raise ConfigError("--config and --from-manifest are mutually exclusive")
    if getattr(args, "from_manifest", None):
        doc = artifacts.load_json(args.from_manifest)
        if "config" not in doc:
            raise ConfigError(f"{args.from_manifest} does not look like a manifest")
        return dict(doc["config"])
    if getattr(args, "config", None):
        return parse_config_file(args.config)
    return {}


def _schema_from(args, cfg: dict) -> dict:
    schema = dict(cfg.get("schema", {}))
    for key in ("subject_id", "time_months", "cd4", "wbc", "lymph_pct"):
        flag = getattr(args, f"col_{key}", None)
        cfg_key = f"col_{key}"
        if flag is not None:
            schema[key] = flag
        elif cfg_key in cfg:
            schema[key] = cfg[cfg_key]
    return schema


def _common_kwargs(args, cfg: dict, defaults: RunConfig) -> dict:
    return {
        "seed": int(pick(args.seed, cfg, "seed", defaults.seed)),
        "workers": int(pick(args.workers, cfg, "workers", defaults.workers)),
        "knot_months": float(pick(args.knot_months, cfg, "knot_months",
                                  defaults.knot_months)),
        "schema": _schema_from(args, cfg),
    }


def _floats(value) -> list:
    if isinstance(value, (list, tuple)):
        return [float(v) for v in value]
    return [float(v) for v in str(value).split(",") if v.strip()]


def resolve_config(args):
    cfg = _config_layer(args)
    base = RunConfig()
    common = _common_kwargs(args, cfg, base)
    if args.command == "simulate":
        d = SimulateConfig()
        resolved = SimulateConfig(
            **common,
            n_subjects=int(pick(args.n_subjects, cfg, "n_subjects", d.n_subjects)),
            out=str(pick(args.out, cfg, "out", d.out)),
            truth_out=str(pick(args.truth_out, cfg, "truth_out", d.truth_out)),
            role_label=str(pick(args.role_label, cfg, "role_label", d.role_label)),
        )
    elif args.command == "fit":
        d = FitConfig()
        k = pick(args.threshold_k, cfg, "threshold_k", d.threshold_k)
        resolved = FitConfig(
            **common,
            data=str(pick(args.data, cfg, "data", d.data)),
            model=str(pick(args.model, cfg, "model", d.model)),
            threshold_k=None if k is None else float(k),
            integration_method=str(pick(args.integration_method, cfg,
                                        "integration_method", d.integration_method)),
            integration_nodes=int(pick(args.integration_nodes, cfg,
                                       "integration_nodes", d.integration_nodes)),
            out=str(pick(args.out, cfg, "out", d.out)),
        )
    elif args.command == "validate":
        d = ValidateConfig()
        resolved = ValidateConfig(
            **common,
            learning=str(pick(args.learning, cfg, "learning", d.learning)),
            test=str(pick(args.test, cfg, "test", d.test)),
            model=str(pick(args.model, cfg, "model", d.model)),
            thresholds=_floats(pick(args.thresholds, cfg, "thresholds", d.thresholds)),
            budgets=_floats(pick(args.budgets, cfg, "budgets", d.budgets)),
            out_dir=str(pick(args.out_dir, cfg, "out_dir", d.out_dir)),
            resub_random_effects=str(pick(args.resub_random_effects, cfg,
                                          "resub_random_effects",
                                          d.resub_random_effects)),
            lmm_variance_mode=str(pick(args.lmm_variance_mode, cfg,
                                       "lmm_variance_mode", d.lmm_variance_mode)),
        )
    elif args.command == "roc":
        d = RocConfig()
        resolved = RocConfig(
            **common,
            data=str(pick(args.data, cfg, "data", d.data)),
            model=str(pick(args.model, cfg, "model", d.model)),
            threshold_k=float(pick(args.threshold_k, cfg, "threshold_k", d.threshold_k)),
            out_csv=str(pick(args.out_csv, cfg, "out_csv", d.out_csv)),
            out_svg=str(pick(args.out_svg, cfg, "out_svg", d.out_svg)),
        )
    elif args.command == "bootstrap":
        d = BootstrapConfig()
        resolved = BootstrapConfig(
            **common,
            data=str(pick(args.data, cfg, "data", d.data)),
            model=str(pick(args.model, cfg, "model", d.model)),
            threshold_k=float(pick(args.threshold_k, cfg, "threshold_k", d.threshold_k)),
            fp_budget=float(pick(args.fp_budget, cfg, "fp_budget", d.fp_budget)),
            replicates=int(pick(args.replicates, cfg, "replicates", d.replicates)),
            out=str(pick(args.out, cfg, "out", d.out)),
        )
    else:  # pragma: no cover - argparse restricts choices
        raise ConfigError(f"unknown command {args.command!r}")
    resolved.validate()
    return resolved


def _write_manifest(command: str, config, outputs: list, manifest_path: str) -> None:
    doc = {
        "command": command,
        "config": config.as_dict(),
        "outputs": {name: artifacts.sha256_file(name) for name in outputs},
    }
    artifacts.dump_json(doc, manifest_path)


def _default_manifest(primary_output: str) -> str:
    stem, _ = os.path.splitext(primary_output)
    return stem + ".manifest.json"


def _glmm_settings(cfg) -> GlmmSettings:
    return GlmmSettings(integration=IntegrationSpec(
        method=cfg.integration_method,
        nodes_per_dim=cfg.integration_nodes,
    ))


def cmd_simulate(cfg: SimulateConfig, manifest: str | None) -> int:
    spec = london_like_spec(n_subjects=cfg.n_subjects, seed=cfg.seed,
                            knot_months=cfg.knot_months)
    data, truth = simulate(spec, role_label=cfg.role_label)
    save_cohort(data, cfg.out)
    artifacts.dump_json({sid: [float(v) for v in b] for sid, b in truth.items()},
                        cfg.truth_out)
    _write_manifest("simulate", cfg, [cfg.out, cfg.truth_out],
                    manifest or _default_manifest(cfg.out))
    log.info("wrote %s (%d subjects, %d records)", cfg.out, data.n_subjects, data.n_records)
    return 0


def cmd_fit(cfg: FitConfig, manifest: str | None) -> int:
    data = load_cohort(cfg.data, cfg.schema or None)
    if cfg.model == "lmm":
        fit = fit_lmm(data, cfg.knot_months, LmmSettings())
    else:
        fit = fit_glmm(data, cfg.threshold_k, cfg.knot_months, _glmm_settings(cfg))
    artifacts.save_fit(fit, cfg.out)
    _write_manifest("fit", cfg, [cfg.out], manifest or _default_manifest(cfg.out))
    log.info("wrote %s", cfg.out)
    return 0


def cmd_validate(cfg: ValidateConfig, manifest: str | None) -> int:
    learning = load_cohort(cfg.learning, cfg.schema or None, role_label="learning")
    test = load_cohort(cfg.test, cfg.schema or None, role_label="test")
    settings = ValidationSettings(
        knot_months=cfg.knot_months,
        lmm_variance_mode=cfg.lmm_variance_mode,
        resub_random_effects=cfg.resub_random_effects,
    )
    report = run_validation(learning, test, cfg.thresholds, cfg.budgets,
                            cfg.model, settings)
    os.makedirs(cfg.out_dir, exist_ok=True)
    outputs = []
    report_json = os.path.join(cfg.out_dir, "report.json")
    artifacts.dump_json(artifacts.report_to_dict(report), report_json)
    outputs.append(report_json)
    text = render_report_text(report)
    report_txt = os.path.join(cfg.out_dir, "report.txt")
    with open(report_txt, "w") as fh:
        fh.write(text)
    outputs.append(report_txt)
    sys.stdout.write(text)
    for k, curve in report.roc_curves.items():
        csv_path = os.path.join(cfg.out_dir, f"roc_K{k:g}.csv")
        svg_path = os.path.join(cfg.out_dir, f"roc_K{k:g}.svg")
        roc_to_csv(curve, csv_path)
        roc_to_svg(curve, svg_path, title=f"ROC ({cfg.model}, K={k:g})")
        outputs.extend([csv_path, svg_path])
    _write_manifest("validate", cfg, outputs,
                    manifest or os.path.join(cfg.out_dir, "manifest.json"))
    return 0


def cmd_roc(cfg: RocConfig, manifest: str | None) -> int:
    data = load_cohort(cfg.data, cfg.schema or None)
    settings = ValidationSettings(knot_months=cfg.knot_months)
    from .validation import _fit_and_roc  # internal reuse, single source of truth
    _, curve = _fit_and_roc(data, cfg.model, cfg.threshold_k, settings)
    roc_to_csv(curve, cfg.out_csv)
    roc_to_svg(curve, cfg.out_svg, title=f"ROC ({cfg.model}, K={cfg.threshold_k:g})")
    _write_manifest("roc", cfg, [cfg.out_csv, cfg.out_svg],
                    manifest or _default_manifest(cfg.out_csv))
    return 0


def cmd_bootstrap(cfg: BootstrapConfig, manifest: str | None) -> int:
    data = load_cohort(cfg.data, cfg.schema or None)
    settings = ValidationSettings(knot_months=cfg.knot_months)
    cis = bootstrap_ci(data, cfg.threshold_k, cfg.fp_budget, cfg.replicates,
                       seed=cfg.seed, model_kind=cfg.model, settings=settings,
                       workers=cfg.workers)
    artifacts.dump_json(
        artifacts.bootstrap_to_dict(cis, cfg.threshold_k, cfg.fp_budget,
                                    cfg.replicates, cfg.seed),
        cfg.out,
    )
    _write_manifest("bootstrap", cfg, [cfg.out], manifest or _default_manifest(cfg.out))
    for ci in cis:
        log.info("%s: (%.4f, %.4f) from %d replicates (%d failures)",
                 ci.metric, ci.lower, ci.upper, ci.replicates, ci.failures)
    return 0


_DISPATCH = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "validate": cmd_validate,
    "roc": cmd_roc,
    "bootstrap": cmd_bootstrap,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = resolve_config(args)
        return _DISPATCH[args.command](cfg, args.manifest)
    except LongpredError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
