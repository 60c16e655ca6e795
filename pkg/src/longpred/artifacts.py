"""Serialization of fits, reports, and bootstrap output to JSON files.

All matrices are stored as row-major nested lists; floats use Python's
shortest round-trip decimal representation, so reloading on the same
platform reproduces every value bit-for-bit.  Files are written with
sorted keys and a fixed layout to keep repeated runs byte-identical.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .errors import SchemaError
from .glmm import GlmmFit, IntegrationSpec
from .lmm import LmmFit
from .validation import BootstrapCI, ValidationReport


def dump_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_json(path):
    with open(path) as fh:
        return json.load(fh)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _matrix(m) -> list:
    return np.asarray(m, dtype=float).tolist()


def fit_to_dict(fit) -> dict:
    if isinstance(fit, LmmFit):
        return {
            "kind": "lmm",
            "beta_hat": _matrix(fit.beta_hat),
            "d_hat": _matrix(fit.d_hat),
            "sigma2_hat": float(fit.sigma2_hat),
            "var_beta_hat": _matrix(fit.var_beta_hat),
            "reml_loglik": float(fit.reml_loglik),
            "converged": bool(fit.converged),
            "iterations": int(fit.iterations),
            "knot_months": float(fit.knot_months),
            "column_names": list(fit.column_names),
            "theta_hat": None if fit.theta_hat is None else _matrix(fit.theta_hat),
        }
    if isinstance(fit, GlmmFit):
        return {
            "kind": "glmm",
            "beta_hat": _matrix(fit.beta_hat),
            "d_hat": _matrix(fit.d_hat),
            "marginal_loglik": float(fit.marginal_loglik),
            "integration": {
                "method": fit.integration.method,
                "nodes_per_dim": int(fit.integration.nodes_per_dim),
            },
            "converged": bool(fit.converged),
            "iterations": int(fit.iterations),
            "threshold_k": None if fit.threshold_k is None else float(fit.threshold_k),
            "knot_months": float(fit.knot_months),
            "column_names": list(fit.column_names),
        }
    raise SchemaError(f"cannot serialize fit of type {type(fit).__name__}")


def fit_from_dict(doc: dict):
    kind = doc.get("kind")
    if kind == "lmm":
        return LmmFit(
            beta_hat=np.array(doc["beta_hat"]),
            d_hat=np.array(doc["d_hat"]),
            sigma2_hat=doc["sigma2_hat"],
            var_beta_hat=np.array(doc["var_beta_hat"]),
            reml_loglik=doc["reml_loglik"],
            converged=doc["converged"],
            iterations=doc["iterations"],
            knot_months=doc["knot_months"],
            column_names=tuple(doc["column_names"]),
            theta_hat=None if doc.get("theta_hat") is None else np.array(doc["theta_hat"]),
        )
    if kind == "glmm":
        return GlmmFit(
            beta_hat=np.array(doc["beta_hat"]),
            d_hat=np.array(doc["d_hat"]),
            marginal_loglik=doc["marginal_loglik"],
            integration=IntegrationSpec(
                method=doc["integration"]["method"],
                nodes_per_dim=doc["integration"]["nodes_per_dim"],
            ),
            converged=doc["converged"],
            iterations=doc["iterations"],
            threshold_k=doc.get("threshold_k"),
            knot_months=doc["knot_months"],
            column_names=tuple(doc["column_names"]),
        )
    raise SchemaError(f"unknown model artifact kind {kind!r}")


def save_fit(fit, path) -> None:
    dump_json(fit_to_dict(fit), path)


def load_fit(path):
    return fit_from_dict(load_json(path))


def _evaluation_to_dict(ev) -> dict:
    return {
        "rule": {"alpha": ev.rule.alpha, "threshold_k": ev.rule.threshold_k,
                 "source": ev.rule.source},
        "table": {"n11": ev.table.n11, "n12": ev.table.n12,
                  "n21": ev.table.n21, "n22": ev.table.n22},
        "sensitivity": ev.sensitivity,
        "specificity": ev.specificity,
        "fp_rate": ev.fp_rate,
        "ppv": ev.ppv,
        "npv": ev.npv,
    }


def report_to_dict(report: ValidationReport) -> dict:
    return {
        "model_kind": report.model_kind,
        "entries": [
            {
                "threshold_k": e.threshold_k,
                "fp_budget": e.fp_budget,
                "selected_alpha": e.rule.alpha,
                "resubstitution": _evaluation_to_dict(e.resubstitution),
                "test_sample": _evaluation_to_dict(e.test_sample),
                "savings": e.savings,
            }
            for e in report.entries
        ],
        "roc_curves": {
            repr(float(k)): [
                [ev.rule.alpha, ev.fp_rate, ev.sensitivity, ev.ppv, ev.npv]
                for ev in curve.evaluations
            ]
            for k, curve in report.roc_curves.items()
        },
    }


def bootstrap_to_dict(cis: list[BootstrapCI], threshold_k: float,
                      fp_budget: float, replicates: int, seed: int) -> dict:
    return {
        "threshold_k": float(threshold_k),
        "fp_budget": float(fp_budget),
        "replicates_requested": int(replicates),
        "seed": int(seed),
        "intervals": [
            {"metric": ci.metric, "lower": ci.lower, "upper": ci.upper,
             "completed": ci.replicates, "failures": ci.failures}
            for ci in cis
        ],
    }
