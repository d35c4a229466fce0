"""Persistence: convention-stamped CSV/JSON writers, run manifests, comparisons."""
from dataclasses import dataclass, field
from fractions import Fraction
import csv
import hashlib
import json
import math
import os

import numpy as np

from . import __version__
from .toric import CURVATURE_CONVENTION, VOLUME_CONVENTION

HAMILTONIAN_CONVENTION = ("psi = <lam, x> + c0 pairs with theta_*(Jv)/2pi = -diag(<lam, a> + k c0); "
                          "c0 = 0 unless a shift is configured")
CONVENTIONS = {
    "volume": VOLUME_CONVENTION,
    "curvature": CURVATURE_CONVENTION,
    "hamiltonian": HAMILTONIAN_CONVENTION,
    "hilb": "Hilb(h) = (N/V) int h^k(s_a, s_b) omega^n/n!",
    "energy": "Z = k^{n+1} E(FS(H)) + (k^n V/N) tr(M^{-1} log H), H the Gram matrix",
}

# keys excluded when deciding whether two runs describe the same experiment
_NUMERICAL_KEYS = {"quadrature", "tolerances", "out", "figures", "max_iter"}
# convergence diagnostics: they measure the solver, not the answer
_DIAGNOSTIC_KEYS = {"residual", "iterations", "remainder", "projection_remainder",
                    "pointwise_error", "difference", "eq10_spread", "fit_agreement",
                    "block_spread", "A_change", "inner_residual", "rawnsley"}


class CompareError(ValueError):
    """Manifests that cannot be compared (different experiments or conventions)."""


def _plain(obj):
    """Make ``obj`` JSON serialisable with stable float formatting."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, Fraction):
        return str(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps(obj):
    return json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n"


def write_json(path, obj):
    with open(path, "w") as fh:
        fh.write(dumps(obj))
    return path


def _fmt(v):
    if isinstance(v, Fraction):
        return str(v)
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path, columns, rows, meta=None):
    """CSV with a ``#``-prefixed convention header followed by the table."""
    with open(path, "w", newline="") as fh:
        for key in sorted(CONVENTIONS):
            fh.write(f"# {key}: {CONVENTIONS[key]}\n")
        for key, value in sorted((meta or {}).items()):
            fh.write(f"# {key}: {value}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def read_csv(path):
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    return header, [row for row in reader]


def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config_hash: str
    config: dict
    out_dir: str
    files: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)
    wall_times: dict = field(default_factory=dict)
    errors: list = field(default_factory=list)
    status: str = "complete"

    def add(self, path, kind):
        rel = os.path.relpath(path, self.out_dir)
        self.files[rel] = {"kind": kind}
        return path

    def record(self, key, value):
        self.results[key] = _plain(value)

    def to_json(self):
        return {
            "tool": "qel",
            "version": __version__,
            "schema_version": 1,
            "command": self.command,
            "config_hash": self.config_hash,
            "config": self.config,
            "conventions": CONVENTIONS,
            "files": self.files,
            "results": self.results,
            "wall_times": self.wall_times,
            "errors": self.errors,
            "status": self.status,
        }

    def write(self):
        for rel in self.files:
            self.files[rel]["sha256"] = sha256_file(os.path.join(self.out_dir, rel))
        path = os.path.join(self.out_dir, "manifest.json")
        write_json(path, self.to_json())
        return path


def load_manifest(path):
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    with open(path) as fh:
        return json.load(fh)


def _experiment(config):
    return {k: v for k, v in config.items() if k not in _NUMERICAL_KEYS}


def _numeric(v):
    if isinstance(v, bool) or v is None:
        return None
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, str):
        try:
            return float(Fraction(v))
        except (ValueError, ZeroDivisionError):
            return None
    return None


def _flatten(obj, prefix=""):
    out = {}
    if isinstance(obj, dict):
        for k, v in obj.items():
            out.update(_flatten(v, f"{prefix}{k}."))
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            out.update(_flatten(v, f"{prefix}{i}."))
    else:
        out[prefix.rstrip(".")] = obj
    return out


def compare(manifest_a, manifest_b, tol=1e-8):
    """Relative differences of every shared numeric result.

    Returns ``(report, ok)``; ``report["diffs"]`` maps result keys to
    ``|a - b| / max(|a|, |b|)`` (absolute when both are below 1e-12).
    Convergence diagnostics such as residuals are skipped.
    """
    a, b = (m if isinstance(m, dict) else load_manifest(m) for m in (manifest_a, manifest_b))
    if a.get("schema_version") != b.get("schema_version"):
        raise CompareError("manifests use different schema versions")
    if a.get("conventions") != b.get("conventions"):
        keys = sorted(k for k in set(a.get("conventions", {})) | set(b.get("conventions", {}))
                      if a.get("conventions", {}).get(k) != b.get("conventions", {}).get(k))
        raise CompareError(f"convention mismatch: {', '.join(keys)}")
    if a.get("command") != b.get("command"):
        raise CompareError(f"different commands: {a.get('command')} vs {b.get('command')}")
    if _experiment(a.get("config", {})) != _experiment(b.get("config", {})):
        raise CompareError("manifests describe different experiments")
    fa, fb = _flatten(a.get("results", {})), _flatten(b.get("results", {}))
    diffs = {}
    for key in sorted(set(fa) & set(fb)):
        if _DIAGNOSTIC_KEYS & set(key.split(".")):
            continue
        x, y = _numeric(fa[key]), _numeric(fb[key])
        if x is None or y is None:
            continue
        scale = max(abs(x), abs(y))
        diffs[key] = abs(x - y) if scale < 1e-12 else abs(x - y) / scale
    missing = sorted(k for k in set(fa) ^ set(fb) if not _DIAGNOSTIC_KEYS & set(k.split(".")))
    # nothing in common to compare is not agreement
    ok = bool(diffs) and all(d <= tol for d in diffs.values()) and not missing
    return {"diffs": diffs, "missing": missing, "max": max(diffs.values(), default=0.0),
            "tolerance": tol, "ok": ok}, ok
