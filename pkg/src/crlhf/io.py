"""Plain-text formats: CSV tables and line-oriented ``key = value`` files.

Floats are written with 17 significant digits so that values read back are
bit-identical. Lines starting with ``#`` are comments; every file written
here starts with one or more such lines naming the run manifest.

Formats
-------
features    ``prompt,action,f0,...,f{d-1}``
preferences ``prompt,action1,action2,y1,...,y{m+1}``
reference   ``prompt,action,prob``
thetas      ``oracle,t0,...,t{d-1}`` (oracle 0 is the target)
"""

from __future__ import annotations

import csv
import math
import os
import warnings

import numpy as np

from .core import NORM_TOL, FeatureTable, Policy, PreferenceDataset
from .exceptions import ValidationError


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if isinstance(v, (list, tuple, np.ndarray)):
        return ",".join(fmt(x) for x in v)
    return str(v)


def _header(fh, header_lines):
    for line in header_lines:
        fh.write(f"# {line}\n")


def _rows(path):
    """Yield (line_number, fields) for data rows; the first data row is the header."""
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            yield lineno, next(csv.reader([stripped]))


def _read_table(path, required_prefix):
    rows = _rows(path)
    try:
        lineno, header = next(rows)
    except StopIteration:
        raise ValidationError(f"{path}: file has no header row") from None
    header = [h.strip() for h in header]
    if header[:len(required_prefix)] != required_prefix:
        raise ValidationError(
            f"{path}:{lineno}: header must start with {','.join(required_prefix)}, got {','.join(header)}"
        )
    return header, rows


def _parse(path, lineno, text, kind):
    try:
        value = kind(text)
    except ValueError:
        raise ValidationError(f"{path}:{lineno}: cannot parse {text!r} as {kind.__name__}") from None
    if kind is float and not math.isfinite(value):
        raise ValidationError(f"{path}:{lineno}: non-finite value {text!r}")
    return value


def _parse_row(path, lineno, fields, width, kinds):
    if len(fields) != width:
        raise ValidationError(f"{path}:{lineno}: expected {width} fields, got {len(fields)}")
    return [_parse(path, lineno, f.strip(), k) for f, k in zip(fields, kinds)]


# ---------------------------------------------------------------- features


def write_features(path, table: FeatureTable, header_lines=()):
    X, A, d = table.features.shape
    with open(path, "w", newline="") as fh:
        _header(fh, header_lines)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["prompt", "action"] + [f"f{j}" for j in range(d)])
        for x in range(X):
            for a in range(A):
                w.writerow([x, a] + [fmt(v) for v in table.features[x, a]])


def read_feature_array(path) -> np.ndarray:
    header, rows = _read_table(path, ["prompt", "action"])
    d = len(header) - 2
    if d < 1:
        raise ValidationError(f"{path}: no feature columns")
    records = {}
    for lineno, fields in rows:
        vals = _parse_row(path, lineno, fields, d + 2, [int, int] + [float] * d)
        x, a = vals[0], vals[1]
        if x < 0 or a < 0:
            raise ValidationError(f"{path}:{lineno}: negative index")
        if (x, a) in records:
            raise ValidationError(f"{path}:{lineno}: duplicate entry for prompt {x}, action {a}")
        records[(x, a)] = vals[2:]
    if not records:
        raise ValidationError(f"{path}: no data rows")
    X = max(x for x, _ in records) + 1
    A = max(a for _, a in records) + 1
    if len(records) != X * A:
        missing = next((x, a) for x in range(X) for a in range(A) if (x, a) not in records)
        raise ValidationError(f"{path}: missing entry for prompt {missing[0]}, action {missing[1]}")
    feats = np.empty((X, A, d))
    for (x, a), v in records.items():
        feats[x, a] = v
    return feats


def read_features(path, renormalize: bool = True) -> FeatureTable:
    """Load a feature table; vectors with norm above one are rescaled unless disabled."""
    feats = read_feature_array(path)
    norms = np.linalg.norm(feats, axis=2)
    over = norms > 1.0 + NORM_TOL
    if over.any() and renormalize:
        warnings.warn(f"{path}: rescaling {int(over.sum())} feature vectors with norm above 1")
        feats[over] /= norms[over][:, None]
    return FeatureTable(feats)


# ------------------------------------------------------------- preferences


def write_preferences(path, dataset: PreferenceDataset, header_lines=()):
    K = dataset.num_oracles
    with open(path, "w", newline="") as fh:
        _header(fh, header_lines)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["prompt", "action1", "action2"] + [f"y{k + 1}" for k in range(K)])
        for i in range(len(dataset)):
            w.writerow([dataset.prompts[i], dataset.actions1[i], dataset.actions2[i]]
                       + [int(v) for v in dataset.labels[i]])


def read_preferences(path) -> PreferenceDataset:
    header, rows = _read_table(path, ["prompt", "action1", "action2"])
    K = len(header) - 3
    if K < 2:
        raise ValidationError(f"{path}: need at least two label columns")
    data = []
    for lineno, fields in rows:
        vals = _parse_row(path, lineno, fields, K + 3, [int] * (K + 3))
        if any(v not in (0, 1) for v in vals[3:]):
            raise ValidationError(f"{path}:{lineno}: labels must be 0 or 1")
        if min(vals[:3]) < 0:
            raise ValidationError(f"{path}:{lineno}: negative index")
        data.append(vals)
    if not data:
        raise ValidationError(f"{path}: no data rows")
    arr = np.array(data, dtype=np.int64)
    return PreferenceDataset(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3:])


# ---------------------------------------------------------------- policies


def write_policy(path, policy: Policy, header_lines=()):
    X, A = policy.shape
    with open(path, "w", newline="") as fh:
        _header(fh, header_lines)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["prompt", "action", "prob"])
        for x in range(X):
            for a in range(A):
                w.writerow([x, a, fmt(policy.probs[x, a])])


def read_policy(path, shape=None) -> Policy:
    _, rows = _read_table(path, ["prompt", "action", "prob"])
    records = {}
    for lineno, fields in rows:
        x, a, p = _parse_row(path, lineno, fields, 3, [int, int, float])
        if x < 0 or a < 0:
            raise ValidationError(f"{path}:{lineno}: negative index")
        if (x, a) in records:
            raise ValidationError(f"{path}:{lineno}: duplicate entry for prompt {x}, action {a}")
        records[(x, a)] = p
    if not records:
        raise ValidationError(f"{path}: no data rows")
    X = max(x for x, _ in records) + 1
    A = max(a for _, a in records) + 1
    if shape is not None and (X, A) != tuple(shape):
        raise ValidationError(f"{path}: policy covers {X}x{A} pairs, expected {shape[0]}x{shape[1]}")
    probs = np.zeros((X, A))
    for (x, a), p in records.items():
        probs[x, a] = p
    return Policy(probs)


# ------------------------------------------------------------------ thetas


def write_thetas(path, thetas, header_lines=()):
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    with open(path, "w", newline="") as fh:
        _header(fh, header_lines)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["oracle"] + [f"t{j}" for j in range(thetas.shape[1])])
        for k, t in enumerate(thetas):
            w.writerow([k] + [fmt(v) for v in t])


def read_thetas(path) -> np.ndarray:
    header, rows = _read_table(path, ["oracle"])
    d = len(header) - 1
    out = {}
    for lineno, fields in rows:
        vals = _parse_row(path, lineno, fields, d + 1, [int] + [float] * d)
        out[vals[0]] = vals[1:]
    if sorted(out) != list(range(len(out))) or not out:
        raise ValidationError(f"{path}: oracle indices must be 0..K-1")
    return np.array([out[k] for k in range(len(out))])


# ---------------------------------------------------------------- key=value


def write_kv(path, mapping: dict, header_lines=()):
    with open(path, "w") as fh:
        _header(fh, header_lines)
        for k, v in mapping.items():
            if v is None:
                continue
            fh.write(f"{k} = {fmt(v)}\n")


def read_kv(path) -> dict:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            if "=" not in s:
                raise ValidationError(f"{path}:{lineno}: expected key = value")
            k, v = s.split("=", 1)
            out[k.strip()] = v.strip()
    return out


# --------------------------------------------------------------- ingestion


def ingest_external(features_path, preferences_path, reference_path=None,
                    renormalize: bool = True):
    """Load and cross-validate a feature table, preference records and reference policy.

    Without ``reference_path`` the reference policy is uniform.
    """
    for p in (features_path, preferences_path, reference_path):
        if p is not None and not os.path.exists(p):
            raise FileNotFoundError(p)
    table = read_features(features_path, renormalize=renormalize)
    dataset = read_preferences(preferences_path).check_against(table)
    if reference_path is None:
        pi0 = Policy.uniform(table.num_prompts, table.num_actions)
    else:
        pi0 = read_policy(reference_path, (table.num_prompts, table.num_actions))
    return table, dataset, pi0
