"""Long-format observation data and its validation against a model spec."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

__all__ = ["DataError", "Dataset", "ObservationRow", "load_dataset", "write_dataset"]

REQUIRED = ("response", "family_group", "dispersion_group", "item")
_MISSING = {"", "na", "nan", "null", "none"}


class DataError(ValueError):
    """Invalid input data; the message names the row (file line) and field."""


@dataclass(frozen=True)
class ObservationRow:
    response: float
    trials: int
    family_group: str
    dispersion_group: str
    item: str
    level_ids: dict
    covariates: dict


@dataclass
class Dataset:
    """Columnar storage of the elementary observations.

    ``level_ids[l]`` holds the unit label of every row at level ``l``;
    ``units[l]`` maps each row to a dense unit index ``0..level_sizes[l]-1``
    (units numbered in order of first appearance).
    """

    response: np.ndarray
    trials: np.ndarray
    family_group: np.ndarray
    dispersion_group: np.ndarray
    item: np.ndarray
    level_ids: dict
    covariates: dict
    dropped: int = 0
    standardization: dict = field(default_factory=dict)
    units: dict = field(default_factory=dict)
    unit_labels: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.units:
            for lv, ids in self.level_ids.items():
                labels, first = np.unique(ids, return_index=True)
                order = np.argsort(first, kind="stable")
                labels = labels[order]
                lookup = {lab: k for k, lab in enumerate(labels)}
                self.units[lv] = np.fromiter((lookup[x] for x in ids), dtype=np.int64, count=ids.size)
                self.unit_labels[lv] = labels

    @property
    def n(self):
        return int(self.response.size)

    @property
    def level_sizes(self):
        return {lv: int(lab.size) for lv, lab in self.unit_labels.items()}

    @property
    def rows(self):
        out = []
        for i in range(self.n):
            out.append(
                ObservationRow(
                    response=float(self.response[i]),
                    trials=int(self.trials[i]),
                    family_group=str(self.family_group[i]),
                    dispersion_group=str(self.dispersion_group[i]),
                    item=str(self.item[i]),
                    level_ids={lv: str(v[i]) for lv, v in self.level_ids.items()},
                    covariates={k: float(v[i]) for k, v in self.covariates.items()},
                )
            )
        return out

    def with_response(self, y):
        """Copy sharing structure and covariates but with new responses."""
        y = np.asarray(y, dtype=float)
        if y.shape != self.response.shape:
            raise ValueError("response length mismatch")
        return Dataset(
            response=y,
            trials=self.trials,
            family_group=self.family_group,
            dispersion_group=self.dispersion_group,
            item=self.item,
            level_ids=self.level_ids,
            covariates=self.covariates,
            dropped=self.dropped,
            standardization=dict(self.standardization),
            units=self.units,
            unit_labels=self.unit_labels,
        )


def _is_missing(s):
    return s is None or s.strip().lower() in _MISSING


def _required_covariates(spec):
    need = set()
    for sm in spec.smooths:
        need.add(sm.covariate)
    for rg in spec.regressions:
        if rg.covariate is not None:
            need.add(rg.covariate)
    for ld in spec.loadings:
        if ld.covariate is not None:
            need.add(ld.covariate)
    return need


def _parse_float(text, line, name):
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"row {line}: non-numeric {name} {text!r}") from None
    if not math.isfinite(v):
        raise DataError(f"row {line}: non-finite {name} {text!r}")
    return v


def load_dataset(path, spec, standardize=None):
    """Read and validate a long-format CSV file against ``spec``.

    Rows with a missing response or a missing required covariate are
    dropped; their count is stored in ``Dataset.dropped``. Row numbers in
    error messages are file line numbers (the header is line 1).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file, header row missing") from None
        header = [h.strip() for h in header]
        records = [(k + 2, rec) for k, rec in enumerate(reader) if any(c.strip() for c in rec)]
    return build_dataset(header, records, spec, standardize=standardize, source=str(path))


def build_dataset(header, records, spec, standardize=None, source="<memory>"):
    col = {h: k for k, h in enumerate(header)}
    level_cols = {lv.level: f"level{lv.level}_id" for lv in spec.levels}
    binom_groups = {f.id for f in spec.families if f.family.startswith("binomial")}
    needed = list(REQUIRED) + list(level_cols.values())
    if binom_groups:
        needed.append("trials")
    for name in needed:
        if name not in col:
            raise DataError(f"{source}: missing column {name!r}")
    req_cov = _required_covariates(spec)
    for name in sorted(req_cov):
        if name not in col:
            raise DataError(f"{source}: missing covariate column {name!r}")
    reserved = set(REQUIRED) | {"trials"} | set(level_cols.values())
    cov_names = [h for h in header if h not in reserved]
    fam_ids = {f.id for f in spec.families}
    disp = {g.id: g for g in spec.dispersion_groups}
    items = set(spec.items)

    resp, trials, fam, dgrp, item = [], [], [], [], []
    lev = {lv: [] for lv in level_cols}
    covs = {c: [] for c in cov_names}
    dropped = 0
    for line, rec in records:
        if len(rec) != len(header):
            raise DataError(f"row {line}: expected {len(header)} fields, found {len(rec)}")
        get = lambda name: rec[col[name]].strip()  # noqa: E731
        if _is_missing(get("response")):
            dropped += 1
            continue
        if any(_is_missing(get(c)) for c in req_cov):
            dropped += 1
            continue
        y = _parse_float(get("response"), line, "response")
        fg, dg, it = get("family_group"), get("dispersion_group"), get("item")
        if fg not in fam_ids:
            raise DataError(f"row {line}: unknown family group {fg!r}")
        if dg not in disp:
            raise DataError(f"row {line}: unknown dispersion group {dg!r}")
        if it not in items:
            raise DataError(f"row {line}: unknown item {it!r}")
        if fg in binom_groups:
            if _is_missing(get("trials")):
                raise DataError(f"row {line}: binomial row without trials")
            m = _parse_float(get("trials"), line, "trials")
            if m < 1 or m != int(m):
                raise DataError(f"row {line}: trials must be a positive integer, got {get('trials')!r}")
            if y < 0 or y > m or y != int(y):
                raise DataError(f"row {line}: binomial response {y:g} outside 0..{int(m)} (trials bound)")
            if disp[dg].fixed is None:
                raise DataError(f"row {line}: binomial row in dispersion group {dg!r} whose dispersion is not fixed")
        else:
            m = 1.0
        resp.append(y)
        trials.append(m)
        fam.append(fg)
        dgrp.append(dg)
        item.append(it)
        for lv, cname in level_cols.items():
            v = get(cname)
            if _is_missing(v):
                raise DataError(f"row {line}: missing {cname}")
            lev[lv].append(v)
        for c in cov_names:
            v = get(c)
            if _is_missing(v):
                covs[c].append(np.nan)
            else:
                covs[c].append(_parse_float(v, line, c))
    if not resp:
        raise DataError(f"{source}: no usable rows")

    ds = Dataset(
        response=np.asarray(resp, dtype=float),
        trials=np.asarray(trials, dtype=float),
        family_group=np.asarray(fam, dtype=object),
        dispersion_group=np.asarray(dgrp, dtype=object),
        item=np.asarray(item, dtype=object),
        level_ids={lv: np.asarray(v, dtype=object) for lv, v in lev.items()},
        covariates={c: np.asarray(v, dtype=float) for c, v in covs.items()},
        dropped=dropped,
    )
    validate_dataset(ds, spec)
    groups = spec.standardize if standardize is None else standardize
    if groups:
        ds = standardize_responses(ds, groups)
    return ds


def validate_dataset(ds, spec):
    """Cross-check nesting and declared covariate constancy."""
    for lv in spec.levels:
        if lv.parent is None:
            continue
        child, parent = ds.units[lv.level], ds.units[lv.parent]
        seen = np.full(ds.level_sizes[lv.level], -1)
        for c, p in zip(child, parent):
            if seen[c] == -1:
                seen[c] = p
            elif seen[c] != p:
                lab = ds.unit_labels[lv.level][c]
                raise DataError(f"level {lv.level} unit {lab!r} appears in more than one level-{lv.parent} unit")
    for cv, level in spec.covariates.items():
        if level == 1 or cv not in ds.covariates:
            continue
        x = ds.covariates[cv]
        u = ds.units[level]
        ok = ~np.isnan(x)
        first = np.full(ds.level_sizes[level], np.nan)
        for k in np.flatnonzero(ok):
            if np.isnan(first[u[k]]):
                first[u[k]] = x[k]
        bad = ok & (x != first[u])
        if np.any(bad):
            k = int(np.flatnonzero(bad)[0])
            raise DataError(f"covariate {cv!r} varies within level-{level} unit {ds.unit_labels[level][u[k]]!r}")
    fam_of = {f.id: f.family for f in spec.families}
    for g in spec.dispersion_groups:
        mask = ds.dispersion_group == g.id
        kinds = {fam_of[f].split("-")[0] for f in set(ds.family_group[mask])}
        if len(kinds) > 1:
            raise DataError(f"dispersion group {g.id!r} mixes families {sorted(kinds)}")


def standardize_responses(ds, groups):
    """Scale responses of the listed dispersion groups to mean 0, sd 1."""
    y = ds.response.copy()
    info = {}
    for g in groups:
        mask = ds.dispersion_group == g
        if not np.any(mask):
            continue
        m = float(y[mask].mean())
        s = float(y[mask].std())
        if s <= 0:
            raise DataError(f"cannot standardize constant responses in group {g!r}")
        y[mask] = (y[mask] - m) / s
        info[g] = (m, s)
    out = ds.with_response(y)
    out.standardization = info
    return out


def write_dataset(ds, path, spec):
    """Write ``ds`` as a long-format CSV file readable by :func:`load_dataset`."""
    level_cols = [f"level{lv.level}_id" for lv in sorted(spec.levels, key=lambda x: x.level)]
    covs = sorted(ds.covariates)
    header = list(REQUIRED) + ["trials"] + level_cols + covs
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(ds.n):
            row = [
                repr(float(ds.response[i])),
                ds.family_group[i],
                ds.dispersion_group[i],
                ds.item[i],
                str(int(ds.trials[i])),
            ]
            row += [str(ds.level_ids[lv.level][i]) for lv in sorted(spec.levels, key=lambda x: x.level)]
            row += ["" if np.isnan(ds.covariates[c][i]) else repr(float(ds.covariates[c][i])) for c in covs]
            w.writerow(row)
