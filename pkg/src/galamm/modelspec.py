"""Declarative model configuration.

The configuration is a YAML document whose top-level sections mirror the
fields of :class:`ModelSpec`. See README.md for the full schema; a short
example::

    items: [y1, y2, y3]
    families:
      - {id: cont, family: gaussian}
    dispersion_groups:
      - {id: resid}
    levels:
      - {level: 2, name: subject}
    latent:
      - {name: eta, level: 2}
    loadings:
      - {latent: eta, items: [y1], value: 1.0}
      - {latent: eta, items: [y2], symbol: l2}
      - {latent: eta, items: [y3], symbol: l3}
    regressions:
      - {name: intercepts, per_item: true}
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import yaml

from .families import get_family

__all__ = [
    "CovarianceSpec",
    "FamilySpec",
    "DispersionGroup",
    "LatentSpec",
    "LevelSpec",
    "LoadingSpec",
    "ModelSpec",
    "RegressionSpec",
    "SmoothSpec",
    "SpecError",
    "StructuralSpec",
    "dump_spec",
    "load_spec",
    "parse_spec",
]


class SpecError(ValueError):
    """Invalid model configuration; the message names the offending section."""


@dataclass(frozen=True)
class FamilySpec:
    id: str
    family: str


@dataclass(frozen=True)
class DispersionGroup:
    id: str
    fixed: float | None = None  # binomial groups are pinned to 1


@dataclass(frozen=True)
class LevelSpec:
    level: int
    name: str
    parent: int | None = None  # nested in this level when given


@dataclass(frozen=True)
class LatentSpec:
    name: str
    level: int


@dataclass(frozen=True)
class CovarianceSpec:
    level: int
    structure: str = "diagonal"  # diagonal | unstructured | blocks
    blocks: tuple = ()  # groups of latent names sharing an unstructured block


@dataclass(frozen=True)
class StructuralSpec:
    target: str
    source: str
    value: float | None = None  # fixed coefficient; None means free
    start: float = 0.0


@dataclass(frozen=True)
class LoadingSpec:
    latent: str
    items: tuple
    symbol: str | None = None
    value: float | None = None
    covariate: str | None = None
    sign: str | None = None  # positive | negative
    start: float | None = None

    @property
    def fixed(self):
        return self.value is not None


@dataclass(frozen=True)
class SmoothSpec:
    name: str
    covariate: str
    k: int = 10
    target: str = "predictor"  # "predictor" or a latent name
    items: tuple = ()  # predictor smooths: restrict to these items (empty: all)
    constrained: bool = True


@dataclass(frozen=True)
class RegressionSpec:
    name: str
    covariate: str | None = None  # None means an intercept column
    items: tuple = ()
    per_item: bool = False  # one column per item instead of a shared one
    target: str = "predictor"


@dataclass(frozen=True)
class ModelSpec:
    items: tuple
    families: tuple
    dispersion_groups: tuple
    levels: tuple
    latent: tuple
    covariance: tuple = ()
    structural: tuple = ()
    loadings: tuple = ()
    smooths: tuple = ()
    regressions: tuple = ()
    covariates: dict = field(default_factory=dict)  # covariate -> level it is constant within
    standardize: tuple = ()
    anchor_override: dict = field(default_factory=dict)

    # -- convenience --------------------------------------------------------

    @property
    def L(self):
        return max([1] + [lv.level for lv in self.levels])

    @property
    def latent_names(self):
        return [lt.name for lt in self.latent]

    def latent_index(self, name):
        return self.latent_names.index(name)

    def family_of(self, group_id):
        for f in self.families:
            if f.id == group_id:
                return get_family(f.family)
        raise KeyError(group_id)

    def dispersion_index(self, group_id):
        for k, g in enumerate(self.dispersion_groups):
            if g.id == group_id:
                return k
        raise KeyError(group_id)

    def level_name(self, level):
        for lv in self.levels:
            if lv.level == level:
                return lv.name
        raise KeyError(level)

    def covariance_for(self, level):
        for c in self.covariance:
            if c.level == level:
                return c
        return CovarianceSpec(level=level)

    def latents_at(self, level):
        return [lt.name for lt in self.latent if lt.level == level]


# -- parsing ------------------------------------------------------------------


def _tuple(x):
    if x is None:
        return ()
    if isinstance(x, (list, tuple)):
        return tuple(x)
    return (x,)


def _build(cls, section, entry):
    if not isinstance(entry, dict):
        raise SpecError(f"[{section}] entries must be mappings, got {entry!r}")
    known = set(cls.__dataclass_fields__)
    extra = set(entry) - known
    if extra:
        raise SpecError(f"[{section}] unknown keys {sorted(extra)}")
    try:
        return cls(**entry)
    except TypeError as exc:
        raise SpecError(f"[{section}] {exc}") from None


def parse_spec(doc):
    """Build and validate a :class:`ModelSpec` from a parsed YAML mapping."""
    if not isinstance(doc, dict):
        raise SpecError("[root] configuration must be a mapping")
    doc = copy.deepcopy(doc)
    known = set(ModelSpec.__dataclass_fields__)
    extra = set(doc) - known
    if extra:
        raise SpecError(f"[root] unknown sections {sorted(extra)}")
    for req in ("items", "families", "dispersion_groups"):
        if req not in doc:
            raise SpecError(f"[{req}] section is required")

    def entries(section, cls, fix=None):
        out = []
        for e in doc.get(section) or []:
            e = dict(e) if isinstance(e, dict) else e
            if fix is not None and isinstance(e, dict):
                fix(e)
            out.append(_build(cls, section, e))
        return tuple(out)

    def fix_loading(e):
        e["items"] = tuple(str(i) for i in _tuple(e.get("items")))

    fix_smooth = fix_loading

    def fix_cov(e):
        e["blocks"] = tuple(tuple(b) for b in e.get("blocks", ()))

    spec = ModelSpec(
        items=tuple(str(i) for i in doc["items"]),
        families=entries("families", FamilySpec),
        dispersion_groups=entries("dispersion_groups", DispersionGroup),
        levels=entries("levels", LevelSpec),
        latent=entries("latent", LatentSpec),
        covariance=entries("covariance", CovarianceSpec, fix_cov),
        structural=entries("structural", StructuralSpec),
        loadings=entries("loadings", LoadingSpec, fix_loading),
        smooths=entries("smooths", SmoothSpec, fix_smooth),
        regressions=entries("regressions", RegressionSpec, fix_loading),
        covariates=dict(doc.get("covariates") or {}),
        standardize=_tuple(doc.get("standardize")),
        anchor_override=dict(doc.get("anchor_override") or {}),
    )
    return validate(spec)


def _topological(spec):
    """Latent order in which every structural target precedes its sources.

    ``eta = B eta + ...`` with B strictly upper triangular requires this.
    The declared order is kept when admissible; otherwise ties are broken
    by declaration order.
    """
    import heapq

    names = spec.latent_names
    idx = {n: k for k, n in enumerate(names)}
    feeds = {n: set() for n in names}  # source -> targets it predicts
    for s in spec.structural:
        feeds[s.source].add(s.target)
    if all(idx[t] < idx[s] for s, ts in feeds.items() for t in ts):
        return names
    waiting = {n: len(ts) for n, ts in feeds.items()}
    fed_by = {n: set() for n in names}
    for s, ts in feeds.items():
        for t in ts:
            fed_by[t].add(s)
    heap = [idx[n] for n in names if waiting[n] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        n = names[heapq.heappop(heap)]
        order.append(n)
        for s in fed_by[n]:
            waiting[s] -= 1
            if waiting[s] == 0:
                heapq.heappush(heap, idx[s])
    if len(order) != len(names):
        stuck = [n for n in names if n not in order]
        raise SpecError(f"[structural] cyclic dependency among {stuck}")
    return order


def validate(spec):
    if len(set(spec.items)) != len(spec.items):
        raise SpecError("[items] duplicate item ids")
    fam_ids = [f.id for f in spec.families]
    if len(set(fam_ids)) != len(fam_ids):
        raise SpecError("[families] duplicate family group ids")
    for f in spec.families:
        try:
            get_family(f.family)
        except ValueError as exc:
            raise SpecError(f"[families] {exc}") from None
    if not spec.dispersion_groups:
        raise SpecError("[dispersion_groups] at least one group is required")
    disp_ids = [g.id for g in spec.dispersion_groups]
    if len(set(disp_ids)) != len(disp_ids):
        raise SpecError("[dispersion_groups] duplicate ids")
    for g in spec.dispersion_groups:
        if g.fixed is not None and not g.fixed > 0:
            raise SpecError(f"[dispersion_groups] fixed dispersion of {g.id!r} must be positive")

    levels = sorted(lv.level for lv in spec.levels)
    if levels != list(range(2, 2 + len(levels))):
        raise SpecError("[levels] levels must be numbered 2, 3, ... without gaps")
    for lv in spec.levels:
        if lv.parent is not None and lv.parent not in levels:
            raise SpecError(f"[levels] level {lv.level} names unknown parent {lv.parent}")
        if lv.parent is not None and lv.parent <= lv.level:
            raise SpecError(f"[levels] parent of level {lv.level} must be a higher level")

    names = spec.latent_names
    if len(set(names)) != len(names):
        raise SpecError("[latent] duplicate latent names")
    for lt in spec.latent:
        if lt.level not in levels:
            raise SpecError(f"[latent] {lt.name!r} sits at undeclared level {lt.level}")

    for c in spec.covariance:
        if c.structure not in ("diagonal", "unstructured", "blocks"):
            raise SpecError(f"[covariance] unknown structure {c.structure!r}")
        at = spec.latents_at(c.level)
        if c.structure == "blocks":
            seen = [n for b in c.blocks for n in b]
            if sorted(seen) != sorted(at):
                raise SpecError(f"[covariance] blocks at level {c.level} must partition {at}")

    for s in spec.structural:
        for nm in (s.target, s.source):
            if nm not in names:
                raise SpecError(f"[structural] unknown latent {nm!r}")
        if s.target == s.source:
            raise SpecError(f"[structural] self loop on {s.target!r}")
        lt_t = spec.latent[names.index(s.target)]
        lt_s = spec.latent[names.index(s.source)]
        if lt_s.level < lt_t.level:
            raise SpecError(f"[structural] {s.source!r} at level {lt_s.level} cannot predict higher-level {s.target!r}")
    order = _topological(spec)
    if order != names:
        # keep the declared order when admissible; otherwise reorder
        spec = _reorder_latent(spec, order)

    loaded = {}
    symbols = {}
    for ld in spec.loadings:
        if ld.latent not in names:
            raise SpecError(f"[loadings] unknown latent {ld.latent!r}")
        if not ld.items:
            raise SpecError(f"[loadings] entry for {ld.latent!r} lists no items")
        for it in ld.items:
            if it not in spec.items:
                raise SpecError(f"[loadings] unknown item {it!r}")
        if not ld.fixed and ld.symbol is None:
            raise SpecError(f"[loadings] free entry for {ld.latent!r} needs a symbol")
        if ld.sign not in (None, "positive", "negative"):
            raise SpecError(f"[loadings] sign must be positive or negative, got {ld.sign!r}")
        if ld.covariate is not None and ld.covariate == "":
            raise SpecError("[loadings] empty covariate name")
        loaded.setdefault(ld.latent, []).append(ld)
        if ld.symbol is not None and not ld.fixed:
            prev = symbols.setdefault(ld.symbol, ld)
            if prev.sign != ld.sign:
                raise SpecError(f"[loadings] symbol {ld.symbol!r} declared with conflicting signs")
    for lt, entries in loaded.items():
        n_fixed = sum(1 for e in entries if e.fixed and e.covariate is None and e.value != 0)
        if n_fixed == 0:
            raise SpecError(f"[loadings] latent {lt!r} has no fixed loading (identifiability anchor)")
        if n_fixed > 1 and lt not in spec.anchor_override:
            raise SpecError(
                f"[loadings] latent {lt!r} has {n_fixed} fixed loadings; "
                "exactly one is required unless anchor_override gives a justification"
            )

    for sm in spec.smooths:
        if sm.k < 3:
            raise SpecError(f"[smooths] {sm.name!r}: k must be at least 3")
        if sm.target != "predictor":
            if sm.target not in names:
                raise SpecError(f"[smooths] {sm.name!r} targets unknown latent {sm.target!r}")
            lvl = spec.latent[names.index(sm.target)].level
            declared = spec.covariates.get(sm.covariate)
            if declared is None or not _constant_within(spec, declared, lvl):
                raise SpecError(
                    f"[smooths] {sm.name!r} targets level-{lvl} latent {sm.target!r} but covariate "
                    f"{sm.covariate!r} is not declared constant within level-{lvl} units"
                )
        for it in sm.items:
            if it not in spec.items:
                raise SpecError(f"[smooths] unknown item {it!r}")
    if len({sm.name for sm in spec.smooths}) != len(spec.smooths):
        raise SpecError("[smooths] duplicate smooth names")

    for rg in spec.regressions:
        for it in rg.items:
            if it not in spec.items:
                raise SpecError(f"[regressions] unknown item {it!r}")
        if rg.target != "predictor":
            if rg.target not in names:
                raise SpecError(f"[regressions] {rg.name!r} targets unknown latent {rg.target!r}")
            lvl = spec.latent[names.index(rg.target)].level
            if rg.covariate is None:
                raise SpecError(f"[regressions] {rg.name!r}: latent-targeting regressions need a covariate")
            declared = spec.covariates.get(rg.covariate)
            if declared is None or not _constant_within(spec, declared, lvl):
                raise SpecError(
                    f"[regressions] {rg.name!r}: covariate {rg.covariate!r} must be declared constant within level {lvl}"
                )
    for g in spec.standardize:
        if g not in disp_ids:
            raise SpecError(f"[standardize] unknown dispersion group {g!r}")
    for cv, lvl in spec.covariates.items():
        if lvl != 1 and lvl not in levels:
            raise SpecError(f"[covariates] {cv!r} declared at unknown level {lvl}")
    return spec


def _constant_within(spec, declared_level, level):
    """True if a covariate constant within ``declared_level`` units is constant within ``level`` units."""
    parents = {lv.level: lv.parent for lv in spec.levels}
    cur = level
    while cur is not None:
        if cur == declared_level:
            return True
        cur = parents.get(cur)
    return False


def _reorder_latent(spec, order):
    from dataclasses import replace

    by_name = {lt.name: lt for lt in spec.latent}
    return replace(spec, latent=tuple(by_name[n] for n in order))


def load_spec(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise SpecError(f"[root] could not parse {path}: {exc}") from None
    return parse_spec(doc)


def spec_to_dict(spec):
    d = asdict(spec)
    out = {}
    for k, v in d.items():
        out[k] = _plain(v)
    return out


def _plain(v):
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    return v


def dump_spec(spec, path=None):
    """Serialise to YAML text (and write it to ``path`` when given)."""
    text = yaml.safe_dump(spec_to_dict(spec), sort_keys=False)
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text
