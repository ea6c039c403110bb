"""Merger event windows and the difference-in-differences design."""

from __future__ import annotations

import datetime as dt
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd

from mmc_lab.hdfe import FitResult, RegressionSpec, linear_combination_test
from mmc_lab.panel import mmc_column, regression_frame

log = logging.getLogger(__name__)

Quarter = tuple[int, int]

# theta_11 .. theta_32; there is no cert x both term
DUMMY_COLUMNS = [
    "annc", "annc_either", "annc_both",
    "appro", "appro_either", "appro_both",
    "cert", "cert_either",
]
THETA_NAMES = dict(zip(
    ["theta11", "theta12", "theta13", "theta21", "theta22", "theta23", "theta31", "theta32"],
    DUMMY_COLUMNS,
))
HYPOTHESES = {
    "theta11+theta12": {"annc": 1.0, "annc_either": 1.0},
    "theta21+theta22": {"appro": 1.0, "appro_either": 1.0},
    "theta31+theta32": {"cert": 1.0, "cert_either": 1.0},
    "theta11+theta13": {"annc": 1.0, "annc_both": 1.0},
    "theta21+theta23": {"appro": 1.0, "appro_both": 1.0},
}

EVENT_CONTROLS = ["nonstop", "tp", "cs", "rs"]
EVENT_FE = ["quarter", "city_pair"]


class EventDesignError(ValueError):
    pass


def parse_quarter(text: str) -> Quarter:
    m = re.fullmatch(r"\s*(\d{4})\s*[Qq]\s*([1-4])\s*", text)
    if not m:
        raise ValueError(f"expected YYYYQn, got {text!r}")
    return int(m.group(1)), int(m.group(2))


def quarter_of(date: dt.date) -> Quarter:
    """Containing calendar quarter of a date."""
    return date.year, (date.month - 1) // 3 + 1


def qindex(year, quarter):
    return np.asarray(year, np.int64) * 4 + np.asarray(quarter, np.int64) - 1


@dataclass(frozen=True)
class MergerEvent:
    name: str
    carrier_a: str
    carrier_b: str
    announce: Quarter
    approve: Quarter
    certificate: Quarter
    surviving_code: str

    def __post_init__(self):
        if not (qindex(*self.announce) <= qindex(*self.approve) <= qindex(*self.certificate)):
            raise ValueError(f"{self.name}: milestones must satisfy announce <= approve <= certificate")
        if self.surviving_code not in (self.carrier_a, self.carrier_b):
            raise ValueError(f"{self.name}: surviving code must be one of the merging carriers")

    @property
    def absorbed_code(self) -> str:
        return self.carrier_b if self.surviving_code == self.carrier_a else self.carrier_a

    @property
    def carriers(self) -> frozenset[str]:
        return frozenset((self.carrier_a, self.carrier_b))


PRESETS = {
    # announced 2010-05-03, approved 2010-08-27, certificate 2011-11-30
    "ua-co": MergerEvent("ua-co", "UA", "CO", quarter_of(dt.date(2010, 5, 3)), quarter_of(dt.date(2010, 8, 27)),
                         quarter_of(dt.date(2011, 11, 30)), "UA"),
    # announced 2013-02-14, settlement 2013-11-12, certificate 2015-04-08
    "aa-us": MergerEvent("aa-us", "AA", "US", quarter_of(dt.date(2013, 2, 14)), quarter_of(dt.date(2013, 11, 12)),
                         quarter_of(dt.date(2015, 4, 8)), "AA"),
}


def load_event(spec: str | Path) -> MergerEvent:
    """A preset name (``ua-co``, ``aa-us``) or a ``key = value`` event file."""
    if str(spec) in PRESETS:
        return PRESETS[str(spec)]
    vals = {}
    for line in Path(spec).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            k, v = (s.strip().strip("'\"") for s in line.split("=", 1))
            vals[k.lower()] = v
    try:
        return MergerEvent(
            name=vals.get("name", Path(spec).stem),
            carrier_a=vals["carrier_a"], carrier_b=vals["carrier_b"],
            announce=parse_quarter(vals["announce"]), approve=parse_quarter(vals["approve"]),
            certificate=parse_quarter(vals["certificate"]), surviving_code=vals["surviving_code"],
        )
    except KeyError as exc:
        raise ValueError(f"{spec}: event file missing key {exc.args[0]!r}") from None


class EventDummies(NamedTuple):
    annc: int
    appro: int
    cert: int
    either: int
    both: int
    annc_either: int
    annc_both: int
    appro_either: int
    appro_both: int
    cert_either: int
    cert_both: int


def _get(obs, name):
    return obs[name] if isinstance(obs, (dict, pd.Series)) else getattr(obs, name)


def tag_observation(obs, event: MergerEvent) -> EventDummies:
    """Window and treatment dummies for one pair observation.

    ``obs`` needs ``year``, ``quarter``, ``carrier_lo`` and ``carrier_hi``
    (mapping or attributes). An observation carrying the absorbed code on or
    after the certificate quarter is a data error.
    """
    t = int(qindex(_get(obs, "year"), _get(obs, "quarter")))
    pair = {_get(obs, "carrier_lo"), _get(obs, "carrier_hi")}
    a, p, c = (int(qindex(*q)) for q in (event.announce, event.approve, event.certificate))
    if t >= c and event.absorbed_code in pair:
        raise ValueError(f"absorbed carrier {event.absorbed_code} observed after certificate")
    annc, appro, cert = int(a <= t < p), int(p <= t < c), int(t >= c)
    n_merged = len(pair & event.carriers)
    either, both = int(n_merged == 1), int(n_merged == 2)
    return EventDummies(annc, appro, cert, either, both,
                        annc * either, annc * both, appro * either, appro * both, cert * either, cert * both)


def tag_frame(df: pd.DataFrame, event: MergerEvent) -> pd.DataFrame:
    """Vectorised :func:`tag_observation`; returns dummy columns aligned to ``df``."""
    t = qindex(df["year"].to_numpy(), df["quarter"].to_numpy())
    a, p, c = (int(qindex(*q)) for q in (event.announce, event.approve, event.certificate))
    lo, hi = df["carrier_lo"].to_numpy(), df["carrier_hi"].to_numpy()
    n_merged = np.isin(lo, list(event.carriers)).astype(np.int64) + np.isin(hi, list(event.carriers))
    annc = ((t >= a) & (t < p)).astype(np.int64)
    appro = ((t >= p) & (t < c)).astype(np.int64)
    cert = (t >= c).astype(np.int64)
    either = (n_merged == 1).astype(np.int64)
    both = (n_merged == 2).astype(np.int64)
    return pd.DataFrame({
        "annc": annc, "annc_either": annc * either, "annc_both": annc * both,
        "appro": appro, "appro_either": appro * either, "appro_both": appro * both,
        "cert": cert, "cert_either": cert * either,
        "either": either, "both": both, "cert_both": cert * both,
    }, index=df.index)


def drop_absorbed_after_certificate(df: pd.DataFrame, event: MergerEvent) -> tuple[pd.DataFrame, int]:
    t = qindex(df["year"].to_numpy(), df["quarter"].to_numpy())
    bad = (t >= qindex(*event.certificate)) & (
        (df["carrier_lo"] == event.absorbed_code) | (df["carrier_hi"] == event.absorbed_code)).to_numpy()
    return df.loc[~bad], int(bad.sum())


def build_event_design(panel: pd.DataFrame, event: MergerEvent, mmc: str = "ek",
                       se_kind: str = "robust") -> tuple[pd.DataFrame, RegressionSpec]:
    """Regression frame with window x treatment dummies, and its spec.

    Fixed effects are quarter-of-year and city pair only: year effects would
    absorb the windows and carrier-pair effects the treatment groups.
    """
    frame, n_bad = drop_absorbed_after_certificate(panel, event)
    if n_bad:
        log.warning("%s: dropped %d rows with %s after certificate", event.name, n_bad, event.absorbed_code)
    t = qindex(frame["year"].to_numpy(), frame["quarter"].to_numpy())
    if not (t < qindex(*event.announce)).any():
        raise EventDesignError(f"{event.name}: panel has no quarters before the announcement")
    stale = [c for c in DUMMY_COLUMNS + ["either", "both", "cert_both"] if c in frame.columns]
    frame = regression_frame(frame.drop(columns=stale).reset_index(drop=True), mmc)
    dummies = tag_frame(frame, event)
    if (dummies["cert_both"] != 0).any():
        raise EventDesignError("cert x both must be zero for every observation")
    frame = pd.concat([frame, dummies], axis=1)
    spec = RegressionSpec("dp", [mmc_column(mmc), *EVENT_CONTROLS, *DUMMY_COLUMNS], list(EVENT_FE), se_kind=se_kind)
    return frame, spec


def hypothesis_report(fit: FitResult, level: float = 0.95) -> pd.DataFrame:
    """CIs for the merged/unmerged linear combinations of window effects."""
    rows = []
    for name, w in HYPOTHESES.items():
        if all(k in fit.coef for k in w):
            r = linear_combination_test(fit, w, level)
            rows.append({"hypothesis": name, "estimate": r.estimate, "se": r.se, "ci_lo": r.ci_lo, "ci_hi": r.ci_hi})
        else:
            rows.append({"hypothesis": name, "estimate": np.nan, "se": np.nan, "ci_lo": np.nan, "ci_hi": np.nan})
    return pd.DataFrame(rows)
