"""Pairwise price-difference panel and price-rigidity cross-section."""

from __future__ import annotations

import logging

import numpy as np
import pandas as pd

from mmc_lab.markets import city_pair_labels
from mmc_lab.mmc import FIXTURE_QUARTER, MmcMatrix, compute_all, stack_long

log = logging.getLogger(__name__)

MARKET = ["origin", "dest", "nonstop"]
MIN_QUARTERS = 3

DIFF_COLUMNS = [
    "year", "quarter", "origin", "dest", "nonstop", "carrier_lo", "carrier_hi", "dp",
    "mmc_ek_scaled", "mmc_cw_fwd", "mmc_cw_rev", "mmc_cw_wgt_fwd", "mmc_cw_wgt_rev",
    "tp", "cs", "rs",
]
CV_COLUMNS = [
    "origin", "dest", "nonstop", "carrier_lo", "carrier_hi", "cv",
    "mmc_ek_scaled", "mmc_cw_fwd", "mmc_cw_rev", "mmc_cw_wgt_fwd", "mmc_cw_wgt_rev",
    "cs", "rs", "n_quarters",
]
MMC_MEASURES = ("ek", "cw", "cw-wgt")
CORR_VARIABLES = ["cs", "rs", "tp", "mmc_ek", "mmc_cw", "mmc_cw_wgt"]


def compute_shares(cells: pd.DataFrame, market, t: tuple[int, int]) -> dict[str, float]:
    """Passenger share of each carrier in one market-quarter."""
    origin, dest, nonstop = market
    sel = cells[(cells["year"] == t[0]) & (cells["quarter"] == t[1]) & (cells["origin"] == origin)
                & (cells["dest"] == dest) & (cells["nonstop"].astype(int) == int(nonstop))]
    total = sel["passengers"].sum()
    if total <= 0:
        raise ValueError(f"market {market} has no cells in {t}")
    return {c: p / total for c, p in zip(sel["carrier"], sel["passengers"])}


def pair_concentration(s_h: float, s_k: float) -> tuple[float, float]:
    """Combined share and relative share of a carrier pair."""
    return s_h + s_k, min(s_h, s_k) / max(s_h, s_k)


def _pairs(cells: pd.DataFrame, by: list[str]) -> pd.DataFrame:
    """All carrier pairs with cells in the same ``by`` group, lo < hi."""
    left = cells.rename(columns={c: f"{c}_lo" for c in ("carrier", "mean_fare", "passengers", "share")})
    right = cells.rename(columns={c: f"{c}_hi" for c in ("carrier", "mean_fare", "passengers", "share")})
    keep_l = by + [c for c in left.columns if c.endswith("_lo")]
    keep_r = by + [c for c in right.columns if c.endswith("_hi")]
    pairs = left[keep_l].merge(right[keep_r], on=by)
    return pairs[pairs["carrier_lo"] < pairs["carrier_hi"]].reset_index(drop=True)


def _attach_mmc(pairs: pd.DataFrame, long: pd.DataFrame, on: list[str]) -> pd.DataFrame:
    fwd = long.rename(columns={"h": "carrier_lo", "k": "carrier_hi", "mmc_ek": "mmc_ek_raw",
                               "mmc_cw": "mmc_cw_fwd", "mmc_cw_wgt": "mmc_cw_wgt_fwd"})
    rev = long.rename(columns={"h": "carrier_hi", "k": "carrier_lo",
                               "mmc_cw": "mmc_cw_rev", "mmc_cw_wgt": "mmc_cw_wgt_rev"}).drop(columns="mmc_ek")
    out = pairs.merge(fwd, on=on + ["carrier_lo", "carrier_hi"], how="left")
    out = out.merge(rev, on=on + ["carrier_lo", "carrier_hi"], how="left")
    out["mmc_ek_scaled"] = out.pop("mmc_ek_raw") / 1000.0
    return out


def build_pair_diff_panel(cells: pd.DataFrame,
                          matrices: dict[tuple[int, int], MmcMatrix] | None = None) -> pd.DataFrame:
    """One row per unordered carrier pair present in a market-quarter.

    ``tp`` is the market-quarter passenger total over all carriers; shares
    are taken against it. Both directed contact ratios are attached.
    """
    if matrices is None:
        matrices = compute_all(cells)
    if cells.empty:
        return pd.DataFrame(columns=DIFF_COLUMNS)
    by = ["year", "quarter"] + MARKET
    c = cells.copy()
    c["nonstop"] = c["nonstop"].astype(np.int64)
    tp = c.groupby(by, sort=False)["passengers"].transform("sum")
    c["share"] = c["passengers"] / tp
    c["tp"] = tp
    pairs = _pairs(c, by + ["tp"])
    pairs["dp"] = (pairs["mean_fare_lo"] - pairs["mean_fare_hi"]).abs()
    s_lo, s_hi = pairs["share_lo"].to_numpy(), pairs["share_hi"].to_numpy()
    pairs["cs"] = s_lo + s_hi
    pairs["rs"] = np.minimum(s_lo, s_hi) / np.maximum(s_lo, s_hi)
    out = _attach_mmc(pairs, stack_long(matrices), ["year", "quarter"])
    out = out[DIFF_COLUMNS].sort_values(by + ["carrier_lo", "carrier_hi"], kind="mergesort")
    return out.reset_index(drop=True)


def build_rigidity_panel(cells: pd.DataFrame, pinned: MmcMatrix | None = None,
                         min_quarters: int = MIN_QUARTERS) -> pd.DataFrame:
    """Market-carrier-pair cross-section of pooled coefficient of variation.

    The CV pools both carriers' quarterly mean fares over the quarters where
    both are present (population standard deviation). Shares come from
    passengers summed over all quarters. Contact measures are read from the
    ``pinned`` quarter (default 2023Q2); pairs with a carrier absent from
    it are dropped.
    """
    if pinned is None:
        from mmc_lab.mmc import compute_quarter
        pinned = compute_quarter(cells, FIXTURE_QUARTER)
    if cells.empty:
        return pd.DataFrame(columns=CV_COLUMNS)
    c = cells.copy()
    c["nonstop"] = c["nonstop"].astype(np.int64)

    pooled = c.groupby(MARKET + ["carrier"], sort=False)["passengers"].sum().rename("pax_all").reset_index()
    pooled["share"] = pooled["pax_all"] / pooled.groupby(MARKET)["pax_all"].transform("sum")

    pairs = _pairs(c.assign(share=0.0), ["year", "quarter"] + MARKET)
    key = MARKET + ["carrier_lo", "carrier_hi"]
    g = pairs.groupby(key, sort=True)
    n_q = g.size().rename("n_quarters")
    mu = ((g["mean_fare_lo"].sum() + g["mean_fare_hi"].sum()) / (2 * n_q)).rename("mu")
    pairs = pairs.join(mu, on=key)
    dev = (pairs["mean_fare_lo"] - pairs["mu"]) ** 2 + (pairs["mean_fare_hi"] - pairs["mu"]) ** 2
    var = dev.groupby([pairs[k] for k in key]).sum() / (2 * n_q)
    cross = pd.concat([n_q, mu, var.rename("var")], axis=1).reset_index()
    cross["cv"] = np.sqrt(cross["var"]) / cross["mu"]

    short = cross["n_quarters"] < min_quarters
    if short.any():
        log.info("dropped %d carrier pairs with fewer than %d joint quarters", int(short.sum()), min_quarters)
    cross = cross[~short]

    for side in ("lo", "hi"):
        sh = pooled.rename(columns={"carrier": f"carrier_{side}", "share": f"share_{side}"})
        cross = cross.merge(sh[MARKET + [f"carrier_{side}", f"share_{side}"]], on=MARKET + [f"carrier_{side}"])
    s_lo, s_hi = cross["share_lo"].to_numpy(), cross["share_hi"].to_numpy()
    cross["cs"] = s_lo + s_hi
    cross["rs"] = np.minimum(s_lo, s_hi) / np.maximum(s_lo, s_hi)

    out = _attach_mmc(cross, pinned.long().drop(columns=["year", "quarter"]), [])
    missing = out["mmc_ek_scaled"].isna()
    if missing.any():
        log.info("dropped %d carrier pairs without contact measures in %dQ%d",
                 int(missing.sum()), pinned.year, pinned.quarter)
    out = out[~missing]
    out = out[CV_COLUMNS].sort_values(key, kind="mergesort").reset_index(drop=True)
    out["n_quarters"] = out["n_quarters"].astype(np.int64)
    return out


def add_fe_labels(panel: pd.DataFrame) -> pd.DataFrame:
    out = panel.copy()
    out["city_pair"] = city_pair_labels(out["origin"], out["dest"])
    out["carrier_pair"] = out["carrier_lo"].astype(str) + "-" + out["carrier_hi"].astype(str)
    out["market"] = out["city_pair"] + ":" + out["nonstop"].astype(str)
    return out


def regression_frame(panel: pd.DataFrame, mmc: str = "ek") -> pd.DataFrame:
    """Regression-ready view of a pair panel for one contact measure.

    ``ek`` keeps one row per pair (column ``mmc_ek``). The directed measures
    ``cw`` and ``cw-wgt`` emit each pair twice, once per direction, with the
    measure in ``mmc_cw`` / ``mmc_cw_wgt`` and ``direction`` 0 (lo->hi) or 1.
    FE label columns ``city_pair``, ``carrier_pair`` and ``market`` are added.
    """
    base = add_fe_labels(panel)
    if mmc == "ek":
        return base.assign(mmc_ek=base["mmc_ek_scaled"], direction=0)
    if mmc not in MMC_MEASURES:
        raise ValueError(f"unknown mmc measure {mmc!r}; expected one of {MMC_MEASURES}")
    stem = "mmc_cw" if mmc == "cw" else "mmc_cw_wgt"
    fwd = base.assign(**{stem: base[f"{stem}_fwd"], "direction": 0})
    rev = base.assign(**{stem: base[f"{stem}_rev"], "direction": 1})
    return pd.concat([fwd, rev], ignore_index=True)


def mmc_column(mmc: str) -> str:
    return {"ek": "mmc_ek", "cw": "mmc_cw", "cw-wgt": "mmc_cw_wgt"}[mmc]


def _directed(panel: pd.DataFrame) -> pd.DataFrame:
    fwd = pd.DataFrame({"cs": panel["cs"], "rs": panel["rs"], "tp": panel["tp"],
                        "mmc_ek": panel["mmc_ek_scaled"], "mmc_cw": panel["mmc_cw_fwd"],
                        "mmc_cw_wgt": panel["mmc_cw_wgt_fwd"]})
    rev = fwd.assign(mmc_cw=panel["mmc_cw_rev"].to_numpy(), mmc_cw_wgt=panel["mmc_cw_wgt_rev"].to_numpy())
    return pd.concat([fwd, rev], ignore_index=True)


def correlation_report(panel: pd.DataFrame) -> pd.DataFrame:
    """Pearson correlations among the regressors of the difference panel.

    Directed measures use both directions; symmetric variables are simply
    duplicated, which leaves their correlations unchanged.
    """
    return _directed(panel)[CORR_VARIABLES].corr()


def scatter_sample(panel: pd.DataFrame, n: int = 5000, seed: int = 0) -> pd.DataFrame:
    d = _directed(panel)
    if len(d) > n:
        d = d.sample(n=n, random_state=seed).sort_index()
    return d.reset_index(drop=True)
