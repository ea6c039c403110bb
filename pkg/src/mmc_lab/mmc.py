"""Multimarket-contact matrices.

Three measures per quarter, all on directed city pairs:

* ``ek``: number of city pairs two carriers both serve (diagonal = network size);
* ``cw``: ``ek[h, k] / ek[h, h]``, the share of h's network shared with k;
* ``cw_weighted``: share of h's passengers (or revenue) carried in city
  pairs where k is also present.

Matrices are labelled DataFrames indexed by carrier code on both axes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from importlib import resources

import numpy as np
import pandas as pd

from mmc_lab.markets import city_pair_labels

log = logging.getLogger(__name__)

FIXTURE_QUARTER = (2023, 2)


@dataclass
class MmcMatrix:
    year: int
    quarter: int
    ek: pd.DataFrame
    cw: pd.DataFrame
    cw_weighted: pd.DataFrame

    @property
    def carriers(self) -> list[str]:
        return list(self.ek.index)

    def long(self) -> pd.DataFrame:
        """One row per ordered carrier pair ``(h, k)``, ``h != k``."""
        ek = self.ek.stack().rename("mmc_ek")
        cw = self.cw.stack().rename("mmc_cw")
        wg = self.cw_weighted.stack().rename("mmc_cw_wgt")
        out = pd.concat([ek, cw, wg], axis=1)
        out.index.names = ["h", "k"]
        out = out.reset_index()
        out = out[out["h"] != out["k"]]
        out.insert(0, "quarter", self.quarter)
        out.insert(0, "year", self.year)
        return out.reset_index(drop=True)


def _quarter(cells: pd.DataFrame, t: tuple[int, int] | None) -> pd.DataFrame:
    if t is None:
        return cells
    return cells[(cells["year"] == t[0]) & (cells["quarter"] == t[1])]


def _presence(cells: pd.DataFrame, weight: np.ndarray | None = None) -> pd.DataFrame:
    """Carrier x city-pair matrix of presence (or summed weight)."""
    cp = city_pair_labels(cells["origin"], cells["dest"])
    if weight is None:
        frame = pd.DataFrame({"carrier": cells["carrier"].to_numpy(), "cp": cp.to_numpy(), "w": 1})
        m = frame.drop_duplicates(["carrier", "cp"]).pivot_table(
            index="carrier", columns="cp", values="w", aggfunc="sum", fill_value=0)
        return m.sort_index()
    frame = pd.DataFrame({"carrier": cells["carrier"].to_numpy(), "cp": cp.to_numpy(), "w": weight})
    m = frame.pivot_table(index="carrier", columns="cp", values="w", aggfunc="sum", fill_value=0.0)
    return m.sort_index()


def compute_mmc_ek(cells: pd.DataFrame, t: tuple[int, int] | None = None) -> pd.DataFrame:
    """Shared directed city-pair counts between every two carriers in quarter ``t``.

    ``cells`` may span several quarters when ``t`` is given; with ``t=None``
    they must already be restricted to a single quarter.
    """
    q = _quarter(cells, t)
    if q.empty:
        return pd.DataFrame(dtype=np.int64)
    pres = _presence(q)
    b = pres.to_numpy(np.int64)
    carriers = list(pres.index)
    return pd.DataFrame(b @ b.T, index=carriers, columns=carriers)


def compute_mmc_cw(ek: pd.DataFrame) -> pd.DataFrame:
    """Row-normalise contact counts by the row carrier's network size."""
    diag = np.diag(ek.to_numpy()).astype(float)
    zero = diag <= 0
    if zero.any():
        log.warning("carriers with no city pairs excluded from cw: %s", list(ek.index[zero]))
        keep = ek.index[~zero]
        ek = ek.loc[keep, keep]
        diag = diag[~zero]
    return pd.DataFrame(ek.to_numpy() / diag[:, None], index=ek.index, columns=ek.columns)


def compute_mmc_weighted(cells: pd.DataFrame, t: tuple[int, int] | None = None,
                         weight: str = "passengers") -> pd.DataFrame:
    """Passenger- or revenue-weighted contact ratio.

    ``weight`` is ``"passengers"`` (alias ``"pax"``) or ``"revenue"``
    (mean fare times passengers). Presence of k is judged on city pairs.
    """
    q = _quarter(cells, t)
    if q.empty:
        return pd.DataFrame(dtype=float)
    if weight in ("passengers", "pax"):
        w = q["passengers"].to_numpy(np.float64)
    elif weight == "revenue":
        w = q["mean_fare"].to_numpy(np.float64) * q["passengers"].to_numpy(np.float64)
    else:
        raise ValueError(f"unknown weight {weight!r}")
    wm = _presence(q, w)
    bm = (wm > 0).astype(np.float64).to_numpy()
    wv = wm.to_numpy()
    total = wv.sum(axis=1)
    zero = total <= 0
    carriers = np.asarray(wm.index)
    if zero.any():
        log.warning("carriers with zero total weight excluded: %s", list(carriers[zero]))
        wv, bm, total, carriers = wv[~zero], bm[~zero], total[~zero], carriers[~zero]
    shared = wv @ bm.T
    return pd.DataFrame(shared / total[:, None], index=list(carriers), columns=list(carriers))


def compute_quarter(cells: pd.DataFrame, t: tuple[int, int], weight: str = "passengers") -> MmcMatrix:
    q = _quarter(cells, t)
    ek = compute_mmc_ek(q)
    return MmcMatrix(t[0], t[1], ek, compute_mmc_cw(ek), compute_mmc_weighted(q, weight=weight))


def compute_all(cells: pd.DataFrame, weight: str = "passengers") -> dict[tuple[int, int], MmcMatrix]:
    """MMC matrices for every quarter present in ``cells``, keyed by (year, quarter)."""
    out = {}
    for (y, q), grp in cells.groupby(["year", "quarter"], sort=True):
        out[(int(y), int(q))] = compute_quarter(grp, (int(y), int(q)), weight)
    return out


def stack_long(matrices: dict[tuple[int, int], MmcMatrix]) -> pd.DataFrame:
    if not matrices:
        return pd.DataFrame(columns=["year", "quarter", "h", "k", "mmc_ek", "mmc_cw", "mmc_cw_wgt"])
    return pd.concat([matrices[t].long() for t in sorted(matrices)], ignore_index=True)


def _read_fixture(name: str) -> pd.DataFrame:
    with resources.files("mmc_lab.fixtures").joinpath(name).open() as fh:
        return pd.read_csv(fh, index_col=0)


def table1_ek() -> pd.DataFrame:
    """Published 2023Q2 contact counts (full symmetric matrix)."""
    return _read_fixture("table1_ek_2023q2.csv").astype(np.int64)


def table2_cw() -> pd.DataFrame:
    """Published 2023Q2 normalised contact ratios, three decimals."""
    return _read_fixture("table2_cw_2023q2.csv")


def fixture_path(name: str):
    return resources.files("mmc_lab.fixtures").joinpath(name)
