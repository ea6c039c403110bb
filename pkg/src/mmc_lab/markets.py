"""Market and city-pair keys.

A market is a directed airport pair plus a nonstop flag; a city pair is the
same directed pair with the flag erased. Multimarket contact is counted on
city pairs, prices and shares on markets.
"""

from __future__ import annotations

from typing import NamedTuple

import pandas as pd

# Optional airport -> city grouping applied when forming city pairs. Ships
# empty: markets are defined on airports as-is.
CITY_GROUPS: dict[str, str] = {}

MARKET_COLUMNS = ["origin", "dest", "nonstop"]


class MarketKey(NamedTuple):
    origin: str
    dest: str
    nonstop: bool


class CityPairKey(NamedTuple):
    origin: str
    dest: str


def market_of(record) -> MarketKey:
    """Market of a ticket record: ``(origin, dest, segments == 1)``."""
    return MarketKey(record.origin, record.dest, record.segments == 1)


def city_pair_of(market: MarketKey) -> CityPairKey:
    origin = CITY_GROUPS.get(market.origin, market.origin)
    dest = CITY_GROUPS.get(market.dest, market.dest)
    return CityPairKey(origin, dest)


def city_pair_labels(origin: pd.Series, dest: pd.Series) -> pd.Series:
    """Vectorised ``city_pair_of`` returning ``"ORG-DST"`` labels."""
    if CITY_GROUPS:
        origin = origin.map(lambda a: CITY_GROUPS.get(a, a))
        dest = dest.map(lambda a: CITY_GROUPS.get(a, a))
    return origin.astype(str) + "-" + dest.astype(str)


def summarize_markets(cells: pd.DataFrame) -> pd.DataFrame:
    """Per-quarter counts of markets, nonstop markets and city pairs.

    A market counts as present in a quarter when at least one carrier has a
    cell in it.
    """
    if cells.empty:
        return pd.DataFrame(columns=["year", "quarter", "markets", "nonstop_markets", "city_pairs"])
    mk = cells[["year", "quarter", "origin", "dest", "nonstop"]].drop_duplicates()
    mk = mk.assign(city_pair=city_pair_labels(mk["origin"], mk["dest"]))
    out = mk.groupby(["year", "quarter"], sort=True).agg(
        markets=("nonstop", "size"),
        nonstop_markets=("nonstop", lambda s: int((s.astype(int) == 1).sum())),
        city_pairs=("city_pair", "nunique"),
    )
    return out.reset_index().astype(int)
