"""Ticket ingest: parsing, deflation, filtering and cell aggregation.

Raw one-way itineraries are read in blocks, validated, deflated to 2017
dollars, filtered on fare bounds and the carrier allow-list, and reduced to
time-market-carrier cells holding the passenger-weighted mean fare.

Aggregation is exact with respect to input order: surviving records are
sorted on (cell key, fare, passengers) before the per-cell sums are taken,
so the floating-point reduction order never depends on file order, block
size or thread count.
"""

from __future__ import annotations

import dataclasses
import logging
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import pyarrow as pa
import pyarrow.compute as pc
import pyarrow.csv as pacsv

from mmc_lab.markets import MarketKey

log = logging.getLogger(__name__)

DEFAULT_CARRIERS: tuple[str, ...] = (
    "WN", "DL", "AA", "UA", "US", "CO", "AS", "NW", "B6", "NK",
    "F9", "FL", "HP", "HA", "G4", "TW", "TZ", "AQ", "VX", "SY",
)
BASE_YEAR = 2017
FARE_MIN = 25.0
FARE_MAX = 2500.0
MIN_CELL_PASSENGERS = 30

TICKET_COLUMNS = ["year", "quarter", "origin", "dest", "tkcarrier", "passengers", "fare", "segments"]
CELL_COLUMNS = ["year", "quarter", "origin", "dest", "nonstop", "carrier", "mean_fare", "passengers"]

_YEAR_LO, _YEAR_HI = 1900, 2155
_NUMBER_RE = r"^[+-]?([0-9]+\.?[0-9]*|\.[0-9]+)([eE][+-]?[0-9]+)?$"


class IngestError(ValueError):
    """Raised when an input batch cannot be processed at all."""


class SchemaError(IngestError):
    pass


class CpiError(IngestError):
    pass


@dataclass(frozen=True)
class TicketRecord:
    year: int
    quarter: int
    origin: str
    dest: str
    ticketing_carrier: str
    passengers: int
    fare: float
    segments: int

    def __post_init__(self):
        if self.quarter not in (1, 2, 3, 4):
            raise ValueError(f"quarter must be 1-4, got {self.quarter}")
        for code in (self.origin, self.dest):
            if len(code) != 3 or not (code.isascii() and code.isalpha() and code.isupper()):
                raise ValueError(f"bad airport code {code!r}")
        if self.origin == self.dest:
            raise ValueError("origin equals dest")
        c = self.ticketing_carrier
        if not (2 <= len(c) <= 3 and c.isascii() and c.isalnum() and c == c.upper()):
            raise ValueError(f"bad carrier code {c!r}")
        if self.passengers < 1 or self.segments < 1:
            raise ValueError("passengers and segments must be >= 1")
        if not self.fare >= 0:
            raise ValueError(f"bad fare {self.fare!r}")

    @property
    def market(self) -> MarketKey:
        return MarketKey(self.origin, self.dest, self.segments == 1)


@dataclass(frozen=True)
class CpiTable:
    """Price index keyed by year, or by ``(year, quarter)`` for quarterly tables."""

    index: Mapping
    base_year: int = BASE_YEAR

    def __post_init__(self):
        if not self.index:
            raise CpiError("empty CPI table")
        if any(not v > 0 for v in self.index.values()):
            raise CpiError("CPI index values must be positive")
        self.base_index  # fail early when the base year is absent

    @property
    def quarterly(self) -> bool:
        return isinstance(next(iter(self.index)), tuple)

    @property
    def base_index(self) -> float:
        if not self.quarterly:
            if self.base_year not in self.index:
                raise CpiError(f"CPI table has no entry for base year {self.base_year}")
            return float(self.index[self.base_year])
        vals = [v for (y, _), v in self.index.items() if y == self.base_year]
        if not vals:
            raise CpiError(f"CPI table has no entry for base year {self.base_year}")
        return float(np.mean(vals))

    def factor(self, year: int, quarter: int | None = None) -> float:
        """Multiplier converting a nominal fare of ``year`` to base-year dollars."""
        key = (year, quarter) if self.quarterly else year
        try:
            value = self.index[key]
        except KeyError:
            what = f"year {year} quarter {quarter}" if self.quarterly else f"year {year}"
            raise CpiError(f"CPI table has no entry for {what}") from None
        return self.base_index / float(value)

    def factors(self, year: np.ndarray, quarter: np.ndarray) -> np.ndarray:
        if self.quarterly:
            combo = year.astype(np.int64) * 4 + (quarter.astype(np.int64) - 1)
            uniq, inv = np.unique(combo, return_inverse=True)
            table = np.array([self.factor(int(c // 4), int(c % 4) + 1) for c in uniq])
        else:
            uniq, inv = np.unique(year, return_inverse=True)
            table = np.array([self.factor(int(y)) for y in uniq])
        return table[inv] if len(uniq) else np.empty(0)


def load_cpi(path: str | Path, base_year: int = BASE_YEAR) -> CpiTable:
    df = pd.read_csv(path)
    df.columns = [c.strip().lower() for c in df.columns]
    if not {"year", "index"} <= set(df.columns):
        raise SchemaError(f"{path}: CPI file needs columns year[,quarter],index")
    if "quarter" in df.columns:
        index = {(int(y), int(q)): float(v) for y, q, v in zip(df["year"], df["quarter"], df["index"])}
    else:
        index = {int(y): float(v) for y, v in zip(df["year"], df["index"])}
    return CpiTable(index, base_year)


def load_carriers(spec: str | Path | None) -> tuple[str, ...]:
    """Carrier allow-list from a file (codes split on commas/whitespace) or ``"default"``."""
    if spec is None or str(spec) == "default":
        return DEFAULT_CARRIERS
    text = Path(spec).read_text()
    codes = [c.strip().upper() for c in text.replace(",", " ").split()]
    return tuple(c for c in codes if c)


def deflate_fare(fare: float, year: int, cpi: CpiTable, quarter: int | None = None) -> float:
    """Nominal fare in ``year`` expressed in base-year dollars."""
    return fare * cpi.factor(year, quarter)


def fare_in_bounds(fare):
    return (fare >= FARE_MIN) & (fare <= FARE_MAX)


@dataclass
class IngestSummary:
    rows_read: int = 0
    rows_malformed: int = 0
    rows_fare_filtered: int = 0
    rows_carrier_filtered: int = 0
    cells_emitted: int = 0
    cells_dropped_min_pax: int = 0
    # passenger ledger over well-formed rows
    pax_read: int = 0
    pax_carrier_filtered: int = 0
    pax_fare_filtered: int = 0
    pax_dropped_min_pax: int = 0
    pax_emitted: int = 0

    def merge(self, other: IngestSummary) -> None:
        for f in dataclasses.fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))

    def to_frame(self) -> pd.DataFrame:
        d = dataclasses.asdict(self)
        return pd.DataFrame({"counter": list(d), "value": list(d.values())})


def filter_tickets(
    records: Iterable[TicketRecord],
    carriers: Sequence[str] = DEFAULT_CARRIERS,
    cpi: CpiTable | None = None,
    *,
    filter_nominal: bool = False,
    summary: IngestSummary | None = None,
) -> Iterator[TicketRecord]:
    """Yield records that pass the carrier and fare filters, with deflated fares.

    Record-at-a-time counterpart of the block path used by :func:`ingest_files`.
    """
    allowed = frozenset(carriers)
    s = summary if summary is not None else IngestSummary()
    for rec in records:
        s.rows_read += 1
        s.pax_read += rec.passengers
        if rec.ticketing_carrier not in allowed:
            s.rows_carrier_filtered += 1
            s.pax_carrier_filtered += rec.passengers
            continue
        real = deflate_fare(rec.fare, rec.year, cpi, rec.quarter if cpi.quarterly else None)
        if not fare_in_bounds(rec.fare if filter_nominal else real):
            s.rows_fare_filtered += 1
            s.pax_fare_filtered += rec.passengers
            continue
        yield dataclasses.replace(rec, fare=real)


# -- code packing ---------------------------------------------------------
# Airports: three letters -> 0..26**3-1. Carriers: up to three of [0-9A-Z]
# right-padded with a blank, base 37 with blank = 0. Both preserve string order.

_N_AIRPORT = 26**3
_N_CARRIER = 37**3
_CARRIER_LUT = np.full(256, -1, np.int64)
_CARRIER_LUT[ord(" ")] = 0
_CARRIER_LUT[np.frombuffer(b"0123456789", np.uint8)] = np.arange(1, 11)
_CARRIER_LUT[np.frombuffer(b"ABCDEFGHIJKLMNOPQRSTUVWXYZ", np.uint8)] = np.arange(11, 37)
_CARRIER_CHARS = np.array(list(" 0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZ"))
_LETTERS = np.array(list("ABCDEFGHIJKLMNOPQRSTUVWXYZ"))


def _fixed3(arr: pa.Array) -> np.ndarray:
    """View a string array whose values are all exactly 3 bytes as an (n, 3) uint8 matrix."""
    if isinstance(arr, pa.ChunkedArray):
        arr = arr.combine_chunks()
    n = len(arr)
    if n == 0:
        return np.zeros((0, 3), np.uint8)
    offsets = np.frombuffer(arr.buffers()[1], np.int32)[arr.offset: arr.offset + n + 1]
    data = np.frombuffer(arr.buffers()[2], np.uint8)
    start = int(offsets[0])
    return data[start: start + 3 * n].reshape(n, 3)


def _encode_airports(arr: pa.Array) -> np.ndarray:
    b = _fixed3(arr).astype(np.int64) - ord("A")
    return (b[:, 0] * 26 + b[:, 1]) * 26 + b[:, 2]


def _encode_carriers(arr: pa.Array) -> np.ndarray:
    b = _CARRIER_LUT[_fixed3(pc.utf8_rpad(arr, width=3, padding=" "))]
    return (b[:, 0] * 37 + b[:, 1]) * 37 + b[:, 2]


def encode_carriers(codes: Iterable[str]) -> np.ndarray:
    return _encode_carriers(pa.array(list(codes), pa.string()))


def _decode_airports(code: np.ndarray) -> np.ndarray:
    a, r = np.divmod(code, 676)
    b, c = np.divmod(r, 26)
    return np.char.add(np.char.add(_LETTERS[a], _LETTERS[b]), _LETTERS[c])


def _decode_carriers(code: np.ndarray) -> np.ndarray:
    a, r = np.divmod(code, 37 * 37)
    b, c = np.divmod(r, 37)
    s = np.char.add(np.char.add(_CARRIER_CHARS[a], _CARRIER_CHARS[b]), _CARRIER_CHARS[c])
    return np.char.rstrip(s)


def _parse_number(col: pa.Array) -> tuple[np.ndarray, np.ndarray]:
    col = pc.utf8_trim_whitespace(col)
    ok = pc.match_substring_regex(col, _NUMBER_RE)
    vals = pc.cast(pc.if_else(ok, col, "nan"), pa.float64())
    return np.asarray(vals.to_numpy(zero_copy_only=False), dtype=np.float64), np.asarray(ok.to_numpy(zero_copy_only=False), bool)


def _whole(x: np.ndarray, ok: np.ndarray, lo: float, hi: float) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        return ok & np.isfinite(x) & (x == np.floor(x)) & (x >= lo) & (x <= hi)


@dataclass
class _Block:
    """Survivors of one parsed block, packed for aggregation."""

    key: np.ndarray
    fare: np.ndarray
    pax: np.ndarray
    summary: IngestSummary = field(default_factory=IngestSummary)


def _process_table(
    table: pa.Table,
    allowed: np.ndarray,
    cpi: CpiTable,
    filter_nominal: bool,
) -> _Block:
    s = IngestSummary(rows_read=table.num_rows)
    year, year_ok = _parse_number(table["year"])
    quarter, q_ok = _parse_number(table["quarter"])
    pax, pax_ok = _parse_number(table["passengers"])
    fare, fare_ok = _parse_number(table["fare"])
    seg, seg_ok = _parse_number(table["segments"])

    origin = pc.utf8_trim_whitespace(table["origin"])
    dest = pc.utf8_trim_whitespace(table["dest"])
    carrier = pc.utf8_upper(pc.utf8_trim_whitespace(table["tkcarrier"]))
    o_ok = np.asarray(pc.match_substring_regex(origin, r"^[A-Z]{3}$").to_numpy(zero_copy_only=False), bool)
    d_ok = np.asarray(pc.match_substring_regex(dest, r"^[A-Z]{3}$").to_numpy(zero_copy_only=False), bool)
    c_ok = np.asarray(pc.match_substring_regex(carrier, r"^[0-9A-Z]{2,3}$").to_numpy(zero_copy_only=False), bool)

    valid = (
        _whole(year, year_ok, _YEAR_LO, _YEAR_HI)
        & _whole(quarter, q_ok, 1, 4)
        & _whole(pax, pax_ok, 1, 2**40)
        & _whole(seg, seg_ok, 1, 2**31)
        & fare_ok & np.isfinite(fare) & (fare >= 0)
        & o_ok & d_ok & c_ok
    )
    mask = pa.array(valid)
    o_code = _encode_airports(pc.filter(origin, mask))
    d_code = _encode_airports(pc.filter(dest, mask))
    c_code = _encode_carriers(pc.filter(carrier, mask))
    valid_idx = np.flatnonzero(valid)
    distinct = o_code != d_code
    s.rows_malformed = int(table.num_rows - distinct.sum())
    valid_idx, o_code, d_code, c_code = valid_idx[distinct], o_code[distinct], d_code[distinct], c_code[distinct]

    year = year[valid_idx].astype(np.int64)
    quarter = quarter[valid_idx].astype(np.int64)
    pax = pax[valid_idx].astype(np.int64)
    fare = fare[valid_idx]
    nonstop = seg[valid_idx] == 1
    s.pax_read = int(pax.sum())

    keep = np.isin(c_code, allowed)
    s.rows_carrier_filtered = int((~keep).sum())
    s.pax_carrier_filtered = int(pax[~keep].sum())
    sel = np.flatnonzero(keep)
    year, quarter, pax, fare, nonstop = year[sel], quarter[sel], pax[sel], fare[sel], nonstop[sel]
    o_code, d_code, c_code = o_code[sel], d_code[sel], c_code[sel]

    real = fare * cpi.factors(year, quarter)
    inb = fare_in_bounds(fare if filter_nominal else real)
    s.rows_fare_filtered = int((~inb).sum())
    s.pax_fare_filtered = int(pax[~inb].sum())

    key = pack_cell_key(year[inb], quarter[inb], o_code[inb], d_code[inb], nonstop[inb], c_code[inb])
    return _Block(key, real[inb], pax[inb], s)


def pack_cell_key(year, quarter, origin, dest, nonstop, carrier) -> np.ndarray:
    t = (np.asarray(year, np.int64) - _YEAR_LO) * 4 + (np.asarray(quarter, np.int64) - 1)
    k = (t * _N_AIRPORT + origin) * _N_AIRPORT + dest
    return (k * 2 + np.asarray(nonstop, np.int64)) * _N_CARRIER + carrier


def unpack_cell_key(key: np.ndarray) -> pd.DataFrame:
    rest, carrier = np.divmod(key, _N_CARRIER)
    rest, nonstop = np.divmod(rest, 2)
    rest, dest = np.divmod(rest, _N_AIRPORT)
    t, origin = np.divmod(rest, _N_AIRPORT)
    year, q = np.divmod(t, 4)
    return pd.DataFrame({
        "year": (year + _YEAR_LO).astype(np.int64),
        "quarter": (q + 1).astype(np.int64),
        "origin": _decode_airports(origin).astype(object),
        "dest": _decode_airports(dest).astype(object),
        "nonstop": nonstop.astype(np.int64),
        "carrier": _decode_carriers(carrier).astype(object),
    })


def _aggregate(key: np.ndarray, fare: np.ndarray, pax: np.ndarray,
               min_pax: int = MIN_CELL_PASSENGERS) -> tuple[pd.DataFrame, int, int]:
    """Reduce packed records to cells; returns (cells, dropped cells, dropped passengers)."""
    if len(key) == 0:
        return empty_cells(), 0, 0
    order = np.lexsort((pax, fare, key))
    key, fare, pax = key[order], fare[order], pax[order]
    starts = np.flatnonzero(np.r_[True, key[1:] != key[:-1]])
    wsum = np.add.reduceat(fare * pax, starts)
    psum = np.add.reduceat(pax, starts)
    big = psum >= min_pax
    cells = unpack_cell_key(key[starts][big])
    # sorted by fare within a cell, so the ends bound the mean; clamp rounding spill
    lo = fare[starts]
    hi = fare[np.r_[starts[1:], len(key)] - 1]
    cells["mean_fare"] = np.clip(wsum / psum, lo, hi)[big]
    cells["passengers"] = psum[big].astype(np.int64)
    return cells[CELL_COLUMNS], int((~big).sum()), int(psum[~big].sum())


def empty_cells() -> pd.DataFrame:
    return pd.DataFrame({
        "year": pd.Series(dtype=np.int64), "quarter": pd.Series(dtype=np.int64),
        "origin": pd.Series(dtype=object), "dest": pd.Series(dtype=object),
        "nonstop": pd.Series(dtype=np.int64), "carrier": pd.Series(dtype=object),
        "mean_fare": pd.Series(dtype=np.float64), "passengers": pd.Series(dtype=np.int64),
    })


def aggregate_cells(records, min_pax: int = MIN_CELL_PASSENGERS) -> pd.DataFrame:
    """Passenger-weighted mean fare per (year, quarter, market, carrier).

    ``records`` are filtered, deflated ticket records: either an iterable of
    :class:`TicketRecord` or a frame with the ticket columns (``carrier`` is
    accepted in place of ``tkcarrier``). Cells below ``min_pax`` passengers
    are dropped.
    """
    if isinstance(records, pd.DataFrame):
        df = records.rename(columns={"tkcarrier": "carrier", "ticketing_carrier": "carrier"})
    else:
        rows = [(r.year, r.quarter, r.origin, r.dest, r.ticketing_carrier, r.passengers, r.fare, r.segments)
                for r in records]
        df = pd.DataFrame(rows, columns=["year", "quarter", "origin", "dest", "carrier", "passengers", "fare", "segments"])
    if df.empty:
        return empty_cells()
    key = pack_cell_key(
        df["year"].to_numpy(), df["quarter"].to_numpy(),
        _encode_airports(pa.array(df["origin"], pa.string())),
        _encode_airports(pa.array(df["dest"], pa.string())),
        df["segments"].to_numpy() == 1,
        _encode_carriers(pa.array(df["carrier"], pa.string())),
    )
    cells, _, _ = _aggregate(key, df["fare"].to_numpy(np.float64), df["passengers"].to_numpy(np.int64), min_pax)
    return cells


def _open_stream(path: Path, gzip: bool):
    compression = "gzip" if gzip else "detect"
    return pa.input_stream(str(path), compression=compression)


def iter_ticket_blocks(path: str | Path, *, gzip: bool = False, block_size: int = 1 << 24,
                       bad_rows: list | None = None) -> Iterator[pa.Table]:
    """Stream a ticket CSV as Arrow tables of string columns.

    Rows with the wrong field count are skipped; their count is appended to
    ``bad_rows`` (one entry per row) when given.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)

    def on_invalid(row):
        if bad_rows is not None:
            bad_rows.append(row.number)
        return "skip"

    read = pacsv.ReadOptions(block_size=block_size, use_threads=False)
    parse = pacsv.ParseOptions(delimiter=",", invalid_row_handler=on_invalid)
    conv = pacsv.ConvertOptions(
        include_columns=TICKET_COLUMNS,
        column_types={c: pa.string() for c in TICKET_COLUMNS},
        strings_can_be_null=False,
    )
    try:
        reader = pacsv.open_csv(_open_stream(path, gzip), read_options=read, parse_options=parse, convert_options=conv)
        for batch in reader:
            yield pa.Table.from_batches([batch])
    except (pa.ArrowInvalid, pa.ArrowKeyError) as exc:
        raise SchemaError(f"{path}: {exc}") from None


def ingest_files(
    paths: Sequence[str | Path],
    cpi: CpiTable,
    carriers: Sequence[str] = DEFAULT_CARRIERS,
    *,
    filter_nominal: bool = False,
    gzip: bool = False,
    min_pax: int = MIN_CELL_PASSENGERS,
    block_size: int = 1 << 24,
    threads: int = 1,
) -> tuple[pd.DataFrame, IngestSummary]:
    """Read ticket CSVs and return ``(cells, summary)``.

    Blocks are validated independently (optionally on a thread pool) and
    their survivors reduced together; output does not depend on ``threads``
    or ``block_size``.
    """
    allowed = encode_carriers(sorted(set(carriers)))
    summary = IngestSummary()
    blocks: list[_Block] = []

    def run(tables):
        if threads > 1:
            from concurrent.futures import ThreadPoolExecutor
            with ThreadPoolExecutor(threads) as ex:
                yield from ex.map(lambda t: _process_table(t, allowed, cpi, filter_nominal), tables)
        else:
            for t in tables:
                yield _process_table(t, allowed, cpi, filter_nominal)

    for path in paths:
        bad: list = []
        for block in run(iter_ticket_blocks(path, gzip=gzip, block_size=block_size, bad_rows=bad)):
            summary.merge(block.summary)
            blocks.append(block)
        summary.rows_read += len(bad)
        summary.rows_malformed += len(bad)
        if summary.rows_malformed:
            log.info("%s: %d malformed rows skipped so far", path, summary.rows_malformed)

    key = np.concatenate([b.key for b in blocks]) if blocks else np.empty(0, np.int64)
    fare = np.concatenate([b.fare for b in blocks]) if blocks else np.empty(0)
    pax = np.concatenate([b.pax for b in blocks]) if blocks else np.empty(0, np.int64)
    del blocks
    cells, dropped, dropped_pax = _aggregate(key, fare, pax, min_pax)
    summary.cells_emitted = len(cells)
    summary.cells_dropped_min_pax = dropped
    summary.pax_dropped_min_pax = dropped_pax
    summary.pax_emitted = int(cells["passengers"].sum())
    return cells, summary


def read_cells(path: str | Path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"origin": str, "dest": str, "carrier": str}, keep_default_na=False)
    missing = set(CELL_COLUMNS) - set(df.columns)
    if missing:
        raise SchemaError(f"{path}: cells file missing columns {sorted(missing)}")
    df["nonstop"] = df["nonstop"].astype(np.int64)
    return df


def write_frame(df: pd.DataFrame, path: str | Path, **kw) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, lineterminator="\n", **kw)
