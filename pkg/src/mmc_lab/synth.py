"""Seeded synthetic airline markets with planted regression coefficients.

Two worlds are generated from the same carrier-network draws:

``generate_panel``
    Market cells (fares and passengers). Every market-quarter holds at most
    two carriers, because prices are scalars: with three carriers one pairwise
    gap is the sum of the other two and independent pair-level noise cannot
    be planted. In this world the combined share is identically 1.

``generate_pair_panel``
    Pair observations directly, with two or more carriers per market, so
    combined share varies. The response ``dp`` is drawn from the planted
    model and is not derived from fares.

Random streams come from numpy's counter-based Philox generator, keyed by
``(seed, stream)``.
"""

from __future__ import annotations

import itertools
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import pyarrow as pa
import pyarrow.csv as pacsv

from mmc_lab.events import DUMMY_COLUMNS, MergerEvent, qindex, tag_frame
from mmc_lab.ingest import CELL_COLUMNS, TICKET_COLUMNS, DEFAULT_CARRIERS
from mmc_lab.mmc import compute_all
from mmc_lab.panel import DIFF_COLUMNS, add_fe_labels, build_pair_diff_panel

RNG_ALGORITHM = "numpy.random.Philox-4x64-10/SeedSequence"

# published point estimates used as planted truth
TABLE4_COLUMN1 = {"mmc_ek": -4.689, "nonstop": -1.698, "tp": -0.001, "cs": -2.374, "rs": -2.936}
TABLE6_COLUMN1 = {
    "mmc_ek": -4.526,
    "annc": 0.803, "annc_either": -2.041, "annc_both": -7.950,
    "appro": 2.434, "appro_either": -1.990, "appro_both": -11.124,
    "cert": 10.586, "cert_either": -7.797,
}

PLANTABLE = ("mmc_ek", "nonstop", "tp", "cs", "rs", *DUMMY_COLUMNS)
FE_DIMS = ("year", "quarter", "city_pair", "carrier_pair")
_CARRIER_POOL = ("AA", "DL", "UA", "WN", "B6", "AS", "NK", "F9", "G4", "HA",
                 "SY", "CO", "US", "NW", "FL", "VX", "HP", "TW", "TZ", "AQ")


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


@dataclass
class SynthConfig:
    seed: int = 0
    n_carriers: int = 8
    n_city_pairs: int = 200
    n_quarters: int = 8
    start: tuple[int, int] = (2015, 1)
    planted: dict[str, float] = field(default_factory=dict)
    intercept: float = 40.0
    fe_scales: dict[str, float] = field(default_factory=dict)
    noise_sd: float = 1.0
    merger: MergerEvent | None = None
    # presence probabilities of a serving carrier in the nonstop / stopover market
    nonstop_presence: float = 0.45
    stopover_presence: float = 0.75
    churn: float = 0.05

    def __post_init__(self):
        if self.n_carriers < 2:
            raise ValueError("n_carriers must be at least 2")
        if self.n_carriers > len(_CARRIER_POOL):
            raise ValueError(f"n_carriers must be at most {len(_CARRIER_POOL)}")
        if self.n_city_pairs < 1 or self.n_quarters < 1:
            raise ValueError("n_city_pairs and n_quarters must be positive")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")
        unknown = set(self.planted) - set(PLANTABLE)
        if unknown:
            raise ValueError(f"cannot plant {sorted(unknown)}; plantable: {PLANTABLE}")
        bad_fe = set(self.fe_scales) - set(FE_DIMS)
        if bad_fe:
            raise ValueError(f"unknown FE dims {sorted(bad_fe)}")
        if self.merger is None and set(self.planted) & set(DUMMY_COLUMNS):
            raise ValueError("event coefficients need a merger")

    def carriers(self) -> list[str]:
        pool = list(_CARRIER_POOL)
        if self.merger is not None:
            head = [self.merger.carrier_a, self.merger.carrier_b]
            pool = head + [c for c in pool if c not in head]
        return sorted(pool[: self.n_carriers])

    def quarters(self) -> list[tuple[int, int]]:
        t0 = int(qindex(*self.start))
        return [((t0 + i) // 4, (t0 + i) % 4 + 1) for i in range(self.n_quarters)]


def _airports(n: int) -> list[str]:
    letters = string.ascii_uppercase
    return ["".join(t) for t in itertools.islice(itertools.product(letters, repeat=3), n)]


def _city_pairs(n: int, rng: np.random.Generator) -> list[tuple[str, str]]:
    n_air = max(3, int(np.ceil(np.sqrt(2 * n))) + 2)
    airports = _airports(n_air)
    pairs = [(o, d) for o in airports for d in airports if o != d]
    idx = np.sort(rng.choice(len(pairs), size=n, replace=False))
    return [pairs[i] for i in idx]


def _network(cfg: SynthConfig, max_carriers: int | None) -> pd.DataFrame:
    """Cells without fares: which carriers sit in which market each quarter."""
    rng = make_rng(cfg.seed, 1)
    carriers = cfg.carriers()
    quarters = cfg.quarters()
    pairs = _city_pairs(cfg.n_city_pairs, rng)
    nc, ncp, nq = len(carriers), len(pairs), len(quarters)

    propensity = rng.uniform(0.2, 0.8, size=nc)
    served = rng.random((nc, ncp)) < propensity[:, None]
    absorbed = survivor = None
    if cfg.merger is not None:
        absorbed = carriers.index(cfg.merger.absorbed_code)
        survivor = carriers.index(cfg.merger.surviving_code)
    cert_t = qindex(*cfg.merger.certificate) if cfg.merger is not None else None

    origin = np.array([p[0] for p in pairs])
    dest = np.array([p[1] for p in pairs])
    carrier_arr = np.array(carriers)
    parts = []
    for y, q in quarters:
        flip = rng.random((nc, ncp)) < cfg.churn
        fresh = rng.random((nc, ncp)) < propensity[:, None]
        served = np.where(flip, fresh, served)
        if cert_t is not None and qindex(y, q) >= cert_t:
            served[survivor] |= served[absorbed]
            served[absorbed] = False
        for nonstop, prob in ((1, cfg.nonstop_presence), (0, cfg.stopover_presence)):
            present = served & (rng.random((nc, ncp)) < prob)
            score = rng.random((nc, ncp))
            if max_carriers is not None and nc > max_carriers:
                ranked = np.where(present, score, -1.0)
                cut = -np.sort(-ranked, axis=0)[max_carriers - 1]
                present &= ranked >= cut
            pax = 30 + np.floor(rng.lognormal(4.5, 1.0, size=(nc, ncp))).astype(np.int64)
            pax = np.minimum(pax, 20000)
            ci, pi = np.nonzero(present)
            parts.append(pd.DataFrame({
                "year": y, "quarter": q, "origin": origin[pi], "dest": dest[pi], "nonstop": nonstop,
                "carrier": carrier_arr[ci], "passengers": pax[ci, pi],
            }))
    cells = pd.concat(parts, ignore_index=True)
    cells["mean_fare"] = 0.0
    return cells[CELL_COLUMNS].sort_values(["year", "quarter", "origin", "dest", "nonstop", "carrier"]).reset_index(drop=True)


def _fe_draws(frame: pd.DataFrame, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    total = np.zeros(len(frame))
    for dim in FE_DIMS:
        scale = cfg.fe_scales.get(dim, 0.0)
        if scale == 0:
            continue
        levels, codes = np.unique(frame[dim].astype(str).to_numpy(), return_inverse=True)
        total += rng.normal(0.0, scale, size=len(levels))[codes]
    return total


def _deterministic_part(frame: pd.DataFrame, cfg: SynthConfig) -> np.ndarray:
    mean = np.full(len(frame), float(cfg.intercept))
    for name, beta in cfg.planted.items():
        col = "mmc_ek_scaled" if name == "mmc_ek" else name
        mean += beta * frame[col].to_numpy(np.float64)
    return mean


def _pairs_with_regressors(cells: pd.DataFrame, cfg: SynthConfig) -> pd.DataFrame:
    panel = build_pair_diff_panel(cells, compute_all(cells))
    panel = add_fe_labels(panel)
    if cfg.merger is not None:
        panel = pd.concat([panel, tag_frame(panel, cfg.merger)[DUMMY_COLUMNS]], axis=1)
    return panel


def truth_record(cfg: SynthConfig, **extra) -> dict:
    rec = {"rng_algorithm": RNG_ALGORITHM, "seed": cfg.seed, "intercept": cfg.intercept, "noise_sd": cfg.noise_sd}
    rec.update({name: float(cfg.planted.get(name, 0.0)) for name in PLANTABLE
                if name in cfg.planted or name in TABLE4_COLUMN1})
    rec.update({f"fe_scale_{d}": float(cfg.fe_scales.get(d, 0.0)) for d in FE_DIMS})
    if cfg.merger is not None:
        rec["merger"] = cfg.merger.name
    rec.update(extra)
    return rec


def generate_panel(cfg: SynthConfig) -> tuple[pd.DataFrame, dict]:
    """Market cells whose induced pair panel follows the planted model.

    Each market-quarter has at most two carriers. The pair's gap is drawn as
    intercept + planted effects + FE draws + noise; the lower-priced carrier
    gets an integer base fare and the other base + gap. Draws of a negative
    gap are redrawn (recorded as ``redrawn`` in the truth record).
    """
    cells = _network(cfg, max_carriers=2)
    pairs = _pairs_with_regressors(cells, cfg)
    rng = make_rng(cfg.seed, 2)
    mean = _deterministic_part(pairs, cfg) + _fe_draws(pairs, cfg, rng)
    noise = rng.normal(0.0, cfg.noise_sd, size=len(pairs)) if cfg.noise_sd > 0 else np.zeros(len(pairs))
    gap = mean + noise
    redrawn = 0
    for _ in range(1000):
        neg = gap < 0
        if not neg.any():
            break
        redrawn += int(neg.sum())
        if cfg.noise_sd == 0:
            raise ValueError("planted model gives a negative price gap; raise the intercept")
        gap[neg] = mean[neg] + rng.normal(0.0, cfg.noise_sd, size=int(neg.sum()))
    else:
        raise ValueError("could not draw nonnegative price gaps; raise the intercept")

    base = rng.integers(120, 400, size=len(pairs)).astype(np.float64)
    lo_cheap = rng.random(len(pairs)) < 0.5
    fare_lo = np.where(lo_cheap, base, base + gap)
    fare_hi = np.where(lo_cheap, base + gap, base)
    if (np.maximum(fare_lo, fare_hi) > 2500).any():
        raise ValueError("planted price gaps push fares above 2500")

    key = ["year", "quarter", "origin", "dest", "nonstop"]
    priced = pd.concat([
        pairs[key].assign(carrier=pairs["carrier_lo"], fare=fare_lo),
        pairs[key].assign(carrier=pairs["carrier_hi"], fare=fare_hi),
    ])
    cells = cells.merge(priced, on=key + ["carrier"], how="left")
    solo = cells["fare"].isna().to_numpy()
    cells.loc[solo, "fare"] = rng.integers(100, 400, size=int(solo.sum())).astype(np.float64)
    cells["mean_fare"] = cells.pop("fare")
    cells = cells[CELL_COLUMNS].sort_values(key + ["carrier"]).reset_index(drop=True)
    return cells, truth_record(cfg, redrawn=redrawn)


def generate_pair_panel(cfg: SynthConfig) -> tuple[pd.DataFrame, dict]:
    """Pair observations with planted ``dp``; markets may hold many carriers.

    Shares, market passengers and contact measures come from a simulated
    network exactly as the panel builder would compute them. With a merger
    configured the window dummies are appended; the absorbed carrier leaves
    the network at the certificate quarter.
    """
    cells = _network(cfg, max_carriers=None)
    pairs = _pairs_with_regressors(cells, cfg)
    rng = make_rng(cfg.seed, 3)
    dp = _deterministic_part(pairs, cfg) + _fe_draws(pairs, cfg, rng)
    if cfg.noise_sd > 0:
        dp = dp + rng.normal(0.0, cfg.noise_sd, size=len(pairs))
    pairs["dp"] = dp
    cols = DIFF_COLUMNS + (DUMMY_COLUMNS if cfg.merger is not None else [])
    return pairs[cols].reset_index(drop=True), truth_record(cfg)


def write_truth(truth: dict, path: str | Path) -> None:
    pd.DataFrame({"name": list(truth), "value": list(truth.values())}).to_csv(path, index=False, lineterminator="\n")


def read_config(path: str | Path) -> SynthConfig:
    """``key = value`` config; ``planted.<name>`` and ``fe.<dim>`` keys set maps."""
    from mmc_lab.events import load_event

    vals, planted, fe = {}, {}, {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        k, v = (s.strip().strip("'\"") for s in line.split("=", 1))
        k = k.lower()
        if k.startswith("planted."):
            planted[k.split(".", 1)[1]] = float(v)
        elif k.startswith("fe."):
            fe[k.split(".", 1)[1]] = float(v)
        else:
            vals[k] = v
    if vals.get("planted") == "table4":
        planted = {**TABLE4_COLUMN1, **planted}
    elif vals.get("planted") == "table6":
        planted = {**TABLE4_COLUMN1, **TABLE6_COLUMN1, **planted}
    kw = {}
    for name in ("seed", "n_carriers", "n_city_pairs", "n_quarters"):
        if name in vals:
            kw[name] = int(vals[name])
    for name in ("intercept", "noise_sd", "nonstop_presence", "stopover_presence", "churn"):
        if name in vals:
            kw[name] = float(vals[name])
    if "start" in vals:
        from mmc_lab.events import parse_quarter
        kw["start"] = parse_quarter(vals["start"])
    if "merger" in vals:
        kw["merger"] = load_event(vals["merger"])
    return SynthConfig(planted=planted, fe_scales=fe, **kw)


def generate_tickets(n_rows: int, path: str | Path, seed: int = 0, *, n_airports: int = 30,
                     start_year: int = 2015, n_years: int = 3, chunk: int = 2_000_000) -> None:
    """Write ``n_rows`` random ticket itineraries as CSV (for throughput tests).

    About 2% of rows use a carrier outside the default allow-list and about
    1% fall outside the fare bounds.
    """
    rng = make_rng(seed, 4)
    airports = np.array(_airports(n_airports))
    carriers = np.array(list(DEFAULT_CARRIERS[:12]) + ["XX"])
    cprob = np.r_[np.full(12, 0.98 / 12), 0.02]
    writer = None
    with pa.OSFile(str(path), "wb") as sink:
        remaining = n_rows
        while remaining > 0:
            m = min(chunk, remaining)
            remaining -= m
            o = rng.integers(0, n_airports, m)
            d = (o + rng.integers(1, n_airports, m)) % n_airports
            fare = np.round(rng.lognormal(5.3, 0.6, m), 2)
            table = pa.table({
                "year": rng.integers(start_year, start_year + n_years, m),
                "quarter": rng.integers(1, 5, m),
                "origin": airports[o],
                "dest": airports[d],
                "tkcarrier": carriers[rng.choice(len(carriers), m, p=cprob)],
                "passengers": rng.integers(1, 4, m),
                "fare": fare,
                "segments": rng.integers(1, 4, m),
            })
            table = table.select(TICKET_COLUMNS)
            if writer is None:
                writer = pacsv.CSVWriter(sink, table.schema, write_options=pacsv.WriteOptions(quoting_style="none"))
            writer.write_table(table)
        if writer is not None:
            writer.close()
