import numpy as np
import pandas as pd
import pytest

from mmc_lab.ingest import TICKET_COLUMNS


@pytest.fixture
def flat_cpi():
    from mmc_lab.ingest import CpiTable
    return CpiTable({y: 100.0 for y in range(2000, 2031)})


def write_tickets(path, rows):
    pd.DataFrame(rows, columns=TICKET_COLUMNS).to_csv(path, index=False, lineterminator="\n")
    return path


def random_cells(rng, n_carriers=6, n_pairs=40, quarters=((2023, 2),), p=0.4):
    """Small random cells frame; every carrier-market draw is independent."""
    airports = [a + b + "X" for a in "ABCDEFG" for b in "ABCDEFG"]
    carriers = ["C" + chr(65 + i) for i in range(n_carriers)]
    rows = []
    for y, q in quarters:
        for i in range(n_pairs):
            o, d = airports[i % len(airports)], airports[(i * 7 + 3) % len(airports)]
            if o == d:
                continue
            for ns in (0, 1):
                for c in carriers:
                    if rng.random() < p:
                        rows.append((y, q, o, d, ns, c, float(np.round(rng.uniform(50, 900), 2)),
                                     int(rng.integers(30, 900))))
    cols = ["year", "quarter", "origin", "dest", "nonstop", "carrier", "mean_fare", "passengers"]
    df = pd.DataFrame(rows, columns=cols).drop_duplicates(["year", "quarter", "origin", "dest", "nonstop", "carrier"])
    return df.reset_index(drop=True)


ACCEPTANCE_LINES: dict[int, str] = {}


def report(n: int, passed: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if passed else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
