import numpy as np
import pandas as pd
import pytest

from mmc_lab.events import PRESETS, tag_frame
from mmc_lab.hdfe import RegressionSpec, fit_hdfe
from mmc_lab.ingest import write_frame
from mmc_lab.panel import build_pair_diff_panel, regression_frame
from mmc_lab.synth import (RNG_ALGORITHM, TABLE4_COLUMN1, SynthConfig, generate_panel, generate_pair_panel,
                           make_rng, read_config, write_truth)


def small(**kw):
    base = dict(seed=1, n_carriers=5, n_city_pairs=60, n_quarters=6)
    base.update(kw)
    return SynthConfig(**base)


def test_pure_intercept_world():
    cells, _ = generate_panel(small(noise_sd=0.0))
    panel = build_pair_diff_panel(cells)
    assert len(panel) > 50
    assert panel["dp"].nunique() == 1 and panel["dp"].iloc[0] == 40.0


def test_single_nonstop_effect():
    cells, _ = generate_panel(small(noise_sd=0.0, planted={"nonstop": -5.0}))
    panel = build_pair_diff_panel(cells)
    key = ["year", "quarter", "origin", "dest", "carrier_lo", "carrier_hi"]
    both = panel[panel.nonstop == 1].merge(panel[panel.nonstop == 0], on=key, suffixes=("_ns", "_so"))
    assert len(both) > 0
    assert ((both["dp_so"] - both["dp_ns"]) == 5.0).all()
    assert set(panel["dp"]) == {35.0, 40.0}


@pytest.mark.parametrize("gen", [generate_panel, generate_pair_panel])
def test_same_seed_byte_identical(gen, tmp_path):
    cfg = small(planted=dict(TABLE4_COLUMN1), fe_scales={"city_pair": 1.0})
    for name in ("a", "b"):
        data, truth = gen(cfg)
        write_frame(data, tmp_path / f"{name}.csv")
        write_truth(truth, tmp_path / f"{name}_truth.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a_truth.csv").read_bytes() == (tmp_path / "b_truth.csv").read_bytes()
    other, _ = gen(small(seed=2, planted=dict(TABLE4_COLUMN1), fe_scales={"city_pair": 1.0}))
    assert not other.equals(gen(cfg)[0])


def test_cells_respect_ingest_invariants():
    cells, _ = generate_panel(small(planted=dict(TABLE4_COLUMN1), noise_sd=5.0, fe_scales={"city_pair": 3.0}))
    assert cells["passengers"].min() >= 30
    assert cells["mean_fare"].between(25, 2500).all()
    assert not cells.duplicated(["year", "quarter", "origin", "dest", "nonstop", "carrier"]).any()
    per_market = cells.groupby(["year", "quarter", "origin", "dest", "nonstop"]).size()
    assert per_market.max() <= 2


def test_noiseless_recovery_is_exact():
    planted = {k: v for k, v in TABLE4_COLUMN1.items() if k != "cs"}  # cs == 1 in a duopoly world
    cells, _ = generate_panel(small(n_city_pairs=150, noise_sd=0.0, planted=planted))
    frame = regression_frame(build_pair_diff_panel(cells), "ek")
    fit = fit_hdfe(frame, RegressionSpec("dp", list(planted), ["year", "quarter"]))
    for k, v in planted.items():
        assert fit.coef[k] == pytest.approx(v, rel=1e-8)


def test_pair_world_noiseless_recovery_with_fe():
    cfg = small(n_city_pairs=150, noise_sd=0.0, planted=dict(TABLE4_COLUMN1),
                fe_scales={"year": 1.0, "quarter": 1.0, "city_pair": 2.0, "carrier_pair": 1.5})
    panel, truth = generate_pair_panel(cfg)
    assert panel["cs"].nunique() > 10
    fit = fit_hdfe(regression_frame(panel, "ek"),
                   RegressionSpec("dp", list(TABLE4_COLUMN1), ["year", "quarter", "city_pair", "carrier_pair"],
                                  tol=1e-12))
    for k, v in TABLE4_COLUMN1.items():
        assert fit.coef[k] == pytest.approx(v, rel=1e-6)
    assert truth["rng_algorithm"] == RNG_ALGORITHM


def test_merger_world_drops_absorbed_carrier():
    ev = PRESETS["ua-co"]
    cells, _ = generate_panel(small(n_quarters=16, start=(2009, 1), merger=ev))
    after = cells[(cells["year"] * 4 + cells["quarter"]) >= 2011 * 4 + 4]
    assert len(after) > 0 and "CO" not in set(after["carrier"])
    assert {"UA", "CO"} <= set(cells["carrier"])
    d = tag_frame(build_pair_diff_panel(cells), ev)
    assert (d["cert_both"] == 0).all()


@pytest.mark.parametrize("kw", [dict(n_carriers=1), dict(n_city_pairs=0), dict(noise_sd=-1.0),
                                dict(planted={"hhi": 1.0}), dict(planted={"annc": 1.0}),
                                dict(fe_scales={"market": 1.0})])
def test_degenerate_configs_rejected(kw):
    with pytest.raises(ValueError):
        small(**kw)


def test_streams_are_philox_and_distinct():
    a, b = make_rng(3, 0), make_rng(3, 1)
    assert isinstance(a.bit_generator, np.random.Philox)
    assert a.random() != b.random()
    assert make_rng(3, 0).random() == make_rng(3, 0).random()


def test_read_config(tmp_path):
    p = tmp_path / "cfg.txt"
    p.write_text("seed = 9\nn_carriers = 4\nstart = 2012Q3\nplanted = table4\nplanted.cs = 0\nfe.city_pair = 2\n"
                 "merger = aa-us\n")
    cfg = read_config(p)
    assert cfg.seed == 9 and cfg.start == (2012, 3) and cfg.merger.name == "aa-us"
    assert cfg.planted["cs"] == 0.0 and cfg.planted["rs"] == TABLE4_COLUMN1["rs"]
    assert cfg.fe_scales == {"city_pair": 2.0}
    assert {"AA", "US"} <= set(cfg.carriers())
