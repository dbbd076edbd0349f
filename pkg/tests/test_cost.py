import csv

import numpy as np
import pytest

from sacseg.cost import cost_report, format_table, layer_rows, variant_table, write_layer_csv, write_outputs
from sacseg.network import build_network, ssgv3_21, tiny
from sacseg.nn import Conv2d


def test_single_weight_conv():
    conv = Conv2d(1, 1, 1, np.random.default_rng(0), bias=False)
    rep = cost_report(conv, (1, 1))
    assert rep["params_total"] == 1 and rep["macs_total"] == 1


def test_conv_formula():
    conv = Conv2d(4, 8, 3, np.random.default_rng(0))
    # params = O*I*K*K + O, MACs = O*I*K*K*H*W
    assert cost_report(conv, (5, 7))["params_total"] == 8 * 4 * 9 + 8
    assert cost_report(conv, (5, 7))["macs_total"] == 8 * 4 * 9 * 35


def test_single_layer_needs_size():
    with pytest.raises(ValueError):
        layer_rows(Conv2d(1, 1, 1, np.random.default_rng(0)))


@pytest.fixture(scope="module")
def full_table():
    return {r["variant"]: r for r in variant_table(ssgv3_21(input_hw=(64, 2048)))}


def test_ordering_of_overheads(full_table):
    t = full_table
    for key in ("extra_params_pct", "extra_macs_pct"):
        assert t["none"][key] == 0.0
        assert t["S"][key] < t["SK"][key] < t["ISK"][key]
        assert t["S"][key] < t["IS"][key] < t["ISK"][key]


def test_overheads_frozen(full_table):
    # reference build, 64 x 2048 input
    assert full_table["ISK"]["extra_params_pct"] == pytest.approx(14.57, abs=0.01)
    assert full_table["ISK"]["extra_macs_pct"] == pytest.approx(23.85, abs=0.01)


def test_twin_is_attention_free(full_table):
    assert full_table["none"]["params_extra"] == 0 and full_table["none"]["macs_extra"] == 0
    for v in ("S", "IS", "SK", "ISK"):
        assert full_table[v]["params_total"] - full_table[v]["params_extra"] == full_table["none"][
            "params_total"]


def test_doubling_channels_roughly_quadruples():
    small = cost_report(build_network(tiny(1 / 8, sac_variant="none")))["params_total"]
    big = cost_report(build_network(tiny(1 / 4, sac_variant="none")))["params_total"]
    assert 3.5 < big / small < 4.1


def test_layer_csv_totals(tmp_path):
    net = build_network(tiny(1 / 16))
    total = write_layer_csv(net, tmp_path / "layers.csv")
    rows = list(csv.DictReader(open(tmp_path / "layers.csv")))
    assert rows[-1]["layer"] == "total"
    assert sum(int(r["params"]) for r in rows[:-1]) == total["params_total"] == net.num_parameters()


def test_write_outputs(tmp_path):
    rows = write_outputs(tiny(1 / 16), tmp_path)
    lines = (tmp_path / "cost_table.csv").read_text().splitlines()
    assert lines[0] == "variant,params_total,macs_total,extra_params_pct,extra_macs_pct"
    assert len(lines) == 6 and "ISK" in format_table(rows)
