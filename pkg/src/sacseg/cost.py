"""Parameter and multiply-accumulate accounting for layers and networks."""

from __future__ import annotations

import csv
from dataclasses import replace
from pathlib import Path

from .network import Network, NetworkConfig, build_network

VARIANT_ROWS = ("none", "S", "IS", "SK", "ISK")


def _pct(extra: int, base: int) -> float:
    return 100.0 * extra / base if base else 0.0


def _report(params: int, macs: int, params_extra: int, macs_extra: int) -> dict:
    return {
        "params_total": params,
        "params_extra": params_extra,
        "macs_total": macs,
        "macs_extra": macs_extra,
        "extra_params_pct": _pct(params_extra, params - params_extra),
        "extra_macs_pct": _pct(macs_extra, macs - macs_extra),
    }


def layer_rows(obj, hw=None) -> list[dict]:
    """Per-layer rows (layer, params, macs, params_extra, macs_extra)."""
    if isinstance(obj, Network):
        return obj.layer_costs()
    if hw is None:
        raise ValueError("a single layer needs an input size")
    res = obj.cost(tuple(hw))
    ep, em = (res[3], res[4]) if len(res) > 3 else (0, 0)
    return [dict(layer=type(obj).__name__, params=res[0], macs=res[1], params_extra=ep,
                 macs_extra=em)]


def cost_report(obj, hw=None) -> dict:
    """Totals and attention overhead; percentages are relative to the attention-free model."""
    rows = layer_rows(obj, hw)
    return _report(*(sum(r[k] for r in rows) for k in ("params", "macs", "params_extra",
                                                        "macs_extra")))


def write_layer_csv(obj, path, hw=None) -> dict:
    rows = layer_rows(obj, hw)
    total = cost_report(obj, hw)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["layer", "params", "macs", "params_extra", "macs_extra"])
        for r in rows:
            wr.writerow([r["layer"], r["params"], r["macs"], r["params_extra"], r["macs_extra"]])
        wr.writerow(["total", total["params_total"], total["macs_total"], total["params_extra"],
                     total["macs_extra"]])
    return total


def variant_table(cfg: NetworkConfig, variants=VARIANT_ROWS) -> list[dict]:
    """One row per SAC variant of ``cfg``: absolute counts and overhead vs. the twin."""
    rows = []
    for v in variants:
        rep = cost_report(build_network(replace(cfg, sac_variant=v)))
        rows.append({"variant": v, **rep})
    return rows


def write_variant_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["variant", "params_total", "macs_total", "extra_params_pct", "extra_macs_pct"])
        for r in rows:
            wr.writerow([r["variant"], r["params_total"], r["macs_total"],
                         f"{r['extra_params_pct']:.2f}", f"{r['extra_macs_pct']:.2f}"])


def format_table(rows: list[dict]) -> str:
    lines = [f"{'variant':<8}{'params':>14}{'MACs':>18}{'extra params %':>16}{'extra MACs %':>14}"]
    for r in rows:
        lines.append(f"{r['variant']:<8}{r['params_total']:>14,}{r['macs_total']:>18,}"
                     f"{r['extra_params_pct']:>16.2f}{r['extra_macs_pct']:>14.2f}")
    return "\n".join(lines)


def write_outputs(cfg: NetworkConfig, out_dir) -> list[dict]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = variant_table(cfg)
    write_variant_csv(rows, out / "cost_table.csv")
    write_layer_csv(build_network(cfg), out / "cost_layers.csv")
    return rows
