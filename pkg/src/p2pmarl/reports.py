"""Episode reports and the per-agent comparison tables.

Tables have one row per agent (``Aggregator``, ``Prosumer <id>``) plus a
``Sum P2P`` row, and one column per strategy. Monetary values are signed
from each agent's side: buyer costs negative, seller revenues positive.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .aggregator import system_cash_balance

AGGREGATOR = "Aggregator"
SUM_P2P = "Sum P2P"


@dataclass
class EpisodeReport:
    strategy: str
    ids: list
    monetary: dict = field(default_factory=dict)
    rewards: dict = field(default_factory=dict)
    hourly: list = field(default_factory=list)
    max_cash_imbalance: float = 0.0

    @property
    def sum_p2p_monetary(self) -> float:
        return sum(self.monetary[n] for n in self.ids)

    @property
    def sum_p2p_reward(self) -> float:
        return sum(self.rewards[n] for n in self.ids)

    def table_column(self, kind: str) -> dict:
        src = self.monetary if kind == "monetary" else self.rewards
        col = {AGGREGATOR: src[AGGREGATOR]}
        col.update({f"Prosumer {n}": src[n] for n in self.ids})
        col[SUM_P2P] = sum(src[n] for n in self.ids)
        return col

    def settling_prices(self) -> np.ndarray:
        return np.array([h["p2p_price"] for h in self.hourly], dtype=float)


class EpisodeRecorder:
    """Accumulates hourly settlements into an :class:`EpisodeReport`."""

    def __init__(self, ids):
        self.ids = list(ids)
        self.monetary = dict.fromkeys([AGGREGATOR, *self.ids], 0.0)
        self.rewards = dict.fromkeys([AGGREGATOR, *self.ids], 0.0)
        self.hourly = []
        self.max_imbalance = 0.0

    def add(self, hour, clearing, settlement, payouts, rewards, r_ag, quote, f_mp):
        for n in self.ids:
            self.monetary[n] += payouts[n].net_cash
            self.rewards[n] += rewards[n]
        self.monetary[AGGREGATOR] += settlement.profit_ta
        self.rewards[AGGREGATOR] += r_ag
        self.max_imbalance = max(self.max_imbalance,
                                 abs(system_cash_balance(clearing, settlement, payouts)))
        self.hourly.append({
            "hour": hour,
            "f_mp": f_mp,
            "p_w": settlement.realized_pw,
            "p_a_b": quote.p_a_b,
            "p_a_s": quote.p_a_s,
            "p_a_w": settlement.wholesale_bid_price,
            "p2p_price": clearing.mean_price(),
            "p2p_volume": clearing.traded_volume,
            "q_net": settlement.q_net,
            "cleared": int(settlement.cleared),
        })

    def report(self, strategy: str) -> EpisodeReport:
        return EpisodeReport(strategy, self.ids, dict(self.monetary), dict(self.rewards),
                             list(self.hourly), self.max_imbalance)


def mean_report(reports, strategy=None) -> EpisodeReport:
    """Average several episode reports agent by agent (hourly rows averaged too)."""
    reports = list(reports)
    first = reports[0]
    keys = [AGGREGATOR, *first.ids]
    hourly = []
    for rows in zip(*(r.hourly for r in reports)):
        merged = {}
        for k in rows[0]:
            if k == "hour":
                merged[k] = rows[0][k]
                continue
            vals = np.array([row[k] for row in rows], dtype=float)
            merged[k] = float(np.nanmean(vals)) if np.any(~np.isnan(vals)) else math.nan
        hourly.append(merged)
    return EpisodeReport(
        strategy or first.strategy, first.ids,
        {k: float(np.mean([r.monetary[k] for r in reports])) for k in keys},
        {k: float(np.mean([r.rewards[k] for r in reports])) for k in keys},
        hourly, max(r.max_cash_imbalance for r in reports))


def write_table(reports, kind: str, fp, digits: int = 4) -> None:
    """Rows = agents + ``Sum P2P``, columns = strategies."""
    cols = [r.table_column(kind) for r in reports]
    w = csv.writer(fp)
    w.writerow(["agent"] + [r.strategy for r in reports])
    for row in cols[0]:
        w.writerow([row] + [f"{c[row]:.{digits}f}" for c in cols])


def write_price_series(report: EpisodeReport, fp) -> None:
    if not report.hourly:
        return
    w = csv.DictWriter(fp, fieldnames=list(report.hourly[0]))
    w.writeheader()
    for row in report.hourly:
        w.writerow({k: ("" if isinstance(v, float) and math.isnan(v) else v) for k, v in row.items()})
