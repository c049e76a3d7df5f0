"""Aggregator settlement of P2P residuals.

Cash conventions: every stored cash field is a nonnegative magnitude whose
direction follows the role. Buyers pay ``pa_agg`` to the aggregator, the
aggregator pays ``rv_agg`` to sellers and ``penalties`` to any prosumer left
unserved after a failed wholesale attempt. ``external_cash`` is signed from
the aggregator's side (positive = cash received from the wholesale market or
the utility).
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

from .kernels import CLEAR_TOL

PENALTY_SIGN_MODES = ("compensation", "literal")


class SettlementError(ValueError):
    pass


@dataclass(frozen=True)
class AggregatorQuote:
    p_a_b: float
    p_a_s: float
    delta_b: float
    delta_o: float
    reference_price: float


def quote_prices(reference_price: float, delta_b: float, delta_o: float,
                 rho_max: float = 1.0) -> AggregatorQuote:
    """Buy/sell quotes ``ref*(1-delta_b)`` and ``ref*(1+delta_o)``."""
    if reference_price < 0:
        raise SettlementError(f"reference price must be >= 0, got {reference_price}")
    for name, d in (("delta_b", delta_b), ("delta_o", delta_o)):
        if not 0.0 <= d <= rho_max:
            raise SettlementError(f"{name}={d} outside [0, {rho_max}]")
    return AggregatorQuote(reference_price * (1.0 - delta_b), reference_price * (1.0 + delta_o),
                           float(delta_b), float(delta_o), float(reference_price))


@dataclass
class WholesaleSettlement:
    q_agg_sell: float
    q_agg_buy: float
    q_net: float
    wholesale_bid_price: float
    realized_pw: float
    cleared: bool
    penalties: dict = field(default_factory=dict)
    pa_agg: dict = field(default_factory=dict)
    rv_agg: dict = field(default_factory=dict)
    profit_ta: float = 0.0
    external_cash: float = 0.0

    @property
    def total_penalty(self) -> float:
        return sum(self.penalties.values())


def wholesale_cleared(q_net: float, p_a_w: float, realized_pw: float) -> bool:
    """Net sellers clear when asking no more than P_w, net buyers when bidding no less."""
    if q_net > 0:
        return p_a_w <= realized_pw
    if q_net < 0:
        return p_a_w >= realized_pw
    return True


def settle_wholesale(residual_buy: dict, residual_sell: dict, quote: AggregatorQuote,
                     p_a_w: float, realized_pw: float, tariff, penalty_price: float) -> WholesaleSettlement:
    if penalty_price < 0:
        raise SettlementError("penalty price must be >= 0")
    for n, q in residual_buy.items():
        if q > 0:
            raise SettlementError(f"buyer {n!r} has positive residual {q}")
    for n, q in residual_sell.items():
        if q < 0:
            raise SettlementError(f"seller {n!r} has negative residual {q}")

    q_sell = sum(residual_sell.values())
    q_buy = sum(residual_buy.values())
    q_net = q_sell + q_buy
    if abs(q_net) < CLEAR_TOL:
        q_net = 0.0
    cleared = wholesale_cleared(q_net, p_a_w, realized_pw)

    pa_agg = {n: -q * quote.p_a_s for n, q in residual_buy.items()}
    rv_agg = {n: q * quote.p_a_b for n, q in residual_sell.items()}
    if cleared:
        penalties = {n: 0.0 for n in (*residual_buy, *residual_sell)}
        external = realized_pw * q_net
    else:
        penalties = {n: penalty_price * -q for n, q in residual_buy.items()}
        penalties.update({n: penalty_price * q for n, q in residual_sell.items()})
        if q_net > 0:
            external = q_net * tariff.utility_buy_price
        else:
            external = q_net * tariff.utility_sell_price
    ta = sum(pa_agg.values()) - sum(rv_agg.values()) + external - sum(penalties.values())
    return WholesaleSettlement(
        q_agg_sell=q_sell, q_agg_buy=q_buy, q_net=q_net,
        wholesale_bid_price=float(p_a_w), realized_pw=float(realized_pw), cleared=cleared,
        penalties=penalties, pa_agg=pa_agg, rv_agg=rv_agg, profit_ta=ta, external_cash=external,
    )


@dataclass(frozen=True)
class ProsumerPayout:
    tb: float = 0.0
    ts: float = 0.0
    tp: float = 0.0
    role: int = 0  # -1 buyer, +1 seller, 0 idle

    @property
    def net_cash(self) -> float:
        """Signed monetary outcome: buyers negative (cost), sellers positive."""
        return -self.tb if self.role < 0 else self.ts


def final_payouts(clearing, settlement: WholesaleSettlement, participants=(),
                  penalty_sign_mode: str = "compensation") -> dict:
    """Total buyer cost ``tb`` and seller revenue ``ts`` per prosumer.

    Under ``compensation`` a penalty lowers the buyer's cost; ``literal``
    adds it to the cost as the printed buyer-payout formula does.
    ``participants`` lists extra ids (e.g. idle prosumers) to report as zero.
    """
    if penalty_sign_mode not in PENALTY_SIGN_MODES:
        raise SettlementError(f"unknown penalty_sign_mode {penalty_sign_mode!r}")
    known = set(clearing.pa) | set(clearing.rv)
    for n in (*settlement.pa_agg, *settlement.rv_agg, *settlement.penalties):
        if n not in known:
            raise SettlementError(f"prosumer {n!r} settled but absent from the clearing")
    sign = -1.0 if penalty_sign_mode == "compensation" else 1.0
    out = {n: ProsumerPayout() for n in participants}
    for n, pa in clearing.pa.items():
        tb = pa + settlement.pa_agg.get(n, 0.0) + sign * settlement.penalties.get(n, 0.0)
        out[n] = ProsumerPayout(tb=tb, tp=tb, role=-1)
    for n, rv in clearing.rv.items():
        ts = rv + settlement.rv_agg.get(n, 0.0) + settlement.penalties.get(n, 0.0)
        out[n] = ProsumerPayout(ts=ts, tp=ts, role=1)
    return out


def system_cash_balance(clearing, settlement: WholesaleSettlement, payouts: dict) -> float:
    """Prosumers + aggregator + external counterparty; zero when cash is conserved."""
    prosumers = sum(p.net_cash for p in payouts.values())
    return prosumers + settlement.profit_ta - settlement.external_cash


def write_settlement_ledger(rows, fp) -> None:
    """Rows of ``(hour, WholesaleSettlement)`` as ``hour,q_net,p_a_w,p_w,cleared,ta,external_cash``."""
    w = csv.writer(fp)
    w.writerow(["hour", "q_net", "p_a_w", "p_w", "cleared", "ta", "external_cash"])
    for hour, s in rows:
        w.writerow([hour, repr(s.q_net), repr(s.wholesale_bid_price), repr(s.realized_pw),
                    int(s.cleared), repr(s.profit_ta), repr(s.external_cash)])


def write_prosumer_ledger(rows, fp) -> None:
    """Rows of ``(hour, clearing, settlement, payouts)`` as one line per prosumer."""
    w = csv.writer(fp)
    w.writerow(["hour", "prosumer", "role", "quantity", "residual", "p2p_cash", "pa_agg", "rv_agg",
                "penalty", "tp"])
    for hour, clearing, s, payouts in rows:
        for n, pay in payouts.items():
            p2p = clearing.pa.get(n, clearing.rv.get(n, 0.0))
            w.writerow([hour, n, pay.role, repr(clearing.quantities.get(n, 0.0)),
                        repr(clearing.unmatched.get(n, 0.0)), repr(p2p),
                        repr(s.pa_agg.get(n, 0.0)), repr(s.rv_agg.get(n, 0.0)),
                        repr(s.penalties.get(n, 0.0)), repr(pay.tp)])
