"""Rule-based reference strategies.

``rb_agg``: no P2P trading; the aggregator buys every surplus and serves every
deficit at the maximum markup around the forecast and always clears at the
realised wholesale price.

``rb_p2p``: the hour's matched volume ``min(demand, supply)`` is split
proportionally on each side at one uniform price; residuals go to the
aggregator exactly as in ``rb_agg``.

For rewards, baseline prosumers are scored as if they had bid/offered at
the uniform price, so an unserved residual incurs the usual
missed-opportunity penalty against the aggregator quote.
"""
from __future__ import annotations

from .aggregator import final_payouts, quote_prices, settle_wholesale
from .auction import ClearingOutcome, RoundTrade
from .env import prosumer_reward
from .reports import EpisodeRecorder, EpisodeReport
from .scenario import MarketScenario

UNIFORM_PRICE_MODES = ("midpoint", "wholesale")


def _uniform_price(quote, p_w, mode):
    if mode == "midpoint":
        return 0.5 * (quote.p_a_b + quote.p_a_s)
    if mode == "wholesale":
        return p_w
    raise ValueError(f"uniform_price_mode must be one of {UNIFORM_PRICE_MODES}")


def uniform_clearing(ids, quantities, price: float, trade: bool = True) -> ClearingOutcome:
    """Single-price pro-rata clearing (or no clearing at all when ``trade`` is False)."""
    buyers = {n: q for n, q in zip(ids, quantities) if q < 0}
    sellers = {n: q for n, q in zip(ids, quantities) if q > 0}
    demand = -sum(buyers.values())
    supply = sum(sellers.values())
    matched = min(demand, supply) if trade else 0.0
    trades = []
    residual_buy = dict(buyers)
    residual_sell = dict(sellers)
    pa = dict.fromkeys(buyers, 0.0)
    rv = dict.fromkeys(sellers, 0.0)
    if matched > 0:
        t = RoundTrade(1, price, matched)
        for n, q in buyers.items():
            fill = -q if demand <= supply else -q / demand * matched
            t.buyer_fills[n] = fill
            t.buyer_payments[n] = pa[n] = fill * price
            residual_buy[n] = q + fill
        for n, q in sellers.items():
            fill = q if supply <= demand else q / supply * matched
            t.seller_fills[n] = fill
            t.seller_revenues[n] = rv[n] = fill * price
            residual_sell[n] = q - fill
        trades.append(t)
    unmatched = {**residual_buy, **residual_sell}
    nonzero = {n: q for n, q in zip(ids, quantities) if q != 0}
    return ClearingOutcome(trades, pa, rv, residual_buy, residual_sell,
                           {n: unmatched[n] for n in nonzero}, nonzero,
                           {n: price for n in nonzero})


def _run(scenario: MarketScenario, strategy: str, trade: bool, uniform_price_mode: str,
         penalty_sign_mode: str) -> EpisodeReport:
    rho = scenario.bounds.rho_max
    q = scenario.quantity_matrix()
    rec = EpisodeRecorder(scenario.ids)
    for t in range(scenario.hours):
        f_mp, p_w = scenario.forecast_mp[t], scenario.realized_pw[t]
        quote = quote_prices(f_mp, rho, rho, rho)
        price = _uniform_price(quote, p_w, uniform_price_mode)
        clearing = uniform_clearing(scenario.ids, [float(v) for v in q[t]], price, trade=trade)
        # bidding exactly P_w always clears
        settlement = settle_wholesale(clearing.residual_buy, clearing.residual_sell, quote, p_w, p_w,
                                      scenario.tariffs, scenario.penalty_price)
        payouts = final_payouts(clearing, settlement, participants=scenario.ids,
                                penalty_sign_mode=penalty_sign_mode)
        rewards = {n: prosumer_reward(clearing, quote, n) for n in scenario.ids}
        rec.add(t, clearing, settlement, payouts, rewards, settlement.profit_ta, quote, f_mp)
    return rec.report(strategy)


def rb_agg_run(scenario: MarketScenario, uniform_price_mode: str = "midpoint",
               penalty_sign_mode: str = "compensation") -> EpisodeReport:
    return _run(scenario, "RB Agg", False, uniform_price_mode, penalty_sign_mode)


def rb_p2p_run(scenario: MarketScenario, uniform_price_mode: str = "midpoint",
               penalty_sign_mode: str = "compensation") -> EpisodeReport:
    return _run(scenario, "RB P2P", True, uniform_price_mode, penalty_sign_mode)


STRATEGIES = {"rb_agg": rb_agg_run, "rb_p2p": rb_p2p_run}
