"""Hourly retail P2P double auction.

Bids (negative quantity) are sorted by descending price, offers (positive
quantity) by ascending price. Each round matches the top price tier on each
side: the tier volumes are matched up to the smaller of the two, split
proportionally inside each tier, and priced at the midpoint of the two tier
prices. Rounds repeat until the best bid is below the best offer or a side
runs dry; whatever is left goes to the aggregator.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Sequence

import numpy as np

from .kernels import CLEAR_TOL, clear_sorted

PRICE_DECIMALS = 6


class AuctionError(ValueError):
    """Invalid order or inconsistent order book."""


def quantize_price(price: float) -> float:
    return round(float(price), PRICE_DECIMALS)


@dataclass(frozen=True)
class Order:
    owner: Hashable
    price: float
    quantity: float

    def __post_init__(self):
        object.__setattr__(self, "price", quantize_price(self.price))
        object.__setattr__(self, "quantity", float(self.quantity))

    @property
    def is_bid(self) -> bool:
        return self.quantity < 0


@dataclass(frozen=True)
class SortedBooks:
    bids: tuple[Order, ...]
    offers: tuple[Order, ...]
    round: int = 1

    def __bool__(self):
        return bool(self.bids) and bool(self.offers)


@dataclass
class RoundTrade:
    round: int
    clearing_price: float
    matched_quantity: float
    buyer_fills: dict = field(default_factory=dict)
    seller_fills: dict = field(default_factory=dict)
    buyer_payments: dict = field(default_factory=dict)
    seller_revenues: dict = field(default_factory=dict)


@dataclass
class ClearingOutcome:
    """Result of clearing one hour.

    ``pa``/``rv`` hold total P2P payment per buyer and revenue per seller.
    ``residual_buy`` values are <= 0, ``residual_sell`` values >= 0, and
    ``unmatched`` carries the same residuals keyed by every participant.
    """

    trades: list
    pa: dict
    rv: dict
    residual_buy: dict
    residual_sell: dict
    unmatched: dict
    quantities: dict
    prices: dict

    @property
    def matched(self) -> dict:
        """Matched magnitude per participant (always >= 0)."""
        return {n: abs(q) - abs(self.unmatched[n]) for n, q in self.quantities.items()}

    @property
    def buyers(self) -> list:
        return list(self.residual_buy)

    @property
    def sellers(self) -> list:
        return list(self.residual_sell)

    @property
    def traded_volume(self) -> float:
        return sum(t.matched_quantity for t in self.trades)

    def mean_price(self) -> float:
        """Volume-weighted P2P settling price, NaN if nothing traded."""
        vol = self.traded_volume
        if vol <= 0:
            return math.nan
        return sum(t.clearing_price * t.matched_quantity for t in self.trades) / vol


def validate_orders(orders: Sequence[Order], bounds=None) -> None:
    seen = set()
    for i, o in enumerate(orders):
        if o.owner in seen:
            raise AuctionError(f"order {i}: duplicate owner {o.owner!r}")
        seen.add(o.owner)
        if not math.isfinite(o.quantity) or abs(o.quantity) < CLEAR_TOL:
            raise AuctionError(f"order {i} ({o.owner!r}): quantity must be nonzero, got {o.quantity}")
        if not math.isfinite(o.price):
            raise AuctionError(f"order {i} ({o.owner!r}): price is not finite")
        if bounds is not None:
            lo, hi = _bounds_pair(bounds)
            if not lo <= o.price <= hi:
                raise AuctionError(f"order {i} ({o.owner!r}): price {o.price} outside [{lo}, {hi}]")


def _bounds_pair(bounds):
    if hasattr(bounds, "p_min"):
        return bounds.p_min, bounds.p_max
    lo, hi = bounds
    return lo, hi


def sort_books(orders: Sequence[Order], bounds=None) -> SortedBooks:
    """Split orders by side and sort them (stable within equal prices)."""
    validate_orders(orders, bounds)
    bids = sorted((o for o in orders if o.quantity < 0), key=lambda o: -o.price)
    offers = sorted((o for o in orders if o.quantity > 0), key=lambda o: o.price)
    return SortedBooks(tuple(bids), tuple(offers), 1)


def _check_sorted(books: SortedBooks) -> None:
    for a, b in zip(books.bids, books.bids[1:]):
        if a.price < b.price:
            raise AuctionError("bid book is not sorted by descending price")
    for a, b in zip(books.offers, books.offers[1:]):
        if a.price > b.price:
            raise AuctionError("offer book is not sorted by ascending price")
    if any(o.quantity >= 0 for o in books.bids) or any(o.quantity <= 0 for o in books.offers):
        raise AuctionError("book holds an order on the wrong side or with zero quantity")


def match_round(books: SortedBooks) -> tuple[RoundTrade | None, SortedBooks]:
    """Execute one matching round; returns ``(None, books)`` when nothing crosses."""
    _check_sorted(books)
    if not books.bids or not books.offers:
        return None, books
    p_bid = books.bids[0].price
    p_off = books.offers[0].price
    if p_bid < p_off:
        return None, books

    tier_b = [o for o in books.bids if o.price == p_bid]
    tier_o = [o for o in books.offers if o.price == p_off]
    q_td = sum(-o.quantity for o in tier_b)
    q_ts = sum(o.quantity for o in tier_o)
    q_k = min(q_td, q_ts)
    p_k = 0.5 * (p_bid + p_off)

    trade = RoundTrade(books.round, p_k, q_k)
    new_bids = []
    for o in books.bids:
        if o.price != p_bid:
            new_bids.append(o)
            continue
        fill = (-o.quantity) / q_td * q_k
        remaining = o.quantity + fill
        if -remaining < CLEAR_TOL:
            fill, remaining = -o.quantity, 0.0
        trade.buyer_fills[o.owner] = fill
        trade.buyer_payments[o.owner] = fill * p_k
        if remaining != 0.0:
            new_bids.append(Order(o.owner, o.price, remaining))
    new_offers = []
    for o in books.offers:
        if o.price != p_off:
            new_offers.append(o)
            continue
        fill = o.quantity / q_ts * q_k
        remaining = o.quantity - fill
        if remaining < CLEAR_TOL:
            fill, remaining = o.quantity, 0.0
        trade.seller_fills[o.owner] = fill
        trade.seller_revenues[o.owner] = fill * p_k
        if remaining != 0.0:
            new_offers.append(Order(o.owner, o.price, remaining))
    return trade, SortedBooks(tuple(new_bids), tuple(new_offers), books.round + 1)


def clear_p2p(orders: Sequence[Order], bounds=None) -> ClearingOutcome:
    """Clear one hour of bids and offers (runs the compiled kernel)."""
    books = sort_books(orders, bounds)
    bids, offers = books.bids, books.offers
    n_rounds, r_price, r_qty, bfill, ofill, rb, ro = clear_sorted(
        np.fromiter((o.price for o in bids), float, len(bids)),
        np.fromiter((-o.quantity for o in bids), float, len(bids)),
        np.fromiter((o.price for o in offers), float, len(offers)),
        np.fromiter((o.quantity for o in offers), float, len(offers)),
    )

    trades = []
    for k in range(n_rounds):
        p_k = float(r_price[k])
        trade = RoundTrade(k + 1, p_k, float(r_qty[k]))
        for i in np.flatnonzero(bfill[k]):
            f = float(bfill[k, i])
            trade.buyer_fills[bids[i].owner] = f
            trade.buyer_payments[bids[i].owner] = f * p_k
        for j in np.flatnonzero(ofill[k]):
            f = float(ofill[k, j])
            trade.seller_fills[offers[j].owner] = f
            trade.seller_revenues[offers[j].owner] = f * p_k
        trades.append(trade)
    return _assemble(orders, trades,
                     {o.owner: 0.0 - float(rb[i]) for i, o in enumerate(bids)},
                     {o.owner: float(ro[j]) for j, o in enumerate(offers)})


def clear_by_rounds(orders: Sequence[Order], bounds=None) -> ClearingOutcome:
    """Same result as :func:`clear_p2p`, built by iterating :func:`match_round`."""
    books = sort_books(orders, bounds)
    trades = []
    while True:
        trade, books = match_round(books)
        if trade is None:
            break
        trades.append(trade)
    residual_buy = {o.owner: 0.0 for o in orders if o.quantity < 0}
    residual_sell = {o.owner: 0.0 for o in orders if o.quantity > 0}
    residual_buy.update({o.owner: o.quantity for o in books.bids})
    residual_sell.update({o.owner: o.quantity for o in books.offers})
    return _assemble(orders, trades, residual_buy, residual_sell)


def _assemble(orders, trades, residual_buy, residual_sell) -> ClearingOutcome:
    pa = {o.owner: 0.0 for o in orders if o.quantity < 0}
    rv = {o.owner: 0.0 for o in orders if o.quantity > 0}
    for t in trades:
        for n, v in t.buyer_payments.items():
            pa[n] += v
        for n, v in t.seller_revenues.items():
            rv[n] += v
    # keep submission order in every map
    residual_buy = {n: residual_buy[n] for n in pa}
    residual_sell = {n: residual_sell[n] for n in rv}
    unmatched = {}
    for o in orders:
        unmatched[o.owner] = residual_buy[o.owner] if o.quantity < 0 else residual_sell[o.owner]
    return ClearingOutcome(
        trades=trades,
        pa=pa,
        rv=rv,
        residual_buy=residual_buy,
        residual_sell=residual_sell,
        unmatched=unmatched,
        quantities={o.owner: o.quantity for o in orders},
        prices={o.owner: o.price for o in orders},
    )


def write_trade_log(hourly: Iterable[tuple[int, ClearingOutcome]], fp) -> None:
    """Write one CSV row per round: ``hour, round, price, quantity, buy_<id>..., sell_<id>...``."""
    hourly = list(hourly)
    buyers, sellers = [], []
    for _, outcome in hourly:
        for n in outcome.residual_buy:
            if n not in buyers:
                buyers.append(n)
        for n in outcome.residual_sell:
            if n not in sellers:
                sellers.append(n)
    writer = csv.writer(fp)
    writer.writerow(["hour", "round", "price", "quantity"]
                    + [f"buy_{n}" for n in buyers] + [f"sell_{n}" for n in sellers])
    for hour, outcome in hourly:
        for t in outcome.trades:
            writer.writerow([hour, t.round, repr(t.clearing_price), repr(t.matched_quantity)]
                            + [repr(t.buyer_fills.get(n, 0.0)) for n in buyers]
                            + [repr(t.seller_fills.get(n, 0.0)) for n in sellers])
