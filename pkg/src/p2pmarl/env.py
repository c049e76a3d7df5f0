"""Leader-follower market environment for one 24-hour day.

Each hour runs in two halves. :meth:`MarketEnv.step_followers` takes the
prosumers' normalised price actions, clears the P2P auction at the quotes
already posted for this hour and exposes the residual position to the
aggregator. :meth:`MarketEnv.step_leader` takes the aggregator's action,
settles the residuals in the wholesale market, computes rewards and posts the
quotes for the next hour.

Prosumer observation (6 features, in order)::

    p_a_b/p_max, p_a_s/p_max, q_tot/cap, p_avg/p_max, q_cm/cap, tp/cash

Aggregator observation (4 features)::

    f_mp/p_max, f_ip/p_max, q_agg_sell/cap, q_agg_buy/cap

``p_avg`` and ``tp`` describe the prosumer's previous settled hour (zero at
hour 0); the residual features of the aggregator observation are zero until
the followers have acted in the current hour.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .aggregator import (PENALTY_SIGN_MODES, AggregatorQuote, final_payouts, quote_prices,
                         settle_wholesale)
from .auction import ClearingOutcome, Order, clear_p2p
from .scenario import MarketScenario, perturbed_copy

log = logging.getLogger(__name__)

PROSUMER_FEATURES = ("p_a_b", "p_a_s", "q_tot", "p_avg", "q_cm", "tp")
AGGREGATOR_FEATURES = ("f_mp", "f_ip", "q_agg_sell", "q_agg_buy")
BUYER_REWARD_MODES = ("savings", "literal")


class StepOrderError(RuntimeError):
    """Follower and leader half-steps called out of sequence."""


@dataclass
class EnvConfig:
    initial_delta_b: float = 0.25
    initial_delta_o: float = 0.25
    buyer_reward_mode: str = "savings"
    penalty_sign_mode: str = "compensation"
    capacity_scale: float = 20.0
    cash_scale: float = 1000.0

    def __post_init__(self):
        if self.buyer_reward_mode not in BUYER_REWARD_MODES:
            raise ValueError(f"buyer_reward_mode must be one of {BUYER_REWARD_MODES}")
        if self.penalty_sign_mode not in PENALTY_SIGN_MODES:
            raise ValueError(f"penalty_sign_mode must be one of {PENALTY_SIGN_MODES}")
        if self.capacity_scale <= 0 or self.cash_scale <= 0:
            raise ValueError("observation scales must be positive")


@dataclass
class ProsumerState:
    p_a_b: float = 0.0
    p_a_s: float = 0.0
    q_tot: float = 0.0
    p_avg: float = 0.0
    q_cm: float = 0.0
    tp: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in PROSUMER_FEATURES])


@dataclass
class AggregatorState:
    f_mp: float = 0.0
    f_ip: float = 0.0
    q_agg_sell: float = 0.0
    q_agg_buy: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in AGGREGATOR_FEATURES])


@dataclass
class StepOutcome:
    rewards: dict
    r_ag: float
    prosumer_obs: np.ndarray
    aggregator_obs: np.ndarray
    done: bool
    info: dict = field(default_factory=dict)

    def reward_vector(self, ids) -> np.ndarray:
        return np.array([self.rewards[n] for n in ids])


def _clip(value, lo, hi, what):
    if value < lo or value > hi:
        log.debug("%s=%r outside [%r, %r]; clamped", what, value, lo, hi)
        return min(max(value, lo), hi)
    return value


def decode_prosumer_action(a_p: float, bounds) -> float:
    """Map a normalised action in [-1, 1] affinely onto [p_min, p_max]."""
    a = _clip(float(a_p), -1.0, 1.0, "prosumer action")
    return (a + 1.0) / 2.0 * (bounds.p_max - bounds.p_min) + bounds.p_min


def decode_aggregator_action(a_w: float, a_b: float, a_o: float, bounds) -> tuple[float, float, float]:
    """Return ``(p_a_w, delta_b, delta_o)`` for actions in [0, 1]."""
    a_w = _clip(float(a_w), 0.0, 1.0, "aggregator a_w")
    a_b = _clip(float(a_b), 0.0, 1.0, "aggregator a_b")
    a_o = _clip(float(a_o), 0.0, 1.0, "aggregator a_o")
    p_a_w = bounds.p_ag_min + a_w * (bounds.p_ag_max - bounds.p_ag_min)
    return p_a_w, a_b * bounds.rho_max, a_o * bounds.rho_max


def prosumer_reward(clearing: ClearingOutcome, quote: AggregatorQuote, prosumer,
                    buyer_reward_mode: str = "savings") -> float:
    """P2P gain against the aggregator fallback, minus the missed-opportunity penalty."""
    q = clearing.quantities.get(prosumer)
    if q is None or q == 0:
        return 0.0
    residual = abs(clearing.unmatched[prosumer])
    matched = abs(q) - residual
    price = clearing.prices[prosumer]
    if q > 0:
        base = clearing.rv[prosumer] - matched * quote.p_a_b if matched > 0 else 0.0
        penalty = residual * max(0.0, price - quote.p_a_b)
    else:
        if matched <= 0:
            base = 0.0
        elif buyer_reward_mode == "savings":
            base = matched * quote.p_a_s - clearing.pa[prosumer]
        else:
            base = -clearing.pa[prosumer] - matched * quote.p_a_s
        penalty = residual * max(0.0, quote.p_a_s - price)
    return base - penalty


def aggregator_reward(settlement) -> float:
    return settlement.profit_ta


def normalize_observation(state, bounds, config: EnvConfig) -> np.ndarray:
    """Scale a :class:`ProsumerState` or :class:`AggregatorState` into features."""
    p, cap, cash = bounds.p_max, config.capacity_scale, config.cash_scale
    if isinstance(state, ProsumerState):
        return np.array([state.p_a_b / p, state.p_a_s / p, state.q_tot / cap,
                         state.p_avg / p, state.q_cm / cap, state.tp / cash])
    if isinstance(state, AggregatorState):
        return np.array([state.f_mp / p, state.f_ip / p, state.q_agg_sell / cap, state.q_agg_buy / cap])
    raise TypeError(f"cannot normalise {type(state).__name__}")


class MarketEnv:
    """One-day leader-follower market; not thread-safe, use one per worker."""

    n_prosumer_features = len(PROSUMER_FEATURES)
    n_aggregator_features = len(AGGREGATOR_FEATURES)

    def __init__(self, scenario: MarketScenario, config: EnvConfig | None = None):
        self.base = scenario
        self.config = config or EnvConfig()
        self.bounds = scenario.bounds
        self.ids = scenario.ids
        self.n = scenario.n_prosumers
        self._phase = None
        self.trace = []

    # ----------------------------------------------------------- lifecycle

    def reset(self, rng: np.random.Generator | None = None, perturb: bool = False):
        """Start a day; ``perturb`` draws training noise from ``rng``."""
        if perturb:
            if rng is None:
                raise ValueError("perturb=True needs an rng")
            self.day = perturbed_copy(self.base, rng)
        else:
            self.day = self.base
        self.q = self.day.quantity_matrix()
        self.hour = 0
        self.done = False
        self.tp_prev = np.zeros(self.n)
        self.q_prev = np.zeros(self.n)
        cfg = self.config
        self.delta_b = cfg.initial_delta_b
        self.delta_o = cfg.initial_delta_o
        self.quote = quote_prices(self.day.forecast_mp[0], cfg.initial_delta_b, cfg.initial_delta_o,
                                  self.bounds.rho_max)
        self.agg_state = AggregatorState(self.day.forecast_mp[0], self.day.forecast_ip[0])
        self.clearing = None
        self.trace = []
        self._phase = "followers"
        return self.prosumer_observation(), self.aggregator_observation()

    # -------------------------------------------------------- observation

    def prosumer_states(self) -> list:
        t = min(self.hour, self.day.hours - 1)
        q = self.q[t]
        q_cm = float(q.sum())
        out = []
        for i in range(self.n):
            p_avg = self.tp_prev[i] / self.q_prev[i] if self.q_prev[i] != 0 else 0.0
            out.append(ProsumerState(self.quote.p_a_b, self.quote.p_a_s, float(q[i]), p_avg, q_cm,
                                     float(self.tp_prev[i])))
        return out

    def prosumer_observation(self) -> np.ndarray:
        """``(n_prosumers, 6)`` normalised feature matrix."""
        t = min(self.hour, self.day.hours - 1)
        cfg, p = self.config, self.bounds.p_max
        q = self.q[t]
        with np.errstate(divide="ignore", invalid="ignore"):
            p_avg = np.where(self.q_prev != 0, self.tp_prev / np.where(self.q_prev != 0, self.q_prev, 1.0), 0.0)
        obs = np.empty((self.n, 6))
        obs[:, 0] = self.quote.p_a_b / p
        obs[:, 1] = self.quote.p_a_s / p
        obs[:, 2] = q / cfg.capacity_scale
        obs[:, 3] = p_avg / p
        obs[:, 4] = q.sum() / cfg.capacity_scale
        obs[:, 5] = self.tp_prev / cfg.cash_scale
        return obs

    def aggregator_observation(self) -> np.ndarray:
        return normalize_observation(self.agg_state, self.bounds, self.config)

    # -------------------------------------------------------------- steps

    def step_followers(self, actions) -> np.ndarray:
        """Clear the P2P market for the current hour; returns the partial aggregator observation."""
        if self._phase != "followers":
            raise StepOrderError("step_followers called out of order (reset first, then alternate)")
        actions = np.asarray(actions, dtype=float).reshape(self.n)
        t = self.hour
        prices = [decode_prosumer_action(a, self.bounds) for a in actions]
        orders = [Order(pid, prices[i], self.q[t, i]) for i, pid in enumerate(self.ids)
                  if self.q[t, i] != 0.0]
        self.clearing = clear_p2p(orders, self.bounds)
        self.bid_prices = prices
        self.agg_state = AggregatorState(self.day.forecast_mp[t], self.day.forecast_ip[t],
                                         sum(self.clearing.residual_sell.values()),
                                         sum(self.clearing.residual_buy.values()))
        self._phase = "leader"
        return self.aggregator_observation()

    def step_leader(self, action) -> StepOutcome:
        """Settle the hour with the aggregator's action and move to the next hour."""
        if self._phase != "leader":
            raise StepOrderError("step_leader called before step_followers for this hour")
        a_w, a_b, a_o = np.asarray(action, dtype=float).reshape(3)
        p_a_w, delta_b, delta_o = decode_aggregator_action(a_w, a_b, a_o, self.bounds)
        t = self.hour
        day, cfg = self.day, self.config
        clearing, quote = self.clearing, self.quote
        settlement = settle_wholesale(clearing.residual_buy, clearing.residual_sell, quote, p_a_w,
                                      day.realized_pw[t], day.tariffs, day.penalty_price)
        payouts = final_payouts(clearing, settlement, participants=self.ids,
                                penalty_sign_mode=cfg.penalty_sign_mode)
        rewards = {pid: prosumer_reward(clearing, quote, pid, cfg.buyer_reward_mode) for pid in self.ids}
        r_ag = aggregator_reward(settlement)

        self.trace.append(self._trace_row(t, p_a_w, clearing, settlement, rewards, r_ag))
        self.tp_prev = np.array([payouts[pid].tp for pid in self.ids])
        self.q_prev = self.q[t].copy()
        self.hour = t + 1
        self.done = self.hour >= day.hours
        info = {"clearing": clearing, "settlement": settlement, "payouts": payouts, "quote": quote,
                "prices": self.bid_prices, "p_a_w": p_a_w, "hour": t}
        if not self.done:
            self.delta_b, self.delta_o = delta_b, delta_o
            self.quote = quote_prices(day.forecast_mp[self.hour], delta_b, delta_o, self.bounds.rho_max)
            self.agg_state = AggregatorState(day.forecast_mp[self.hour], day.forecast_ip[self.hour])
            self._phase = "followers"
        else:
            self.agg_state = AggregatorState(day.forecast_mp[t], day.forecast_ip[t])
            self._phase = None
        return StepOutcome(rewards, r_ag, self.prosumer_observation(), self.aggregator_observation(),
                           self.done, info)

    def _trace_row(self, t, p_a_w, clearing, settlement, rewards, r_ag) -> dict:
        row = {
            "hour": t,
            "p_a_b": self.quote.p_a_b,
            "p_a_s": self.quote.p_a_s,
            "p_a_w": p_a_w,
            "f_mp": self.day.forecast_mp[t],
            "p_w": self.day.realized_pw[t],
            "p2p_price": clearing.mean_price(),
            "p2p_volume": clearing.traded_volume,
            "cleared": int(settlement.cleared),
            "r_ag": r_ag,
        }
        for i, pid in enumerate(self.ids):
            row[f"price_{pid}"] = self.bid_prices[i]
        for pid in self.ids:
            row[f"residual_{pid}"] = clearing.unmatched.get(pid, 0.0)
        for pid in self.ids:
            row[f"reward_{pid}"] = rewards[pid]
        return row


def write_episode_trace(trace, fp) -> None:
    if not trace:
        return
    w = csv.DictWriter(fp, fieldnames=list(trace[0]))
    w.writeheader()
    for row in trace:
        w.writerow({k: ("" if isinstance(v, float) and math.isnan(v) else v) for k, v in row.items()})
