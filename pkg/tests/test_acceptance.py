"""Acceptance criteria 1-9.

Each test records a one-line PASS/FAIL verdict that is printed in the
terminal summary. Criteria 7-9 train for 60,000 timesteps each; trained
checkpoints are cached in the pytest cache keyed by a hash of the package
sources, so set ``P2PMARL_RETRAIN=1`` to force fresh runs.
"""
import hashlib
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

import p2pmarl
from p2pmarl.aggregator import final_payouts, quote_prices, settle_wholesale, system_cash_balance
from p2pmarl.auction import Order, clear_by_rounds, clear_p2p, match_round, sort_books
from p2pmarl.baselines import rb_agg_run, rb_p2p_run
from p2pmarl.marl import (FollowerGroup, GreedyPolicy, LeaderPPO, PolicySet, RandomPolicy, Rollout,
                          TrainConfig, compute_gae, evaluate, train)
from p2pmarl.neural import DenseNet, soft_update
from p2pmarl.scenario import UtilityTariff, builtin_scenario

from conftest import ACCEPTANCE_LINES
from oracles import reference_clear

SEED = 1
EVAL_SEED = 123


def record(number, ok, detail, gated=True):
    verdict = "PASS" if ok else ("FAIL" if gated else "FAIL (reported, not gated)")
    line = f"criterion {number}: {verdict}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def random_instance(rng):
    n = int(rng.integers(1, 7))
    out = []
    for i in range(n):
        price = float(rng.integers(0, 41)) * 5.0
        qty = float(rng.integers(1, 21)) * 0.5
        out.append(Order(f"p{i}", price, qty if rng.uniform() < 0.5 else -qty))
    return out


def corpus(n=10_000, seed=2024):
    rng = np.random.default_rng(seed)
    return [random_instance(rng) for _ in range(n)]


# ------------------------------------------------------------ 1 and 2

def test_criterion_1_auction_matches_reference():
    start = time.perf_counter()
    worst = 0.0
    mismatched = 0
    for orders in corpus():
        out = clear_p2p(orders)
        ref = reference_clear([(o.owner, o.price, o.quantity) for o in orders])
        if len(out.trades) != len(ref["rounds"]) or set(out.pa) != set(ref["pa"]) or set(out.rv) != set(ref["rv"]):
            mismatched += 1
            continue
        diffs = [abs(t.clearing_price - p) for t, (p, _) in zip(out.trades, ref["rounds"])]
        diffs += [abs(t.matched_quantity - q) for t, (_, q) in zip(out.trades, ref["rounds"])]
        diffs += [abs(out.pa[n] - ref["pa"][n]) for n in out.pa]
        diffs += [abs(out.rv[n] - ref["rv"][n]) for n in out.rv]
        diffs += [abs(out.unmatched[n] - ref["residual"][n]) for n in out.unmatched]
        worst = max([worst, *diffs])
    elapsed = time.perf_counter() - start
    ok = mismatched == 0 and worst <= 1e-9 and elapsed < 60
    record(1, ok, f"10000 instances, structural mismatches={mismatched}, max abs diff={worst:.2e}, "
                  f"{elapsed:.1f}s (< 60s)")
    assert mismatched == 0
    assert worst <= 1e-9
    assert elapsed < 60


def check_invariants(orders, tol=1e-9):
    """Conservation, budget balance, individual rationality, termination bound, monotone frontier."""
    by_owner = {o.owner: o for o in orders}
    out = clear_p2p(orders)
    for t in out.trades:
        assert abs(sum(t.buyer_fills.values()) - t.matched_quantity) <= tol
        assert abs(sum(t.seller_fills.values()) - t.matched_quantity) <= tol
        assert all(t.clearing_price <= by_owner[n].price for n in t.buyer_fills)
        assert all(t.clearing_price >= by_owner[n].price for n in t.seller_fills)
    for n, o in by_owner.items():
        assert abs(out.matched[n] + abs(out.unmatched[n]) - abs(o.quantity)) <= tol
        assert out.matched[n] >= -tol
    assert abs(sum(out.pa.values()) - sum(out.rv.values())) <= tol
    assert len(out.trades) <= len(orders)
    books = sort_books(orders)
    best_bid, best_off = math.inf, -math.inf
    while books:
        assert books.bids[0].price <= best_bid and books.offers[0].price >= best_off
        best_bid, best_off = books.bids[0].price, books.offers[0].price
        trade, books = match_round(books)
        if trade is None:
            break
    slow = clear_by_rounds(orders)
    assert all(abs(slow.unmatched[n] - out.unmatched[n]) <= tol for n in out.unmatched)


def test_criterion_2_auction_invariants():
    worked = [Order("b1", 50, -10), Order("b2", 40, -5), Order("o1", 30, 8), Order("o2", 45, 10)]
    out = clear_p2p(worked)
    worked_ok = (out.pa["b1"] == 415.0 and out.rv["o1"] == 320.0 and out.rv["o2"] == 95.0
                 and out.residual_buy["b2"] == -5.0 and out.residual_sell["o2"] == 8.0)
    failures = 0
    for orders in [worked, *corpus(seed=7)]:
        try:
            check_invariants(orders)
        except AssertionError:
            failures += 1
    record(2, worked_ok and failures == 0,
           f"worked example PA_b1=415 RV_o1=320 RV_o2=95: {worked_ok}; invariant failures on 10001 books: {failures}")
    assert worked_ok and failures == 0


# ------------------------------------------------------------------- 3

def test_criterion_3_settlement_accounting():
    rng = np.random.default_rng(33)
    tariff = UtilityTariff(150.0, 20.0)
    worst_ta = worst_cash = 0.0
    failed_bids = 0
    for _ in range(1000):
        orders = [Order(f"p{i}", rng.uniform(0, 200), rng.choice([-1, 1]) * rng.uniform(0.1, 30))
                  for i in range(int(rng.integers(1, 9)))]
        quote = quote_prices(rng.uniform(5, 100), rng.uniform(0, 0.5), rng.uniform(0, 0.5), 0.5)
        c = clear_p2p(orders)
        s = settle_wholesale(c.residual_buy, c.residual_sell, quote, rng.uniform(0, 100), rng.uniform(0, 100),
                             tariff, rng.uniform(0, 20))
        failed_bids += not s.cleared
        # aggregator income on residuals plus the external leg less penalties paid out
        ta = (sum(-q * quote.p_a_s for q in c.residual_buy.values())
              - sum(q * quote.p_a_b for q in c.residual_sell.values())
              + s.external_cash - s.total_penalty)
        worst_ta = max(worst_ta, abs(ta - s.profit_ta))
        worst_cash = max(worst_cash, abs(system_cash_balance(c, s, final_payouts(c, s))))
    ok = worst_ta <= 1e-6 and worst_cash <= 1e-6
    record(3, ok, f"1000 hours ({failed_bids} failed wholesale bids): max |TA - identity|={worst_ta:.2e}, "
                  f"max |system cash|={worst_cash:.2e}")
    assert ok


# ------------------------------------------------------------------- 4

def test_criterion_4_rb_agg_closed_form():
    sc = builtin_scenario("case1")
    assert np.array_equal(sc.forecast_mp, sc.realized_pw)
    q = sc.quantity_matrix()
    rho = sc.bounds.rho_max
    closed = float(sum(rho * sc.realized_pw[t] * np.abs(q[t]).sum() for t in range(sc.hours)))
    r = rb_agg_run(sc)
    err = abs(r.monetary["Aggregator"] - closed)
    signs = r.rewards["Aggregator"] > 0 and all(r.rewards[n] <= 0 for n in sc.ids)
    record(4, err <= 1e-6 and signs, f"profit={r.monetary['Aggregator']:.4f} closed form={closed:.4f} "
                                     f"(|diff|={err:.1e}); aggregator reward > 0, prosumer rewards <= 0: {signs}")
    assert err <= 1e-6 and signs


# ------------------------------------------------------------------- 5

def _shapes():
    cfg = TrainConfig()
    h = list(cfg.hidden)
    n = 4
    return {
        "follower actor": (dict(sizes=[10, *h, 1], output="tanh", stack=n, final_scale=0.1), 10),
        "lsd critic": (dict(sizes=[11, *h, 1], output="linear", stack=n), 11),
        "centralized critic": (dict(sizes=[n * 6 + 4 + n, *h, 1], output="linear", stack=n), n * 6 + 4 + n),
        "leader policy": (dict(sizes=[4, *h, 3], output="linear", final_scale=0.1, output_bias=0.5), 4),
        "leader value": (dict(sizes=[4, *h, 1], output="linear"), 4),
    }


def _relu_pattern(net, x):
    _, (inputs, _) = net.forward(x)
    return np.concatenate([(a > 0).ravel() for a in inputs[1:]])


def _central(net, x, dy, shift, h):
    """Central difference of sum(net(x) * dy) along ``shift``; None if a ReLU flips between the probes."""
    x_up = shift(+h)
    up, pat_up = float(np.sum(net(x_up) * dy)), _relu_pattern(net, x_up)
    x_down = shift(-2 * h)
    down, pat_down = float(np.sum(net(x_down) * dy)), _relu_pattern(net, x_down)
    shift(+h)
    if not np.array_equal(pat_up, pat_down):
        return None
    return (up - down) / (2 * h)


def _grad_rel_err(net, x, dy, rng, coords=6, h=1e-5):
    """Worst relative error over a random parameter direction, sampled coordinates and an input direction."""
    _, cache = net.forward(x)
    grads, dx = net.backward(cache, dy)
    checks = []

    dirs = [rng.normal(size=p.shape) for p in net.params]

    def along(k):
        for p, d in zip(net.params, dirs):
            p += k * d
        return x

    checks.append((sum(float(np.sum(g * d)) for g, d in zip(grads, dirs)), _central(net, x, dy, along, h)))

    for p, g in zip(net.params, grads):
        for _ in range(coords):
            i = tuple(int(rng.integers(s)) for s in p.shape)

            def coord(k, p=p, i=i):
                p[i] += k
                return x

            checks.append((g[i], _central(net, x, dy, coord, h)))

    d = rng.normal(size=x.shape)
    offset = [0.0]

    def move(k):
        offset[0] += k
        return x + offset[0] * d

    checks.append((float(np.sum(dx * d)), _central(net, x, dy, move, h)))
    done = [(a, n) for a, n in checks if n is not None]
    return max(abs(a - n) / max(abs(a) + abs(n), 1e-8) for a, n in done), len(checks) - len(done)


def test_criterion_5_gradient_correctness():
    rng = np.random.default_rng(55)
    start = time.perf_counter()
    worst = {}
    skipped = 0
    for name, (kw, in_dim) in _shapes().items():
        worst[name] = 0.0
        for _ in range(100):
            net = DenseNet(rng=rng, **kw)
            lead = () if kw.get("stack") is None else (kw["stack"],)
            x = rng.normal(size=lead + (8, in_dim))
            dy = rng.normal(size=lead + (8, kw["sizes"][-1]))
            err, kinks = _grad_rel_err(net, x, dy, rng)
            worst[name] = max(worst[name], err)
            skipped += kinks
    elapsed = time.perf_counter() - start
    top = max(worst.values())
    ok = top < 1e-4 and elapsed < 30
    record(5, ok, f"5 shapes x 100 nets, max rel err={top:.1e} (< 1e-4), {skipped} probes straddling a ReLU "
                  f"kink skipped, {elapsed:.1f}s (< 30s)")
    assert top < 1e-4 and elapsed < 30


# ------------------------------------------------------------------- 6

def test_criterion_6_algorithmic_identities():
    rng = np.random.default_rng(66)
    results = {}

    leader = LeaderPPO(4, TrainConfig(leader_batch_size=32), rng)
    ro = Rollout()
    for t in range(96):
        s = rng.normal(size=4)
        _, raw, logp, v = leader.act(s, rng)
        ro.add(s, raw, logp, rng.normal(), v, t % 24 == 23)
    dev = leader.update(ro, 0.0, rng)["first_ratio_max_dev"]
    results["ppo ratio-of-one"] = dev < 1e-12

    online, target = DenseNet((5, 8, 2), rng=rng), DenseNet((5, 8, 2), rng=rng)
    comp_ok = True
    for t1, t2 in rng.uniform(0, 1, (20, 2)):
        a, b = target.copy(), target.copy()
        soft_update(soft_update(a, online, t1), online, t2)
        soft_update(b, online, 1 - (1 - t1) * (1 - t2))
        comp_ok &= all(np.allclose(x, y, atol=1e-12) for x, y in zip(a.params, b.params))
    results["soft-update composition"] = comp_ok

    r, v = rng.normal(size=30), rng.normal(size=30)
    d = np.zeros(30)
    d[[9, 19]] = 1.0
    gamma, last = 0.9, 0.4
    nxt = np.append(v[1:], last) * (1 - d)
    adv0, _ = compute_gae(r, v, d, last, gamma, 0.0)
    adv1, _ = compute_gae(r, v, d, last, gamma, 1.0)
    mc = np.zeros(30)
    acc = last
    for t in range(29, -1, -1):
        acc = r[t] + gamma * acc * (1 - d[t])
        mc[t] = acc
    results["gae lambda=0"] = np.allclose(adv0, r + gamma * nxt - v, atol=1e-12)
    results["gae lambda=1"] = np.allclose(adv1, mc - v, atol=1e-12)

    g = FollowerGroup(3, 6, 4, TrainConfig(), rng)
    batch = {"obs": rng.normal(size=(16, 3, 6)), "act": rng.uniform(-1, 1, (16, 3)), "rew": rng.normal(size=(16, 3)),
             "next_obs": rng.normal(size=(16, 3, 6)), "agg": rng.normal(size=(16, 4)),
             "next_agg": rng.normal(size=(16, 4)), "done": np.ones(16)}
    term = np.array_equal(g.critic_targets(batch, 0.95), batch["rew"].T)
    batch["done"][:] = 0.0
    y = g.critic_targets(batch, 0.95)
    boot = not np.allclose(y, batch["rew"].T)
    results["terminal-bootstrap targets"] = term and boot

    ok = all(results.values())
    record(6, ok, ", ".join(f"{k}: {'ok' if v else 'FAILED'}" for k, v in results.items()))
    assert ok, results


# -------------------------------------------------------------- 7 to 9

def _source_hash():
    h = hashlib.sha256()
    for p in sorted(Path(p2pmarl.__file__).parent.rglob("*")):
        if p.suffix in (".py", ".ini", ".csv"):
            h.update(p.read_bytes())
    return h.hexdigest()[:16]


_TRAINED = {}


def trained(request, name, seed=SEED):
    """Train (or load a cached run of) the default 60,000-step configuration."""
    if name in _TRAINED:
        return _TRAINED[name]
    sc = builtin_scenario(name)
    config = TrainConfig()
    cache = Path(request.config.cache.mkdir("p2pmarl-acceptance"))
    key = hashlib.sha256(json.dumps([name, seed, config.to_dict(), _source_hash()], sort_keys=True).encode())
    stem = cache / f"{name}_{seed}_{key.hexdigest()[:16]}"
    meta_path = stem.with_suffix(".json")
    if meta_path.exists() and not os.environ.get("P2PMARL_RETRAIN"):
        meta = json.loads(meta_path.read_text())
        policies = PolicySet.load(stem.with_suffix(".npz"))
    else:
        start = time.perf_counter()
        res = train(sc, config, seed=seed)
        wall = time.perf_counter() - start
        tail = res.log[20:]
        finite = all(math.isfinite(v) for row in tail for v in row.values())
        finite &= all(np.all(np.isfinite(p)) for net in (*res.policies.followers.networks().values(),
                                                          *res.policies.leader.networks().values())
                      for p in net.params)
        meta = {"wall": wall, "env_time_per_step": res.env_time_per_step, "env_steps": res.env_steps,
                "episodes": len(res.log), "finite": bool(finite)}
        res.policies.save(stem.with_suffix(".npz"))
        meta_path.write_text(json.dumps(meta))
        policies = res.policies
    _TRAINED[name] = (sc, policies, meta)
    return _TRAINED[name]


@pytest.mark.slow
def test_criterion_7_training_efficacy(request):
    sc, policies, meta = trained(request, "case1")
    tr = np.array([r.sum_p2p_reward for r, _ in evaluate(GreedyPolicy(policies), sc, 50, seed=EVAL_SEED,
                                                          perturb=True)])
    rd = np.array([r.sum_p2p_reward for r, _ in evaluate(RandomPolicy(sc.n_prosumers), sc, 50, seed=EVAL_SEED,
                                                          perturb=True)])
    rb = rb_p2p_run(sc).sum_p2p_reward
    margin = (tr.mean() - rd.mean()) / rd.std()
    ratio = tr.mean() / rb
    ok_a, ok_b = margin >= 3.0, 0.5 <= ratio <= 1.5
    record(7, ok_a and ok_b and meta["wall"] < 1800,
           f"trained Sum P2P {tr.mean():.1f}+-{tr.std():.1f} vs random {rd.mean():.1f}+-{rd.std():.1f} "
           f"({margin:.1f} random std above, need >= 3); ratio to RB P2P {rb:.1f} = {ratio:.2f} (need [0.5, 1.5]); "
           f"train wall {meta['wall']:.0f}s (< 1800s), seed {SEED}")
    assert meta["episodes"] == 2500
    assert ok_a and ok_b
    assert meta["wall"] < 1800


def _directionality(sc, policies):
    (report, _), = evaluate(GreedyPolicy(policies), sc, 1, seed=0, perturb=False)
    p = report.settling_prices()
    rb = rb_p2p_run(sc).settling_prices()
    traded = ~np.isnan(p)
    lo = np.array([h["p_a_b"] for h in report.hourly])
    hi = np.array([h["p_a_s"] for h in report.hourly])
    inside = bool(np.all((p[traded] >= lo[traded] - 1.0) & (p[traded] <= hi[traded] + 1.0)))
    mean_tr = float(np.mean(p[traded])) if traded.any() else math.nan
    mean_rb = float(np.mean(rb[traded])) if traded.any() else math.nan
    return mean_tr, mean_rb, inside, int(traded.sum())


@pytest.mark.slow
def test_criterion_8_market_power_directionality(request):
    demand_sc, demand_pol, _ = trained(request, "case1")
    supply_sc, supply_pol, _ = trained(request, "case2")
    d_tr, d_rb, d_in, d_n = _directionality(demand_sc, demand_pol)
    s_tr, s_rb, s_in, s_n = _directionality(supply_sc, supply_pol)
    ok = d_tr >= d_rb and s_tr <= s_rb and d_in and s_in
    record(8, ok, f"excess demand: trained mean price {d_tr:.2f} vs RB P2P {d_rb:.2f} over {d_n} traded hours; "
                  f"excess supply: {s_tr:.2f} vs {s_rb:.2f} over {s_n} hours; inside quote corridor +-1: "
                  f"{d_in and s_in}", gated=False)
    # soft criterion: only the evaluation itself must produce usable prices
    assert d_n > 0 and s_n > 0


@pytest.mark.slow
def test_criterion_9_scalability(request):
    sc, policies, meta = trained(request, "case10")
    assert sc.n_prosumers == 10
    ms = 1e3 * meta["env_time_per_step"]
    ok = meta["env_steps"] == 60_000 and meta["finite"] and ms < 5.0
    record(9, ok, f"10 prosumers, {meta['env_steps']} timesteps, all values finite: {meta['finite']}, "
                  f"env step {ms:.3f} ms (< 5 ms), train wall {meta['wall']:.0f}s")
    assert ok
