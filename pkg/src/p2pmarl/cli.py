"""Command-line driver: ``simulate``, ``train``, ``evaluate`` and ``clear``.

Exit codes: 0 success, 1 usage error, 2 bad input data, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

from .aggregator import SettlementError
from .auction import AuctionError, Order, clear_p2p
from .baselines import STRATEGIES, UNIFORM_PRICE_MODES
from .env import EnvConfig
from .marl import CRITIC_MODES, GreedyPolicy, PolicySet, TrainConfig, evaluate, train, write_training_log
from .neural import NumericalError
from .reports import mean_report, write_price_series, write_table
from .scenario import ScenarioError, load_scenario

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

log = logging.getLogger("p2pmarl")


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_tables(reports, out: Path) -> None:
    for kind in ("monetary", "rewards"):
        with open(out / f"{kind}.csv", "w", newline="") as fp:
            write_table(reports, kind, fp)
    for r in reports:
        slug = r.strategy.lower().replace(" ", "_")
        with open(out / f"prices_{slug}.csv", "w", newline="") as fp:
            write_price_series(r, fp)


def cmd_simulate(args) -> int:
    scenario = load_scenario(args.scenario)
    names = list(STRATEGIES) if args.strategy == "all" else [args.strategy]
    reports = [STRATEGIES[n](scenario, uniform_price_mode=args.uniform_price_mode,
                             penalty_sign_mode=args.penalty_sign_mode) for n in names]
    out = _out_dir(args)
    _write_tables(reports, out)
    for r in reports:
        print(f"{r.strategy}: aggregator={r.monetary['Aggregator']:.4f} "
              f"sum_p2p_monetary={r.sum_p2p_monetary:.4f} sum_p2p_reward={r.sum_p2p_reward:.4f}")
    print(f"wrote tables to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    scenario = load_scenario(args.scenario)
    overrides = {"critic_mode": args.critic_mode, "total_timesteps": args.timesteps,
                 "checkpoint_every": args.checkpoint_every}
    if args.config:
        config = TrainConfig.from_ini(args.config, **overrides)
    else:
        config = TrainConfig.from_dict({k: v for k, v in overrides.items() if v is not None})
    config.episode_length = scenario.hours
    out = _out_dir(args)

    def progress(row):
        if row["episode"] % args.log_every == 0:
            log.info("episode %d  timesteps %d  r_ag %.2f  sum_p2p %.2f",
                     row["episode"], row["timesteps"], row["r_ag"], row["sum_p2p"])

    result = train(scenario, config, seed=args.seed, checkpoint_dir=out / "checkpoints", progress=progress)
    ckpt = result.policies.save(out / "checkpoint.npz")
    with open(out / "training_log.csv", "w", newline="") as fp:
        write_training_log(result.log, fp, scenario.ids, config, result.policies.followers.critic_input_dim)
    print(f"episodes={len(result.log)} timesteps={result.env_steps} "
          f"env_ms_per_step={1e3 * result.env_time_per_step:.3f}")
    print(f"wrote {ckpt} and {out / 'training_log.csv'}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    try:
        policies = PolicySet.load(args.checkpoint)
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot load checkpoint {args.checkpoint}: {exc}") from None
    scenario = load_scenario(args.scenario)
    if list(scenario.ids) != list(policies.ids):
        raise DataError(f"checkpoint prosumers {policies.ids} do not match scenario {scenario.ids}")
    env_config = policies.config.env
    runs = evaluate(GreedyPolicy(policies), scenario, args.episodes, seed=args.seed,
                    perturb=args.perturb, env_config=env_config, workers=args.workers,
                    strategy="Trained")
    reports = [mean_report([r for r, _ in runs])]
    if args.baselines:
        reports += [fn(scenario, penalty_sign_mode=env_config.penalty_sign_mode) for fn in STRATEGIES.values()]
    out = _out_dir(args)
    _write_tables(reports, out)
    print(f"Trained over {args.episodes} episode(s): aggregator={reports[0].monetary['Aggregator']:.4f} "
          f"sum_p2p_reward={reports[0].sum_p2p_reward:.4f}")
    print(f"wrote tables to {out}")
    return EXIT_OK


def read_orders(path) -> list:
    """Orders from JSON (list of objects, or ``{"orders": [...]}``) or CSV ``owner,price,quantity``."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    if not text.strip():
        return []
    if p.suffix.lower() == ".json" or text.lstrip()[:1] in "[{":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
        rows = data.get("orders", []) if isinstance(data, dict) else data
        records = [(i, r) for i, r in enumerate(rows, start=1)]
    else:
        reader = csv.DictReader(io.StringIO(text))
        missing = {"owner", "price", "quantity"} - set(reader.fieldnames or ())
        if missing:
            raise DataError(f"{path}: header missing columns {sorted(missing)}")
        # header is line 1
        records = [(reader.line_num, r) for r in reader]
    orders = []
    for row_no, rec in records:
        try:
            orders.append(Order(str(rec["owner"]), float(rec["price"]), float(rec["quantity"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: malformed order at row {row_no}: {exc!s}") from None
    return orders


def cmd_clear(args) -> int:
    orders = read_orders(args.orders)
    outcome = clear_p2p(orders, None)
    lines = [f"orders: {len(orders)}  rounds: {len(outcome.trades)}"]
    for t in outcome.trades:
        fills = " ".join([f"{n}:{q:g}" for n, q in t.buyer_fills.items()]
                         + [f"{n}:{q:g}" for n, q in t.seller_fills.items()])
        lines.append(f"round {t.round}: price={t.clearing_price:g} quantity={t.matched_quantity:g}  {fills}")
    for n, v in outcome.pa.items():
        lines.append(f"buyer {n}: paid={v:g} residual={outcome.residual_buy[n]:g}")
    for n, v in outcome.rv.items():
        lines.append(f"seller {n}: received={v:g} residual={outcome.residual_sell[n]:g}")
    print("\n".join(lines))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="p2pmarl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, scenario=True):
        if scenario:
            p.add_argument("--scenario", required=True, help="scenario .ini/.csv or built-in name (case1, ...)")
        p.add_argument("--out-dir", default="out")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("simulate", help="run a rule-based baseline")
    common(p)
    p.add_argument("--strategy", choices=[*STRATEGIES, "all"], default="all")
    p.add_argument("--uniform-price-mode", choices=UNIFORM_PRICE_MODES, default="midpoint")
    p.add_argument("--penalty-sign-mode", choices=("compensation", "literal"),
                   default=EnvConfig.penalty_sign_mode)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train leader and follower policies")
    common(p)
    p.add_argument("--config", help="INI file with [train] and [env] sections")
    p.add_argument("--critic-mode", choices=CRITIC_MODES)
    p.add_argument("--timesteps", type=int)
    p.add_argument("--checkpoint-every", type=int, help="episodes between intermediate checkpoints")
    p.add_argument("--log-every", type=int, default=100)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="noise-free rollouts of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=1)
    p.add_argument("--perturb", action="store_true", help="jitter quantities and prices per episode")
    p.add_argument("--baselines", action="store_true", help="add RB Agg and RB P2P columns")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("clear", help="clear one order book")
    p.add_argument("orders", help="JSON or CSV order list")
    p.set_defaults(func=cmd_clear)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", 1) < 1:
        parser.error("--workers must be >= 1")
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, ScenarioError, AuctionError, SettlementError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"invalid option: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
