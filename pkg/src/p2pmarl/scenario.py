"""Hourly market scenarios: prosumer quantities, wholesale prices, bounds, tariffs.

On disk a scenario is a CSV table plus an INI file::

    hour,prosumer_1,prosumer_2,...,f_mp,f_ip,p_w
    0,-8.5,6.0,...,28.0,26.0,28.0

``f_ip`` and ``p_w`` are optional columns. A missing ``f_ip`` is ``f_mp``
shifted one hour ahead with a terminal value (default: last ``f_mp``); a
missing ``p_w`` is ``f_mp`` plus optional zero-mean Gaussian noise.

The INI file carries ``[scenario]``, ``[bounds]`` and ``[tariff]`` sections;
``data`` in ``[scenario]`` points at the CSV relative to the INI file.
"""
from __future__ import annotations

import configparser
import csv
import io
import math
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import NamedTuple

import numpy as np

HOURS = 24


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class BiddingBounds:
    p_min: float = 0.0
    p_max: float = 200.0
    p_ag_min: float = 0.0
    p_ag_max: float = 100.0
    rho_max: float = 0.5

    def __post_init__(self):
        if not 0 <= self.p_min < self.p_max:
            raise ScenarioError(f"need 0 <= p_min < p_max, got {self.p_min}, {self.p_max}")
        if not 0 <= self.p_ag_min < self.p_ag_max:
            raise ScenarioError(f"need 0 <= p_ag_min < p_ag_max, got {self.p_ag_min}, {self.p_ag_max}")
        if not 0 < self.rho_max < 1:
            raise ScenarioError(f"rho_max must lie in (0, 1), got {self.rho_max}")


@dataclass(frozen=True)
class UtilityTariff:
    utility_sell_price: float = 150.0  # aggregator buys from the utility
    utility_buy_price: float = 10.0  # aggregator sells to the utility

    def __post_init__(self):
        if not self.utility_sell_price >= self.utility_buy_price >= 0:
            raise ScenarioError("need utility_sell_price >= utility_buy_price >= 0")


@dataclass(frozen=True)
class ProsumerProfile:
    id: str
    hourly_quantity: tuple

    def role(self, hour: int) -> int:
        """+1 seller, -1 buyer, 0 idle."""
        q = self.hourly_quantity[hour]
        return (q > 0) - (q < 0)


@dataclass(frozen=True)
class MarketScenario:
    hours: int
    prosumers: tuple
    forecast_mp: tuple
    forecast_ip: tuple
    realized_pw: tuple
    bounds: BiddingBounds = BiddingBounds()
    tariffs: UtilityTariff = UtilityTariff()
    penalty_price: float = 10.0
    train_noise_halfwidth: float = 5.0
    price_noise_halfwidth: float = 0.0
    name: str = "scenario"

    def __post_init__(self):
        for label in ("forecast_mp", "forecast_ip", "realized_pw"):
            series = getattr(self, label)
            if len(series) != self.hours:
                raise ScenarioError(f"{label} has {len(series)} entries, expected {self.hours}")
            if any(not math.isfinite(v) or v < 0 for v in series):
                raise ScenarioError(f"{label} contains a negative or non-finite price")
        for p in self.prosumers:
            if len(p.hourly_quantity) != self.hours:
                raise ScenarioError(
                    f"prosumer {p.id} has {len(p.hourly_quantity)} hourly quantities, expected {self.hours}")
        if len({p.id for p in self.prosumers}) != len(self.prosumers):
            raise ScenarioError("duplicate prosumer ids")
        if self.penalty_price < 0:
            raise ScenarioError("penalty_price must be >= 0")
        if self.train_noise_halfwidth < 0 or self.price_noise_halfwidth < 0:
            raise ScenarioError("noise half-widths must be >= 0")

    @property
    def n_prosumers(self) -> int:
        return len(self.prosumers)

    @property
    def ids(self) -> list:
        return [p.id for p in self.prosumers]

    def quantity_matrix(self) -> np.ndarray:
        """Hours x prosumers array of signed quantities."""
        return np.array([p.hourly_quantity for p in self.prosumers], dtype=float).T.reshape(
            self.hours, self.n_prosumers)


class HourSnapshot(NamedTuple):
    quantities: np.ndarray
    f_mp: float
    f_ip: float
    p_w: float


def hourly_snapshot(scenario: MarketScenario, hour: int) -> HourSnapshot:
    if not 0 <= hour < scenario.hours:
        raise IndexError(f"hour {hour} outside [0, {scenario.hours})")
    q = np.array([p.hourly_quantity[hour] for p in scenario.prosumers], dtype=float)
    q.flags.writeable = False
    return HourSnapshot(q, scenario.forecast_mp[hour], scenario.forecast_ip[hour],
                        scenario.realized_pw[hour])


def perturb_quantities(scenario: MarketScenario, hour: int, rng: np.random.Generator) -> np.ndarray:
    """Shift each quantity by U(-h, h), never letting noise flip a prosumer's role."""
    q = hourly_snapshot(scenario, hour).quantities
    h = scenario.train_noise_halfwidth
    if h == 0:
        return q.copy()
    return clamp_to_roles(q + rng.uniform(-h, h, size=q.shape), q)


def clamp_to_roles(perturbed: np.ndarray, original: np.ndarray) -> np.ndarray:
    sign = np.sign(original)
    return sign * np.maximum(sign * perturbed, 0.0)


def perturbed_copy(scenario: MarketScenario, rng: np.random.Generator) -> MarketScenario:
    """A whole-day training draw: quantities and (optionally) wholesale prices jittered."""
    qs = np.stack([perturb_quantities(scenario, t, rng) for t in range(scenario.hours)])
    prosumers = tuple(ProsumerProfile(p.id, tuple(float(v) for v in qs[:, i]))
                      for i, p in enumerate(scenario.prosumers))
    h = scenario.price_noise_halfwidth
    if h == 0:
        return replace(scenario, prosumers=prosumers)
    shift = rng.uniform(-h, h, size=scenario.hours)
    f_mp = np.maximum(np.asarray(scenario.forecast_mp) + shift, 0.0)
    p_w = np.maximum(np.asarray(scenario.realized_pw) + shift, 0.0)
    f_ip = np.append(f_mp[1:], max(scenario.forecast_ip[-1] + shift[-1], 0.0))
    return replace(scenario, prosumers=prosumers,
                   forecast_mp=tuple(map(float, f_mp)),
                   forecast_ip=tuple(map(float, f_ip)),
                   realized_pw=tuple(map(float, p_w)))


def build_scenario(quantities, forecast_mp, *, ids=None, forecast_ip=None, realized_pw=None,
                   terminal_f_ip=None, pw_noise_std=0.0, pw_noise_seed=0, **kwargs) -> MarketScenario:
    """Assemble a scenario from arrays, filling in ``f_ip``/``p_w`` defaults."""
    q = np.asarray(quantities, dtype=float)
    if q.ndim != 2:
        raise ScenarioError("quantities must be a hours x prosumers matrix")
    hours = q.shape[0]
    f_mp = np.asarray(forecast_mp, dtype=float)
    if f_mp.shape != (hours,):
        raise ScenarioError(f"f_mp has {f_mp.size} entries, expected {hours}")
    if forecast_ip is None:
        terminal = f_mp[-1] if terminal_f_ip is None else float(terminal_f_ip)
        f_ip = np.append(f_mp[1:], terminal)
    else:
        f_ip = np.asarray(forecast_ip, dtype=float)
    if realized_pw is None:
        p_w = f_mp.copy()
        if pw_noise_std > 0:
            p_w = np.maximum(p_w + np.random.default_rng(pw_noise_seed).normal(0, pw_noise_std, hours), 0.0)
    else:
        p_w = np.asarray(realized_pw, dtype=float)
    ids = [str(i + 1) for i in range(q.shape[1])] if ids is None else [str(i) for i in ids]
    prosumers = tuple(ProsumerProfile(pid, tuple(float(v) for v in q[:, i])) for i, pid in enumerate(ids))
    return MarketScenario(hours=hours, prosumers=prosumers,
                          forecast_mp=tuple(map(float, f_mp)), forecast_ip=tuple(map(float, f_ip)),
                          realized_pw=tuple(map(float, p_w)), **kwargs)


# ---------------------------------------------------------------- file I/O

_SCENARIO_KEYS = {
    "penalty_price": float,
    "train_noise_halfwidth": float,
    "price_noise_halfwidth": float,
    "terminal_f_ip": float,
    "pw_noise_std": float,
    "pw_noise_seed": int,
    "hours": int,
}


def _read_csv(text: str, source: str):
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise ScenarioError(f"{source}: empty file") from None
    if not header or header[0] != "hour":
        raise ScenarioError(f"{source}: first column must be 'hour'")
    if "f_mp" not in header:
        raise ScenarioError(f"{source}: missing f_mp column")
    pcols = [i for i, h in enumerate(header) if h.startswith("prosumer_")]
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise ScenarioError(f"{source}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            rows.append([float(c) for c in row])
        except ValueError as exc:
            raise ScenarioError(f"{source}:{lineno}: {exc}") from None
    data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    if not np.array_equal(data[:, 0], np.arange(len(rows))):
        raise ScenarioError(f"{source}: hour column must run 0..{len(rows) - 1}")
    col = {h: data[:, i] for i, h in enumerate(header)}
    return {
        "ids": [header[i][len("prosumer_"):] for i in pcols],
        "quantities": data[:, pcols],
        "f_mp": col["f_mp"],
        "f_ip": col.get("f_ip"),
        "p_w": col.get("p_w"),
    }


def _builtin_path(name: str):
    res = resources.files("p2pmarl") / "data" / f"{name}.ini"
    return res if res.is_file() else None


def load_scenario(path) -> MarketScenario:
    """Load from an INI file, a CSV file (sibling ``<stem>.ini`` optional) or a built-in name."""
    p = Path(path)
    if not p.exists():
        builtin = _builtin_path(str(path))
        if builtin is None:
            raise ScenarioError(f"scenario file not found: {path}")
        ini_text = builtin.read_text()
        csv_lookup = lambda fname: (resources.files("p2pmarl") / "data" / fname).read_text()  # noqa: E731
        name = str(path)
    elif p.suffix.lower() == ".csv":
        ini = p.with_suffix(".ini")
        ini_text = ini.read_text() if ini.exists() else f"[scenario]\ndata = {p.name}\n"
        csv_lookup = lambda fname: (p.parent / fname).read_text()  # noqa: E731
        name = p.stem
    else:
        ini_text = p.read_text()
        csv_lookup = lambda fname: (p.parent / fname).read_text()  # noqa: E731
        name = p.stem

    cfg = configparser.ConfigParser()
    try:
        cfg.read_string(ini_text)
    except configparser.Error as exc:
        raise ScenarioError(f"{path}: {exc}") from None
    sc = dict(cfg["scenario"]) if cfg.has_section("scenario") else {}
    data_name = sc.pop("data", None)
    if data_name is None:
        raise ScenarioError(f"{path}: [scenario] needs a 'data' entry naming the CSV")
    name = sc.pop("name", name)
    opts = {}
    for key, value in sc.items():
        if key not in _SCENARIO_KEYS:
            raise ScenarioError(f"{path}: unknown [scenario] key {key!r}")
        try:
            opts[key] = _SCENARIO_KEYS[key](value)
        except ValueError:
            raise ScenarioError(f"{path}: bad value for {key}: {value!r}") from None
    try:
        bounds = BiddingBounds(**{k: float(v) for k, v in cfg["bounds"].items()}) \
            if cfg.has_section("bounds") else BiddingBounds()
        tariffs = UtilityTariff(**{k: float(v) for k, v in cfg["tariff"].items()}) \
            if cfg.has_section("tariff") else UtilityTariff()
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{path}: {exc}") from None

    try:
        text = csv_lookup(data_name)
    except OSError as exc:
        raise ScenarioError(f"{path}: cannot read data file {data_name}: {exc}") from None
    table = _read_csv(text, data_name)
    hours = opts.pop("hours", HOURS)
    if table["quantities"].shape[0] != hours:
        raise ScenarioError(
            f"{data_name}: {table['quantities'].shape[0]} hourly rows, expected hours={hours}")
    return build_scenario(
        table["quantities"], table["f_mp"], ids=table["ids"],
        forecast_ip=table["f_ip"], realized_pw=table["p_w"],
        terminal_f_ip=opts.pop("terminal_f_ip", None),
        pw_noise_std=opts.pop("pw_noise_std", 0.0), pw_noise_seed=opts.pop("pw_noise_seed", 0),
        bounds=bounds, tariffs=tariffs, name=name, **opts)


def save_scenario(scenario: MarketScenario, path) -> Path:
    """Write ``<path>.ini`` and its CSV sibling; returns the INI path."""
    ini = Path(path).with_suffix(".ini")
    data = ini.with_suffix(".csv")
    ini.parent.mkdir(parents=True, exist_ok=True)
    with open(data, "w", newline="") as fp:
        w = csv.writer(fp)
        w.writerow(["hour"] + [f"prosumer_{i}" for i in scenario.ids] + ["f_mp", "f_ip", "p_w"])
        for t in range(scenario.hours):
            w.writerow([t] + [repr(p.hourly_quantity[t]) for p in scenario.prosumers]
                       + [repr(scenario.forecast_mp[t]), repr(scenario.forecast_ip[t]),
                          repr(scenario.realized_pw[t])])
    cfg = configparser.ConfigParser()
    cfg["scenario"] = {
        "name": scenario.name,
        "data": data.name,
        "hours": str(scenario.hours),
        "penalty_price": repr(scenario.penalty_price),
        "train_noise_halfwidth": repr(scenario.train_noise_halfwidth),
        "price_noise_halfwidth": repr(scenario.price_noise_halfwidth),
    }
    b = scenario.bounds
    cfg["bounds"] = {k: repr(getattr(b, k)) for k in ("p_min", "p_max", "p_ag_min", "p_ag_max", "rho_max")}
    t = scenario.tariffs
    cfg["tariff"] = {"utility_sell_price": repr(t.utility_sell_price),
                     "utility_buy_price": repr(t.utility_buy_price)}
    with open(ini, "w") as fp:
        cfg.write(fp)
    return ini


# ------------------------------------------------------ built-in scenarios

# Diurnal wholesale forecast in $/MWh, overnight trough and evening peak.
DEFAULT_F_MP = (28.0, 26.0, 25.0, 24.0, 25.0, 28.0, 34.0, 40.0, 42.0, 40.0, 38.0, 36.0,
                35.0, 35.0, 36.0, 38.0, 42.0, 48.0, 55.0, 52.0, 46.0, 40.0, 34.0, 30.0)


def _wave(mean, amp, phase):
    t = np.arange(HOURS)
    return np.round(mean + amp * np.sin(2 * np.pi * (t - phase) / HOURS), 1)


def case_one(**kwargs) -> MarketScenario:
    """Fixed roles with mild excess demand: prosumers 1, 3 buy; 2, 4 sell."""
    q = np.column_stack([
        -_wave(9.0, 1.5, 6),
        _wave(6.5, 1.0, 3),
        -_wave(10.5, 2.0, 9),
        _wave(7.0, 1.0, 0),
    ])
    opts = dict(name="case1", price_noise_halfwidth=5.0)
    opts.update(kwargs)
    return build_scenario(q, DEFAULT_F_MP, **opts)


def case_two(**kwargs) -> MarketScenario:
    """Case one with every quantity negated (excess supply)."""
    base = case_one()
    opts = dict(name="case2", price_noise_halfwidth=5.0)
    opts.update(kwargs)
    return build_scenario(-base.quantity_matrix(), DEFAULT_F_MP, **opts)


def case_three(**kwargs) -> MarketScenario:
    """Synthetic PV day: prosumers 1, 2 turn seller around midday (hours 9-13)."""
    t = np.arange(HOURS)
    pv = np.where((t >= 6) & (t <= 18), np.sin(np.pi * (t - 6) / 12.0), 0.0)
    load = np.column_stack([_wave(6.0, 1.5, 12), _wave(5.0, 1.0, 14), _wave(4.0, 1.0, 12),
                            _wave(7.0, 1.5, 13)])
    gen = np.column_stack([12.0 * pv, 11.0 * pv, np.zeros(HOURS), np.zeros(HOURS)])
    q = np.round(gen - load, 1)
    q[(t < 9) | (t > 13), :2] = np.minimum(q[(t < 9) | (t > 13), :2], -0.5)
    opts = dict(name="case3", price_noise_halfwidth=5.0)
    opts.update(kwargs)
    return build_scenario(q, DEFAULT_F_MP, **opts)


def case_ten(**kwargs) -> MarketScenario:
    """Ten fixed-role prosumers, odd ids buy and even ids sell."""
    cols = []
    for i in range(10):
        if i % 2 == 0:
            cols.append(-_wave(4.0 + 0.5 * (i % 4), 1.0, 2 * i))
        else:
            cols.append(_wave(3.5 + 0.4 * (i % 3), 0.8, 2 * i))
    opts = dict(name="case10", price_noise_halfwidth=5.0)
    opts.update(kwargs)
    return build_scenario(np.column_stack(cols), DEFAULT_F_MP, **opts)


BUILTIN = {"case1": case_one, "case2": case_two, "case3": case_three, "case10": case_ten}


def builtin_scenario(name: str, **kwargs) -> MarketScenario:
    try:
        return BUILTIN[name](**kwargs)
    except KeyError:
        raise ScenarioError(f"unknown built-in scenario {name!r}; choose from {sorted(BUILTIN)}") from None
