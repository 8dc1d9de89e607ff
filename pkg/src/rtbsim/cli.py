"""Batch orchestration: simulate synthetic markets, fit models from logs,
and evaluate fitted models.

    rtbsim simulate --config cfg.json --seed 42 --out results/
    rtbsim fit      --config cfg.json --seed 42 --out results/
    rtbsim evaluate --config cfg.json --seed 42 --out results/

Every command is a pure function of (config, input files, seed): repeated
runs produce byte-identical outputs, figures included. Exit codes: 0
success, 2 config error, 3 data error. The RTBSIM_OUT environment variable
overrides the output directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional

import numpy as np

from . import dataio, report, sim
from .bidding import BiddingError
from .attribution import (
    ChannelStats,
    coalition_values,
    heuristic_credit,
    shao_value,
    shapley_values,
)
from .core import BidLogRecord
from .landscape import (
    LandscapeError,
    WinFunction,
    fit_censored_regression,
    fit_lognormal_sample,
)
from .response import (
    FtrlState,
    LinearModel,
    ResponseError,
    _ftrl_to_json,
    auc,
    eta_schedule,
    ftrl_step,
    gbdt_fit,
    gbdt_to_json,
    load_response_model,
    log_loss,
    lr_predict,
    lr_sgd_step,
    model_predict,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3

CONFIG_SCHEMA = """\
rtbsim config schema (JSON)

simulate:
  {
    "command": "simulate",
    "market": {
      "volume": <int>, "slots": <int, default 24>,
      "auction": "second" | "first",
      "floor_hard": <ticks, default 0>, "floor_soft": <ticks, optional>,
      "price": {"kind": "uniform", "high": <ticks>}
               | {"kind": "lognormal", "mu": <float>, "sigma": <float>}
               | {"kind": "heavy_tail", "l": <ticks>, "cap": <ticks>}
               | {"kind": "empirical", "samples": [<ticks>...]},
      "ctr": {"kind": "beta", "a": <float>, "b": <float>, "scale": <float>}
             | {"kind": "uniform", "low": <float>, "high": <float>}
    },
    "calibration_volume": <int, optional>,
    "campaigns": [
      {
        "name": <str>, "budget": <ticks>, "click_value": <ticks>,
        "strategy": {"kind": "truthful"}
                    | {"kind": "linear", "phi": <float> | "auto"}
                    | {"kind": "ortb1", "lam": <float> | "auto", "l": <float> | "auto"}
                    | {"kind": "ortb2", "lam": <float> | "auto"},
        "pacing": {"kind": "none"}
                  | {"kind": "throttle", "initial_rate": <0..1>}
                  | {"kind": "pid", "reference_ecpc": <ticks>, "kp": <f>, "ki": <f>,
                     "kd": <f>, "integral_cap": <f>}
      }, ...
    ]
  }

fit:
  {
    "command": "fit",
    "task": "landscape" | "response" | "attribution",
    "data": <path to canonical bid log / touchpoint path log>,
    "model": landscape: {"kind": "kaplan_meier" | "counting" | "lognormal_mixture"
                         | "censored_linear", ...}
             response:  {"kind": "lr" | "ftrl" | "gbdt", "encoder_bits": <16..28>,
                         "epochs": <int>, "eta": <float>, "lam": <float>, ...}
             attribution: {"models": ["last", "first", "linear", "time_decay",
                           "position", "shapley", "shao"]}
  }

evaluate:
  {
    "command": "evaluate",
    "model": <path to fitted response model JSON>,
    "data": <path to canonical bid log with click labels>
  }
"""


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _load_config(path: str) -> dict:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}")


def _json_dump(payload, path: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _records_to_bidlog(records) -> list[BidLogRecord]:
    out = []
    for r in records:
        if r.won:
            out.append(BidLogRecord(bid=r.bid, won=True, market_price=r.market_price, label=r.click))
        else:
            out.append(BidLogRecord(bid=r.bid, won=False))
    return out


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def cmd_simulate(config: dict, seed: int, out_dir: str) -> int:
    if "market" not in config or "campaigns" not in config:
        raise ConfigError("simulate config needs 'market' and 'campaigns'")
    if not config["campaigns"]:
        raise ConfigError("simulate config needs at least one campaign")
    try:
        results = sim.simulate(config, seed)
    except (sim.SimError, BiddingError, KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad simulate config: {e}")

    metrics = {name: out.metrics.to_dict() for name, out in results.items()}
    for name, out in results.items():
        metrics[name]["expected_clicks"] = out.expected_clicks
        metrics[name]["budget_exhausted_slot"] = out.budget_exhausted_slot
    _json_dump(
        {"format_version": 1, "seed": seed, "campaigns": metrics},
        os.path.join(out_dir, "metrics.json"),
    )

    slots_path = os.path.join(out_dir, "slots.csv")
    os.makedirs(out_dir, exist_ok=True)
    with open(slots_path, "w", encoding="utf-8") as fh:
        fh.write("campaign,slot,requests,entered,wins,spend,clicks,expected_clicks,pacing_rate,bid_scale\n")
        for name in sorted(results):
            for row in results[name].slot_rows:
                fh.write(
                    f"{row.campaign},{row.slot},{row.requests},{row.entered},{row.wins},"
                    f"{row.spend},{row.clicks},{row.expected_clicks:.6f},"
                    f"{row.pacing_rate:.6f},{row.bid_scale:.6f}\n"
                )

    spend_series = {
        name: [row.spend for row in out.slot_rows] for name, out in results.items()
    }
    report.plot_slot_spend(spend_series, os.path.join(out_dir, "figures", "spend_per_slot.png"))
    report.plot_cumulative_spend(
        spend_series, os.path.join(out_dir, "figures", "cumulative_spend.png")
    )
    print(f"simulated {len(results)} campaign(s) -> {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


def cmd_fit(config: dict, seed: int, out_dir: str) -> int:
    task = config.get("task")
    if task not in ("landscape", "response", "attribution"):
        raise ConfigError(f"unknown fit task {task!r}")
    data_path = config.get("data")
    if not data_path or not os.path.exists(data_path):
        raise ConfigError(f"data file not found: {data_path!r}")
    model_spec = config.get("model", {})
    os.makedirs(out_dir, exist_ok=True)
    if task == "landscape":
        return _fit_landscape(model_spec, data_path, out_dir)
    if task == "response":
        return _fit_response(model_spec, data_path, seed, out_dir)
    return _fit_attribution(model_spec, data_path, seed, out_dir)


def _fit_landscape(spec: dict, data_path: str, out_dir: str) -> int:
    records, errors = dataio.read_log(data_path)
    if not records:
        raise DataError("no parseable records in data file")
    logs = _records_to_bidlog(records)
    kind = spec.get("kind", "kaplan_meier")
    bids = sorted({int(r.bid) for r in logs})
    try:
        if kind == "kaplan_meier":
            win = WinFunction.kaplan_meier(logs)
        elif kind == "counting":
            win = WinFunction.counting(logs)
        elif kind == "lognormal_mixture":
            prices = [float(r.market_price) for r in logs if r.won]
            win = WinFunction.lognormal_mixture([fit_lognormal_sample(prices)])
        elif kind == "censored_linear":
            sigma = float(spec.get("sigma", 10.0))
            won = [(np.ones(1), float(r.market_price)) for r in logs if r.won]
            lost = [(np.ones(1), float(r.bid)) for r in logs if not r.won]
            fit = fit_censored_regression(won, lost, sigma)
            ref = np.ones((1, 1))
            win = WinFunction.censored_linear(fit.beta, sigma, ref)
            _write_loss_csv(fit.nll_history, os.path.join(out_dir, "loss_curve.csv"))
            report.plot_loss_curve(
                fit.nll_history, os.path.join(out_dir, "figures", "loss_curve.png"), "censored NLL"
            )
        else:
            raise ConfigError(f"unknown landscape model kind {kind!r}")
    except LandscapeError as e:
        raise DataError(str(e))
    with open(os.path.join(out_dir, "model.json"), "w", encoding="utf-8") as fh:
        fh.write(win.to_json() + "\n")
    grid = bids + [max(bids) + 1] if bids else [1]
    curve = [(float(b), win(b)) for b in grid]
    curves = {kind: curve}
    if kind == "kaplan_meier":
        counting = WinFunction.counting(logs)
        curves["counting"] = [(float(b), counting(b)) for b in grid]
    report.plot_win_curves(curves, os.path.join(out_dir, "figures", "win_curve.png"))
    with open(os.path.join(out_dir, "win_curve.csv"), "w", encoding="utf-8") as fh:
        fh.write("bid," + ",".join(sorted(curves)) + "\n")
        for i, b in enumerate(grid):
            row = [f"{float(b):.1f}"] + [f"{curves[name][i][1]:.9f}" for name in sorted(curves)]
            fh.write(",".join(row) + "\n")
    print(f"fitted landscape model '{kind}' on {len(logs)} records -> {out_dir}")
    return EXIT_OK


def _fit_response(spec: dict, data_path: str, seed: int, out_dir: str) -> int:
    records, _ = dataio.read_log(data_path)
    labeled = [r for r in records if r.won and r.click is not None]
    if not labeled:
        raise DataError("no labeled (won, click) records in data file")
    bits = int(spec.get("encoder_bits", 16))
    encoder_cfg = dataio.EncoderConfig(mode="hashed", bits=bits)
    encoder = dataio.Encoder(encoder_cfg)
    data = [(encoder.encode(r.features), int(r.click)) for r in labeled]
    kind = spec.get("kind", "lr")
    epochs = int(spec.get("epochs", 5))
    losses: list[float] = []
    if kind == "lr":
        model = LinearModel.zeros(encoder.dimension, lam=float(spec.get("lam", 0.0)))
        eta0 = float(spec.get("eta", 0.5))
        t = 0
        for _ in range(epochs):
            for x, y in data:
                t += 1
                lr_sgd_step(model, x, y, eta_schedule(eta0, t))
            losses.append(log_loss([y for _, y in data], [lr_predict(model, x) for x, _ in data]))
        payload = model.to_json()
    elif kind == "ftrl":
        state = FtrlState(
            lam1=float(spec.get("lam1", 1.0)),
            alpha=float(spec.get("alpha", 0.1)),
            beta=float(spec.get("beta", 1.0)),
        )
        for _ in range(epochs):
            for x, y in data:
                ftrl_step(state, x, y)
            losses.append(
                log_loss(
                    [y for _, y in data],
                    [model_predict(state, x) for x, _ in data],
                )
            )
        payload = _ftrl_to_json(state, encoder.dimension)
    elif kind == "gbdt":
        model = gbdt_fit(
            [(x, float(y)) for x, y in data],
            k=int(spec.get("rounds", 10)),
            gamma=float(spec.get("gamma", 0.0)),
            lam=float(spec.get("lam", 1.0)),
            loss="logistic",
            max_depth=int(spec.get("max_depth", 3)),
        )
        losses = model.train_losses
        payload = gbdt_to_json(model)
    else:
        raise ConfigError(f"unknown response model kind {kind!r}")
    with open(os.path.join(out_dir, "model.json"), "w", encoding="utf-8") as fh:
        fh.write(payload + "\n")
    _write_loss_csv(losses, os.path.join(out_dir, "loss_curve.csv"))
    report.plot_loss_curve(losses, os.path.join(out_dir, "figures", "loss_curve.png"))
    print(f"fitted response model '{kind}' on {len(data)} records -> {out_dir}")
    return EXIT_OK


def _fit_attribution(spec: dict, data_path: str, seed: int, out_dir: str) -> int:
    rows, errors = dataio.read_paths(data_path)
    paths = [tp for _, tp in rows]
    if not paths:
        raise DataError("no parseable paths in data file")
    models = spec.get("models", ["last", "linear", "time_decay", "position", "shapley", "shao"])
    channels = sorted({c for p in paths for c in p.channel_set})
    per_model: dict[str, dict[str, float]] = {}
    heuristics = {"last", "first", "linear", "time_decay", "position"}
    for model in models:
        if model in heuristics:
            credit: dict[str, float] = {c: 0.0 for c in channels}
            n_conv = 0
            for p in paths:
                if not p.converted:
                    continue
                n_conv += 1
                weights = heuristic_credit(p, model)
                for (c, _), w in zip(p.events, weights):
                    credit[c] += w
            per_model[model] = (
                {c: v / n_conv for c, v in credit.items()} if n_conv else credit
            )
        elif model == "shapley":
            values = coalition_values(paths)
            per_model[model] = shapley_values(values, channels)
        elif model == "shao":
            stats = ChannelStats.from_paths(paths)
            per_model[model] = {c: shao_value(stats, c) for c in channels}
        else:
            raise ConfigError(f"unknown attribution model {model!r}")
    csv_path = os.path.join(out_dir, "attribution.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("channel,model,credit\n")
        for model in sorted(per_model):
            for c in channels:
                fh.write(f"{c},{model},{per_model[model].get(c, 0.0):.9f}\n")
    report.plot_attribution(per_model, os.path.join(out_dir, "figures", "attribution.png"))
    print(f"attributed {len(paths)} paths across {len(channels)} channels -> {out_dir}")
    return EXIT_OK


def _write_loss_csv(losses, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iteration,loss\n")
        for i, v in enumerate(losses):
            fh.write(f"{i},{v:.9f}\n")


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def cmd_evaluate(config: dict, seed: int, out_dir: str) -> int:
    model_path = config.get("model")
    data_path = config.get("data")
    if not model_path or not os.path.exists(model_path):
        raise ConfigError(f"model file not found: {model_path!r}")
    if not data_path or not os.path.exists(data_path):
        raise ConfigError(f"data file not found: {data_path!r}")
    with open(model_path, "r", encoding="utf-8") as fh:
        try:
            model = load_response_model(fh.read())
        except (ResponseError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot load response model: {e}")
    records, _ = dataio.read_log(data_path)
    labeled = [r for r in records if r.won and r.click is not None]
    if not labeled:
        raise DataError("no labeled records to evaluate on")
    bits = int(config.get("encoder_bits", 16))
    encoder = dataio.Encoder(dataio.EncoderConfig(mode="hashed", bits=bits))
    ys = [int(r.click) for r in labeled]
    ps = [model_predict(model, encoder.encode(r.features)) for r in labeled]
    out = {"format_version": 1, "records": len(labeled), "log_loss": log_loss(ys, ps)}
    try:
        out["auc"] = auc(ys, ps)
    except ResponseError:
        out["auc"] = None  # single-class data
    _json_dump(out, os.path.join(out_dir, "evaluation.json"))
    print(f"evaluated {len(labeled)} records -> {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rtbsim", description=__doc__)
    parser.add_argument("--print-schema", action="store_true", help="print the config schema and exit")
    sub = parser.add_subparsers(dest="command")
    for name in ("simulate", "fit", "evaluate"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default="out")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_schema:
        print(CONFIG_SCHEMA)
        return EXIT_OK
    if not args.command:
        parser.print_usage()
        return EXIT_CONFIG
    out_dir = os.environ.get("RTBSIM_OUT", args.out)
    try:
        config = _load_config(args.config)
        seed = args.seed if args.seed is not None else config.get("seed")
        if seed is None:
            raise ConfigError("a seed is mandatory (config 'seed' or --seed)")
        seed = int(seed)
        if args.command == "simulate":
            return cmd_simulate(config, seed, out_dir)
        if args.command == "fit":
            return cmd_fit(config, seed, out_dir)
        return cmd_evaluate(config, seed, out_dir)
    except ConfigError as e:
        return _fail(EXIT_CONFIG, str(e))
    except DataError as e:
        return _fail(EXIT_DATA, str(e))
    except dataio.ParseError as e:
        return _fail(EXIT_DATA, str(e))


if __name__ == "__main__":
    raise SystemExit(main())
