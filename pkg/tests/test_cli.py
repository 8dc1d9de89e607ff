import json
import math
import os

import pytest

from rtbsim.cli import main
from rtbsim.core import Price
from rtbsim.dataio import CanonicalLogLine, write_log
from rtbsim.response import LinearModel


def run(args):
    return main(args)


def write_config(tmp_path, payload, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload))
    return str(path)


def small_sim_config():
    return {
        "market": {
            "volume": 600,
            "slots": 4,
            "auction": "second",
            "price": {"kind": "uniform", "high": 100.0},
            "ctr": {"kind": "beta", "a": 2.0, "b": 48.0, "scale": 1.0},
        },
        "campaigns": [
            {
                "name": "camp",
                "budget": 8000,
                "click_value": 2000,
                "strategy": {"kind": "truthful"},
            }
        ],
    }


def eight_record_lines():
    rows = [
        (2, 1, True),
        (3, 2, True),
        (2, None, False),
        (3, 1, True),
        (3, None, False),
        (4, None, False),
        (4, 3, True),
        (1, None, False),
    ]
    records = []
    for i, (bid, z, won) in enumerate(rows):
        records.append(
            CanonicalLogLine(
                timestamp=1000 + i,
                auction_id=f"a{i}",
                campaign_id="c1",
                bid=Price(bid),
                won=won,
                market_price=None if z is None else Price(z),
                click=0 if won else None,
                conversion=None,
                features=("seg:x",),
            )
        )
    return records


def tree_bytes(root):
    out = {}
    for base, _, files in os.walk(root):
        for f in sorted(files):
            p = os.path.join(base, f)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


class TestSimulate:
    def test_deterministic_outputs(self, tmp_path):
        cfg = write_config(tmp_path, small_sim_config())
        out1, out2 = str(tmp_path / "r1"), str(tmp_path / "r2")
        assert run(["simulate", "--config", cfg, "--seed", "5", "--out", out1]) == 0
        assert run(["simulate", "--config", cfg, "--seed", "5", "--out", out2]) == 0
        t1, t2 = tree_bytes(out1), tree_bytes(out2)
        assert set(t1) == set(t2)
        for name in t1:
            assert t1[name] == t2[name], f"{name} differs between runs"
        assert "metrics.json" in t1 and "slots.csv" in t1
        assert any(name.endswith(".png") for name in t1)

    def test_zero_budget_zero_spend(self, tmp_path):
        payload = small_sim_config()
        payload["campaigns"][0]["budget"] = 0
        cfg = write_config(tmp_path, payload)
        out = str(tmp_path / "r")
        assert run(["simulate", "--config", cfg, "--seed", "5", "--out", out]) == 0
        metrics = json.loads((tmp_path / "r" / "metrics.json").read_text())
        camp = metrics["campaigns"]["camp"]
        assert camp["spend_ticks"] == 0
        assert camp["impressions"] == 0

    def test_seed_mandatory(self, tmp_path):
        cfg = write_config(tmp_path, small_sim_config())
        assert run(["simulate", "--config", cfg, "--out", str(tmp_path / "r")]) == 2

    def test_config_seed_used_when_flag_absent(self, tmp_path):
        payload = small_sim_config()
        payload["seed"] = 11
        cfg = write_config(tmp_path, payload)
        assert run(["simulate", "--config", cfg, "--out", str(tmp_path / "r")]) == 0

    def test_missing_config_exit_2(self, tmp_path):
        assert run(["simulate", "--config", str(tmp_path / "nope.json"), "--seed", "1", "--out", "o"]) == 2

    def test_invalid_market_exit_2(self, tmp_path):
        payload = small_sim_config()
        payload["market"]["price"] = {"kind": "mystery"}
        cfg = write_config(tmp_path, payload)
        assert run(["simulate", "--config", cfg, "--seed", "1", "--out", str(tmp_path / "r")]) == 2

    def test_env_var_overrides_out_dir(self, tmp_path, monkeypatch):
        cfg = write_config(tmp_path, small_sim_config())
        override = str(tmp_path / "env_out")
        monkeypatch.setenv("RTBSIM_OUT", override)
        assert run(["simulate", "--config", cfg, "--seed", "5", "--out", str(tmp_path / "ignored")]) == 0
        assert os.path.exists(os.path.join(override, "metrics.json"))
        assert not os.path.exists(str(tmp_path / "ignored"))


class TestFit:
    def test_km_fit_matches_reference_table(self, tmp_path):
        data = tmp_path / "log.tsv"
        write_log(data, eight_record_lines())
        cfg = write_config(
            tmp_path, {"task": "landscape", "data": str(data), "model": {"kind": "kaplan_meier"}}
        )
        out = str(tmp_path / "fit")
        assert run(["fit", "--config", cfg, "--seed", "1", "--out", out]) == 0
        model = json.loads((tmp_path / "fit" / "model.json").read_text())
        assert model["kind"] == "kaplan_meier"
        # rows are (level, resolved, at-risk)
        assert model["survival_rows"] == [[1, 0, 8], [2, 2, 7], [3, 1, 4], [4, 1, 2]]
        assert os.path.exists(os.path.join(out, "figures", "win_curve.png"))

    def test_lr_fit_separable_converges(self, tmp_path):
        records = []
        for i in range(200):
            clicked = i % 2
            records.append(
                CanonicalLogLine(
                    timestamp=i,
                    auction_id=f"a{i}",
                    campaign_id="c",
                    bid=Price(10),
                    won=True,
                    market_price=Price(5),
                    click=clicked,
                    features=(f"seg:{'hot' if clicked else 'cold'}",),
                )
            )
        data = tmp_path / "log.tsv"
        write_log(data, records)
        cfg = write_config(
            tmp_path,
            {
                "task": "response",
                "data": str(data),
                "model": {"kind": "lr", "epochs": 30, "eta": 1.0, "encoder_bits": 16},
            },
        )
        out = str(tmp_path / "fit")
        assert run(["fit", "--config", cfg, "--seed", "1", "--out", out]) == 0
        losses = (tmp_path / "fit" / "loss_curve.csv").read_text().strip().splitlines()[1:]
        final = float(losses[-1].split(",")[1])
        assert final < 0.1

    def test_unknown_task_exit_2(self, tmp_path):
        data = tmp_path / "log.tsv"
        write_log(data, eight_record_lines())
        cfg = write_config(tmp_path, {"task": "mystery", "data": str(data), "model": {}})
        assert run(["fit", "--config", cfg, "--seed", "1", "--out", str(tmp_path / "f")]) == 2

    def test_empty_data_exit_3(self, tmp_path):
        data = tmp_path / "empty.tsv"
        data.write_text("#canonical-bid-log v1\n")
        cfg = write_config(tmp_path, {"task": "landscape", "data": str(data), "model": {}})
        assert run(["fit", "--config", cfg, "--seed", "1", "--out", str(tmp_path / "f")]) == 3

    def test_attribution_fit_writes_report(self, tmp_path):
        from rtbsim.attribution import TouchpointPath
        from rtbsim.dataio import write_paths

        rows = []
        for i in range(30):
            conv = i % 3 == 0
            rows.append(
                (
                    f"u{i}",
                    TouchpointPath(
                        events=(("search", 1), ("display", 2)) if i % 2 else (("social", 1),),
                        converted=conv,
                        value=Price(100 if conv else 0),
                    ),
                )
            )
        data = tmp_path / "paths.tsv"
        write_paths(data, rows)
        cfg = write_config(
            tmp_path,
            {"task": "attribution", "data": str(data), "model": {"models": ["last", "shapley", "shao"]}},
        )
        out = str(tmp_path / "attr")
        assert run(["fit", "--config", cfg, "--seed", "1", "--out", out]) == 0
        lines = (tmp_path / "attr" / "attribution.csv").read_text().strip().splitlines()
        assert lines[0] == "channel,model,credit"
        assert len(lines) > 1


class TestEvaluate:
    def _write_eval_data(self, tmp_path, balanced=True):
        records = []
        for i in range(100):
            clicked = i % 2 if balanced else 1
            records.append(
                CanonicalLogLine(
                    timestamp=i,
                    auction_id=f"a{i}",
                    campaign_id="c",
                    bid=Price(10),
                    won=True,
                    market_price=Price(4),
                    click=clicked,
                    features=(f"seg:{'hot' if clicked else 'cold'}",),
                )
            )
        data = tmp_path / "eval.tsv"
        write_log(data, records)
        return str(data)

    def _write_model(self, tmp_path, perfect=True):
        from rtbsim.dataio import Encoder, EncoderConfig

        dim = 2**16
        m = LinearModel.zeros(dim)
        if perfect:
            enc = Encoder(EncoderConfig(mode="hashed", bits=16))
            hot = enc.encode(["seg:hot"]).indices[0]
            cold = enc.encode(["seg:cold"]).indices[0]
            m.weights[hot] = 30.0
            m.weights[cold] = -30.0
        path = tmp_path / ("perfect.json" if perfect else "constant.json")
        path.write_text(m.to_json())
        return str(path)

    def test_perfect_predictor_auc_one(self, tmp_path):
        data = self._write_eval_data(tmp_path)
        model = self._write_model(tmp_path, perfect=True)
        cfg = write_config(tmp_path, {"model": model, "data": data, "encoder_bits": 16})
        out = str(tmp_path / "eval")
        assert run(["evaluate", "--config", cfg, "--seed", "1", "--out", out]) == 0
        result = json.loads((tmp_path / "eval" / "evaluation.json").read_text())
        assert result["auc"] == 1.0

    def test_constant_predictor_baselines(self, tmp_path):
        data = self._write_eval_data(tmp_path)
        model = self._write_model(tmp_path, perfect=False)
        cfg = write_config(tmp_path, {"model": model, "data": data, "encoder_bits": 16})
        out = str(tmp_path / "eval")
        assert run(["evaluate", "--config", cfg, "--seed", "1", "--out", out]) == 0
        result = json.loads((tmp_path / "eval" / "evaluation.json").read_text())
        assert result["auc"] == 0.5
        assert result["log_loss"] == pytest.approx(math.log(2.0))


class TestSchema:
    def test_print_schema(self, capsys):
        assert run(["--print-schema"]) == 0
        out = capsys.readouterr().out
        assert "simulate" in out and "fit" in out and "evaluate" in out
