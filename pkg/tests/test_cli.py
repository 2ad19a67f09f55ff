import csv
import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from condldp.cli import (
    ConfigError,
    RunConfig,
    default_config_text,
    fmt_float,
    main,
    parse_config,
    serialize_config,
)

GAUSS = {
    "model": {"name": "gaussian_cramer", "mu": 0.0, "sigma": 1.0},
    "x0": [0.5],
    "event": {"kind": "halfspace", "normal": [1.0], "anchor": [1.0]},
    "grid": {"lower": [-3.0], "upper": [3.0], "points": [601]},
    "ns": [200, 400, 800],
    "replicas": 20000,
    "seed": 11,
}

PAIR = {
    "model": {"name": "gaussian_pair"},
    "x0": [1.0],
    "grid": {"lower": [-2.0, 0.2], "upper": [3.0, 6.0], "points": [51, 59]},
    "lambda_grid": {"lower": [-5.0, -5.0], "upper": [5.0, 0.45], "points": [101, 110]},
    "ns": [100],
    "replicas": 1000,
    "seed": 1,
}


def run(tmp_path, cfg, *args, name="cfg.json"):
    path = tmp_path / name
    path.write_text(cfg if isinstance(cfg, str) else json.dumps(cfg))
    out = tmp_path / "out"
    return main([args[0], "--config", str(path), "--out", str(out), *args[1:]]), out


def rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


class TestTilt:
    def test_gaussian(self, tmp_path, capsys):
        code, out = run(tmp_path, {**GAUSS, "x0": [1.0]}, "tilt")
        assert code == 0
        rec = json.loads((out / "tilt.json").read_text())
        assert rec["lambda0"] == [pytest.approx(1.0, abs=1e-9)]
        assert rec["min_rate"] == pytest.approx(0.5, abs=1e-9)
        assert "lambda0" in capsys.readouterr().out

    def test_equilibrium(self, tmp_path):
        code, out = run(tmp_path, {**GAUSS, "x0": [0.0]}, "tilt")
        rec = json.loads((out / "tilt.json").read_text())
        assert code == 0 and rec["lambda0"] == [0.0] and rec["min_rate"] == 0.0

    def test_solver_failure(self, tmp_path, capsys):
        cfg = {**GAUSS, "model": {"name": "bernoulli_cramer", "p": 0.3}, "x0": [1.0]}
        code, _ = run(tmp_path, cfg, "tilt")
        assert code == 2
        assert "residual" in capsys.readouterr().err


class TestConfigErrors:
    def test_missing_x0(self, tmp_path, capsys):
        cfg = {k: v for k, v in GAUSS.items() if k != "x0"}
        assert run(tmp_path, cfg, "tilt")[0] == 1
        assert "x0" in capsys.readouterr().err

    def test_unknown_model(self, tmp_path):
        assert run(tmp_path, {**GAUSS, "model": {"name": "cauchy"}}, "verify")[0] == 1

    def test_not_json(self, tmp_path):
        assert run(tmp_path, "{not json", "tilt")[0] == 1

    def test_bad_parameter(self, tmp_path):
        assert run(tmp_path, {**GAUSS, "model": {"name": "gaussian_cramer", "sigma": -1}}, "tilt")[0] == 1

    @pytest.mark.parametrize("patch", [{"ns": []}, {"ns": [400, 200]}, {"replicas": 10}, {"method": "exact"},
                                       {"delta": 0.0}, {"seed": -1}, {"colour": "red"}])
    def test_invalid_fields(self, patch):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({**GAUSS, **patch})


class TestCondition:
    def test_gaussian_rows(self, tmp_path):
        code, out = run(tmp_path, GAUSS, "condition")
        assert code == 0
        table = rows(out / "conditional_rate.csv")
        assert table[0] == ["x", "I_B"] and len(table) == 602
        values = {float(r[0]): r[1] for r in table[1:]}
        assert values[-1.0] == "inf"
        assert float(values[0.5]) == pytest.approx(0.0, abs=1e-12)
        assert not (out / "conditional_marginal_rate.csv").exists()

    def test_pair_surfaces(self, tmp_path):
        code, out = run(tmp_path, PAIR, "condition")
        assert code == 0
        assert len(rows(out / "conditional_rate.csv")) == 51 * 59 + 1
        marg = rows(out / "conditional_marginal_rate.csv")[1:]
        assert len(marg) == 59
        finite = [(float(y), float(v)) for y, v in marg if v != "inf"]
        y_min, v_min = min(finite, key=lambda t: t[1])
        assert y_min == pytest.approx(2.0, abs=0.05)
        assert v_min == pytest.approx(0.0, abs=2e-3)
        assert all(v == "inf" for y, v in marg if float(y) <= 1.0)
        free = rows(out / "conditional_free_energy.csv")[1:]
        assert len(free) == 110
        zero = [v for lam, v in free if abs(float(lam)) < 1e-12]
        assert zero and float(zero[0]) == pytest.approx(0.0, abs=1e-12)


class TestSweep:
    def test_rows_and_target(self, tmp_path):
        code, out = run(tmp_path, GAUSS, "sweep")
        table = rows(out / "sweep.csv")
        assert code == 0 and table[0] == ["n", "estimate", "stderr", "target"] and len(table) == 4
        n, est, se, target = map(float, table[-1])
        assert n == 800 and target == pytest.approx(-0.375)
        assert abs(est - target) <= 0.05

    def test_byte_identical_reruns(self, tmp_path):
        _, out = run(tmp_path, GAUSS, "sweep")
        first = (out / "sweep.csv").read_bytes()
        _, out = run(tmp_path, GAUSS, "sweep")
        assert (out / "sweep.csv").read_bytes() == first

    def test_seed_flag_overrides(self, tmp_path):
        _, out = run(tmp_path, GAUSS, "sweep")
        first = (out / "sweep.csv").read_bytes()
        _, out = run(tmp_path, GAUSS, "sweep", "--seed", "12")
        assert (out / "sweep.csv").read_bytes() != first


class TestVerify:
    def test_bundled_config(self, tmp_path):
        out = tmp_path / "out"
        assert main(["verify", "--out", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["passed"] and all(report["verdicts"].values())
        assert len(report["meta"]["config_hash"]) == 64

    def test_unreached_intersection_fails_verification(self, tmp_path, capsys):
        # B is observed but A∩B never is, while the rate target stays finite
        cfg = {**GAUSS, "x0": [0.1], "ns": [200], "replicas": 1000, "seed": 7, "method": "direct"}
        code, out = run(tmp_path, cfg, "verify")
        assert code == 3
        assert "FAIL  sweep" in capsys.readouterr().out
        report = json.loads((out / "report.json").read_text())
        assert report["checks"]["sweep"]["rows"][0]["estimate"] == "neg_inf"

    def test_unobserved_conditioning_is_numeric_error(self, tmp_path):
        cfg = {**GAUSS, "x0": [1.0], "ns": [800], "replicas": 1000, "method": "direct"}
        assert run(tmp_path, cfg, "verify")[0] == 2


def test_fmt_float():
    assert fmt_float(math.inf) == "inf" and fmt_float(-math.inf) == "neg_inf"
    assert float(fmt_float(0.1)) == 0.1 and fmt_float(0.1) == "0.10000000000000001"


def test_default_config_parses():
    cfg = parse_config(default_config_text())
    assert cfg.model["name"] == "gaussian_cramer" and cfg.seed == 20150718


finite = st.floats(-10, 10, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(
    st.sampled_from([{"name": "gaussian_cramer", "mu": 0.0, "sigma": 2.0}, {"name": "bernoulli_cramer", "p": 0.4},
                     {"name": "gaussian_pair"}]),
    finite,
    st.lists(st.integers(1, 10**6), min_size=1, max_size=5, unique=True).map(sorted),
    st.integers(0, 2**64 - 1),
    st.one_of(st.none(), st.floats(1e-6, 5)),
    st.sampled_from(["direct", "tilted"]),
)
def test_config_round_trip(model, x0, ns, seed, delta, method):
    cfg = RunConfig.from_dict({**GAUSS, "model": model, "x0": [x0], "ns": ns, "seed": seed, "delta": delta,
                               "method": method})
    assert parse_config(serialize_config(cfg)) == cfg
