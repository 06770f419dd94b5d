import csv
import dataclasses
import io
import json
import time

import numpy as np
import pytest

from ffheflow.cli import main
from ffheflow.errors import ConfigurationError
from ffheflow.ffhe import SolveOptions, germ_from_state, solve_ffhe
from ffheflow.nr import nr_solve
from ffheflow.runner import (REPORT_SCHEMA, RunOptions, builtin_scenarios, compare_solvers, device_from_dict,
                             emit_report, load_devices, load_report, percent_reduction, reduction_factor,
                             run_powerflow)
from ffheflow.statcom import StatcomSpec
from ffheflow.system import prepare_system
from ffheflow.upfc import UpfcSpec

SCEN = builtin_scenarios()


def scenario(name):
    devices, settings = load_devices(SCEN, name)
    opts = RunOptions(enforce_gen_qlim=bool(settings.get("gen_qlim")),
                      enforce_limits=bool(settings.get("enforce_limits")))
    return devices, opts, [tuple(w) for w in settings.get("watch", [])]


@pytest.fixture(scope="module")
def base_run(case118):
    return run_powerflow(case118, (), RunOptions(enforce_gen_qlim=True))


@pytest.fixture(scope="module")
def limited_statcom(case118):
    devices, opts, _ = scenario("statcom16_m1_limited")
    return run_powerflow(case118, devices, opts), opts


# ---------------------------------------------------------------------------
# device configuration


def test_builtin_scenarios_load():
    devices, settings = load_devices(SCEN, "upfc75_74_a")
    (dev,) = devices
    assert isinstance(dev, UpfcSpec)
    assert (dev.bus_i, dev.bus_m) == (75, 74)
    assert dev.y_sh == 50 - 50j
    assert settings["gen_qlim"] is True


def test_device_from_dict_forms():
    st = device_from_dict({"type": "statcom", "bus": 16, "y_sh": [50, -50], "mode": "q_injected", "setpoint": -0.5})
    assert st.mode == "M3" and st.y_sh == 50 - 50j
    up = device_from_dict({"type": "UPFC", "bus_i": 20, "bus_m": 21, "y_sh": "50-50i",
                           "modes": ["M2", "P", "Q"], "setpoints": [1.05, 0.6, 0.0]})
    assert up.shunt_mode == "M2" and up.series_modes == ("P", "Q")


@pytest.mark.parametrize("entry, match", [
    ({"type": "svc", "bus": 1}, "unknown device type"),
    ({"type": "statcom", "bus": 16, "y_sh": "abc", "mode": "M1", "setpoint": 1}, "complex"),
    ({"type": "statcom", "bus": 16, "y_sh": 1, "mode": "M9", "setpoint": 1}, "mode"),
    ({"type": "statcom", "bus": 16, "y_sh": 1, "mode": "M1"}, "missing"),
    ({"type": "statcom", "bus": 16, "y_sh": 1, "mode": "M4", "setpoint": 0.1}, "line_to"),
    ({"type": "upfc", "bus_i": 20, "bus_m": 21, "y_sh": 1, "modes": {"M1": 1, "P": 1}}, "three control targets"),
    ({"type": "upfc", "bus_i": 20, "bus_m": 21, "y_sh": 1, "modes": {"M3": 1, "P": 1, "Q": 0}}, "shunt mode"),
])
def test_device_config_errors(entry, match):
    with pytest.raises(ConfigurationError, match=match):
        device_from_dict(entry)


def test_load_devices_errors(tmp_path):
    with pytest.raises(ConfigurationError, match="choose a scenario"):
        load_devices(SCEN)
    with pytest.raises(ConfigurationError, match="unknown scenario"):
        load_devices(SCEN, "nope")
    bad = tmp_path / "bad.yaml"
    bad.write_text("devices: [\n")
    with pytest.raises(ConfigurationError, match="YAML"):
        load_devices(bad)
    plain = tmp_path / "plain.yaml"
    plain.write_text("devices:\n  - {type: statcom, bus: 16, y_sh: 50-50j, mode: M1, setpoint: 1.0}\n")
    devices, settings = load_devices(plain)
    assert len(devices) == 1 and settings == {}
    with pytest.raises(ConfigurationError, match="no scenarios"):
        load_devices(plain, "x")


# ---------------------------------------------------------------------------
# limit loop


def test_infinite_limits_match_plain_solve(case118):
    devs = (StatcomSpec(16, 50 - 50j, "M1", 1.1, line_to=17),)
    res = run_powerflow(case118, devs, RunOptions(enforce_limits=True))
    plain = solve_ffhe(case118, devs)
    assert res.events == [] and res.status == "converged"
    np.testing.assert_array_equal(res.report.z, plain.z)


def test_statcom_limit_pins_magnitude(limited_statcom):
    res, _ = limited_statcom
    assert res.status == "converged"
    (ev,) = res.events
    assert ev.quantity == "|V_SH|" and ev.substituted_mode == "M2" and ev.setpoint == ev.limit == 1.1
    assert abs(abs(res.report.device(0).v_sh) - 1.1) <= 1e-8


def test_limit_loop_idempotent(limited_statcom, case118):
    res, opts = limited_statcom
    again = run_powerflow(res.case, res.devices, opts)
    assert again.events == []
    np.testing.assert_allclose(again.report.z, res.report.z, atol=1e-8)


def test_upfc_limit_drops_active_power_target(case118):
    devices, opts, _ = scenario("upfc20_21_a_limited")
    res = run_powerflow(case118, devices, opts)
    (ev,) = res.events
    assert ev.quantity == "|V_SE|" and ev.relaxed_mode == "P" and ev.substituted_mode == "VSE"
    dev = res.devices[0]
    assert dev.p_setpoint is None and dev.q_setpoint == 0.0 and dev.vse_setpoint == 0.3
    assert abs(abs(res.report.device(0).v_se) - 0.3) <= 1e-8


def test_oscillation_guard(case118):
    devices, opts, _ = scenario("statcom16_m1_limited")
    res = run_powerflow(case118, devices, dataclasses.replace(opts, max_swaps=0))
    assert res.status == "oscillating"
    assert 1 <= len(res.candidates) <= 2


def test_nr_solver_in_limit_loop(case118, limited_statcom):
    devices, opts, _ = scenario("statcom16_m1_limited")
    res = run_powerflow(case118, devices, dataclasses.replace(opts, solver="nr"))
    assert res.report.solver == "nr"
    np.testing.assert_allclose(res.report.z, limited_statcom[0].report.z, atol=1e-6)


# ---------------------------------------------------------------------------
# comparison


def test_reduction_factor():
    assert reduction_factor([1.0, 1e-2, 1e-4, 1e-6]) == pytest.approx(100.0)
    assert reduction_factor([1.0, 1e-3]) == pytest.approx(1000.0)
    assert np.isnan(reduction_factor([1.0]))
    assert percent_reduction(10.0, 9.0) == pytest.approx(10.0)


def test_compare_solvers_emits_histories(case118):
    devices, opts, _ = scenario("statcom16_m1")
    m = compare_solvers(case118, devices, opts)
    assert m.ffhe_status == m.nr_status == "converged"
    assert m.delta_e is not None and m.delta_e > 0
    assert len(m.nr_history) == m.iterations_used + 1
    assert len(m.ffhe_history) == m.terms_used
    assert m.ffhe_history[-1] <= 1e-8 and m.nr_history[-1] <= 1e-8
    assert np.isfinite(m.delta_t)


@pytest.mark.xfail(strict=False, reason="from a 3-step Newton germ, order 1 of the series equals Newton's 4th "
                                        "step, so both solvers do the same four factorizations and the sign "
                                        "of %T is set by timing noise")
def test_compare_solvers_runtime_reduction_positive(case118):
    devices, opts, _ = scenario("statcom16_m1")
    runs = sorted(compare_solvers(case118, devices, opts).delta_t for _ in range(7))
    assert runs[3] > 0


def test_self_comparison_is_noise(case118):
    system = prepare_system(case118)
    nr_solve(system)
    times = []
    for _ in range(2):
        t = time.perf_counter()
        for _ in range(5):
            nr_solve(system)
        times.append(time.perf_counter() - t)
    assert abs(percent_reduction(times[0], times[1])) < 50


def test_solution_germ_needs_two_terms(case118):
    devices = (StatcomSpec(16, 50 - 50j, "M1", 1.1, line_to=17),)
    system = prepare_system(case118, devices)
    sol = nr_solve(system)
    rep = solve_ffhe(system, germ=germ_from_state(system, sol.z))
    assert rep.converged and rep.terms_used <= 2


# ---------------------------------------------------------------------------
# reports


def test_table_line(base_run):
    text = emit_report(base_run, "table", watch=[(16, 17)])
    assert "V_16 = 0.9839 ∠ -17.80" in text.splitlines()[3:][15]
    assert "S_16-17 = -0.1751 - j0.0370" in text


def test_json_roundtrip_and_schema(base_run):
    text = emit_report(base_run, "json", watch=[(16, 17)])
    d = load_report(text)
    assert d["schema"] == REPORT_SCHEMA
    assert json.loads(json.dumps(d)) == d
    assert len(d["buses"]) == 118
    assert "timing" in d
    with pytest.raises(ConfigurationError):
        load_report(json.dumps({"schema": "other"}))


def test_json_deterministic(case118):
    devices, opts, watch = scenario("upfc75_74_a")
    texts = [emit_report(run_powerflow(case118, devices, opts), "json", watch=watch, include_timing=False)
             for _ in range(2)]
    assert texts[0] == texts[1]
    assert "timing" not in json.loads(texts[0])


def test_csv_row_count(case118):
    devices, opts, watch = scenario("statcom16_m3")
    text = emit_report(run_powerflow(case118, devices, opts), "csv")
    rows = list(csv.reader(io.StringIO(text)))
    metric_rows = [r for r in rows if r[0] == "metric"]
    assert len(rows) == 1 + 118 + 1 + len(metric_rows)
    assert len(metric_rows) == 5


def test_unknown_format(base_run):
    with pytest.raises(ConfigurationError):
        emit_report(base_run, "xml")


def test_setpoint_flags(case118):
    devices, opts, watch = scenario("upfc20_21_a")
    d = json.loads(emit_report(run_powerflow(case118, devices, opts), "json", watch=watch))
    sp = d["devices"][0]["setpoints"]
    assert set(sp) == {"M1", "P", "Q"} and all(v["met"] for v in sp.values())


# ---------------------------------------------------------------------------
# command line


def test_cli_default_run(capsys):
    assert main(["--gen-qlim", "--watch", "16-17"]) == 0
    out = capsys.readouterr().out
    assert "V_16 = 0.9839 ∠ -17.80" in out


def test_cli_scenario_json_to_file(tmp_path):
    out = tmp_path / "r.json"
    assert main(["--devices", "builtin", "--scenario", "statcom16_m3", "--output", "json", "--out", str(out)]) == 0
    d = load_report(out.read_text())
    assert d["devices"][0]["mode"] == "M3"
    assert d["devices"][0]["s_sh"]["im"] == pytest.approx(-0.5, abs=1e-8)


def test_cli_compare(capsys):
    assert main(["--compare-nr", "--output", "json"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["comparison"]["nr_history"] and d["comparison"]["ffhe_history"]


def test_cli_nr_solver(capsys):
    assert main(["--solver", "nr", "--output", "csv"]) == 0
    assert capsys.readouterr().out.startswith("record,")


def test_cli_diverged_exit_code():
    assert main(["--germ", "flat", "--max-terms", "3", "--output", "csv", "--out", "/dev/null"]) == 2


def test_cli_oscillation_exit_code(tmp_path):
    out = tmp_path / "r.txt"
    assert main(["--devices", "builtin", "--scenario", "statcom16_m1_limited", "--max-swaps", "0",
                 "--out", str(out)]) == 4


def test_cli_input_errors(tmp_path, capsys):
    assert main(["--case", str(tmp_path / "missing.m")]) == 3
    bad = tmp_path / "bad.m"
    bad.write_text("mpc.bus = [\n 1 3 0 0 0 0 1 x;\n];\n")
    assert main(["--case", str(bad)]) == 3
    assert "line 2" in capsys.readouterr().err
    assert main(["--devices", str(tmp_path / "none.yaml")]) == 3
    assert main(["--devices", "builtin"]) == 3  # scenario required
    with pytest.raises(SystemExit):
        main(["--germ", "warm"])


def test_cli_pade(capsys):
    assert main(["--germ", "flat", "--eval", "pade", "--output", "json"]) == 0
    assert json.loads(capsys.readouterr().out)["status"] == "converged"
