from __future__ import annotations

from fractions import Fraction

import pytest

from relaytune.economics import (
    CostScenario,
    PriceSheet,
    Workload,
    break_even,
    build_scenario,
    cross_scenario_clear_month,
    cumulative_cost,
    daily_api_cost,
    emit_report,
    fmt_dollars,
    money,
    monthly_api_cost,
    render_table,
    scenarios_from_config,
)
from relaytune.errors import ConfigError, StageError

LIGHT_SHEET = PriceSheet(api_input_per_mtok=Fraction(5), api_output_per_mtok=Fraction(15),
                         finetune_onetime=Fraction(800), hardware_onetime=Fraction(2539),
                         electricity_monthly=Fraction(30))
HEAVY_SHEET = PriceSheet(api_input_per_mtok=Fraction(5), api_output_per_mtok=Fraction(15),
                         finetune_onetime=Fraction(800), hardware_onetime=Fraction(20312),
                         electricity_monthly=Fraction(240))
LIGHT = Workload("light", 10_000_000, 1_000_000)
HEAVY = Workload("heavy", 50_000_000, 5_000_000)


def test_daily_light_is_65():
    assert daily_api_cost(10_000_000, 1_000_000, LIGHT_SHEET) == 65


def test_daily_heavy_is_325():
    # 50M in + 5M out per day (the monthly 1500M/150M figures divided by 30).
    assert daily_api_cost(50_000_000, 5_000_000, HEAVY_SHEET) == 325


def test_daily_formula_is_linear_in_tokens():
    # At $5/$15 the formula gives $400 for 50M/10M; the published $325 daily
    # figure corresponds to 5M output tokens, not 10M.
    assert daily_api_cost(50_000_000, 10_000_000, HEAVY_SHEET) == 400


def test_zero_tokens_zero_cost():
    assert daily_api_cost(0, 0, LIGHT_SHEET) == 0


def test_cumulative_light_12_months():
    api, local = cumulative_cost(LIGHT_SHEET, LIGHT, 12)
    assert api == 23_400
    assert local == 800 + 2539 + 12 * 30 == 3_699


def test_cumulative_heavy_12_months():
    api, local = cumulative_cost(HEAVY_SHEET, HEAVY, 12)
    assert api == 117_000
    assert local == 800 + 20_312 + 12 * 240 == 23_992


def test_cumulative_heavy_2_months():
    api, local = cumulative_cost(HEAVY_SHEET, HEAVY, 2)
    assert api == 19_500
    assert local == 21_592


def test_cumulative_light_2_months_formula_value():
    # The model computes $3,399 here; the published reference table lists
    # $3,369 (one month of electricity instead of two). The report flags the
    # $30 delta rather than fitting to it.
    api, local = cumulative_cost(LIGHT_SHEET, LIGHT, 2)
    assert api == 3_900
    assert local == 3_399


def test_api_cost_linearity():
    for m1, m2 in ((1, 2), (3, 9), (0, 12), (5, 5)):
        a1, _ = cumulative_cost(LIGHT_SHEET, LIGHT, m1)
        a2, _ = cumulative_cost(LIGHT_SHEET, LIGHT, m2)
        a12, _ = cumulative_cost(LIGHT_SHEET, LIGHT, m1 + m2)
        assert a12 == a1 + a2


def test_series_are_nondecreasing():
    scenario = build_scenario("light", LIGHT_SHEET, LIGHT, 24)
    assert scenario.series_api == sorted(scenario.series_api)
    assert scenario.series_local == sorted(scenario.series_local)


def test_break_even_closed_form_light():
    # Oracle: (800 + 2539) / (1950 - 30).
    oracle = Fraction(800 + 2539, 1950 - 30)
    assert break_even(LIGHT_SHEET, LIGHT) == oracle
    assert float(oracle) == pytest.approx(1.739, abs=1e-3)


def test_break_even_closed_form_heavy():
    # Oracle: (800 + 20312) / (9750 - 240) = 2.219979...; the figure's
    # "after the first two months" claim holds (<= 2.23).
    oracle = Fraction(800 + 20_312, 9_750 - 240)
    be = break_even(HEAVY_SHEET, HEAVY)
    assert be == oracle
    assert float(be) == pytest.approx(2.2199789, abs=1e-6)
    assert float(be) <= 2.23


def test_break_even_none_when_api_cheaper_than_electricity():
    sheet = PriceSheet(api_input_per_mtok=Fraction(5), api_output_per_mtok=Fraction(15),
                       finetune_onetime=Fraction(800), hardware_onetime=Fraction(2539),
                       electricity_monthly=Fraction(10_000))
    assert break_even(sheet, LIGHT) is None


def test_break_even_bracketing_consistency():
    import math

    for sheet, workload in ((LIGHT_SHEET, LIGHT), (HEAVY_SHEET, HEAVY)):
        be = break_even(sheet, workload)
        assert be is not None
        lo, hi = math.floor(be), math.ceil(be)
        api_lo, local_lo = cumulative_cost(sheet, workload, lo)
        api_hi, local_hi = cumulative_cost(sheet, workload, hi)
        assert local_lo >= api_lo
        assert local_hi <= api_hi


def test_default_config_scenarios():
    scenarios = scenarios_from_config("default", 12)
    by_name = {s.name: s for s in scenarios}
    assert set(by_name) == {"light", "heavy"}
    light, heavy = by_name["light"], by_name["heavy"]
    assert monthly_api_cost(light.sheet, light.workload) == 1950
    assert monthly_api_cost(heavy.sheet, heavy.workload) == 9750
    deltas = light.deltas_vs_reference()
    assert deltas == [(2, "local", Fraction(3399), Fraction(3369))]
    assert heavy.deltas_vs_reference() == []


def test_series_formulas_light():
    scenario = build_scenario("light", LIGHT_SHEET, LIGHT, 6)
    for month in range(1, 7):
        assert scenario.series_api[month - 1] == 1950 * month
        assert scenario.series_local[month - 1] == 3339 + 30 * month


def test_render_table_contains_key_cells():
    table = render_table(scenarios_from_config("default", 12))
    for cell in ("$3,699", "$23,400", "$23,992", "$117,000", "$21,592", "$19,500"):
        assert cell in table
    assert "$3,399" in table
    assert "$3,369" in table
    assert "delta $30" in table


def test_render_table_markers():
    table = render_table(scenarios_from_config("default", 12))
    assert "marker A: light break-even at month 1.739" in table
    assert "marker B: heavy break-even at month 2.220" in table
    assert "marker C" in table


def test_cross_scenario_clear_month():
    scenarios = scenarios_from_config("default", 12)
    clear = cross_scenario_clear_month(scenarios)
    # Slowest pairing: heavy local hardware vs the light API rate.
    assert clear == Fraction(800 + 20_312, 1950 - 240)
    assert float(clear) == pytest.approx(12.346, abs=1e-3)


def test_emit_report_files(tmp_path):
    scenarios = scenarios_from_config("default", 12)
    paths = emit_report(scenarios, tmp_path)
    table = (tmp_path / "cost_table.txt").read_text()
    assert "$3,699" in table
    series = (tmp_path / "cost_series.csv").read_text()
    assert "light_api_cumulative" in series
    assert "# marker" in series
    lines = [l for l in series.splitlines() if l and not l.startswith("#")]
    assert len(lines) == 13  # header + 12 months
    assert paths["table"].endswith("cost_table.txt")


def test_empty_scenarios_error(tmp_path):
    with pytest.raises(StageError):
        emit_report([], tmp_path)


def test_money_validation():
    assert money("0.10") == Fraction(1, 10)
    assert money(5.0) == 5
    with pytest.raises(ConfigError):
        money(-1)


def test_fmt_dollars():
    assert fmt_dollars(Fraction(23_400)) == "$23,400"
    assert fmt_dollars(Fraction(65)) == "$65"
    assert fmt_dollars(Fraction(1, 2)) == "$0.50"


def test_missing_sheet_file():
    with pytest.raises(ConfigError):
        scenarios_from_config("/nonexistent/sheet.toml", 12)
