"""Deployment cost model: metered API usage vs fine-tune-and-self-host.

All money flows through ``fractions.Fraction`` dollars so the table cells are
exact; months are 30 days; one-time costs land entirely in month 1. Each
scenario can carry externally published reference totals, and the report
flags any cell where the model disagrees instead of fitting to it.
"""

from __future__ import annotations

import csv
import sys
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError, StageError

MTOK = 1_000_000


def money(value) -> Fraction:
    """Exact dollars from config values (decimal string semantics for floats)."""
    frac = Fraction(str(value))
    if frac < 0:
        raise ConfigError(f"money values must be >= 0, got {value}")
    return frac


def fmt_dollars(amount: Fraction) -> str:
    if amount.denominator == 1:
        return f"${amount.numerator:,}"
    return f"${float(amount):,.2f}"


@dataclass(frozen=True)
class PriceSheet:
    api_input_per_mtok: Fraction
    api_output_per_mtok: Fraction
    finetune_onetime: Fraction
    hardware_onetime: Fraction
    electricity_monthly: Fraction


@dataclass(frozen=True)
class Workload:
    name: str
    daily_input_tokens: int
    daily_output_tokens: int
    days_per_month: int = 30


def daily_api_cost(input_tokens: int, output_tokens: int, sheet: PriceSheet) -> Fraction:
    if input_tokens < 0 or output_tokens < 0:
        raise StageError("token counts must be >= 0")
    return (Fraction(input_tokens, MTOK) * sheet.api_input_per_mtok
            + Fraction(output_tokens, MTOK) * sheet.api_output_per_mtok)


def monthly_api_cost(sheet: PriceSheet, workload: Workload) -> Fraction:
    return daily_api_cost(workload.daily_input_tokens, workload.daily_output_tokens,
                          sheet) * workload.days_per_month


def local_cost(sheet: PriceSheet, months: int) -> Fraction:
    if months < 0:
        raise StageError("months must be >= 0")
    if months == 0:
        return Fraction(0)
    return sheet.finetune_onetime + sheet.hardware_onetime + sheet.electricity_monthly * months


def cumulative_cost(sheet: PriceSheet, workload: Workload,
                    months: int) -> tuple[Fraction, Fraction]:
    """(api_total, local_total) after the given number of whole months."""
    return monthly_api_cost(sheet, workload) * months, local_cost(sheet, months)


def break_even(sheet: PriceSheet, workload: Workload) -> Fraction | None:
    """Fractional month where cumulative local cost first dips under API cost.

    Solves one-time + electricity*m = api_monthly*m; None when the API's
    monthly rate never outruns the electricity bill.
    """
    api_rate = monthly_api_cost(sheet, workload)
    if api_rate <= sheet.electricity_monthly:
        return None
    onetime = sheet.finetune_onetime + sheet.hardware_onetime
    return onetime / (api_rate - sheet.electricity_monthly)


@dataclass
class CostScenario:
    name: str
    sheet: PriceSheet
    workload: Workload
    months: int
    series_api: list[Fraction] = field(default_factory=list)
    series_local: list[Fraction] = field(default_factory=list)
    break_even_month: Fraction | None = None
    reference_totals: dict[int, dict[str, Fraction]] = field(default_factory=dict)

    def totals(self, months: int) -> tuple[Fraction, Fraction]:
        return cumulative_cost(self.sheet, self.workload, months)

    def deltas_vs_reference(self) -> list[tuple[int, str, Fraction, Fraction]]:
        """(month, side, computed, reference) for every disagreeing cell."""
        out = []
        for month in sorted(self.reference_totals):
            api_total, local_total = self.totals(month)
            computed = {"api": api_total, "local": local_total}
            for side in ("local", "api"):
                if side in self.reference_totals[month]:
                    ref = self.reference_totals[month][side]
                    if computed[side] != ref:
                        out.append((month, side, computed[side], ref))
        return out


def build_scenario(name: str, sheet: PriceSheet, workload: Workload, months: int,
                   reference_totals: dict[int, dict[str, Fraction]] | None = None
                   ) -> CostScenario:
    if months < 1:
        raise StageError("scenario needs months >= 1")
    scenario = CostScenario(name=name, sheet=sheet, workload=workload, months=months,
                            reference_totals=reference_totals or {})
    for month in range(1, months + 1):
        api_total, local_total = cumulative_cost(sheet, workload, month)
        scenario.series_api.append(api_total)
        scenario.series_local.append(local_total)
    scenario.break_even_month = break_even(sheet, workload)
    return scenario


def cross_scenario_clear_month(scenarios: list[CostScenario]) -> Fraction | None:
    """First fractional month where every API series tops every local series."""
    worst: Fraction | None = None
    for api_side in scenarios:
        api_rate = monthly_api_cost(api_side.sheet, api_side.workload)
        for local_side in scenarios:
            sheet = local_side.sheet
            if api_rate <= sheet.electricity_monthly:
                return None
            m = (sheet.finetune_onetime + sheet.hardware_onetime) / \
                (api_rate - sheet.electricity_monthly)
            if worst is None or m > worst:
                worst = m
    return worst


def load_price_config(source: str | Path) -> tuple[dict, dict]:
    """Parse a price-sheet TOML; 'default' resolves to the packaged sheet."""
    if str(source) == "default":
        text = resources.files("relaytune.pricing").joinpath("default.toml").read_text("utf-8")
    else:
        path = Path(source)
        if not path.exists():
            raise ConfigError(f"price sheet not found: {path}")
        text = path.read_text("utf-8")
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"bad price sheet TOML: {exc}") from None
    if "pricing" not in doc or "scenario" not in doc:
        raise ConfigError("price sheet needs [pricing] and [scenario.*] sections")
    return doc["pricing"], doc["scenario"]


def scenarios_from_config(source: str | Path, months: int) -> list[CostScenario]:
    pricing, scenario_cfg = load_price_config(source)
    scenarios = []
    for name, cfg in scenario_cfg.items():
        sheet = PriceSheet(
            api_input_per_mtok=money(pricing["api_input_per_mtok"]),
            api_output_per_mtok=money(pricing["api_output_per_mtok"]),
            finetune_onetime=money(pricing.get("finetune_onetime", 0)),
            hardware_onetime=money(cfg.get("hardware_onetime", 0)),
            electricity_monthly=money(cfg.get("electricity_monthly", 0)),
        )
        workload = Workload(name=name,
                            daily_input_tokens=int(cfg["daily_input_tokens"]),
                            daily_output_tokens=int(cfg["daily_output_tokens"]),
                            days_per_month=int(cfg.get("days_per_month", 30)))
        reference = {
            int(month): {side: money(v) for side, v in cells.items()}
            for month, cells in cfg.get("reference_totals", {}).items()
        }
        scenarios.append(build_scenario(name, sheet, workload, months, reference))
    return scenarios


def render_table(scenarios: list[CostScenario]) -> str:
    """Aligned text table mirroring the published cost-comparison layout."""
    if not scenarios:
        raise StageError("no scenarios to report")
    lines = []
    header = f"{'':24s}" + "".join(
        f"{s.name + ' local':>16s}{s.name + ' api':>16s}" for s in scenarios)
    lines.append(header)
    lines.append("-" * len(header))

    def row(label, cells):
        return f"{label:24s}" + "".join(f"{c:>16s}" for c in cells)

    lines.append(row("fine-tuning (one-time)", [
        cell for s in scenarios for cell in (fmt_dollars(s.sheet.finetune_onetime), "-")]))
    lines.append(row("hardware (one-time)", [
        cell for s in scenarios
        for cell in (fmt_dollars(s.sheet.hardware_onetime),
                     f"{s.workload.daily_input_tokens // MTOK}M/"
                     f"{s.workload.daily_output_tokens // MTOK}M tok/day")]))
    lines.append(row("electricity (monthly)", [
        cell for s in scenarios
        for cell in (fmt_dollars(s.sheet.electricity_monthly),
                     fmt_dollars(monthly_api_cost(s.sheet, s.workload)) + "/mo")]))
    months_shown = sorted({m for s in scenarios for m in s.reference_totals} | {2, 12})
    for month in months_shown:
        cells = []
        for s in scenarios:
            if month > s.months:
                cells += ["-", "-"]
                continue
            api_total, local_total = s.totals(month)
            cells += [fmt_dollars(local_total), fmt_dollars(api_total)]
        lines.append(row(f"{month} months (cumulative)", cells))
    lines.append("")
    markers = []
    for label, s in zip("ABDEFG", scenarios):
        if s.break_even_month is not None:
            markers.append((label, s.name, s.break_even_month))
            lines.append(f"marker {label}: {s.name} break-even at month "
                         f"{float(s.break_even_month):.3f}")
        else:
            lines.append(f"marker {label}: {s.name} never breaks even")
    clear = cross_scenario_clear_month(scenarios)
    if clear is not None and len(scenarios) > 1:
        lines.append(f"marker C: every workload cheaper locally from month "
                     f"{float(clear):.3f}")
    flagged = False
    for s in scenarios:
        for month, side, computed, ref in s.deltas_vs_reference():
            delta = computed - ref
            lines.append(
                f"flag: {s.name} {side} at {month} months computes "
                f"{fmt_dollars(computed)} but the reference table lists "
                f"{fmt_dollars(ref)} (delta {fmt_dollars(abs(delta))})")
            flagged = True
    if not flagged and any(s.reference_totals for s in scenarios):
        lines.append("all reference totals reproduced exactly")
    return "\n".join(lines) + "\n"


def write_series(scenarios: list[CostScenario], path: Path) -> None:
    """Month-by-month cumulative series, CSV with marker annotations."""
    with path.open("w", encoding="utf-8", newline="") as fh:
        for label, s in zip("ABDEFG", scenarios):
            if s.break_even_month is not None:
                fh.write(f"# marker {label}: {s.name} break-even month = "
                         f"{float(s.break_even_month):.6f}\n")
        clear = cross_scenario_clear_month(scenarios)
        if clear is not None and len(scenarios) > 1:
            fh.write(f"# marker C: all-clear month = {float(clear):.6f}\n")
        writer = csv.writer(fh)
        header = ["month"]
        for s in scenarios:
            header += [f"{s.name}_api_cumulative", f"{s.name}_local_cumulative"]
        writer.writerow(header)
        months = max(s.months for s in scenarios)
        for month in range(1, months + 1):
            rowvals: list[str] = [str(month)]
            for s in scenarios:
                if month <= s.months:
                    rowvals += [str(float(s.series_api[month - 1])),
                                str(float(s.series_local[month - 1]))]
                else:
                    rowvals += ["", ""]
            writer.writerow(rowvals)


def emit_report(scenarios: list[CostScenario], out_dir: str | Path) -> dict[str, str]:
    """Write the cost table and plot series; returns the created file paths."""
    if not scenarios:
        raise StageError("no scenarios to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table_path = out / "cost_table.txt"
    table_path.write_text(render_table(scenarios), encoding="utf-8")
    series_path = out / "cost_series.csv"
    write_series(scenarios, series_path)
    return {"table": str(table_path), "series": str(series_path)}
