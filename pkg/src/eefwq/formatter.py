"""Output formatting for eefwq."""

from typing import Optional

import pandas as pd

from eefwq.convergence import FitResult
from eefwq.flsim import TrainingTrace
from eefwq.solver import Allocation


def _energy(joules: float) -> str:
    if abs(joules) >= 1e6:
        return f"{joules / 1e6:.3f} MJ"
    if abs(joules) >= 1e3:
        return f"{joules / 1e3:.3f} kJ"
    return f"{joules:.3f} J"


def _mhz(hz: float) -> str:
    return f"{hz / 1e6:.3f} MHz"


def format_allocation(allocation: Allocation, strings: dict, strategy: str = "fwq") -> str:
    """
    Format an allocation as a markdown summary.

    Args:
        allocation: Solver output.
        strings: Strings dict (formatter section).
        strategy: Strategy name shown in the header.

    Returns:
        Formatted string output.
    """
    lbl_yes = strings.get("yes", "yes")
    lbl_no = strings.get("no", "no")
    report = allocation.report

    lines = []
    lines.append(f"## {strings.get('allocation_header', 'Allocation')}")
    lines.append("")
    lines.append(f"**{strings.get('strategy', 'Strategy')}:** {strategy}")
    lines.append(f"**{strings.get('objective', 'Total energy')}:** {_energy(allocation.objective)}")
    lines.append(f"**{strings.get('local_steps', 'Local steps H')}:** {allocation.h:g}")
    lines.append(f"**{strings.get('rounds', 'Rounds K')}:** {allocation.k_rounds:.1f} ({allocation.k_ceil})")
    lines.append(f"**{strings.get('eps_q', 'Quantization error budget')}:** {allocation.eps_q:.4g}")
    if report is not None:
        lines.append(f"**{strings.get('feasible', 'Feasible')}:** {lbl_yes if report.feasible else lbl_no}")
    lines.append("")

    lines.append(
        f"| {strings.get('device', 'Device')} | {strings.get('bits', 'Bits')} | "
        f"{strings.get('bandwidth', 'Bandwidth')} | {strings.get('comp_energy', 'Compute energy')} | "
        f"{strings.get('comm_energy', 'Upload energy')} | {strings.get('round_time', 'Round time')} |"
    )
    lines.append("|---|---|---|---|---|---|")
    for i, (q, b, e) in enumerate(zip(allocation.q, allocation.b, allocation.per_device)):
        lines.append(
            f"| {i} | {q} | {_mhz(b)} | {_energy(e.comp_energy)} | {_energy(e.comm_energy)} | "
            f"{e.comp_time + e.comm_time:.3f} s |"
        )

    if report is not None:
        lines.append("")
        lines.append(f"### {strings.get('slacks', 'Constraint slacks')}:")
        lines.append("")
        for name, slack in report.slacks.items():
            lines.append(f"- {name}: {slack:.4g}")

    if allocation.iterations:
        lines.append("")
        key = "converged" if allocation.converged else "not_converged"
        default = ("Converged after {iterations} iterations" if allocation.converged
                   else "Stopped after {iterations} iterations without converging")
        lines.append(strings.get(key, default).format(iterations=allocation.iterations))

    return "\n".join(lines)


def format_verify_result(solver: Optional[Allocation], exhaustive: Optional[Allocation], strings: dict) -> str:
    """Compare solver and exhaustive-search objectives."""
    lines = []
    lines.append(f"## {strings.get('verify_header', 'Solver vs exhaustive search')}")
    lines.append("")
    no_feasible = strings.get("no_feasible", "No feasible point found.")
    for label, allocation in ((strings.get("solver", "Solver"), solver),
                              (strings.get("exhaustive", "Exhaustive"), exhaustive)):
        if allocation is None:
            lines.append(f"**{label}:** {no_feasible}")
        else:
            lines.append(f"**{label}:** {_energy(allocation.objective)} "
                         f"(H={allocation.h:g}, q={list(allocation.q)})")
    if solver is not None and exhaustive is not None:
        gap = solver.objective / exhaustive.objective - 1.0
        lines.append(f"**{strings.get('gap', 'Gap')}:** {gap * 100:+.2f}%")
    return "\n".join(lines)


def format_sweep_summary(summary: pd.DataFrame, strings: dict, kind: str = "") -> str:
    """Markdown table of summarize() output."""
    if summary.empty:
        return strings.get("no_rows", "No results.")
    header = strings.get("sweep_header", "Sweep summary")
    lines = [f"## {header} ({kind})" if kind else f"## {header}", ""]
    strategies = list(dict.fromkeys(summary["strategy"]))
    lines.append(f"| {strings.get('sweep_value', 'Value')} | " + " | ".join(strategies) + " |")
    lines.append("|---" * (len(strategies) + 1) + "|")
    lbl_feasible = strings.get("feasible_runs", "feasible")
    for value, group in summary.groupby("sweep_value", sort=True):
        cells = []
        by_strategy = group.set_index("strategy")
        for name in strategies:
            if name not in by_strategy.index or by_strategy.at[name, "n_feasible"] == 0:
                cells.append("-")
                continue
            row = by_strategy.loc[name]
            std = row["objective_std"]
            spread = f" ± {_energy(std)}" if pd.notna(std) else ""
            cells.append(f"{_energy(row['objective_mean'])}{spread} ({int(row['n_feasible'])} {lbl_feasible})")
        lines.append(f"| {value:g} | " + " | ".join(cells) + " |")
    return "\n".join(lines)


def format_fit_result(fit: FitResult, strings: dict) -> str:
    c = fit.coeffs
    lines = []
    lines.append(f"## {strings.get('fit_header', 'Fitted convergence coefficients')}")
    lines.append("")
    lines.append(f"- a1 = {c.a1:.6g}")
    lines.append(f"- a2 = {c.a2:.6g}")
    lines.append(f"- a3 = {c.a3:.6g}")
    lines.append(f"- {strings.get('r_squared', 'R squared')} = {fit.r_squared:.4f}")
    lines.append("")
    lines.append(strings.get("rows_used", "Rows used: {count}").format(count=fit.n_rows))
    return "\n".join(lines)


def format_trace_summary(trace: TrainingTrace, strings: dict) -> str:
    lines = [f"## {strings.get('trace_header', 'Training trace')}", ""]
    if not trace.rounds:
        lines.append(strings.get("empty_trace", "No rounds were run."))
        return "\n".join(lines)
    lines.append(f"**{strings.get('rounds', 'Rounds K')}:** {trace.rounds}")
    lines.append(f"**{strings.get('final_loss', 'Final loss')}:** {trace.loss[-1]:.5f}")
    lines.append(f"**{strings.get('final_grad', 'Final squared gradient norm')}:** {trace.grad_norm_sq[-1]:.5g}")
    lines.append(f"**{strings.get('final_accuracy', 'Final accuracy')}:** {trace.accuracy[-1]:.4f}")
    if trace.energy_j[-1] > 0:
        lines.append(f"**{strings.get('energy', 'Modelled energy')}:** {_energy(trace.energy_j[-1])}")
    return "\n".join(lines)
