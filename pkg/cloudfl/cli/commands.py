"""
Subcommand handlers. Each returns a process exit code:
0 success, 2 configuration error, 3 runtime invariant / contract violation.
"""
import functools
import logging
import os
import sys
from typing import Any, Mapping, Optional, Sequence

from cloudfl.cli import output
from cloudfl.config import load_config
from cloudfl.errors import CloudFLError, ConfigurationError
from cloudfl.orchestrator import (
    build_federation,
    run_ablation,
    run_comparison,
    run_experiment,
    run_sweep,
    summarize_run,
    validate_shapley,
)

logger = logging.getLogger(__name__)


def _guarded(command):
    """Turn simulator errors into a diagnostic on stderr plus the matching exit code."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs) -> int:
        try:
            return command(*args, **kwargs)
        except CloudFLError as e:
            kind = "configuration error" if isinstance(e, ConfigurationError) else "error"
            print(f"cloudfl: {kind}: {e}", file=sys.stderr)
            return e.exit_code

    return wrapper


@_guarded
def cmd_run(config_path: Optional[str], overrides: Optional[Mapping[str, Any]] = None,
            output_dir: Optional[str] = None, emit_client_metrics: bool = False) -> int:
    """One experiment -> rounds.csv, summary.json (and clients.csv)."""
    config = load_config(config_path, overrides)
    federation = build_federation(config)
    history = run_experiment(config, federation)
    outcome = summarize_run(config.name, config, history, federation)

    folder = output.run_folder(config, output_dir)
    output.write_rounds(folder, history, federation.topology.num_clouds)
    if emit_client_metrics:
        output.write_client_metrics(folder, history, federation.num_clients)
    output.write_json(os.path.join(folder, "summary.json"), output.run_summary(
        config, history, outcome, sorted(federation.malicious), federation.empty_clients, federation.model_size,
    ))
    print(f"final accuracy {outcome.accuracy:.4f}, cumulative cost {outcome.cumulative_cost:.6g} "
          f"(relative {outcome.relative_cost:.4f}) -> {folder}")
    return 0


@_guarded
def cmd_compare(config_path: Optional[str], strategies: Sequence[str], attacks: Optional[Sequence[str]] = None,
                overrides: Optional[Mapping[str, Any]] = None, output_dir: Optional[str] = None,
                ablation: bool = False, jobs: int = 1) -> int:
    """Strategy x attack grid, or the five ablation rows with ablation=True."""
    config = load_config(config_path, overrides)
    folder = output.run_folder(config, output_dir)

    if ablation:
        outcomes = run_ablation(config, jobs=jobs)
        output.write_ablation(folder, outcomes)
        for o in outcomes:
            print(f"{o.label:<26} acc={o.accuracy:.4f} rel_cost={o.relative_cost:.4f}")
        return 0

    if not strategies:
        raise ConfigurationError("compare needs at least one strategy (--strategies)")
    table = run_comparison(config, strategies, attacks, jobs=jobs)
    output.write_comparison(folder, table)
    for s in table.strategies:
        cells = "  ".join(f"{a}={table.accuracy(s, a):.4f}" for a in table.attacks)
        print(f"{s:<14} {cells}")
    return 0


@_guarded
def cmd_sweep(config_path: Optional[str], param: str, values: Sequence[float],
              overrides: Optional[Mapping[str, Any]] = None, output_dir: Optional[str] = None, jobs: int = 1) -> int:
    """One run per value; sweep.csv rows in value order."""
    if not values:
        raise ConfigurationError("sweep needs at least one value (--values)")
    config = load_config(config_path, overrides)
    outcomes = run_sweep(config, param, values, jobs=jobs)
    folder = output.run_folder(config, output_dir)
    output.write_sweep(folder, param, values, outcomes)
    for value, o in zip(values, outcomes):
        print(f"{param}={value:<8g} acc={o.accuracy:.4f} cost={o.cumulative_cost:.6g}")
    return 0


@_guarded
def cmd_validate_shapley(config_path: Optional[str], num_clients: int = 8, probe_round: int = 10,
                         num_permutations: int = 5000, overrides: Optional[Mapping[str, Any]] = None,
                         output_dir: Optional[str] = None, value: str = "accuracy") -> int:
    """Contribution scores vs exact and Monte Carlo Shapley values at one round."""
    config = load_config(config_path, overrides)
    report = validate_shapley(config, num_clients, probe_round, num_permutations, value)
    folder = output.run_folder(config, output_dir)
    output.write_shapley(folder, report)

    print(f"pearson(phi, exact)         = {report.corr_phi_exact:.4f}")
    print(f"pearson(monte carlo, exact) = {report.corr_mc_exact:.4f}")
    print(f"max |monte carlo - exact|   = {report.max_abs_error_mc:.4g}")
    for method, seconds in report.timings.items():
        print(f"time {method:<12} {seconds:.4f}s")
    return 0
