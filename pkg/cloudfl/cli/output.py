"""Run folders and CSV/JSON artifact writers."""
import csv
import io
import json
import logging
import math
import os
from datetime import datetime
from typing import Any, Dict, Iterable, List, Optional, Sequence

import pytz
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential
from unidecode import unidecode

from cloudfl.config.models import ExperimentConfig
from cloudfl.orchestrator import ComparisonTable, RoundMetrics, RunOutcome, ShapleyReport

logger = logging.getLogger(__name__)

ROUND_COLUMNS = ["round", "accuracy", "loss", "cost_round", "cost_cum", "cost_intra", "cost_cross", "selected_count"]
OUTCOME_COLUMNS = ["accuracy", "loss", "cumulative_cost", "relative_cost"]


def fmt(value: float) -> str:
    """Fixed float rendering so equal runs give byte-identical files."""
    return format(float(value), ".12g")


# --- Folder naming ---

def sanitize_name_for_filesystem(name: str) -> str:
    """Transliterate, lowercase, spaces to underscores, keep [a-z0-9_]."""
    sanitized = unidecode(name)
    sanitized = sanitized.strip().lower().replace(" ", "_")
    sanitized = "".join(c for c in sanitized if c.isalnum() or c == "_")
    return sanitized or "experiment"


def now_in(timezone: str) -> datetime:
    return datetime.now(pytz.timezone(timezone))


def run_folder(config: ExperimentConfig, output_dir: Optional[str] = None, root: str = "runs") -> str:
    """`output_dir` when given, else runs/DD_MM_YYYY_HH_MM_<name>."""
    if output_dir:
        folder = output_dir
    else:
        stamp = now_in(config.timezone).strftime("%d_%m_%Y_%H_%M")
        folder = os.path.join(root, f"{stamp}_{sanitize_name_for_filesystem(config.name)}")
    os.makedirs(folder, exist_ok=True)
    return folder


# --- Writers ---

@retry(
    retry=retry_if_exception_type(OSError),
    wait=wait_exponential(multiplier=0.1, min=0.1, max=2),
    stop=stop_after_attempt(3),
    reraise=True,
)
def write_text(path: str, text: str) -> str:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(text)
    return path


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    write_text(path, buffer.getvalue())
    logger.info(f"[Output] Wrote {path}")
    return path


def _finite(value):
    """NaN and infinities become null so the file stays strict JSON."""
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _finite(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_finite(v) for v in value]
    return value


def write_json(path: str, payload: Dict[str, Any]) -> str:
    write_text(path, json.dumps(_finite(payload), indent=2, allow_nan=False) + "\n")
    logger.info(f"[Output] Wrote {path}")
    return path


# --- Artifacts ---

def round_rows(history: Sequence[RoundMetrics]) -> List[List[str]]:
    rows = []
    for m in history:
        rows.append([
            str(m.round), fmt(m.accuracy), fmt(m.loss), fmt(m.cost.total), fmt(m.cost_cumulative),
            fmt(m.cost.intra), fmt(m.cost.cross), str(m.selected_count),
            *(fmt(b) for b in m.beta),
        ])
    return rows


def write_rounds(folder: str, history: Sequence[RoundMetrics], num_clouds: int) -> str:
    header = ROUND_COLUMNS + [f"beta_{k}" for k in range(num_clouds)]
    return write_csv(os.path.join(folder, "rounds.csv"), header, round_rows(history))


def write_client_metrics(folder: str, history: Sequence[RoundMetrics], num_clients: int) -> str:
    """Wide per-client snapshot: r_hat, trust score and selection flag of every client per round."""
    header = (["round"]
              + [f"r_hat_{i}" for i in range(num_clients)]
              + [f"ts_{i}" for i in range(num_clients)]
              + [f"selected_{i}" for i in range(num_clients)])
    rows = []
    for m in history:
        chosen = set(m.selected)
        rows.append([str(m.round)]
                    + [fmt(x) for x in m.r_hat]
                    + [fmt(x) for x in m.trust_scores]
                    + ["1" if i in chosen else "0" for i in range(num_clients)])
    return write_csv(os.path.join(folder, "clients.csv"), header, rows)


def run_summary(config: ExperimentConfig, history: Sequence[RoundMetrics], outcome: RunOutcome,
                malicious: Sequence[int], empty_clients: Sequence[int], model_size: int) -> Dict[str, Any]:
    return {
        "name": config.name,
        "seed": config.seed,
        "strategy": config.strategy.value,
        "rounds": len(history),
        "final_accuracy": outcome.accuracy,
        "final_loss": outcome.loss,
        "cumulative_cost": outcome.cumulative_cost,
        "relative_cost": outcome.relative_cost,
        "cost_intra_total": sum(m.cost.intra for m in history),
        "cost_cross_total": sum(m.cost.cross for m in history),
        "malicious_clients": sorted(int(i) for i in malicious),
        "empty_clients": sorted(int(i) for i in empty_clients),
        "model_parameters": model_size,
        "created_at": now_in(config.timezone).isoformat(),
        "config": config.model_dump(by_alias=True, mode="json"),
    }


def outcome_row(outcome: RunOutcome) -> List[str]:
    return [fmt(outcome.accuracy), fmt(outcome.loss), fmt(outcome.cumulative_cost), fmt(outcome.relative_cost)]


def write_comparison(folder: str, table: ComparisonTable) -> List[str]:
    """comparison.csv: strategy rows x attack accuracy columns + mean relative cost; comparison_cells.csv: one row per cell."""
    grid_rows = []
    for s in table.strategies:
        rel = [table.relative_cost(s, a) for a in table.attacks]
        grid_rows.append([s, *(fmt(table.accuracy(s, a)) for a in table.attacks), fmt(sum(rel) / len(rel))])
    grid = write_csv(os.path.join(folder, "comparison.csv"),
                     ["strategy", *table.attacks, "relative_cost"], grid_rows)

    cell_rows = [[s, a, *outcome_row(table.cells[(s, a)])] for s in table.strategies for a in table.attacks]
    cells = write_csv(os.path.join(folder, "comparison_cells.csv"), ["strategy", "attack", *OUTCOME_COLUMNS], cell_rows)
    return [grid, cells]


def write_ablation(folder: str, outcomes: Sequence[RunOutcome]) -> str:
    rows = [[o.label, *outcome_row(o)] for o in outcomes]
    return write_csv(os.path.join(folder, "ablation.csv"), ["variant", *OUTCOME_COLUMNS], rows)


def write_sweep(folder: str, param: str, values: Sequence[float], outcomes: Sequence[RunOutcome]) -> str:
    rows = [[fmt(v), *outcome_row(o)] for v, o in zip(values, outcomes)]
    return write_csv(os.path.join(folder, "sweep.csv"), [param, *OUTCOME_COLUMNS], rows)


def write_shapley(folder: str, report: ShapleyReport) -> List[str]:
    bad = set(report.malicious)
    rows = [
        [str(i), "1" if i in bad else "0", fmt(report.phi[i]), fmt(report.exact[i]), fmt(report.monte_carlo[i])]
        for i in report.clients
    ]
    table = write_csv(os.path.join(folder, "shapley.csv"), ["client", "malicious", "phi", "exact", "monte_carlo"], rows)
    summary = write_json(os.path.join(folder, "shapley_summary.json"), {
        "probe_round": report.probe_round,
        "num_clients": len(report.clients),
        "corr_phi_exact": report.corr_phi_exact,
        "corr_mc_exact": report.corr_mc_exact,
        "max_abs_error_mc": report.max_abs_error_mc,
        "timings_seconds": report.timings,
    })
    return [table, summary]
