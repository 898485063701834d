"""Reasoning efficiency metrics: Pass@1, ACT, AAT and the deltas between methods
"""
from __future__ import annotations
from dataclasses import dataclass, asdict
from decimal import Decimal, ROUND_HALF_UP
from pathlib import Path
from typing import Iterable, Optional

from .const import GenerationRecord, SpectrumRun, Segment, format_alpha
from .curator import verdict_for
from .records import write_json, write_text_atomic

import logging
log = logging.getLogger('dartpipe')

REPORT_JSON = 'report.json'
REPORT_TEXT = 'report.txt'
BASELINE_METHOD = 'baseline'
MISSING_CELL = '-'
SPEEDUP_SIGN = '×'

@dataclass
class MethodStats:
    """ Pass@1, ACT and AAT of one method on one dataset

    act and aat are None when no record had usable token counts.
    """
    method: str
    dataset: str
    pass_at_1: float
    act: Optional[float]
    aat: Optional[float]
    n: int
    token_coverage: int = 0

    def _asdict(self) -> dict:
        return asdict(self)

@dataclass(frozen=True)
class Delta:
    pass_delta_points: float
    act_reduction: float
    aat_reduction: float
    act_speedup: float

    def _asdict(self) -> dict:
        return asdict(self)

def round_half_away(value: float, digits: int) -> Decimal:
    """Round to digits decimals, halves away from zero

    Works on the shortest repr of the float so 0.125 really is a half.
    """
    return Decimal(repr(float(value))).quantize(Decimal(1).scaleb(-digits), rounding=ROUND_HALF_UP)

def pass_at_1(verdicts: list[bool]) -> float:
    if not verdicts:
        raise ValueError("Pass@1 of an empty verdict list is undefined")
    return sum(1 for v in verdicts if v) / len(verdicts)

def usable_records(records: Iterable[GenerationRecord]) -> list[GenerationRecord]:
    """Records whose token counts may enter ACT/AAT

    ERROR records and empty generations are left out.
    """
    return [r for r in records if not r.is_error and (r.raw_text or r.total_tokens)]

def avg_tokens(records: list[GenerationRecord], segment: Segment) -> float:
    """Mean reasoning (ACT) or total (AAT) token count"""
    if not records:
        raise ValueError("No records to average")
    usable = usable_records(records)
    if len(usable) < len(records):
        log.info(f"Token averages cover {len(usable)} of {len(records)} records")
    if not usable:
        raise ValueError("Every record is an error or empty, no tokens to average")
    if segment is Segment.REASONING:
        counts = [r.reasoning_tokens for r in usable]
    else:
        counts = [r.total_tokens for r in usable]
    return sum(counts) / len(counts)

def method_stats(method: str, dataset: str, records: list[GenerationRecord],
    verdicts: dict[str, bool]) -> MethodStats:
    """Build MethodStats from a method's records on one dataset

    ERROR records count against Pass@1 but stay out of the token means.
    """
    if not records:
        raise ValueError(f"No records for method {method} on {dataset}")
    usable = usable_records(records)
    act = avg_tokens(records, Segment.REASONING) if usable else None
    aat = avg_tokens(records, Segment.TOTAL) if usable else None
    return MethodStats(method, dataset, pass_at_1([verdict_for(r, verdicts) for r in records]),
        act, aat, len(records), len(usable))

def compare(base: MethodStats, method: MethodStats) -> Delta:
    """Delta of method against base, as Table-style reductions and speedup

    Raises ZeroDivisionError when either ACT (or base AAT) is zero.
    """
    if base.dataset != method.dataset:
        raise ValueError(f"Can't compare {method.method} on {method.dataset} with {base.method} on {base.dataset}")
    if None in (base.act, base.aat, method.act, method.aat):
        raise ValueError(f"Token averages missing for {base.method} or {method.method} on {base.dataset}")
    if base.act == 0 or method.act == 0 or base.aat == 0:
        raise ZeroDivisionError(f"Zero token average comparing {method.method} with {base.method} on {base.dataset}")
    return Delta(
        pass_delta_points=(method.pass_at_1 - base.pass_at_1) * 100,
        act_reduction=(base.act - method.act) / base.act,
        aat_reduction=(base.aat - method.aat) / base.aat,
        act_speedup=base.act / method.act,
    )

def format_reduction(reduction: float) -> str:
    """A reduction of 0.812 reads '(-81.2%)'"""
    change = round_half_away(-reduction * 100, 1)
    sign = '-' if change < 0 else '+'
    return f"({sign}{abs(change)}%)"

def format_points(points: float) -> str:
    change = round_half_away(points, 1)
    sign = '-' if change < 0 else '+'
    return f"({sign}{abs(change)})"

def format_speedup(speedup: float) -> str:
    return f"{round_half_away(speedup, 2)}{SPEEDUP_SIGN}"


@dataclass
class ReportRow:
    stats: MethodStats
    delta: Optional[Delta] = None
    is_baseline: bool = False

    def cells(self) -> dict[str, str]:
        s = self.stats
        cells = {
            'pass_at_1': str(round_half_away(s.pass_at_1 * 100, 1)),
            'act': MISSING_CELL if s.act is None else str(round_half_away(s.act, 2)),
            'aat': MISSING_CELL if s.aat is None else str(round_half_away(s.aat, 2)),
            'speedup': '',
        }
        if self.delta is not None:
            cells['pass_at_1'] += ' ' + format_points(self.delta.pass_delta_points)
            cells['act'] += ' ' + format_reduction(self.delta.act_reduction)
            cells['aat'] += ' ' + format_reduction(self.delta.aat_reduction)
            cells['speedup'] = format_speedup(self.delta.act_speedup)
        return cells

    def _asdict(self) -> dict:
        row = self.stats._asdict()
        row['is_baseline'] = self.is_baseline
        row['delta'] = self.delta._asdict() if self.delta else None
        row['rendered'] = self.cells()
        return row

def compare_all(stats: list[MethodStats], baseline: str=BASELINE_METHOD) -> list[ReportRow]:
    """Pair every method with the baseline method of its dataset"""
    bases = {s.dataset: s for s in stats if s.method == baseline}
    rows = []
    for s in stats:
        if s.method == baseline:
            rows.append(ReportRow(s, is_baseline=True))
            continue
        base = bases.get(s.dataset)
        delta = None
        if base is None:
            log.warning(f"No {baseline} on {s.dataset}, reporting {s.method} without deltas")
        else:
            try:
                delta = compare(base, s)
            except (ValueError, ZeroDivisionError) as e:
                log.warning(f"No deltas for {s.method} on {s.dataset}: {e}")
        rows.append(ReportRow(s, delta))
    return rows

def stats_from_run(run: SpectrumRun, verdicts: dict[str, bool],
    baseline_run: SpectrumRun=None, baseline_verdicts: dict[str, bool]=None) -> list[MethodStats]:
    """One MethodStats per (dataset, alpha), plus the baseline

    Datasets are the problem sources. Without a baseline run, the lowest
    alpha of this run is the baseline.
    """
    sources = {p.id: p.source.value for p in run.problems}
    datasets = sorted(set(sources.values()))
    stats = []
    for dataset in datasets:
        records = [r for r in run.records if sources[r.problem_id] == dataset]
        if baseline_run is not None:
            base_sources = {p.id: p.source.value for p in baseline_run.problems}
            base_records = [r for r in baseline_run.records if base_sources[r.problem_id] == dataset]
            if base_records:
                stats.append(method_stats(BASELINE_METHOD, dataset, base_records, baseline_verdicts))
        for index, alpha in enumerate(run.alpha_grid):
            alpha_records = [r for r in records if format_alpha(r.alpha) == format_alpha(alpha)]
            if not alpha_records:
                continue
            if index == 0 and baseline_run is None:
                stats.append(method_stats(BASELINE_METHOD, dataset, alpha_records, verdicts))
            stats.append(method_stats(f"alpha={format_alpha(alpha)}", dataset, alpha_records, verdicts))
    return stats

def render_table(rows: list[ReportRow]) -> str:
    """Aligned plain-text table: methods down, a Pass@1/ACT/AAT/Speedup group per dataset"""
    datasets = []
    methods = []
    cells = {}
    for row in rows:
        if row.stats.dataset not in datasets:
            datasets.append(row.stats.dataset)
        if row.stats.method not in methods:
            methods.append(row.stats.method)
        cells[(row.stats.method, row.stats.dataset)] = row.cells()

    columns = ['pass_at_1', 'act', 'aat', 'speedup']
    titles = {'pass_at_1': 'Pass@1', 'act': 'ACT', 'aat': 'AAT', 'speedup': 'Speedup'}
    header_top = ['']
    header = ['Method']
    body = [[m] for m in methods]
    for dataset in datasets:
        for column in columns:
            header_top.append(dataset if column == 'pass_at_1' else '')
            header.append(titles[column])
            for line, method in zip(body, methods):
                cell = cells.get((method, dataset))
                line.append(MISSING_CELL if cell is None else cell[column])

    table = [header_top, header] + body
    widths = [max(len(line[i]) for line in table) for i in range(len(header))]
    text = []
    for line in table:
        text.append('  '.join(cell.ljust(width) for cell, width in zip(line, widths)).rstrip())
    return '\n'.join(text) + '\n'

def render_report(rows: list[ReportRow], out_dir) -> tuple[Path, Path]:
    """Write report.json and report.txt into out_dir"""
    if not rows:
        raise ValueError("Nothing to report")
    out_dir = Path(out_dir)
    report = {
        'datasets': sorted({row.stats.dataset for row in rows}),
        'rows': [row._asdict() for row in rows],
    }
    json_path = write_json(out_dir / REPORT_JSON, report)
    text_path = write_text_atomic(out_dir / REPORT_TEXT, render_table(rows))
    log.info(f"Wrote efficiency report to {json_path} and {text_path}")
    return json_path, text_path
