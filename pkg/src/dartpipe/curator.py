"""Curate the difficulty-adaptive dataset from a verified spectrum run

For each problem the winning chain comes from the largest alpha that
answered correctly, then the fewest reasoning tokens, then the lowest
sample index.
"""
from __future__ import annotations
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Union

import toml

from .const import (GenerationRecord, Problem, SpectrumRun, ExclusionReason, ExportStyle,
    MissingVerdictError, THINK_OPEN, THINK_CLOSE, format_alpha)
from .records import read_jsonl, write_json, write_jsonl, write_text_atomic

import logging
log = logging.getLogger('dartpipe')

CURATED_FILE = 'adaptive.jsonl'
EXCLUSIONS_FILE = 'exclusions.json'
SUMMARY_FILE = 'summary.json'

# LoRA recipe written next to every SFT export. Keys use the LLaMA-Factory
# names so the sidecar can be handed to that trainer with few edits.
SFT_TRAINING_CONFIG = {
    'stage': 'sft',
    'do_train': True,
    'finetuning_type': 'lora',
    'lora_target': 'all',
    'lora_rank': 256,
    'lora_alpha': 16,
    'template': 'qwen3',
    'cutoff_len': 32768,
    'max_samples': 15000,
    'per_device_train_batch_size': 1,
    'gradient_accumulation_steps': 8,
    'learning_rate': 2e-5,
    'num_train_epochs': 3.0,
    'lr_scheduler_type': 'cosine',
    'warmup_ratio': 0.1,
    'bf16': True,
    'optim': 'adamw_torch',
    'val_size': 0.1,
    'eval_strategy': 'steps',
    'eval_steps': 200,
}

SIDECAR_HEADER = """\
# Training configuration for the SFT dataset named below.
# These are the LoRA settings the adaptive dataset was built for.
# Edit freely; nothing in dartpipe reads this file back.
"""

@dataclass(frozen=True)
class CuratedExample:
    """ One row of the adaptive dataset
    """
    problem_id: str
    question: str
    gold_answer: str
    cot_text: str
    alpha_star: float
    reasoning_tokens: int
    provenance: str

    def _asdict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> CuratedExample:
        return cls(str(data['problem_id']), data['question'], str(data['gold_answer']),
            data['cot_text'], float(data['alpha_star']), int(data['reasoning_tokens']),
            data.get('provenance', ''))

@dataclass(frozen=True)
class Exclusion:
    problem_id: str
    reason: ExclusionReason

@dataclass
class ExclusionReport:
    """ Problems left out of the adaptive dataset, and why
    """
    reasons: dict[str, ExclusionReason] = field(default_factory=dict)

    @property
    def excluded_ids(self) -> list[str]:
        return list(self.reasons)

    def add(self, exclusion: Exclusion):
        self.reasons[exclusion.problem_id] = exclusion.reason

    def count(self, reason: ExclusionReason) -> int:
        return sum(1 for r in self.reasons.values() if r is reason)

    def __len__(self):
        return len(self.reasons)

    def __contains__(self, item):
        return item in self.reasons

    def _asdict(self) -> dict:
        return {
            'excluded_ids': self.excluded_ids,
            'reasons': {pid: reason.value for pid, reason in self.reasons.items()},
        }

def verdict_for(record: GenerationRecord, verdicts: dict[str, bool]) -> bool:
    """ERROR records are never correct, whatever the verdict map says"""
    if record.is_error:
        return False
    try:
        return bool(verdicts[record.key])
    except KeyError:
        raise MissingVerdictError(f"No verdict for record {record.key}")

def select_optimal(records: list[GenerationRecord], verdicts: dict[str, bool],
    problem: Problem=None) -> Union[CuratedExample, Exclusion]:
    """Pick the winning chain for one problem

    @param records: every record of a single problem
    @param verdicts: {record key: correct}
    @param problem: supplies question and gold answer for the example
    @returns: a CuratedExample, or an Exclusion when nothing was correct
    """
    if not records:
        raise ValueError("select_optimal needs at least one record")
    problem_ids = {r.problem_id for r in records}
    if len(problem_ids) > 1:
        raise ValueError(f"Records from several problems passed together: {sorted(problem_ids)}")
    problem_id = records[0].problem_id

    correct = [r for r in records if verdict_for(r, verdicts)]
    if not correct:
        if all(r.is_error for r in records):
            return Exclusion(problem_id, ExclusionReason.ALL_ERRORS)
        return Exclusion(problem_id, ExclusionReason.NO_CORRECT)

    winner = min(correct, key=lambda r: (-r.alpha, r.reasoning_tokens, r.sample_index))
    # models that don't emit a think segment put the whole chain in the answer
    cot_text = winner.reasoning_text if winner.reasoning_text.strip() else winner.answer_text
    return CuratedExample(
        problem_id=problem_id,
        question=problem.question if problem else '',
        gold_answer=problem.gold_answer if problem else '',
        cot_text=cot_text,
        alpha_star=winner.alpha,
        reasoning_tokens=winner.reasoning_tokens,
        provenance=winner.key,
    )

def check_verdict_coverage(run: SpectrumRun, verdicts: dict[str, bool]):
    for record in run.records:
        if not record.is_error and record.key not in verdicts:
            raise MissingVerdictError(f"No verdict for record {record.key}")

def build_adaptive_dataset(run: SpectrumRun, verdicts: dict[str, bool],
    out_dir=None) -> tuple[list[CuratedExample], ExclusionReport]:
    """Select the optimal chain for every problem of a run

    Problems come back in run order. With out_dir set the dataset, the
    exclusion report and a summary are written there.
    """
    check_verdict_coverage(run, verdicts)

    by_problem: dict[str, list[GenerationRecord]] = {p.id: [] for p in run.problems}
    for record in run.records:
        by_problem[record.problem_id].append(record)

    examples = []
    report = ExclusionReport()
    for problem in run.problems:
        records = by_problem[problem.id]
        if not records:
            log.warning(f"Problem {problem.id} has no generation records, excluding it")
            report.add(Exclusion(problem.id, ExclusionReason.ALL_ERRORS))
            continue
        selected = select_optimal(records, verdicts, problem)
        if isinstance(selected, Exclusion):
            log.debug(f"Excluding problem {problem.id}: {selected.reason.value}")
            report.add(selected)
        else:
            examples.append(selected)

    log.info(f"Curated {len(examples)} of {len(run.problems)} problems, "
        f"{report.count(ExclusionReason.NO_CORRECT)} unsolved, "
        f"{report.count(ExclusionReason.ALL_ERRORS)} lost to errors")
    if out_dir is not None:
        save_curated(examples, report, run, out_dir)
    return examples, report

def alpha_histogram(examples: list[CuratedExample], alpha_grid: list[float]) -> dict[str, int]:
    """Count winners per alpha, every grid alpha included"""
    counts = {format_alpha(a): 0 for a in alpha_grid}
    for example in examples:
        key = format_alpha(example.alpha_star)
        counts[key] = counts.get(key, 0) + 1
    return counts

def curation_summary(examples: list[CuratedExample], report: ExclusionReport, run: SpectrumRun) -> dict:
    return {
        'run_id': run.run_id,
        'attempted': len(run.problems),
        'curated': len(examples),
        'excluded': len(report),
        'excluded_by_reason': {reason.value: report.count(reason) for reason in ExclusionReason},
        'alpha_star_histogram': alpha_histogram(examples, run.alpha_grid),
    }

def save_curated(examples: list[CuratedExample], report: ExclusionReport, run: SpectrumRun,
    out_dir) -> list[Path]:
    out_dir = Path(out_dir)
    return [
        write_jsonl(out_dir / CURATED_FILE, (ex._asdict() for ex in examples)),
        write_json(out_dir / EXCLUSIONS_FILE, report._asdict()),
        write_json(out_dir / SUMMARY_FILE, curation_summary(examples, report, run)),
    ]

def load_curated(path) -> list[CuratedExample]:
    return [CuratedExample.from_dict(row) for row in read_jsonl(path)]

def load_short_examples(path) -> list[CuratedExample]:
    """Read a compressed-chain file as examples ready for export

    Short chains train the short-chain end of the spectrum, so they carry
    alpha 1.
    """
    examples = []
    for row in read_jsonl(path):
        examples.append(CuratedExample(str(row['problem_id']), row['question'],
            str(row['gold_answer']), row['cot_short'], 1.0, int(row.get('short_tokens', 0)),
            f"short:{row['problem_id']}"))
    return examples


def format_output(example: CuratedExample, style: ExportStyle) -> str:
    if style is ExportStyle.THINK_WRAPPED:
        return f"{THINK_OPEN}{example.cot_text}{THINK_CLOSE}{example.gold_answer}"
    return f"{example.cot_text}\n\n{example.gold_answer}"

def sidecar_path_for(out_path: Path) -> Path:
    return out_path.with_name(f"{out_path.stem}.train.toml")

def export_sft(examples: list[CuratedExample], style: ExportStyle, out_path,
    sidecar_path=None) -> tuple[Path, Path]:
    """Write instruction/output JSONL plus a training-config sidecar

    @param style: THINK_WRAPPED wraps the chain in think tags; PLAIN puts a
        blank line between chain and answer
    @returns: (dataset path, sidecar path)
    """
    if not examples:
        raise ValueError("Nothing to export: the example list is empty")
    if isinstance(style, str):
        style = ExportStyle.parse(style)
    out_path = Path(out_path)
    sidecar_path = Path(sidecar_path) if sidecar_path else sidecar_path_for(out_path)

    rows = [{'instruction': ex.question, 'output': format_output(ex, style)} for ex in examples]
    write_jsonl(out_path, rows)

    config = dict(SFT_TRAINING_CONFIG)
    config['dataset'] = out_path.name
    config['export_style'] = style.value
    config['num_examples'] = len(rows)
    write_text_atomic(sidecar_path, SIDECAR_HEADER + toml.dumps(config))
    log.info(f"Exported {len(rows)} {style.value} examples to {out_path}, training config in {sidecar_path}")
    return out_path, sidecar_path
