"""Persist generation records, runs and other pipeline artifacts
"""
from __future__ import annotations
import json
import os
import threading
from pathlib import Path
from typing import Iterable

from .const import GenerationRecord, Problem, SpectrumRun

import logging
log = logging.getLogger('dartpipe')

RUN_DIRS = ['fused', 'generations', 'verdicts', 'curated', 'reports']

RECORDS_FILE = 'records.jsonl'
RUN_INFO_FILE = 'run.json'
PROBLEMS_FILE = 'problems.jsonl'

def dumps_row(row: dict) -> str:
    return json.dumps(row, ensure_ascii=False)

def read_jsonl(path: str | os.PathLike) -> list[dict]:
    """Read a JSONL file

    A crash can leave a half-written last line behind. We drop it with a
    warning, but a bad line anywhere else is an error.
    """
    path = Path(path)
    rows = []
    with open(path, encoding='utf-8') as fp:
        lines = fp.read().split('\n')
    # the file normally ends with a newline, leaving one empty trailing item
    while lines and lines[-1].strip() == '':
        lines.pop()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rows.append(json.loads(line))
        except json.JSONDecodeError:
            if lineno == len(lines):
                log.warning(f"Ignoring truncated last line {lineno} of {path}")
                break
            raise ValueError(f"{path}:{lineno} is not valid JSON")
    return rows

def write_text_atomic(path: str | os.PathLike, text: str) -> Path:
    """Write a whole file via a temporary file and rename"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(f".{path.name}.partial")
    with open(tmp_path, 'w', encoding='utf-8', newline='\n') as fp:
        fp.write(text)
        fp.flush()
        os.fsync(fp.fileno())
    os.replace(tmp_path, path)
    return path

def write_json(path: str | os.PathLike, obj) -> Path:
    return write_text_atomic(path, json.dumps(obj, indent=2, ensure_ascii=False) + '\n')

def write_jsonl(path: str | os.PathLike, rows: Iterable[dict]) -> Path:
    return write_text_atomic(path, ''.join(dumps_row(row) + '\n' for row in rows))

def read_json(path: str | os.PathLike):
    with open(path, encoding='utf-8') as fp:
        return json.load(fp)

class JsonlAppender:
    """ Append-only JSONL writer shared by worker threads

    Every row is written and flushed under one lock, so lines never
    interleave and a crash loses at most the line being written.
    """
    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._repair_tail()
        self._fp = open(self.path, 'a', encoding='utf-8', newline='\n')

    def _repair_tail(self):
        """Terminate a half-written last line so new rows start cleanly"""
        if not self.path.exists() or self.path.stat().st_size == 0:
            return
        with open(self.path, 'rb') as fp:
            fp.seek(-1, os.SEEK_END)
            last = fp.read(1)
        if last != b'\n':
            log.warning(f"{self.path} ends mid-line, terminating it before appending")
            with open(self.path, 'ab') as fp:
                fp.write(b'\n')

    def append(self, row: dict):
        line = dumps_row(row) + '\n'
        with self._lock:
            self._fp.write(line)
            self._fp.flush()

    def close(self):
        with self._lock:
            if not self._fp.closed:
                os.fsync(self._fp.fileno())
                self._fp.close()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_value, traceback):
        self.close()


def load_records(path: str | os.PathLike) -> dict[str, GenerationRecord]:
    """Load persisted records keyed by record key, last row wins"""
    path = Path(path)
    records: dict[str, GenerationRecord] = {}
    if not path.exists():
        return records
    for row in read_jsonl(path):
        record = GenerationRecord.from_dict(row)
        records[record.key] = record
    return records

def generations_dir(run_dir: str | os.PathLike) -> Path:
    return Path(run_dir) / 'generations'

def save_run_info(run: SpectrumRun, run_dir: str | os.PathLike, extra: dict=None):
    """Write the run description and its problem set next to the records"""
    gen_dir = generations_dir(run_dir)
    info = {
        'run_id': run.run_id,
        'alpha_grid': run.alpha_grid,
        'repetitions': run.repetitions,
        'created_at': run.created_at,
    }
    if extra:
        info.update(extra)
    write_json(gen_dir / RUN_INFO_FILE, info)
    write_jsonl(gen_dir / PROBLEMS_FILE, (p._asdict() for p in run.problems))

def load_spectrum_run(run_dir: str | os.PathLike) -> SpectrumRun:
    """Load a (possibly partial) run from its run directory

    Records come back sorted by problem order, alpha, then sample index.
    """
    gen_dir = generations_dir(run_dir)
    info_path = gen_dir / RUN_INFO_FILE
    if not info_path.exists():
        raise FileNotFoundError(f"No generation run found in {run_dir}")
    info = read_json(info_path)
    problems = [Problem.from_dict(row) for row in read_jsonl(gen_dir / PROBLEMS_FILE)]
    records = load_records(gen_dir / RECORDS_FILE)

    run = SpectrumRun(info['run_id'], [float(a) for a in info['alpha_grid']], problems,
        created_at=info.get('created_at', ''), repetitions=int(info.get('repetitions', 1)))
    run.records = sort_records(records.values(), problems)
    return run

def sort_records(records: Iterable[GenerationRecord], problems: list[Problem]) -> list[GenerationRecord]:
    order = {p.id: i for i, p in enumerate(problems)}
    return sorted(records, key=lambda r: (order.get(r.problem_id, len(order)), r.problem_id,
        r.alpha, r.sample_index))

def ensure_run_dirs(run_dir: str | os.PathLike) -> Path:
    run_dir = Path(run_dir)
    for name in RUN_DIRS:
        (run_dir / name).mkdir(parents=True, exist_ok=True)
    return run_dir
