""" Constant objects and record types used by DartPipe
"""
from __future__ import annotations
import enum
from dataclasses import dataclass, field, fields, asdict
from datetime import datetime, timezone
from typing import Optional

from importlib.metadata import version, PackageNotFoundError

import logging
log = logging.getLogger('dartpipe')

try:
    TOOL_VERSION = version('dartpipe')
except PackageNotFoundError:
    TOOL_VERSION = '0.0.0+local'

# Think delimiters emitted by the Qwen3 and R1-distill model families
THINK_OPEN = '<think>'
THINK_CLOSE = '</think>'

# Evaluation defaults: 32k generation budget at temperature 0.6
DEFAULT_TEMPERATURE = 0.6
DEFAULT_MAX_TOKENS = 32768
DEFAULT_TOP_P = 0.95

# 11 evenly spaced fusion coefficients
DEFAULT_ALPHA_GRID = [round(i / 10, 3) for i in range(11)]

ALPHA_DENSITIES = {
    'loose': 5,
    'middle': 10,
    'default': 11,
    'dense': 20,
}

def format_alpha(alpha: float) -> str:
    """Fixed 3-decimal rendering used in filenames, keys and reports"""
    return f"{alpha:.3f}"

def record_key(problem_id: str, alpha: float, sample_index: int) -> str:
    """Build the resumability key of a generation"""
    return f"{problem_id}|{format_alpha(alpha)}|{sample_index}"

def utc_now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec='seconds')


class DartConfigError(ValueError):
    """Configuration is invalid or an endpoint rejected our request"""

class EndpointConfigError(DartConfigError):
    """An inference endpoint answered with a 4xx status"""

class CheckpointFormatError(ValueError):
    """A checkpoint container could not be parsed"""

class IncompatibleCheckpointsError(ValueError):
    """Two checkpoints cannot be fused"""

class NonFiniteTensorError(ValueError):
    """A tensor holds NaN or Inf where a finite value is required"""

    def __init__(self, tensor: str, index: int, value: float):
        self.tensor = tensor
        self.index = index
        self.value = value
        super().__init__(f"Non-finite value {value} in tensor '{tensor}' at flat index {index}")

class MissingVerdictError(KeyError):
    """No verdict is available for a generation record"""

class FlatCurveError(ValueError):
    """Every accuracy is identical, so the curve slope can't be identified"""

class StageFailure(RuntimeError):
    """A pipeline stage failed and downstream stages were halted"""


class DType(enum.Enum):
    """Storage dtypes we can fuse. Values are the safetensors header names."""
    F32 = 'F32'
    F16 = 'F16'
    BF16 = 'BF16'

    @property
    def itemsize(self) -> int:
        return 4 if self is DType.F32 else 2

class Source(enum.Enum):
    GSM8K = 'GSM8K'
    MATH = 'MATH'
    AMC23 = 'AMC23'
    OLYMPIAD = 'OLYMPIAD'
    AIME25 = 'AIME25'
    OTHER = 'OTHER'

    @classmethod
    def parse(cls, value: str=None) -> Source:
        if value in [None, '']:
            return cls.OTHER
        key = str(value).upper().replace('-', '').replace('_', '')
        aliases = {
            'MATH500': cls.MATH,
            'OLYMPIADBENCH': cls.OLYMPIAD,
            'OLYMPAID': cls.OLYMPIAD,
            'AIME2025': cls.AIME25,
            'AMC2023': cls.AMC23,
        }
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            log.debug(f"Unknown problem source '{value}', using OTHER")
            return cls.OTHER

class FinishReason(enum.Enum):
    STOP = 'STOP'
    LENGTH = 'LENGTH'
    ERROR = 'ERROR'

    @classmethod
    def from_server(cls, value: str=None) -> FinishReason:
        """Map an OpenAI-style finish_reason onto ours"""
        if value == 'length':
            return cls.LENGTH
        return cls.STOP

class TokenSource(enum.Enum):
    SERVER_USAGE = 'SERVER_USAGE'
    LOCAL_APPROX = 'LOCAL_APPROX'

class Segment(enum.Enum):
    REASONING = 'REASONING'
    TOTAL = 'TOTAL'

class ExclusionReason(enum.Enum):
    NO_CORRECT = 'NO_CORRECT'
    ALL_ERRORS = 'ALL_ERRORS'

class ExportStyle(enum.Enum):
    PLAIN = 'PLAIN'
    THINK_WRAPPED = 'THINK_WRAPPED'

    @classmethod
    def parse(cls, value: str) -> ExportStyle:
        aliases = {'think': cls.THINK_WRAPPED, 'plain': cls.PLAIN}
        if value in aliases:
            return aliases[value]
        return cls(value)

class StageStatus(enum.Enum):
    PENDING = 'PENDING'
    RUNNING = 'RUNNING'
    DONE = 'DONE'
    FAILED = 'FAILED'


@dataclass(frozen=True)
class Problem:
    """ A question with its reference answer
    """
    id: str
    question: str
    gold_answer: str
    source: Source = Source.OTHER

    def __post_init__(self):
        if not self.question or not self.question.strip():
            raise ValueError(f"Problem '{self.id}' has an empty question")

    def _asdict(self) -> dict:
        return {
            'id': self.id,
            'question': self.question,
            'gold_answer': self.gold_answer,
            'source': self.source.value,
        }

    @classmethod
    def from_dict(cls, data: dict) -> Problem:
        return cls(str(data['id']), data['question'], str(data['gold_answer']),
            Source.parse(data.get('source')))

@dataclass
class SamplingParams:
    temperature: float = DEFAULT_TEMPERATURE
    max_tokens: int = DEFAULT_MAX_TOKENS
    top_p: float = DEFAULT_TOP_P
    seed: Optional[int] = None

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if int(self.max_tokens) <= 0:
            raise ValueError(f"max_tokens must be positive, got {self.max_tokens}")
        if not 0 < self.top_p <= 1:
            raise ValueError(f"top_p must be in (0, 1], got {self.top_p}")

    def _asdict(self) -> dict:
        return asdict(self)

@dataclass
class GenerationRecord:
    """ One (problem, alpha, sample) generation
    """
    problem_id: str
    alpha: float
    sample_index: int
    raw_text: str = ''
    reasoning_text: str = ''
    answer_text: str = ''
    reasoning_tokens: int = 0
    answer_tokens: int = 0
    total_tokens: int = 0
    token_source: TokenSource = TokenSource.LOCAL_APPROX
    endpoint: str = ''
    finish_reason: FinishReason = FinishReason.STOP
    truncated_think: bool = False
    error: str = ''

    @property
    def key(self) -> str:
        return record_key(self.problem_id, self.alpha, self.sample_index)

    @property
    def is_error(self) -> bool:
        return self.finish_reason is FinishReason.ERROR

    def _asdict(self) -> dict:
        dictval = asdict(self)
        dictval['token_source'] = self.token_source.value
        dictval['finish_reason'] = self.finish_reason.value
        return dictval

    @classmethod
    def from_dict(cls, data: dict) -> GenerationRecord:
        known = {f.name for f in fields(cls)}
        data = {k: v for k, v in data.items() if k in known}
        data['token_source'] = TokenSource(data.get('token_source', 'LOCAL_APPROX'))
        data['finish_reason'] = FinishReason(data.get('finish_reason', 'STOP'))
        data['alpha'] = float(data['alpha'])
        return cls(**data)

@dataclass
class SpectrumRun:
    """ Every GenerationRecord for a problem set across the sampled alphas
    """
    run_id: str
    alpha_grid: list[float]
    problems: list[Problem]
    records: list[GenerationRecord] = field(default_factory=list)
    created_at: str = field(default_factory=utc_now_iso)
    repetitions: int = 1

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return self.records.__iter__()

    def problem(self, problem_id: str) -> Problem:
        for problem in self.problems:
            if problem.id == problem_id:
                return problem
        raise KeyError(f"Unknown problem id '{problem_id}'")

    def records_for(self, problem_id: str) -> list[GenerationRecord]:
        return [r for r in self.records if r.problem_id == problem_id]

    def error_counts(self) -> dict[str, int]:
        """Count ERROR records per alpha"""
        counts = {format_alpha(a): 0 for a in self.alpha_grid}
        for record in self.records:
            if record.is_error:
                counts[format_alpha(record.alpha)] = counts.get(format_alpha(record.alpha), 0) + 1
        return counts

    def check(self):
        """Confirm every record belongs to the grid and to a known problem"""
        grid = {format_alpha(a) for a in self.alpha_grid}
        ids = {p.id for p in self.problems}
        for record in self.records:
            if format_alpha(record.alpha) not in grid:
                raise ValueError(f"Record {record.key} has alpha outside the run grid")
            if record.problem_id not in ids:
                raise ValueError(f"Record {record.key} references an unknown problem")
