"""Decide whether a predicted math answer matches the reference answer

Answers are extracted, normalized into a canonical form, and compared
exactly. Numbers are held as exact rationals; there is no tolerance and
no symbolic algebra, so \\sqrt{8} and 2\\sqrt{2} compare as different strings.
"""
from __future__ import annotations
import enum
import re
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional

from .const import SpectrumRun
from .records import read_jsonl, write_jsonl

import logging
log = logging.getLogger('dartpipe')

class AnswerKind(enum.Enum):
    RATIONAL = 'RATIONAL'
    DECIMAL = 'DECIMAL'
    STRING = 'STRING'

@dataclass(frozen=True)
class CanonicalAnswer:
    """ A normalized answer

    RATIONAL and DECIMAL answers carry an exact numerator/denominator in
    lowest terms with a positive denominator.
    """
    kind: AnswerKind
    value_text: str
    numerator: Optional[int] = None
    denominator: Optional[int] = None

    @property
    def is_numeric(self) -> bool:
        return self.kind is not AnswerKind.STRING

    def render(self) -> str:
        if self.kind is AnswerKind.RATIONAL:
            if self.denominator == 1:
                return str(self.numerator)
            return f"{self.numerator}/{self.denominator}"
        return self.value_text

    def __str__(self):
        return self.render()

BOXED_RE = re.compile(r'\\(?:boxed|fbox)\s*\{')
BOXED_BARE_RE = re.compile(r'\\boxed\s+([^\s${}]+)')
TEXT_WRAPPER_RE = re.compile(r'\\(?:text|textbf|textit|textrm|mathrm|mathbf|mbox|operatorname)\s*\{')
LAST_LINE_ANSWER_RE = re.compile(
    r'-?\\frac\{-?\d+\}\{-?\d+\}'
    r'|-?\d+(?:,\d{3})*(?:\.\d+)?(?:\s*/\s*-?\d+)?'
    r'|-?\.\d+')
GOLD_MARKER = '####'

THOUSANDS_RE = re.compile(r'[+-]?\d{1,3}(?:,\d{3})+(?:\.\d+)?')
INT_RE = re.compile(r'[+-]?\d+')
DECIMAL_RE = re.compile(r'[+-]?(?:\d+\.\d*|\.\d+)')
SLASH_FRAC_RE = re.compile(r'([+-]?\d+)/([+-]?\d+)')
LATEX_FRAC_RE = re.compile(r'([+-]?)\\frac\{([+-]?\d+)\}\{([+-]?\d+)\}')
LATEX_FRAC_SHORT_RE = re.compile(r'([+-]?)\\frac(\d)(\d)')
ASSIGNMENT_RE = re.compile(r'^[a-zA-Z]\s*=\s*(?=\S)')
DEGREE_RE = re.compile(r'\^\s*\{?\s*\\circ\s*\}?')
LEFT_RIGHT_RE = re.compile(r'\\(?:left|right)(?![a-zA-Z])')

SPACING_COMMANDS = ['\\,', '\\!', '\\;', '\\:', '\\ ']
TRAILING_PUNCTUATION = '.,;:!'

def _matching_brace(text: str, open_index: int) -> int:
    """Index of the brace closing the one at open_index, or -1"""
    depth = 0
    for i in range(open_index, len(text)):
        if text[i] == '{':
            depth += 1
        elif text[i] == '}':
            depth -= 1
            if depth == 0:
                return i
    return -1

def extract_boxed(text: str) -> Optional[str]:
    """Content of the last balanced \\boxed{...} group, or None"""
    if not text:
        return None
    found = []
    for match in BOXED_RE.finditer(text):
        open_index = match.end() - 1
        close = _matching_brace(text, open_index)
        if close != -1:
            found.append((match.start(), text[open_index + 1:close]))
    for match in BOXED_BARE_RE.finditer(text):
        found.append((match.start(), match.group(1)))
    if not found:
        return None
    return max(found)[1]

def extract_final_answer(answer_text: str) -> str:
    """Pull the final answer out of a model's answer segment

    The last boxed group wins. Failing that we take the last number or
    fraction on the last non-empty line, and failing that the whole text.
    """
    if not answer_text or not answer_text.strip():
        return ''
    boxed = extract_boxed(answer_text)
    if boxed is not None:
        return boxed.strip()

    lines = [line for line in answer_text.strip().splitlines() if line.strip()]
    matches = list(LAST_LINE_ANSWER_RE.finditer(lines[-1]))
    if matches:
        return matches[-1].group(0).strip()
    return answer_text.strip()

def extract_gold_answer(text: str) -> str:
    """Pull a reference answer out of a benchmark solution

    Handles the GSM8K '#### answer' convention and boxed solutions.
    """
    if text is None:
        return ''
    text = str(text)
    if GOLD_MARKER in text:
        gold = text.rsplit(GOLD_MARKER, 1)[1].strip()
        if THOUSANDS_RE.fullmatch(gold):
            gold = gold.replace(',', '')
        return gold
    boxed = extract_boxed(text)
    if boxed is not None:
        return boxed.strip()
    return text.strip()


def _unwrap_text_commands(s: str) -> str:
    """Replace \\text{...} and friends by their content"""
    while True:
        match = TEXT_WRAPPER_RE.search(s)
        if match is None:
            return s
        open_index = match.end() - 1
        close = _matching_brace(s, open_index)
        if close == -1:
            return s
        s = s[:match.start()] + s[open_index + 1:close] + s[close + 1:]

def _strip_outer_braces(s: str) -> str:
    while s.startswith('{') and _matching_brace(s, 0) == len(s) - 1:
        s = s[1:-1].strip()
    return s

def _clean(s: str) -> str:
    """Apply the textual clean-ups until nothing changes"""
    prev = None
    while s != prev:
        prev = s
        s = s.strip().replace('$', '')
        for command in SPACING_COMMANDS:
            s = s.replace(command, '')
        s = LEFT_RIGHT_RE.sub('', s)
        s = s.replace('\\dfrac', '\\frac').replace('\\tfrac', '\\frac')
        s = DEGREE_RE.sub('', s)
        s = s.replace('\\%', '').replace('%', '')
        s = _unwrap_text_commands(s)
        s = _strip_outer_braces(s.strip())
        s = s.rstrip(TRAILING_PUNCTUATION).strip()
        s = ASSIGNMENT_RE.sub('', s)
        s = ''.join(s.split())
    return s

def _rational(value: Fraction) -> CanonicalAnswer:
    answer = CanonicalAnswer(AnswerKind.RATIONAL, '', value.numerator, value.denominator)
    return CanonicalAnswer(AnswerKind.RATIONAL, answer.render(), value.numerator, value.denominator)

def _parse_number(s: str) -> Optional[CanonicalAnswer]:
    s = re.sub(r'\s*/\s*', '/', s)
    if THOUSANDS_RE.fullmatch(s):
        s = s.replace(',', '')

    if INT_RE.fullmatch(s):
        return _rational(Fraction(int(s)))

    if DECIMAL_RE.fullmatch(s):
        try:
            value = Decimal(s)
        except InvalidOperation:
            return None
        exact = Fraction(value)
        # integral decimals such as 2.00 are plain integers
        if exact.denominator == 1:
            return _rational(exact)
        text = format(value.normalize(), 'f')
        return CanonicalAnswer(AnswerKind.DECIMAL, text, exact.numerator, exact.denominator)

    for pattern in [SLASH_FRAC_RE]:
        match = pattern.fullmatch(s)
        if match:
            num, den = int(match.group(1)), int(match.group(2))
            if den == 0:
                return None
            return _rational(Fraction(num, den))

    for pattern in [LATEX_FRAC_RE, LATEX_FRAC_SHORT_RE]:
        match = pattern.fullmatch(s)
        if match:
            sign, num, den = match.group(1), int(match.group(2)), int(match.group(3))
            if den == 0:
                return None
            value = Fraction(num, den)
            return _rational(-value if sign == '-' else value)
    return None

def normalize(raw: str) -> CanonicalAnswer:
    """Normalize an extracted answer into a CanonicalAnswer

    Integers and fractions become RATIONAL, non-integral decimals DECIMAL,
    anything else STRING.
    """
    s = _clean(raw or '')
    number = _parse_number(s)
    if number is not None:
        return number
    return CanonicalAnswer(AnswerKind.STRING, s)

def is_equal(pred: CanonicalAnswer, gold: CanonicalAnswer) -> bool:
    """Exact equality of two canonical answers

    Numbers compare by integer cross-multiplication. A rational with no
    finite decimal expansion can never equal a DECIMAL this way, which is
    exactly the rule we want.
    """
    if pred.is_numeric and gold.is_numeric:
        return pred.numerator * gold.denominator == gold.numerator * pred.denominator
    return pred.value_text.casefold() == gold.value_text.casefold()

def verify_answer(answer_text: str, gold_answer: str) -> bool:
    """Extract, normalize and compare in one go"""
    pred = normalize(extract_final_answer(answer_text))
    gold = normalize(extract_gold_answer(gold_answer))
    if pred.kind is AnswerKind.STRING and not pred.value_text:
        return False
    return is_equal(pred, gold)

def verify_predictions(pred_rows: Iterable[dict], gold_rows: Iterable[dict]) -> list[dict]:
    """Verify prediction rows against gold rows joined on problem id

    @param pred_rows: dicts with 'problem_id' and 'answer_text' (or
        'prediction' / 'raw_text')
    @param gold_rows: dicts with 'id' (or 'problem_id') and 'gold_answer'
    @returns: one {problem_id, extracted, correct} row per prediction
    """
    golds = {}
    for row in gold_rows:
        golds[str(row.get('id', row.get('problem_id')))] = str(row['gold_answer'])

    results = []
    for row in pred_rows:
        problem_id = str(row.get('problem_id', row.get('id')))
        text = row.get('answer_text', row.get('prediction', row.get('raw_text', '')))
        if problem_id not in golds:
            log.warning(f"No gold answer for problem '{problem_id}', marking incorrect")
            correct = False
        else:
            correct = verify_answer(text, golds[problem_id])
        results.append({
            'problem_id': problem_id,
            'extracted': extract_final_answer(text),
            'correct': correct,
        })
    return results

VERDICTS_FILE = 'verdicts.jsonl'

def verify_run(run: SpectrumRun, run_dir=None) -> dict[str, bool]:
    """Verify every record of a run against its problem's gold answer

    ERROR records are always incorrect. With run_dir set, the verdicts are
    also written to verdicts/verdicts.jsonl.

    @returns: {record key: correct}
    """
    golds = {p.id: p.gold_answer for p in run.problems}
    verdicts = {}
    rows = []
    for record in run.records:
        extracted = '' if record.is_error else extract_final_answer(record.answer_text)
        if record.is_error:
            correct = False
        else:
            correct = verify_answer(record.answer_text, golds[record.problem_id])
        verdicts[record.key] = correct
        rows.append({
            'key': record.key,
            'problem_id': record.problem_id,
            'alpha': record.alpha,
            'sample_index': record.sample_index,
            'extracted': extracted,
            'correct': correct,
        })
    log.info(f"Verified {len(rows)} records, {sum(verdicts.values())} correct")
    if run_dir is not None:
        write_jsonl(verdicts_path(run_dir), rows)
    return verdicts

def verdicts_path(run_dir) -> Path:
    return Path(run_dir) / 'verdicts' / VERDICTS_FILE

def load_verdicts(run_dir) -> dict[str, bool]:
    path = verdicts_path(run_dir)
    if not path.exists():
        raise FileNotFoundError(f"No verdicts in {run_dir}, run verify first")
    return {row['key']: bool(row['correct']) for row in read_jsonl(path)}
