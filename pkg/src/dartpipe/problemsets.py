"""Parse various problem set formats
"""
from __future__ import annotations
import csv
import json
from typing import Iterable
from dataclasses import dataclass, field

from .const import Problem, Source
from .verifier import extract_gold_answer, extract_boxed

import logging
log = logging.getLogger('dartpipe')

@dataclass
class ProblemSet:
    """ A ProblemSet object

    A ProblemSet is an ordered collection of Problems from an origin
    """
    origin: str = None
    problems: dict[str, Problem] = field(default_factory=dict)

    def __len__(self):
        return len(self.problems)

    def __getitem__(self, item):
        return self.problems[item]

    def __iter__(self):
        return self.problems.__iter__()

    def __contains__(self, item):
        return item in self.problems

    def items(self):
        return self.problems.items()

    def values(self):
        return self.problems.values()

    def add(self, problem: Problem):
        if problem.id in self.problems:
            raise ValueError(f"Duplicate problem id '{problem.id}' in {self.origin}")
        self.problems[problem.id] = problem

class ProblemSetParser(object):
    """
    Base class for parsing problem sets
    """
    do_preparse = False
    id_prefix = 'problem'

    def __init__(self, source: str=None):
        """Create a Parser

        @param source: benchmark the problems come from, used when the
            items don't say
        """
        self.source = Source.parse(source) if source else None

    def preparse(self, data) -> Iterable:
        """Some raw datatypes need to be converted into an iterable
        """
        raise NotImplementedError

    def parse_problemset(self, data, origin: str=None) -> ProblemSet:
        """Parse an iterable of problem items
        @param data: An Iterable of problem items
        @returns: A ProblemSet keyed by problem id
        """
        if self.do_preparse:
            data = self.preparse(data)

        parsed = ProblemSet(origin)
        for index, item in enumerate(data):
            parsed.add(self.parse_item(item, index))
        return parsed

    def parse_item(self, item, index: int) -> Problem:
        """Parse an individual problem item

        @param item: an individual problem to be parsed
        @param index: position of the item, used to invent ids
        """
        raise NotImplementedError

    def item_source(self, item: dict, default: Source=Source.OTHER) -> Source:
        if 'source' in item:
            return Source.parse(item['source'])
        return self.source or default

    def item_id(self, item: dict, index: int) -> str:
        for key in ['id', 'problem_id', 'unique_id']:
            if item.get(key) not in [None, '']:
                return str(item[key])
        return f"{self.id_prefix}-{index}"

class ProblemSetParserJSONL(ProblemSetParser):
    """Parse JSONL problems with id, question and gold_answer fields"""
    do_preparse = True

    def preparse(self, data) -> Iterable:
        if isinstance(data, str):
            return [json.loads(line) for line in data.splitlines() if line.strip()]
        return data

    def parse_item(self, item: dict, index: int) -> Problem:
        return Problem(self.item_id(item, index), item['question'], str(item['gold_answer']),
            self.item_source(item))

class ProblemSetParserGSM8K(ProblemSetParserJSONL):
    """ Parse GSM8K rows

    The reference solution ends with '#### <answer>'.
    """
    id_prefix = 'gsm8k'

    def parse_item(self, item: dict, index: int) -> Problem:
        gold = extract_gold_answer(item['answer'])
        return Problem(self.item_id(item, index), item['question'], gold,
            self.item_source(item, Source.GSM8K))

class ProblemSetParserMATH(ProblemSetParserJSONL):
    """ Parse MATH / MATH-500 rows

    MATH-500 carries an explicit 'answer'; the original MATH release only
    has the worked 'solution', whose last boxed value is the answer.
    """
    id_prefix = 'math'

    def parse_item(self, item: dict, index: int) -> Problem:
        gold = item.get('answer')
        if gold in [None, '']:
            gold = extract_boxed(item.get('solution', ''))
        if gold is None:
            raise ValueError(f"MATH item {index} has neither an answer nor a boxed solution")
        return Problem(self.item_id(item, index), item['problem'], str(gold),
            self.item_source(item, Source.MATH))

class ProblemSetParserCSV(ProblemSetParser):
    """ Parse CSV problem sets

    The parser expects the CSV data to include a header with the field names.
    """
    do_preparse = True

    def preparse(self, data) -> Iterable:
        """Use a csv.DictReader to create an iterable from the data
        """
        return csv.DictReader(data.splitlines())

    def parse_item(self, item: dict, index: int) -> Problem:
        return Problem(self.item_id(item, index), item['question'], item['gold_answer'],
            self.item_source(item))

FORMAT_PARSERS = {
    'jsonl': ProblemSetParserJSONL,
    'gsm8k': ProblemSetParserGSM8K,
    'math': ProblemSetParserMATH,
    'csv': ProblemSetParserCSV,
}

# helper function to select the appropriate Parser
def parse_problemset(
    data,
    origin: str=None,
    format: str='jsonl',
    source: str=None) -> ProblemSet:
    """Parse a problem set in the given format
    """
    log.debug(f"parsing {format} problem set from {origin}...")
    try:
        parser = FORMAT_PARSERS[format](source)
    except KeyError:
        raise ValueError(f"Unsupported problem set format '{format}'. Supported: {sorted(FORMAT_PARSERS)}")
    return parser.parse_problemset(data, origin)

def load_problemset(path: str, format: str='jsonl', source: str=None) -> ProblemSet:
    with open(path, encoding='utf-8') as fp:
        data = fp.read()
    return parse_problemset(data, str(path), format, source)
