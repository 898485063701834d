"""Tests of the problem set parsers
"""
import json

import pytest

from dartpipe.const import Source
from dartpipe.problemsets import (ProblemSetParserJSONL, ProblemSetParserGSM8K, ProblemSetParserMATH,
    parse_problemset, load_problemset)

def test_jsonl_problems():
    data = '\n'.join(json.dumps(row) for row in [
        {'id': 'a1', 'question': 'What is 1 + 1?', 'gold_answer': 2},
        {'id': 'a2', 'question': 'What is 2 + 2?', 'gold_answer': '4', 'source': 'math-500'},
    ]) + '\n\n'
    ps = ProblemSetParserJSONL().parse_problemset(data, 'jsonlfile')

    assert len(ps) == 2
    assert 'a1' in ps
    assert ps['a1'].gold_answer == '2'
    assert ps['a1'].source == Source.OTHER
    assert ps['a2'].source == Source.MATH
    assert list(ps) == ['a1', 'a2']

def test_default_source():
    data = json.dumps({'question': 'Q?', 'gold_answer': '1'})
    ps = parse_problemset(data, 'jsonlfile', 'jsonl', 'aime2025')

    assert ps['problem-0'].source == Source.AIME25

def test_gsm8k_rows():
    data = '\n'.join(json.dumps(row) for row in [
        {'question': 'Janet has 3 ducks and buys 4. How many?', 'answer': '3 + 4 = 7\n#### 7'},
        {'question': 'How many grains?', 'answer': 'Lots.\n#### 12,500'},
    ])
    ps = ProblemSetParserGSM8K().parse_problemset(data, 'gsm8k')

    assert list(ps) == ['gsm8k-0', 'gsm8k-1']
    assert ps['gsm8k-0'].gold_answer == '7'
    assert ps['gsm8k-1'].gold_answer == '12500'
    assert ps['gsm8k-1'].source == Source.GSM8K

def test_math_rows():
    data = '\n'.join(json.dumps(row) for row in [
        {'unique_id': 'test/algebra/1.json', 'problem': 'Solve for x.', 'answer': '\\frac{1}{2}'},
        {'problem': 'Find the angle.', 'solution': 'It is $\\boxed{90^\\circ}$.'},
    ])
    ps = ProblemSetParserMATH().parse_problemset(data, 'math')

    assert ps['test/algebra/1.json'].gold_answer == '\\frac{1}{2}'
    assert ps['math-1'].gold_answer == '90^\\circ'
    assert ps['math-1'].source == Source.MATH

def test_math_row_without_answer():
    data = json.dumps({'problem': 'Find it.', 'solution': 'No box in here.'})
    with pytest.raises(ValueError):
        ProblemSetParserMATH().parse_problemset(data, 'math')

def test_csv_problems():
    csvdata = """id,question,gold_answer
c1,"What is 3 + 4?",7
c2,"What is 10 / 4?",5/2
"""
    ps = parse_problemset(csvdata, 'csvfile', 'csv')

    assert len(ps) == 2
    assert ps['c2'].gold_answer == '5/2'

def test_csv_header_only():
    ps = parse_problemset("id,question,gold_answer", 'csvfile', 'csv')
    assert len(ps) == 0

def test_duplicate_ids():
    data = '\n'.join(json.dumps({'id': 'x', 'question': 'Q?', 'gold_answer': '1'}) for _ in range(2))
    with pytest.raises(ValueError):
        parse_problemset(data, 'jsonlfile')

def test_empty_question():
    data = json.dumps({'id': 'x', 'question': '  ', 'gold_answer': '1'})
    with pytest.raises(ValueError):
        parse_problemset(data, 'jsonlfile')

def test_unknown_format():
    with pytest.raises(ValueError):
        parse_problemset('', 'somefile', 'parquet')

def test_load_problemset(tmp_path):
    path = tmp_path / 'problems.jsonl'
    path.write_text(json.dumps({'id': 'p0', 'question': 'What is 1 + 2?', 'gold_answer': '3'}) + '\n')
    ps = load_problemset(path)

    assert ps.origin == str(path)
    assert ps['p0'].question == 'What is 1 + 2?'
