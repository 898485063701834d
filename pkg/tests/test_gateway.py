"""Test generation against a scripted chat completions endpoint
"""
import pytest
import requests

from util import (FakeSession, FakeResponse, completion, scripted, spectrum_responder,
    mock_endpoints, sum_problems)
from dartpipe.const import (Problem, SamplingParams, FinishReason, TokenSource, DartConfigError,
    EndpointConfigError)
from dartpipe.gateway import (InferenceClient, Endpoint, PromptTemplate, split_think, apportion,
    generate, run_spectrum, compress_cot, compress_dataset, resolve_endpoint_map, requests_headers,
    DEFAULT_COMPRESSION_TEMPLATE)
from dartpipe.records import read_jsonl, load_spectrum_run

PROBLEM = Problem('p1', 'What is 2 + 3?', '5')
PARAMS = SamplingParams(temperature=0.6, max_tokens=512, seed=100)

def fake_client(responder) -> InferenceClient:
    return InferenceClient(api_key='sk-test', session=FakeSession(responder),
        backoff_min=0, backoff_max=0)

def test_split_think():
    split = split_think("<think>add them</think>The answer is 5")
    assert split.reasoning_text == 'add them'
    assert split.answer_text == 'The answer is 5'
    assert not split.truncated

def test_split_without_think():
    split = split_think("Just 5")
    assert split.reasoning_text == ''
    assert split.answer_text == 'Just 5'

def test_split_unclosed_think():
    split = split_think("<think>still going and going")
    assert split.reasoning_text == 'still going and going'
    assert split.answer_text == ''
    assert split.truncated

def test_split_keeps_preamble():
    raw = "Let me see.\n<think>add them</think>The answer is 5"
    split = split_think(raw)
    assert split.reasoning_text == 'add them'
    assert split.answer_text == 'Let me see.\nThe answer is 5'

    split = split_think("Hmm <think>still going")
    assert split.answer_text == 'Hmm '
    assert split.truncated

def test_apportion():
    assert apportion(100, 3, 1) == 75
    assert apportion(10, 1, 2) == 3
    assert apportion(7, 0, 0) == 0

def test_headers():
    headers = requests_headers('sk-abc')
    assert headers['Authorization'] == 'Bearer sk-abc'
    assert headers['User-Agent'].startswith('DartPipe/')
    assert 'Authorization' not in requests_headers()

def test_completions_url():
    assert Endpoint('http://host:8000').completions_url == 'http://host:8000/v1/chat/completions'
    assert Endpoint('http://host:8000/v1/').completions_url == 'http://host:8000/v1/chat/completions'
    assert Endpoint.parse({'url': 'http://h/v1', 'model': 'm'}) == Endpoint('http://h/v1', 'm')
    with pytest.raises(DartConfigError):
        Endpoint.parse(42)

def test_generate_with_server_usage():
    reply = completion("<think>two plus three</think>So \\boxed{5}", usage={
        'completion_tokens': 40,
        'completion_tokens_details': {'reasoning_tokens': 31},
    })
    client = fake_client(scripted(FakeResponse(200, reply)))
    record = generate(PROBLEM, 'http://mock/v1', 0.5, PARAMS, 2, client)

    assert record.reasoning_tokens == 31
    assert record.answer_tokens == 9
    assert record.total_tokens == 40
    assert record.token_source == TokenSource.SERVER_USAGE
    assert record.finish_reason == FinishReason.STOP
    assert record.answer_text == 'So \\boxed{5}'
    assert record.key == 'p1|0.500|2'

    url, payload = client.session.calls[0]
    assert url == 'http://mock/v1/chat/completions'
    assert payload['seed'] == 102
    assert payload['max_tokens'] == 512
    assert 'What is 2 + 3?' in payload['messages'][0]['content']
    assert client.session.headers['Authorization'] == 'Bearer sk-test'

def test_generate_apportions_usage_total():
    reply = completion("<think>one two three</think>four", usage={'completion_tokens': 8})
    record = generate(PROBLEM, 'http://mock/v1', 0.0, PARAMS, 0, fake_client(scripted(FakeResponse(200, reply))))

    assert record.reasoning_tokens == 6
    assert record.answer_tokens == 2
    assert record.token_source == TokenSource.SERVER_USAGE

def test_generate_local_counts():
    reply = completion("<think>one two three</think>four five")
    record = generate(PROBLEM, 'http://mock/v1', 0.0, PARAMS, 0, fake_client(scripted(FakeResponse(200, reply))))

    assert record.reasoning_tokens == 3
    assert record.answer_tokens == 2
    assert record.total_tokens == 5
    assert record.token_source == TokenSource.LOCAL_APPROX

def test_generate_length_finish():
    reply = completion("<think>on and on", finish_reason='length')
    record = generate(PROBLEM, 'http://mock/v1', 0.0, PARAMS, 0, fake_client(scripted(FakeResponse(200, reply))))

    assert record.finish_reason == FinishReason.LENGTH
    assert record.truncated_think
    assert record.answer_text == ''

def test_reasoning_content_field():
    reply = completion("\\boxed{5}", reasoning_content="adding")
    record = generate(PROBLEM, 'http://mock/v1', 0.0, PARAMS, 0, fake_client(scripted(FakeResponse(200, reply))))

    assert record.reasoning_text == 'adding'
    assert record.answer_text == '\\boxed{5}'

def test_transient_errors_are_retried():
    reply = completion("<think>x</think>5")
    client = fake_client(scripted(FakeResponse(503), FakeResponse(429), FakeResponse(200, reply)))
    record = generate(PROBLEM, 'http://mock/v1', 0.0, PARAMS, 0, client)

    assert record.finish_reason == FinishReason.STOP
    assert len(client.session.calls) == 3

def test_error_record_after_retries():
    client = fake_client(scripted(requests.ConnectionError("refused")))
    record = generate(PROBLEM, 'http://mock/v1', 0.0, PARAMS, 0, client)

    assert record.is_error
    assert 'ConnectionError' in record.error
    assert record.total_tokens == 0
    assert len(client.session.calls) == 3

def test_bad_json_is_transient():
    client = fake_client(scripted(FakeResponse(200, None, 'oops')))
    record = generate(PROBLEM, 'http://mock/v1', 0.0, PARAMS, 0, client)
    assert record.is_error

def test_client_errors_raise():
    client = fake_client(scripted(FakeResponse(401, None, 'bad key')))
    with pytest.raises(EndpointConfigError):
        generate(PROBLEM, 'http://mock/v1', 0.0, PARAMS, 0, client)
    assert len(client.session.calls) == 1

def test_endpoint_map_must_cover_grid():
    with pytest.raises(DartConfigError):
        resolve_endpoint_map({'0.0': 'http://a/v1'}, [0.0, 1.0])
    resolved = resolve_endpoint_map({0: 'http://a/v1', '1': 'http://b/v1'}, [0.0, 1.0])
    assert sorted(resolved) == ['0.000', '1.000']

def test_run_spectrum_record_count(tmp_path):
    grid = [0.0, 0.5, 1.0]
    problems = sum_problems([(1, 2), (30, 40), (5, 6)])
    client = fake_client(spectrum_responder)
    run = run_spectrum(problems, grid, mock_endpoints(grid), PARAMS, repetitions=2,
        run_dir=tmp_path, client=client, max_in_flight=2)

    assert len(run) == 3 * 3 * 2
    assert len(read_jsonl(tmp_path / 'generations' / 'records.jsonl')) == 18
    assert [r.key for r in run.records[:3]] == ['p0|0.000|0', 'p0|0.000|1', 'p0|0.500|0']

    reloaded = load_spectrum_run(tmp_path)
    assert reloaded.run_id == run.run_id
    assert [r.key for r in reloaded.records] == [r.key for r in run.records]

def test_run_spectrum_resumes(tmp_path):
    grid = [0.0, 1.0]
    problems = sum_problems([(1, 2), (3, 4)])
    client = fake_client(spectrum_responder)
    run_spectrum(problems, grid, mock_endpoints(grid), PARAMS, run_dir=tmp_path, client=client)
    assert len(client.session.calls) == 4

    again = run_spectrum(problems, grid, mock_endpoints(grid), PARAMS, run_dir=tmp_path, client=client)
    assert len(client.session.calls) == 4
    assert len(again) == 4

    more = run_spectrum(problems, grid, mock_endpoints(grid), PARAMS, repetitions=2,
        run_dir=tmp_path, client=client)
    assert len(client.session.calls) == 8
    assert len(more) == 8

def test_run_spectrum_retry_errors(tmp_path):
    grid = [0.0, 1.0]
    problems = sum_problems([(1, 2)])
    failing = fake_client(scripted(FakeResponse(500)))
    run = run_spectrum(problems, grid, mock_endpoints(grid), PARAMS, run_dir=tmp_path, client=failing)
    assert run.error_counts() == {'0.000': 1, '1.000': 1}

    working = fake_client(spectrum_responder)
    run = run_spectrum(problems, grid, mock_endpoints(grid), PARAMS, run_dir=tmp_path, client=working)
    assert len(working.session.calls) == 0

    run = run_spectrum(problems, grid, mock_endpoints(grid), PARAMS, run_dir=tmp_path,
        client=working, retry_errors=True)
    assert len(working.session.calls) == 2
    assert run.error_counts() == {'0.000': 0, '1.000': 0}

def test_run_spectrum_fewer_repetitions(tmp_path):
    grid = [0.0, 1.0]
    problems = sum_problems([(1, 2), (3, 4)])
    client = fake_client(spectrum_responder)
    run_spectrum(problems, grid, mock_endpoints(grid), PARAMS, repetitions=2, run_dir=tmp_path, client=client)

    run = run_spectrum(problems, grid, mock_endpoints(grid), PARAMS, repetitions=1, run_dir=tmp_path, client=client)
    assert len(client.session.calls) == 8
    assert len(run) == 4
    assert {r.sample_index for r in run.records} == {0}

def test_run_spectrum_changed_question(tmp_path):
    grid = [0.0, 1.0]
    client = fake_client(spectrum_responder)
    run_spectrum(sum_problems([(1, 2), (3, 4)]), grid, mock_endpoints(grid), PARAMS,
        run_dir=tmp_path, client=client)

    run = run_spectrum(sum_problems([(1, 2), (10, 20)]), grid, mock_endpoints(grid), PARAMS,
        run_dir=tmp_path, client=client)
    new_calls = client.session.calls[4:]
    assert len(new_calls) == 2
    assert all('What is 10 + 20?' in payload['messages'][-1]['content'] for _, payload in new_calls)
    assert len(run) == 4
    assert all('\\boxed{30}' in r.answer_text for r in run.records if r.problem_id == 'p1')

def test_run_spectrum_rejects_bad_input(tmp_path):
    problems = sum_problems([(1, 2)])
    with pytest.raises(DartConfigError):
        run_spectrum(problems, [0.0], mock_endpoints([0.0]), PARAMS, repetitions=0, run_dir=tmp_path)
    with pytest.raises(DartConfigError):
        run_spectrum(problems, [0.0, 1.0], mock_endpoints([0.0]), PARAMS, run_dir=tmp_path)

def test_template_placeholders():
    with pytest.raises(DartConfigError):
        PromptTemplate("Shorten {long_cot}", 'v0')
    template = PromptTemplate("Q: {question} A: {answer} C: {long_cot} \\boxed{}", 'v1')
    assert template.render('q', 'a', 'c') == "Q: q A: a C: c \\boxed{}"

def test_compress_cot(tmp_path):
    reply = completion("<think>let me shorten this</think>2 + 3 = 5.")
    client = fake_client(scripted(FakeResponse(200, reply)))
    long_cot = "First I add two and three carefully, checking twice, and get five."
    out = tmp_path / 'short.jsonl'

    written = compress_dataset([{'problem_id': 'p1', 'question': PROBLEM.question,
        'gold_answer': '5', 'long_cot': long_cot}], DEFAULT_COMPRESSION_TEMPLATE,
        'http://teacher/v1', out, client)

    assert written == 1
    rows = read_jsonl(out)
    assert rows[0]['cot_short'] == '2 + 3 = 5.'
    assert rows[0]['long_tokens'] == 12
    assert rows[0]['short_tokens'] == 5
    assert rows[0]['length_ratio'] == round(5 / 12, 4)
    assert rows[0]['template_version'] == 'standin-1'
    assert long_cot in client.session.calls[0][1]['messages'][0]['content']

    assert compress_dataset([{'problem_id': 'p1', 'question': PROBLEM.question,
        'gold_answer': '5', 'long_cot': long_cot}], DEFAULT_COMPRESSION_TEMPLATE,
        'http://teacher/v1', out, client) == 0
    assert len(client.session.calls) == 1

def test_compress_empty_reply():
    client = fake_client(scripted(FakeResponse(200, completion("   "))))
    assert compress_cot(PROBLEM, "long chain", DEFAULT_COMPRESSION_TEMPLATE, 'http://t/v1', client) is None

def test_compress_empty_chain():
    with pytest.raises(ValueError):
        compress_cot(PROBLEM, "  ", DEFAULT_COMPRESSION_TEMPLATE, 'http://t/v1', fake_client(scripted(FakeResponse(500))))
