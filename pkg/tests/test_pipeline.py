"""Test the staged pipeline against a mocked spectrum of endpoints
"""
import json

import pytest

from util import FakeSession, FakeResponse, spectrum_responder, mock_endpoints, small_checkpoints
from dartpipe.const import DartConfigError, StageFailure, StageStatus
from dartpipe.gateway import InferenceClient
from dartpipe.pipeline import run, validate_config, RunManifest, STAGES, resolve_alpha_grid
from dartpipe.records import load_spectrum_run
from dartpipe.verifier import load_verdicts

GRID = [0.0, 0.5, 1.0]
PAIRS = [(1, 2), (30, 40), (5, 6), (20, 45), (7, 8), (12, 13)]

def mock_client() -> InferenceClient:
    return InferenceClient(api_key='sk-test', session=FakeSession(spectrum_responder),
        backoff_min=0, backoff_max=0)

def write_problems(path):
    path.write_text(''.join(json.dumps({'id': f"p{i}", 'question': f"What is {a} + {b}?",
        'gold_answer': str(a + b), 'source': 'gsm8k'}) + '\n' for i, (a, b) in enumerate(PAIRS)))
    return path

def make_conf(tmp_path) -> dict:
    return {
        'run': {'run_dir': str(tmp_path / 'run'), 'alpha_grid': list(GRID)},
        'generation': {
            'problems': str(write_problems(tmp_path / 'problems.jsonl')),
            'endpoints': mock_endpoints(GRID),
            'seed': 7,
        },
        'curation': {'style': 'think'},
    }

def test_valid_config(tmp_path):
    assert validate_config(make_conf(tmp_path)) == []

def test_config_findings(tmp_path):
    conf = make_conf(tmp_path)
    conf['run']['alpha_grid'] = [0.0, 0.75, 0.5, 1.2]
    conf['generation']['temperature'] = 'hot'
    conf['curation']['style'] = 'verbose'
    conf['analysis'] = {'epsilon': 1.5, 'bins': 0}
    conf['extras'] = {}
    conf['fusion'] = {'base': 'base.safetensors', 'colour': 'blue'}
    findings = validate_config(conf)

    assert "unknown section [extras]" in findings
    assert "unknown key fusion.colour" in findings
    assert "run.alpha_grid: alpha 1.2 is outside [0, 1]" in findings
    assert "run.alpha_grid must be strictly increasing" in findings
    assert "generation.endpoints: no endpoint for alpha 0.750" in findings
    assert "generation.temperature must be >= 0" in findings
    assert "fusion needs both base and distilled checkpoints" in findings
    assert any(f.startswith("curation.style") for f in findings)
    assert any(f.startswith("analysis.epsilon") for f in findings)
    assert any(f.startswith("analysis.bins") for f in findings)

def test_density_config(tmp_path):
    conf = make_conf(tmp_path)
    del conf['run']['alpha_grid']
    conf['run']['alpha_density'] = 'loose'
    conf['generation']['endpoints'] = mock_endpoints([0.0, 0.25, 0.5, 0.75, 1.0])

    assert validate_config(conf) == []
    assert resolve_alpha_grid(conf) == [0.0, 0.25, 0.5, 0.75, 1.0]

def test_invalid_config_is_refused(tmp_path):
    conf = make_conf(tmp_path)
    del conf['generation']['endpoints']['0.500']
    with pytest.raises(DartConfigError):
        run(conf, client=mock_client())
    assert not (tmp_path / 'run' / 'manifest.json').exists()

def test_unknown_stage(tmp_path):
    with pytest.raises(DartConfigError):
        run(make_conf(tmp_path), ['fuse', 'train'], client=mock_client())

def test_missing_problems_file(tmp_path):
    conf = make_conf(tmp_path)
    conf['generation']['problems'] = str(tmp_path / 'nowhere.jsonl')
    with pytest.raises(DartConfigError):
        run(conf, client=mock_client())

def test_full_run(tmp_path):
    conf = make_conf(tmp_path)
    client = mock_client()
    manifest = run(conf, client=client)
    run_dir = tmp_path / 'run'

    assert manifest.last_executed == STAGES
    assert all(manifest.stage_status[s] is StageStatus.DONE for s in STAGES)
    assert len(client.session.calls) == len(PAIRS) * len(GRID)

    for relpath in ['generations/records.jsonl', 'verdicts/verdicts.jsonl', 'curated/adaptive.jsonl',
            'curated/sft.jsonl', 'curated/sft.train.toml', 'reports/report.json', 'reports/report.txt',
            'reports/fit.json', 'reports/curve.svg', 'reports/spectrum.json']:
        assert (run_dir / relpath).exists(), relpath

    curated = [json.loads(line) for line in (run_dir / 'curated' / 'adaptive.jsonl').read_text().splitlines()]
    alpha_star = {row['problem_id']: row['alpha_star'] for row in curated}
    # sums above 50 go wrong past alpha 0.5
    assert alpha_star == {'p0': 1.0, 'p1': 0.5, 'p2': 1.0, 'p3': 0.5, 'p4': 1.0, 'p5': 1.0}

    saved = RunManifest.load(run_dir)
    assert saved.stage_status == manifest.stage_status
    assert saved.alpha_grid == GRID
    assert saved.dataset_paths['sft'].endswith('sft.jsonl')

def test_rerun_is_idempotent(tmp_path):
    conf = make_conf(tmp_path)
    client = mock_client()
    run(conf, client=client)
    calls = len(client.session.calls)
    artifacts = ['curated/adaptive.jsonl', 'curated/sft.jsonl', 'reports/report.json', 'reports/curve.svg']
    before = {name: (tmp_path / 'run' / name).read_bytes() for name in artifacts}

    again = run(conf, client=client)
    assert again.last_executed == []
    assert len(client.session.calls) == calls
    assert {name: (tmp_path / 'run' / name).read_bytes() for name in artifacts} == before

def test_config_change_reruns_downstream(tmp_path):
    conf = make_conf(tmp_path)
    client = mock_client()
    run(conf, client=client)

    conf['curation']['style'] = 'plain'
    manifest = run(conf, client=client)
    assert manifest.last_executed == ['curate', 'metrics', 'analyze']

    first = json.loads((tmp_path / 'run' / 'curated' / 'sft.jsonl').read_text().splitlines()[0])
    assert '<think>' not in first['output']

def test_damaged_output_reruns_its_stage(tmp_path):
    conf = make_conf(tmp_path)
    run(conf, client=mock_client())

    (tmp_path / 'run' / 'reports' / 'report.txt').unlink()
    manifest = run(conf, client=mock_client())
    assert manifest.last_executed == ['metrics']
    assert (tmp_path / 'run' / 'reports' / 'report.txt').exists()

def test_missing_upstream(tmp_path):
    with pytest.raises(StageFailure):
        run(make_conf(tmp_path), ['curate'], client=mock_client())
    assert RunManifest.load(tmp_path / 'run') is None

def test_failed_stage_is_recorded(tmp_path):
    conf = make_conf(tmp_path)
    run(conf, ['fuse', 'generate'], client=mock_client())
    (tmp_path / 'run' / 'generations' / 'records.jsonl').write_text('{"broken": \n{"also broken"\n')

    with pytest.raises(StageFailure):
        run(conf, ['verify'], client=mock_client())
    assert RunManifest.load(tmp_path / 'run').stage_status['verify'] is StageStatus.FAILED

def test_fuse_stage(tmp_path):
    base, distilled = small_checkpoints(tmp_path)
    conf = make_conf(tmp_path)
    conf['fusion'] = {'base': str(base), 'distilled': str(distilled)}
    manifest = run(conf, ['fuse'])

    assert manifest.last_executed == ['fuse']
    assert sorted(manifest.outputs['fuse']) == [
        'fused/base-alpha0.000.safetensors',
        'fused/base-alpha0.500.safetensors',
        'fused/base-alpha1.000.safetensors',
    ]

def test_retry_errors_requests_only_failed_records(tmp_path):
    down = {'1.000'}
    def responder(url, payload):
        if any(f"/a{alpha}/" in url for alpha in down):
            return FakeResponse(503)
        return spectrum_responder(url, payload)

    conf = make_conf(tmp_path)
    client = InferenceClient(api_key='sk-test', session=FakeSession(responder), backoff_min=0, backoff_max=0)
    run(conf, ['generate', 'verify'], client=client)
    run_dir = tmp_path / 'run'
    assert load_spectrum_run(run_dir).error_counts()['1.000'] == len(PAIRS)

    down.clear()
    first_calls = len(client.session.calls)
    conf['generation']['retry_errors'] = True
    manifest = run(conf, ['generate', 'verify'], client=client)

    retried = client.session.calls[first_calls:]
    assert len(retried) == len(PAIRS)
    assert all('/a1.000/' in url for url, _ in retried)
    assert manifest.last_executed == ['generate', 'verify']
    assert load_spectrum_run(run_dir).error_counts()['1.000'] == 0
    assert len(load_verdicts(run_dir)) == len(PAIRS) * len(GRID)

    again = run(conf, ['generate', 'verify'], client=client)
    assert again.last_executed == []
    assert len(client.session.calls) == first_calls + len(PAIRS)

def test_runtime_settings_keep_records(tmp_path):
    conf = make_conf(tmp_path)
    client = mock_client()
    run(conf, client=client)
    calls = len(client.session.calls)

    conf['generation']['max_in_flight'] = 2
    conf['generation']['timeout'] = 30
    manifest = run(conf, client=client)
    assert manifest.last_executed == []
    assert len(client.session.calls) == calls

def test_sampling_change_regenerates(tmp_path):
    conf = make_conf(tmp_path)
    client = mock_client()
    run(conf, ['generate'], client=client)

    conf['generation']['temperature'] = 0.2
    run(conf, ['generate'], client=client)
    assert len(client.session.calls) == 2 * len(PAIRS) * len(GRID)
    assert len(load_spectrum_run(tmp_path / 'run')) == len(PAIRS) * len(GRID)

def test_edited_problems_file_is_noticed(tmp_path):
    conf = make_conf(tmp_path)
    client = mock_client()
    run(conf, ['generate', 'verify'], client=client)
    assert load_verdicts(tmp_path / 'run')['p0|0.000|0'] is True
    calls = len(client.session.calls)

    problems = tmp_path / 'problems.jsonl'
    rows = [json.loads(line) for line in problems.read_text().splitlines()]
    rows[0]['gold_answer'] = '999'
    problems.write_text(''.join(json.dumps(row) + '\n' for row in rows))

    manifest = run(conf, ['generate', 'verify'], client=client)
    assert manifest.last_executed == ['generate', 'verify']
    assert len(client.session.calls) == calls
    assert load_verdicts(tmp_path / 'run')['p0|0.000|0'] is False

def test_edited_question_regenerates_that_problem(tmp_path):
    conf = make_conf(tmp_path)
    client = mock_client()
    run(conf, ['generate'], client=client)
    calls = len(client.session.calls)

    problems = tmp_path / 'problems.jsonl'
    rows = [json.loads(line) for line in problems.read_text().splitlines()]
    rows[2].update({'question': 'What is 3 + 4?', 'gold_answer': '7'})
    problems.write_text(''.join(json.dumps(row) + '\n' for row in rows))

    run(conf, ['generate'], client=client)
    regenerated = client.session.calls[calls:]
    assert len(regenerated) == len(GRID)
    assert all('What is 3 + 4?' in payload['messages'][-1]['content'] for _, payload in regenerated)

def test_edited_baseline_reruns_metrics(tmp_path):
    baseline_conf = make_conf(tmp_path)
    baseline_conf['run']['run_dir'] = str(tmp_path / 'baseline')
    run(baseline_conf, ['generate', 'verify'], client=mock_client())

    conf = make_conf(tmp_path)
    conf['metrics'] = {'baseline_run': str(tmp_path / 'baseline')}
    run(conf, client=mock_client())

    verdicts = tmp_path / 'baseline' / 'verdicts' / 'verdicts.jsonl'
    rows = [json.loads(line) for line in verdicts.read_text().splitlines()]
    rows[0]['correct'] = not rows[0]['correct']
    verdicts.write_text(''.join(json.dumps(row) + '\n' for row in rows))

    manifest = run(conf, client=mock_client())
    assert manifest.last_executed == ['metrics']
