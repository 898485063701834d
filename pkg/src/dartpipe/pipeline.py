"""Run the pipeline stages against a run directory

fuse -> generate -> verify -> curate -> metrics / analyze

Every stage records a hash of its inputs (its config sections, the contents
of the files it reads and the hashes of its upstream outputs) in
manifest.json. A DONE stage whose inputs are unchanged and whose outputs
are intact on disk is skipped.
"""
from __future__ import annotations
import fcntl
import hashlib
import json
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import toml

from .const import (DartConfigError, StageFailure, StageStatus, SamplingParams, ExportStyle,
    TOOL_VERSION, DEFAULT_TEMPERATURE, DEFAULT_MAX_TOKENS, DEFAULT_TOP_P, THINK_OPEN, THINK_CLOSE,
    ALPHA_DENSITIES, format_alpha)
from .analysis import analyze_run, DEFAULT_BINS, DEFAULT_EPSILON
from .checkpoints import sha256_file
from .curator import build_adaptive_dataset, export_sft
from .fusion import FusionSpec, sweep, alpha_grid_preset
from .gateway import InferenceClient, run_spectrum, DEFAULT_MAX_IN_FLIGHT, REQUEST_TIMEOUT
from .metrics import stats_from_run, compare_all, render_report
from .problemsets import load_problemset, FORMAT_PARSERS
from .records import (ensure_run_dirs, load_records, load_spectrum_run, read_json, write_json,
    generations_dir, RECORDS_FILE, RUN_INFO_FILE, PROBLEMS_FILE)
from .verifier import verify_run, load_verdicts, verdicts_path

import logging
log = logging.getLogger('dartpipe')

MANIFEST_FILE = 'manifest.json'
LOCK_FILE = '.lock'

STAGES = ['fuse', 'generate', 'verify', 'curate', 'metrics', 'analyze']

# Stages whose outputs feed a stage. fuse is optional: endpoints may
# serve checkpoints fused elsewhere.
UPSTREAM = {
    'fuse': [],
    'generate': ['fuse'],
    'verify': ['generate'],
    'curate': ['verify'],
    'metrics': ['curate'],
    'analyze': ['curate'],
}
OPTIONAL_UPSTREAM = ['fuse']

# Config sections hashed into each stage's inputs
STAGE_SECTIONS = {
    'fuse': ['fusion'],
    'generate': ['generation'],
    'verify': [],
    'curate': ['curation'],
    'metrics': ['metrics'],
    'analyze': ['analysis'],
}

# Generation keys that change how requests are sent, not what a record holds
GENERATION_RUNTIME_KEYS = {'retry_errors', 'max_in_flight', 'timeout'}

# Generation keys that shape the text of every record; changing one starts
# the records afresh
RECORD_SHAPING_KEYS = ['endpoints', 'temperature', 'max_tokens', 'top_p', 'seed',
    'think_open', 'think_close']

KNOWN_KEYS = {
    'run': {'run_dir', 'run_id', 'alpha_grid', 'alpha_density', 'repetitions'},
    'fusion': {'base', 'distilled', 'allow_nonfinite', 'compute_precision'},
    'generation': {'problems', 'format', 'source', 'endpoints', 'temperature', 'max_tokens',
        'top_p', 'seed', 'max_in_flight', 'retry_errors', 'timeout', 'think_open', 'think_close'},
    'compression': {'input', 'output', 'teacher', 'model', 'template_file', 'temperature',
        'max_tokens'},
    'curation': {'style', 'sft_output'},
    'metrics': {'baseline_run'},
    'analysis': {'bins', 'epsilon'},
}

CURATION_STYLES = ['think', 'plain', 'THINK_WRAPPED', 'PLAIN']

def load_config(configfile: str) -> dict:
    """Load the TOML config file"""
    return toml.load(configfile)

def resolve_alpha_grid(conf: dict) -> list[float]:
    run = conf.get('run', {})
    if 'alpha_grid' in run:
        return [float(a) for a in run['alpha_grid']]
    return alpha_grid_preset(run.get('alpha_density', 'default'))

def run_dir_of(conf: dict) -> Path:
    run_dir = conf.get('run', {}).get('run_dir')
    if not run_dir:
        raise DartConfigError("run.run_dir is not set")
    return Path(run_dir)

def _finding_if(findings: list, condition, message: str):
    """Add message when condition holds. A callable condition that trips
    over a wrongly typed value counts as holding."""
    if callable(condition):
        try:
            condition = condition()
        except TypeError:
            condition = True
    if condition:
        findings.append(message)

def validate_config(conf: dict) -> list[str]:
    """Check a config, returning one finding per problem. Never raises."""
    findings = []
    for section, value in conf.items():
        if section not in KNOWN_KEYS:
            findings.append(f"unknown section [{section}]")
            continue
        if not isinstance(value, dict):
            findings.append(f"[{section}] must be a table")
            continue
        for key in value:
            _finding_if(findings, key not in KNOWN_KEYS[section], f"unknown key {section}.{key}")
    if any(not isinstance(conf.get(s, {}), dict) for s in KNOWN_KEYS):
        return findings

    run = conf.get('run', {})
    _finding_if(findings, not run.get('run_dir'), "run.run_dir is not set")

    grid = []
    if 'alpha_grid' in run:
        try:
            grid = [float(a) for a in run['alpha_grid']]
        except (TypeError, ValueError):
            findings.append(f"run.alpha_grid must be a list of numbers, got {run['alpha_grid']!r}")
        for alpha in grid:
            _finding_if(findings, not 0.0 <= alpha <= 1.0, f"run.alpha_grid: alpha {alpha} is outside [0, 1]")
        _finding_if(findings, any(hi <= lo for lo, hi in zip(grid, grid[1:])),
            "run.alpha_grid must be strictly increasing")
    else:
        density = run.get('alpha_density', 'default')
        if isinstance(density, int) and not isinstance(density, bool) and density >= 2:
            grid = alpha_grid_preset(density)
        elif density in ALPHA_DENSITIES:
            grid = alpha_grid_preset(density)
        else:
            findings.append(f"run.alpha_density must be one of {sorted(ALPHA_DENSITIES)} or a point count >= 2, got {density!r}")
    reps = run.get('repetitions', 1)
    _finding_if(findings, not isinstance(reps, int) or reps < 1, f"run.repetitions must be a positive integer, got {reps!r}")

    gen = conf.get('generation')
    if gen is not None:
        endpoints = gen.get('endpoints')
        if not endpoints:
            findings.append("generation.endpoints is missing")
        elif not isinstance(endpoints, dict):
            findings.append("generation.endpoints must be a table of alpha = endpoint")
        else:
            covered = set()
            for key in endpoints:
                try:
                    covered.add(format_alpha(float(key)))
                except ValueError:
                    findings.append(f"generation.endpoints: key '{key}' is not an alpha value")
            for alpha in grid:
                if 0.0 <= alpha <= 1.0 and format_alpha(alpha) not in covered:
                    findings.append(f"generation.endpoints: no endpoint for alpha {format_alpha(alpha)}")
        _finding_if(findings, not gen.get('problems'), "generation.problems is not set")
        _finding_if(findings, gen.get('format', 'jsonl') not in FORMAT_PARSERS,
            f"generation.format must be one of {sorted(FORMAT_PARSERS)}")
        _finding_if(findings, lambda: gen.get('temperature', DEFAULT_TEMPERATURE) < 0,
            "generation.temperature must be >= 0")
        _finding_if(findings, lambda: gen.get('max_tokens', DEFAULT_MAX_TOKENS) <= 0,
            "generation.max_tokens must be positive")
        _finding_if(findings, lambda: not 0 < gen.get('top_p', DEFAULT_TOP_P) <= 1,
            "generation.top_p must be in (0, 1]")
        _finding_if(findings, lambda: gen.get('max_in_flight', DEFAULT_MAX_IN_FLIGHT) < 1,
            "generation.max_in_flight must be at least 1")

    fusion = conf.get('fusion', {})
    _finding_if(findings, bool(fusion.get('base')) != bool(fusion.get('distilled')),
        "fusion needs both base and distilled checkpoints")

    style = conf.get('curation', {}).get('style', 'think')
    _finding_if(findings, style not in CURATION_STYLES, f"curation.style must be one of {CURATION_STYLES}")

    analysis = conf.get('analysis', {})
    epsilon = analysis.get('epsilon', DEFAULT_EPSILON)
    _finding_if(findings, lambda: not 0 < epsilon < 1, f"analysis.epsilon must be in (0, 1), got {epsilon}")
    bins = analysis.get('bins', DEFAULT_BINS)
    _finding_if(findings, not isinstance(bins, int) or bins < 1, f"analysis.bins must be a positive integer, got {bins!r}")
    return findings

def check_paths(conf: dict, stages: list[str]) -> list[str]:
    """Input files the requested stages need but that don't exist"""
    missing = []
    fusion = conf.get('fusion', {})
    if 'fuse' in stages:
        for key in ['base', 'distilled']:
            if fusion.get(key) and not Path(fusion[key]).exists():
                missing.append(f"fusion.{key}: {fusion[key]}")
    problems = conf.get('generation', {}).get('problems')
    if 'generate' in stages and problems and not Path(problems).exists():
        missing.append(f"generation.problems: {problems}")
    baseline = conf.get('metrics', {}).get('baseline_run')
    if 'metrics' in stages and baseline and not Path(baseline).exists():
        missing.append(f"metrics.baseline_run: {baseline}")
    return missing

def config_hash(conf: dict) -> str:
    return hashlib.sha256(json.dumps(conf, sort_keys=True, default=str).encode('utf-8')).hexdigest()


@dataclass
class RunManifest:
    """ The state of a run directory, saved as manifest.json
    """
    run_id: str
    config_hash: str = ''
    stage_status: dict[str, StageStatus] = field(default_factory=lambda: {s: StageStatus.PENDING for s in STAGES})
    alpha_grid: list[float] = field(default_factory=list)
    dataset_paths: dict[str, str] = field(default_factory=dict)
    tool_version: str = TOOL_VERSION
    stage_inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, dict[str, str]] = field(default_factory=dict)
    last_executed: list[str] = field(default_factory=list)
    # hash of the settings the stored generation records were made with
    records_inputs: str = ''

    def _asdict(self) -> dict:
        return {
            'run_id': self.run_id,
            'config_hash': self.config_hash,
            'stage_status': {s: status.value for s, status in self.stage_status.items()},
            'alpha_grid': self.alpha_grid,
            'dataset_paths': self.dataset_paths,
            'tool_version': self.tool_version,
            'stage_inputs': self.stage_inputs,
            'outputs': self.outputs,
            'last_executed': self.last_executed,
            'records_inputs': self.records_inputs,
        }

    @classmethod
    def from_dict(cls, data: dict) -> RunManifest:
        status = {s: StageStatus.PENDING for s in STAGES}
        status.update({s: StageStatus(v) for s, v in data.get('stage_status', {}).items()})
        return cls(data['run_id'], data.get('config_hash', ''), status,
            data.get('alpha_grid', []), data.get('dataset_paths', {}),
            data.get('tool_version', TOOL_VERSION), data.get('stage_inputs', {}),
            data.get('outputs', {}), data.get('last_executed', []),
            data.get('records_inputs', ''))

    def save(self, run_dir: Path) -> Path:
        return write_json(Path(run_dir) / MANIFEST_FILE, self._asdict())

    @classmethod
    def load(cls, run_dir: Path) -> Optional[RunManifest]:
        path = Path(run_dir) / MANIFEST_FILE
        if not path.exists():
            return None
        return cls.from_dict(read_json(path))

    def outputs_intact(self, stage: str, run_dir: Path) -> bool:
        for relpath, digest in self.outputs.get(stage, {}).items():
            path = Path(run_dir) / relpath
            if not path.exists() or sha256_file(path) != digest:
                return False
        return True

@contextmanager
def run_lock(run_dir: Path):
    """Hold the advisory lock of a run directory"""
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / LOCK_FILE, 'w') as fp:
        try:
            fcntl.flock(fp, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            raise DartConfigError(f"Another pipeline is already running in {run_dir}")
        try:
            yield
        finally:
            fcntl.flock(fp, fcntl.LOCK_UN)


@dataclass
class StageContext:
    conf: dict
    run_dir: Path
    manifest: RunManifest
    alpha_grid: list[float]
    client: Optional[InferenceClient] = None

    def section(self, name: str) -> dict:
        return self.conf.get(name, {})

def stage_fuse(ctx: StageContext) -> list[Path]:
    fusion = ctx.section('fusion')
    if not fusion.get('base'):
        log.info("No checkpoints configured for fusion, skipping the sweep")
        return []
    spec = FusionSpec(
        base_path=fusion['base'],
        distilled_path=fusion['distilled'],
        output_path=ctx.run_dir / 'fused',
        compute_precision=fusion.get('compute_precision', 'WIDEN_TO_F32'),
        alpha_grid=ctx.alpha_grid,
        allow_nonfinite=fusion.get('allow_nonfinite', False),
    )
    ctx.manifest.dataset_paths['fused'] = 'fused'
    return sweep(spec)

def sampling_params(gen: dict) -> SamplingParams:
    return SamplingParams(
        temperature=gen.get('temperature', DEFAULT_TEMPERATURE),
        max_tokens=gen.get('max_tokens', DEFAULT_MAX_TOKENS),
        top_p=gen.get('top_p', DEFAULT_TOP_P),
        seed=gen.get('seed'),
    )

def stage_generate(ctx: StageContext) -> list[Path]:
    gen = ctx.section('generation')
    problems = load_problemset(gen['problems'], gen.get('format', 'jsonl'), gen.get('source'))
    client = ctx.client or InferenceClient(timeout=gen.get('timeout', REQUEST_TIMEOUT))
    run_spectrum(
        list(problems.values()),
        ctx.alpha_grid,
        gen['endpoints'],
        sampling_params(gen),
        repetitions=ctx.conf.get('run', {}).get('repetitions', 1),
        run_dir=ctx.run_dir,
        client=client,
        max_in_flight=gen.get('max_in_flight', DEFAULT_MAX_IN_FLIGHT),
        retry_errors=gen.get('retry_errors', False),
        run_id=ctx.manifest.run_id,
        open_tag=gen.get('think_open', THINK_OPEN),
        close_tag=gen.get('think_close', THINK_CLOSE),
    )
    ctx.manifest.dataset_paths['problems'] = str(gen['problems'])
    gen_dir = generations_dir(ctx.run_dir)
    return [gen_dir / RECORDS_FILE, gen_dir / RUN_INFO_FILE, gen_dir / PROBLEMS_FILE]

def stage_verify(ctx: StageContext) -> list[Path]:
    verify_run(load_spectrum_run(ctx.run_dir), ctx.run_dir)
    return [verdicts_path(ctx.run_dir)]

def stage_curate(ctx: StageContext) -> list[Path]:
    curation = ctx.section('curation')
    run = load_spectrum_run(ctx.run_dir)
    curated_dir = ctx.run_dir / 'curated'
    examples, report = build_adaptive_dataset(run, load_verdicts(ctx.run_dir), curated_dir)
    outputs = [curated_dir / name for name in ['adaptive.jsonl', 'exclusions.json', 'summary.json']]
    ctx.manifest.dataset_paths['adaptive'] = 'curated/adaptive.jsonl'
    if not examples:
        log.warning("No problem was solved at any alpha, nothing to export for SFT")
        return outputs
    sft_out = Path(curation.get('sft_output', curated_dir / 'sft.jsonl'))
    dataset, sidecar = export_sft(examples, ExportStyle.parse(curation.get('style', 'think')), sft_out)
    ctx.manifest.dataset_paths['sft'] = str(dataset)
    ctx.manifest.dataset_paths['sft_config'] = str(sidecar)
    return outputs + [dataset, sidecar]

def stage_metrics(ctx: StageContext) -> list[Path]:
    run = load_spectrum_run(ctx.run_dir)
    baseline_dir = ctx.section('metrics').get('baseline_run')
    baseline_run = baseline_verdicts = None
    if baseline_dir:
        baseline_run = load_spectrum_run(baseline_dir)
        baseline_verdicts = load_verdicts(baseline_dir)
    stats = stats_from_run(run, load_verdicts(ctx.run_dir), baseline_run, baseline_verdicts)
    return list(render_report(compare_all(stats), ctx.run_dir / 'reports'))

def stage_analyze(ctx: StageContext) -> list[Path]:
    analysis = ctx.section('analysis')
    out_dir = ctx.run_dir / 'reports'
    analyze_run(load_spectrum_run(ctx.run_dir), load_verdicts(ctx.run_dir), out_dir,
        analysis.get('bins', DEFAULT_BINS), analysis.get('epsilon', DEFAULT_EPSILON))
    return [out_dir / name for name in ['fit.json', 'curve.txt', 'curve.svg', 'spectrum.json']]

STAGE_FUNCTIONS: dict[str, Callable[[StageContext], list[Path]]] = {
    'fuse': stage_fuse,
    'generate': stage_generate,
    'verify': stage_verify,
    'curate': stage_curate,
    'metrics': stage_metrics,
    'analyze': stage_analyze,
}

def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode('utf-8')).hexdigest()

def stage_input_files(stage: str, ctx: StageContext) -> dict[str, str]:
    """Content hashes of the files a stage reads from outside the run directory"""
    paths = []
    if stage == 'fuse':
        fusion = ctx.section('fusion')
        paths = [fusion.get('base'), fusion.get('distilled')]
    elif stage == 'generate':
        paths = [ctx.section('generation').get('problems')]
    elif stage == 'metrics':
        baseline = ctx.section('metrics').get('baseline_run')
        if baseline:
            gen_dir = generations_dir(baseline)
            paths = [gen_dir / RUN_INFO_FILE, gen_dir / PROBLEMS_FILE, gen_dir / RECORDS_FILE,
                verdicts_path(baseline)]
    return {str(p): sha256_file(p) for p in paths if p and Path(p).exists()}

def stage_input_hash(stage: str, ctx: StageContext) -> str:
    sections = {name: ctx.section(name) for name in STAGE_SECTIONS[stage]}
    if 'generation' in sections:
        sections['generation'] = {key: value for key, value in sections['generation'].items()
            if key not in GENERATION_RUNTIME_KEYS}
    inputs = {
        'sections': sections,
        'files': stage_input_files(stage, ctx),
        'upstream': {up: ctx.manifest.outputs.get(up, {}) for up in UPSTREAM[stage]},
    }
    if stage in ['fuse', 'generate']:
        inputs['alpha_grid'] = [format_alpha(a) for a in ctx.alpha_grid]
    if stage == 'generate':
        inputs['repetitions'] = ctx.conf.get('run', {}).get('repetitions', 1)
    return _digest(inputs)

def records_input_hash(ctx: StageContext) -> str:
    """Hash of what every generation record depends on

    Grid, repetitions and problem set changes are picked up record by
    record, so they are left out.
    """
    gen = ctx.section('generation')
    return _digest({
        'settings': {key: gen[key] for key in RECORD_SHAPING_KEYS if key in gen},
        'fused': ctx.manifest.outputs.get('fuse', {}),
    })

def errors_to_retry(ctx: StageContext) -> int:
    """ERROR records on the grid that a retry_errors run would request again"""
    if not ctx.section('generation').get('retry_errors'):
        return 0
    grid_keys = {format_alpha(a) for a in ctx.alpha_grid}
    records = load_records(generations_dir(ctx.run_dir) / RECORDS_FILE)
    return sum(1 for r in records.values() if r.is_error and format_alpha(r.alpha) in grid_keys)

def _relative(path: Path, run_dir: Path) -> str:
    path = Path(path).resolve()
    try:
        return str(path.relative_to(run_dir.resolve()))
    except ValueError:
        return str(path)

def run_stage(stage: str, ctx: StageContext):
    manifest = ctx.manifest
    input_hash = stage_input_hash(stage, ctx)
    if (manifest.stage_status[stage] is StageStatus.DONE
        and manifest.stage_inputs.get(stage) == input_hash
        and manifest.outputs_intact(stage, ctx.run_dir)):
        retries = errors_to_retry(ctx) if stage == 'generate' else 0
        if not retries:
            log.info(f"Stage {stage} is up to date, skipping")
            return
        log.info(f"Retrying {retries} ERROR records")

    for up in UPSTREAM[stage]:
        if up not in OPTIONAL_UPSTREAM and manifest.stage_status[up] is not StageStatus.DONE:
            raise StageFailure(f"Stage {stage} needs stage {up} to be done first")

    if stage == 'generate':
        records_hash = records_input_hash(ctx)
        if manifest.records_inputs and manifest.records_inputs != records_hash:
            # new sampling settings or new checkpoints, old records no longer apply
            records = generations_dir(ctx.run_dir) / RECORDS_FILE
            if records.exists():
                log.info("Generation settings changed, starting the records afresh")
                records.unlink()
        manifest.records_inputs = records_hash

    log.info(f"Running stage {stage}...")
    manifest.stage_status[stage] = StageStatus.RUNNING
    manifest.stage_inputs[stage] = input_hash
    manifest.save(ctx.run_dir)
    try:
        outputs = STAGE_FUNCTIONS[stage](ctx)
    except DartConfigError:
        manifest.stage_status[stage] = StageStatus.FAILED
        manifest.save(ctx.run_dir)
        raise
    except Exception as e:
        log.error(f"Stage {stage} failed: {e}")
        manifest.stage_status[stage] = StageStatus.FAILED
        manifest.save(ctx.run_dir)
        raise StageFailure(f"Stage {stage} failed: {e}") from e

    manifest.outputs[stage] = {_relative(p, ctx.run_dir): sha256_file(p) for p in outputs}
    manifest.stage_status[stage] = StageStatus.DONE
    manifest.last_executed.append(stage)
    manifest.save(ctx.run_dir)
    log.info(f"Stage {stage} done")

def run(config, stages: list[str]=None, client: InferenceClient=None) -> RunManifest:
    """Run the requested stages, in pipeline order

    @param config: path to a TOML config, or an already loaded config dict
    @param stages: subset of STAGES, all of them by default
    @param client: inference client to generate with, mostly for tests
    """
    conf = load_config(config) if isinstance(config, (str, os.PathLike)) else config
    findings = validate_config(conf)
    if findings:
        raise DartConfigError('Invalid configuration: ' + '; '.join(findings))

    stages = stages or STAGES
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise DartConfigError(f"Unknown stages {unknown}, choose from {STAGES}")
    missing = check_paths(conf, stages)
    if missing:
        raise DartConfigError('Missing input files: ' + '; '.join(missing))

    run_dir = run_dir_of(conf)
    alpha_grid = resolve_alpha_grid(conf)
    with run_lock(run_dir):
        ensure_run_dirs(run_dir)
        manifest = RunManifest.load(run_dir)
        if manifest is None:
            manifest = RunManifest(conf.get('run', {}).get('run_id') or run_dir.name)
        manifest.config_hash = config_hash(conf)
        manifest.alpha_grid = alpha_grid
        manifest.tool_version = TOOL_VERSION
        manifest.last_executed = []

        ctx = StageContext(conf, run_dir, manifest, alpha_grid, client)
        for stage in STAGES:
            if stage in stages:
                run_stage(stage, ctx)
        manifest.save(run_dir)
    return manifest
