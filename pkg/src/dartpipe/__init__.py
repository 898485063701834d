"""A toolkit for training reasoning models to think only as long as a problem needs
"""
from __future__ import annotations
import argparse
import json
import sys

import toml

from .const import (TOOL_VERSION, DartConfigError, StageFailure, ExportStyle, SamplingParams,
    DEFAULT_TEMPERATURE, DEFAULT_MAX_TOKENS, format_alpha)
from .curator import export_sft, load_short_examples
from .fusion import FusionSpec, fuse, sweep
from .gateway import (InferenceClient, Endpoint, PromptTemplate, DEFAULT_COMPRESSION_TEMPLATE,
    compress_dataset)
from .pipeline import STAGES, load_config, run, validate_config, resolve_alpha_grid
from .records import read_jsonl, write_jsonl
from .verifier import verify_predictions

__version__ = TOOL_VERSION

import logging
logging.basicConfig(level=logging.INFO,
                    format='%(asctime)s %(levelname)s %(message)s')
log = logging.getLogger('dartpipe')

# Command line flags and the config keys they override
ARG_CONFIG_KEYS = [
    ('run_dir', 'run', 'run_dir'),
    ('grid', 'run', 'alpha_grid'),
    ('density', 'run', 'alpha_density'),
    ('reps', 'run', 'repetitions'),
    ('base', 'fusion', 'base'),
    ('distilled', 'fusion', 'distilled'),
    ('allow_nonfinite', 'fusion', 'allow_nonfinite'),
    ('problems', 'generation', 'problems'),
    ('format', 'generation', 'format'),
    ('endpoints', 'generation', 'endpoints'),
    ('temperature', 'generation', 'temperature'),
    ('max_tokens', 'generation', 'max_tokens'),
    ('top_p', 'generation', 'top_p'),
    ('seed', 'generation', 'seed'),
    ('max_in_flight', 'generation', 'max_in_flight'),
    ('retry_errors', 'generation', 'retry_errors'),
    ('compress_input', 'compression', 'input'),
    ('compress_output', 'compression', 'output'),
    ('teacher', 'compression', 'teacher'),
    ('teacher_model', 'compression', 'model'),
    ('template', 'compression', 'template_file'),
    ('style', 'curation', 'style'),
    ('sft_output', 'curation', 'sft_output'),
    ('baseline', 'metrics', 'baseline_run'),
    ('bins', 'analysis', 'bins'),
    ('epsilon', 'analysis', 'epsilon'),
]

def parse_grid(value: str) -> list[float]:
    """'0,0.5,1' -> [0.0, 0.5, 1.0]"""
    try:
        return [float(a) for a in value.split(',') if a.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"alpha grid must be comma separated numbers, got '{value}'")

def parse_endpoint_map(value: str) -> dict:
    """'0=http://a:8000/v1,1=http://b:8000/v1#model' -> {alpha: endpoint}

    A '#name' suffix sets the model name to request.
    """
    endpoints = {}
    for item in value.split(','):
        if not item.strip():
            continue
        alpha, sep, url = item.partition('=')
        if not sep:
            raise argparse.ArgumentTypeError(f"endpoint map entries look like alpha=url, got '{item}'")
        try:
            key = format_alpha(float(alpha))
        except ValueError:
            raise argparse.ArgumentTypeError(f"'{alpha}' is not an alpha value")
        url, _, model = url.strip().partition('#')
        endpoints[key] = {'url': url, 'model': model} if model else url
    return endpoints

def parse_stages(value: str) -> list[str]:
    stages = [s.strip() for s in value.split(',') if s.strip()]
    unknown = [s for s in stages if s not in STAGES]
    if unknown:
        raise argparse.ArgumentTypeError(f"unknown stages {unknown}, choose from {STAGES}")
    return stages

def load_args_config(args, tomldata: str=None) -> dict:
    """Load the config file named on the command line, or tomldata if given"""
    try:
        if tomldata is not None:
            return toml.loads(tomldata)
        if args.config:
            return load_config(args.config)
    except FileNotFoundError:
        raise DartConfigError(f"Config file {args.config} not found")
    except toml.TomlDecodeError as e:
        raise DartConfigError(f"Config file is not valid TOML: {e}")
    return {}

def augment_config(conf: dict, args) -> dict:
    """Overlay command line flags onto the config. Flags win."""
    for attr, section, key in ARG_CONFIG_KEYS:
        value = getattr(args, attr, None)
        if value is None:
            continue
        conf.setdefault(section, {})[key] = value
        # a density on the command line replaces any configured grid
        if attr == 'density':
            conf['run'].pop('alpha_grid', None)
    return conf

def cmd_fuse(args, conf: dict):
    if args.fuse_mode == 'sweep' and args.alpha is not None:
        raise DartConfigError("fuse sweep takes --grid or --density, not --alpha")
    if not args.fuse_output:
        run(conf, ['fuse'])
        return
    fusion = conf.get('fusion', {})
    if not fusion.get('base') or not fusion.get('distilled'):
        raise DartConfigError("fuse needs --base and --distilled checkpoints")
    spec = dict(base_path=fusion['base'], distilled_path=fusion['distilled'],
        output_path=args.fuse_output, allow_nonfinite=fusion.get('allow_nonfinite', False),
        compute_precision=fusion.get('compute_precision', 'WIDEN_TO_F32'))
    if args.alpha is not None:
        fuse(FusionSpec(alpha=args.alpha, **spec))
    else:
        sweep(FusionSpec(alpha_grid=resolve_alpha_grid(conf), **spec))

def cmd_compress(args, conf: dict):
    comp = conf.get('compression', {})
    for key in ['input', 'output', 'teacher']:
        if not comp.get(key):
            raise DartConfigError(f"compress needs compression.{key}")
    template = DEFAULT_COMPRESSION_TEMPLATE
    if comp.get('template_file'):
        template = PromptTemplate.from_file(comp['template_file'])
    params = SamplingParams(temperature=comp.get('temperature', DEFAULT_TEMPERATURE),
        max_tokens=comp.get('max_tokens', DEFAULT_MAX_TOKENS))
    endpoint = Endpoint(comp['teacher'], comp.get('model', 'default'))
    compress_dataset(read_jsonl(comp['input']), template, endpoint, comp['output'],
        InferenceClient(), params)

def cmd_verify(args, conf: dict):
    if not (args.pred and args.gold):
        run(conf, ['verify'])
        return
    rows = verify_predictions(read_jsonl(args.pred), read_jsonl(args.gold))
    correct = sum(1 for row in rows if row['correct'])
    log.info(f"{correct} of {len(rows)} predictions correct")
    if args.verify_output:
        write_jsonl(args.verify_output, rows)
    else:
        for row in rows:
            print(json.dumps(row, ensure_ascii=False))

def cmd_curate(args, conf: dict):
    if not args.short:
        run(conf, ['curate'])
        return
    out = conf.get('curation', {}).get('sft_output')
    if not out:
        raise DartConfigError("Exporting compressed chains needs --out")
    style = ExportStyle.parse(conf.get('curation', {}).get('style', 'think'))
    export_sft(load_short_examples(args.short), style, out)

def cmd_stage(stage: str):
    def command(args, conf: dict):
        run(conf, [stage])
    return command

def cmd_run(args, conf: dict):
    manifest = run(conf, args.stages)
    executed = ', '.join(manifest.last_executed) or 'none, everything was up to date'
    log.info(f"Run {manifest.run_id} finished. Stages executed: {executed}")

def cmd_validate(args, conf: dict):
    findings = validate_config(conf)
    for finding in findings:
        print(finding)
    if findings:
        raise DartConfigError(f"{len(findings)} configuration problems found")
    log.info("Configuration is valid")

COMMANDS = {
    'fuse': cmd_fuse,
    'generate': cmd_stage('generate'),
    'compress': cmd_compress,
    'verify': cmd_verify,
    'curate': cmd_curate,
    'metrics': cmd_stage('metrics'),
    'analyze': cmd_stage('analyze'),
    'run': cmd_run,
    'validate': cmd_validate,
}

def setup_argparse():
    """Setup the commandline arguments
    """
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('-c', '--config', help="Config file")
    common.add_argument('-d', '--run-dir', dest='run_dir', help="Run directory.")
    common.add_argument('--loglevel', choices=['debug', 'info', 'warning', 'error', 'critical'], help="Set log output level.")

    ap = argparse.ArgumentParser(
        description="Difficulty-adaptive reasoning truncation pipeline",
        epilog=f"Part of DartPipe v{__version__}",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    ap.add_argument('-V', '--version', action='store_true', help="Show version and exit.")
    sub = ap.add_subparsers(dest='command', metavar='COMMAND')

    sp = sub.add_parser('fuse', parents=[common], help="Fuse base and distilled checkpoints.")
    sp.add_argument('fuse_mode', nargs='?', choices=['sweep'], metavar='sweep', help="Fuse one checkpoint per alpha of the grid.")
    sp.add_argument('--base', help="Long-chain base checkpoint (.safetensors).")
    sp.add_argument('--distilled', help="Short-chain distilled checkpoint (.safetensors).")
    sp.add_argument('--alpha', type=float, help="Fuse a single checkpoint at this alpha.")
    sp.add_argument('--grid', type=parse_grid, help="Comma separated alpha grid to sweep.")
    sp.add_argument('--density', help="Named alpha grid density: loose, middle, default, dense.")
    sp.add_argument('-o', '--out', dest='fuse_output', help="Output file (--alpha) or directory (sweep), instead of the run directory.")
    sp.add_argument('--allow-nonfinite', dest='allow_nonfinite', action='store_true', default=None, help="Propagate NaN/Inf instead of failing.")

    sp = sub.add_parser('generate', parents=[common], help="Generate reasoning chains across the spectrum.")
    sp.add_argument('--problems', help="Problem set file.")
    sp.add_argument('--format', choices=['jsonl', 'gsm8k', 'math', 'csv'], help="Problem set format.")
    sp.add_argument('--grid', type=parse_grid, help="Comma separated alpha grid.")
    sp.add_argument('--density', help="Named alpha grid density.")
    sp.add_argument('--endpoints', type=parse_endpoint_map, help="alpha=url[#model],... endpoint map.")
    sp.add_argument('--reps', type=int, help="Samples per problem and alpha.")
    sp.add_argument('--temperature', type=float, help="Sampling temperature.")
    sp.add_argument('--max-tokens', dest='max_tokens', type=int, help="Generation budget in tokens.")
    sp.add_argument('--top-p', dest='top_p', type=float, help="Nucleus sampling mass.")
    sp.add_argument('--seed', type=int, help="Base seed, offset by the sample index.")
    sp.add_argument('--max-in-flight', dest='max_in_flight', type=int, help="Concurrent requests per endpoint.")
    sp.add_argument('--retry-errors', dest='retry_errors', action='store_true', default=None, help="Generate ERROR records again on resume.")

    sp = sub.add_parser('compress', parents=[common], help="Shorten long chains of thought with a teacher model.")
    sp.add_argument('--input', dest='compress_input', help="JSONL with question, gold_answer and long_cot.")
    sp.add_argument('-o', '--out', dest='compress_output', help="Compressed dataset JSONL.")
    sp.add_argument('--teacher', help="Teacher endpoint URL.")
    sp.add_argument('--model', dest='teacher_model', help="Teacher model name.")
    sp.add_argument('--template', help="Prompt template file with {question}, {answer} and {long_cot}.")

    sp = sub.add_parser('verify', parents=[common], help="Verify answers.")
    sp.add_argument('--pred', help="Predictions JSONL (problem_id, answer_text).")
    sp.add_argument('--gold', help="Gold JSONL (id, gold_answer).")
    sp.add_argument('-o', '--out', dest='verify_output', help="Write verdicts here instead of stdout.")

    sp = sub.add_parser('curate', parents=[common], help="Curate the adaptive dataset and export it for SFT.")
    sp.add_argument('-o', '--out', dest='sft_output', help="SFT dataset JSONL.")
    sp.add_argument('--style', choices=['think', 'plain'], help="Wrap chains in think tags, or not.")
    sp.add_argument('--short', help="Export this compressed-chain file instead of a run.")

    sp = sub.add_parser('metrics', parents=[common], help="Report Pass@1, ACT and AAT.")
    sp.add_argument('--baseline', help="Run directory of the baseline model.")

    sp = sub.add_parser('analyze', parents=[common], help="Fit the length/accuracy curve.")
    sp.add_argument('--bins', type=int, help="Equal-population bins.")
    sp.add_argument('--epsilon', type=float, help="Accuracy shortfall allowed by the token budget.")

    sp = sub.add_parser('run', parents=[common], help="Run pipeline stages.")
    sp.add_argument('--stages', type=parse_stages, help=f"Comma separated subset of {','.join(STAGES)}.")

    sub.add_parser('validate', parents=[common], help="Check a config file.")

    return ap

def main(argv: list=None):

    ap = setup_argparse()
    args = ap.parse_args(argv)

    if getattr(args, 'loglevel', None) is not None:
        levelname = args.loglevel.upper()
        log.setLevel(getattr(logging, levelname))

    if args.version:
        print(f"v{__version__}")
        sys.exit(0)

    if args.command is None:
        ap.print_help()
        sys.exit(2)

    try:
        conf = augment_config(load_args_config(args), args)
        COMMANDS[args.command](args, conf)
    except DartConfigError as e:
        log.error(str(e))
        sys.exit(2)
    except StageFailure as e:
        log.error(str(e))
        sys.exit(3)
    except (ValueError, OSError) as e:
        log.error(f"{args.command} failed: {e}")
        sys.exit(3)
