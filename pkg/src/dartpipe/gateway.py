"""Talk to OpenAI-compatible chat completion endpoints

Generates reasoning chains across the model spectrum and compresses long
chains of thought through a teacher model.
"""
from __future__ import annotations
import hashlib
import os
import threading
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, ClassVar, Iterable, NamedTuple, Optional

import requests
from tenacity import Retrying, stop_after_attempt, wait_random_exponential, retry_if_exception_type

from .const import (Problem, SamplingParams, GenerationRecord, SpectrumRun, FinishReason,
    TokenSource, DartConfigError, EndpointConfigError, THINK_OPEN, THINK_CLOSE, TOOL_VERSION,
    format_alpha, record_key, utc_now_iso)
from .fusion import check_alpha_grid
from .records import (JsonlAppender, generations_dir, load_records, read_json, read_jsonl,
    save_run_info, sort_records, write_jsonl, RECORDS_FILE, RUN_INFO_FILE, PROBLEMS_FILE)

import logging
log = logging.getLogger('dartpipe')

# Long reasoning chains take a while; wait at most this long per request
REQUEST_TIMEOUT = 600

MAX_ATTEMPTS = 3
DEFAULT_MAX_IN_FLIGHT = 8

# Checked in order for a Bearer token
API_KEY_ENV_VARS = ['DART_API_KEY', 'OPENAI_API_KEY']

TRANSIENT_STATUS = [408, 429]

GENERATION_PROMPT = "{question}\nPlease reason step by step, and put your final answer within \\boxed{{}}."

def requests_headers(token: str=None):
    """Set common headers for requests"""
    headers = {
        'User-Agent': f"DartPipe/{TOOL_VERSION}"
    }
    if token:
        headers['Authorization'] = f"Bearer {token}"

    return headers

def api_key_from_env() -> Optional[str]:
    for name in API_KEY_ENV_VARS:
        if os.environ.get(name):
            return os.environ[name]
    return None

class TransientEndpointError(Exception):
    """The endpoint could not answer right now; worth retrying"""

@dataclass(frozen=True)
class Endpoint:
    """ An OpenAI-compatible server plus the model name to request
    """
    url: str
    model: str = 'default'

    @classmethod
    def parse(cls, value) -> Endpoint:
        """Accept an Endpoint, a bare URL, or a {url, model} table"""
        if isinstance(value, Endpoint):
            return value
        if isinstance(value, str):
            return cls(value)
        if isinstance(value, dict) and 'url' in value:
            return cls(value['url'], value.get('model', 'default'))
        raise DartConfigError(f"Can't understand endpoint definition: {value!r}")

    @property
    def completions_url(self) -> str:
        url = self.url.rstrip('/')
        if url.endswith('/chat/completions'):
            return url
        if url.endswith('/v1'):
            return f"{url}/chat/completions"
        return f"{url}/v1/chat/completions"

    def __str__(self):
        return self.url

def resolve_endpoint_map(endpoint_map: dict, alpha_grid: list[float]) -> dict[str, Endpoint]:
    """Key the endpoint map by formatted alpha and check it covers the grid"""
    resolved = {}
    for alpha, value in endpoint_map.items():
        try:
            key = format_alpha(float(alpha))
        except ValueError:
            raise DartConfigError(f"Endpoint map key '{alpha}' is not an alpha value")
        resolved[key] = Endpoint.parse(value)
    missing = [format_alpha(a) for a in alpha_grid if format_alpha(a) not in resolved]
    if missing:
        raise DartConfigError(f"No endpoint configured for alpha {', '.join(missing)}")
    return resolved


class ThinkSplit(NamedTuple):
    reasoning_text: str
    answer_text: str
    truncated: bool = False

def split_think(raw_text: str, open_tag: str=THINK_OPEN, close_tag: str=THINK_CLOSE) -> ThinkSplit:
    """Split model output into its think segment and the answer after it

    Without a think segment all of the text is answer. An unclosed segment
    is all reasoning and flagged as truncated. Text before the opening tag
    is kept at the start of the answer.
    """
    raw_text = raw_text or ''
    start = raw_text.find(open_tag)
    if start == -1:
        return ThinkSplit('', raw_text)
    preamble = raw_text[:start]
    body = start + len(open_tag)
    end = raw_text.find(close_tag, body)
    if end == -1:
        return ThinkSplit(raw_text[body:], preamble, True)
    return ThinkSplit(raw_text[body:end], preamble + raw_text[end + len(close_tag):])

def count_tokens_approx(text: str) -> int:
    """Whitespace token count. An approximation only."""
    return len(text.split())

def apportion(total: int, reasoning: int, answer: int) -> int:
    """Share of total belonging to reasoning, rounded half up"""
    whole = reasoning + answer
    if whole == 0:
        return 0
    return (2 * total * reasoning + whole) // (2 * whole)


class InferenceClient:
    """ A thin chat-completions client with bounded retries

    408, 429, 5xx and transport errors are retried; any other 4xx is a
    configuration problem and raised straight away.
    """
    def __init__(self, api_key: str=None, session: requests.Session=None,
        timeout: float=REQUEST_TIMEOUT, attempts: int=MAX_ATTEMPTS,
        backoff_min: float=1, backoff_max: float=30):

        self.session = session or requests.Session()
        self.session.headers.update(requests_headers(api_key or api_key_from_env()))
        self.timeout = timeout
        self.attempts = attempts
        self.backoff_min = backoff_min
        self.backoff_max = backoff_max

    def chat(self, endpoint: Endpoint, messages: list[dict], params: SamplingParams,
        seed: int=None) -> dict:
        payload = {
            'model': endpoint.model,
            'messages': messages,
            'temperature': params.temperature,
            'top_p': params.top_p,
            'max_tokens': params.max_tokens,
        }
        if seed is not None:
            payload['seed'] = seed

        retrying = Retrying(
            stop=stop_after_attempt(self.attempts),
            wait=wait_random_exponential(min=self.backoff_min, max=self.backoff_max),
            retry=retry_if_exception_type(TransientEndpointError),
            before_sleep=lambda state: log.debug(
                f"Retrying {endpoint} after attempt {state.attempt_number}: {state.outcome.exception()}"),
            reraise=True,
        )
        return retrying(self._post, endpoint.completions_url, payload)

    def _post(self, url: str, payload: dict) -> dict:
        try:
            response = self.session.post(url, json=payload, timeout=self.timeout)
        except requests.RequestException as e:
            raise TransientEndpointError(f"{type(e).__name__}: {e}")

        status = response.status_code
        if status in TRANSIENT_STATUS or status >= 500:
            raise TransientEndpointError(f"HTTP {status} from {url}")
        if status >= 400:
            raise EndpointConfigError(f"{url} rejected the request with HTTP {status}: {response.text[:500]}")

        try:
            reply = response.json()
        except ValueError:
            raise TransientEndpointError(f"Invalid JSON from {url}")
        if not reply.get('choices'):
            raise TransientEndpointError(f"Reply from {url} has no choices")
        return reply


def build_messages(problem: Problem) -> list[dict]:
    return [{'role': 'user', 'content': GENERATION_PROMPT.format(question=problem.question)}]

def reply_text(reply: dict, open_tag: str=THINK_OPEN, close_tag: str=THINK_CLOSE) -> str:
    """The completion text, with a separately returned reasoning field folded back in"""
    message = reply['choices'][0].get('message') or {}
    content = message.get('content') or ''
    reasoning = message.get('reasoning_content') or ''
    if reasoning and open_tag not in content:
        return f"{open_tag}{reasoning}{close_tag}{content}"
    return content

def record_from_reply(problem_id: str, alpha: float, sample_index: int, endpoint: Endpoint,
    reply: dict, token_counter: Callable[[str], int]=count_tokens_approx,
    open_tag: str=THINK_OPEN, close_tag: str=THINK_CLOSE) -> GenerationRecord:
    """Turn a chat completion reply into a GenerationRecord"""
    raw = reply_text(reply, open_tag, close_tag)
    split = split_think(raw, open_tag, close_tag)
    local_reasoning = token_counter(split.reasoning_text)
    local_answer = token_counter(split.answer_text)

    usage = reply.get('usage') or {}
    completion_tokens = usage.get('completion_tokens')
    if completion_tokens is not None:
        total = int(completion_tokens)
        details = usage.get('completion_tokens_details') or {}
        reasoning = details.get('reasoning_tokens')
        if reasoning is None:
            reasoning = apportion(total, local_reasoning, local_answer)
        reasoning = min(int(reasoning), total)
        answer = total - reasoning
        token_source = TokenSource.SERVER_USAGE
    else:
        reasoning, answer = local_reasoning, local_answer
        total = reasoning + answer
        token_source = TokenSource.LOCAL_APPROX

    return GenerationRecord(
        problem_id=problem_id,
        alpha=alpha,
        sample_index=sample_index,
        raw_text=raw,
        reasoning_text=split.reasoning_text,
        answer_text=split.answer_text,
        reasoning_tokens=reasoning,
        answer_tokens=answer,
        total_tokens=total,
        token_source=token_source,
        endpoint=str(endpoint),
        finish_reason=FinishReason.from_server(reply['choices'][0].get('finish_reason')),
        truncated_think=split.truncated,
    )

def generate(problem: Problem, endpoint, alpha: float, params: SamplingParams,
    sample_index: int, client: InferenceClient=None,
    token_counter: Callable[[str], int]=count_tokens_approx,
    open_tag: str=THINK_OPEN, close_tag: str=THINK_CLOSE) -> GenerationRecord:
    """Generate one reasoning chain for a problem

    Transport failures that survive the retries come back as an ERROR
    record. A 4xx answer raises EndpointConfigError.

    @param endpoint: an Endpoint, URL or {url, model} table
    @param sample_index: which repetition this is; offsets the seed
    """
    endpoint = Endpoint.parse(endpoint)
    client = client or InferenceClient()
    seed = params.seed + sample_index if params.seed is not None else None
    log.debug(f"Generating {record_key(problem.id, alpha, sample_index)} on {endpoint}")
    try:
        reply = client.chat(endpoint, build_messages(problem), params, seed)
    except TransientEndpointError as e:
        log.warning(f"Giving up on {record_key(problem.id, alpha, sample_index)}: {e}")
        return GenerationRecord(problem.id, alpha, sample_index, endpoint=str(endpoint),
            finish_reason=FinishReason.ERROR, error=str(e))

    return record_from_reply(problem.id, alpha, sample_index, endpoint, reply,
        token_counter, open_tag, close_tag)


@dataclass(frozen=True)
class PromptTemplate:
    """ A prompt for the teacher model that shortens long chains of thought

    Placeholders are substituted literally, so LaTeX braces in the template
    need no escaping.
    """
    text: str
    version: str

    PLACEHOLDERS: ClassVar[tuple] = ('question', 'answer', 'long_cot')

    def __post_init__(self):
        missing = [p for p in self.PLACEHOLDERS if '{' + p + '}' not in self.text]
        if missing:
            raise DartConfigError(f"Prompt template '{self.version}' lacks placeholders: {', '.join(missing)}")

    def render(self, question: str, answer: str, long_cot: str) -> str:
        text = self.text
        for name, value in [('question', question), ('answer', answer), ('long_cot', long_cot)]:
            text = text.replace('{' + name + '}', value)
        return text

    @classmethod
    def from_file(cls, path: str, version: str=None) -> PromptTemplate:
        text = Path(path).read_text(encoding='utf-8')
        if version is None:
            version = 'file-' + hashlib.sha256(text.encode('utf-8')).hexdigest()[:12]
        return cls(text, version)

# Stand-in wording, not a published compression prompt. Point
# compression.template_file at your own prompt to replace it.
DEFAULT_COMPRESSION_TEMPLATE = PromptTemplate(
    text=(
        "Below is a math problem, its correct answer, and a long step-by-step solution.\n"
        "Rewrite the solution so that it is as short as possible while keeping every step "
        "needed to reach the answer. Drop repetition, self-checks and detours. "
        "Output only the shortened reasoning.\n\n"
        "Problem:\n{question}\n\n"
        "Answer:\n{answer}\n\n"
        "Long solution:\n{long_cot}\n"
    ),
    version='standin-1',
)

def compress_cot(problem: Problem, long_cot: str, template: PromptTemplate, teacher_endpoint,
    client: InferenceClient=None, writer: JsonlAppender=None, params: SamplingParams=None,
    token_counter: Callable[[str], int]=count_tokens_approx) -> Optional[str]:
    """Ask the teacher model for a shorter version of a long chain of thought

    @returns: the shortened chain, or None if the teacher gave nothing usable
    """
    if not long_cot or not long_cot.strip():
        raise ValueError(f"Problem '{problem.id}' has an empty long chain of thought")
    endpoint = Endpoint.parse(teacher_endpoint)
    client = client or InferenceClient()
    params = params or SamplingParams()

    messages = [{'role': 'user', 'content': template.render(problem.question, problem.gold_answer, long_cot)}]
    try:
        reply = client.chat(endpoint, messages, params, params.seed)
    except TransientEndpointError as e:
        log.warning(f"Skipping problem {problem.id}, teacher unavailable: {e}")
        return None

    text = reply_text(reply)
    split = split_think(text)
    # a reasoning teacher thinks first; the compressed chain follows its think segment
    cot_short = split.answer_text if split.reasoning_text and not split.truncated else text
    cot_short = cot_short.strip()
    if not cot_short:
        log.warning(f"Teacher returned empty text for problem {problem.id}, row skipped")
        return None

    long_tokens = token_counter(long_cot)
    short_tokens = token_counter(cot_short)
    row = {
        'problem_id': problem.id,
        'question': problem.question,
        'gold_answer': problem.gold_answer,
        'cot_short': cot_short,
        'long_tokens': long_tokens,
        'short_tokens': short_tokens,
        'length_ratio': round(short_tokens / long_tokens, 4) if long_tokens else None,
        'template_version': template.version,
    }
    if writer is not None:
        writer.append(row)
    log.debug(f"Compressed {problem.id}: {long_tokens} -> {short_tokens} tokens")
    return cot_short

def compress_dataset(rows: Iterable[dict], template: PromptTemplate, endpoint, out_path,
    client: InferenceClient=None, params: SamplingParams=None) -> int:
    """Compress every long chain in rows into a compressed-chain JSONL file at out_path

    Rows need question, long_cot and gold_answer (or answer) fields. Problems
    already present in out_path are skipped, so an interrupted batch resumes.

    @returns: number of rows written by this call
    """
    out_path = Path(out_path)
    done = set()
    if out_path.exists():
        done = {row['problem_id'] for row in read_jsonl(out_path)}
    client = client or InferenceClient()

    written = 0
    with JsonlAppender(out_path) as writer:
        for index, row in enumerate(rows):
            problem_id = str(row.get('problem_id', row.get('id', f"problem-{index}")))
            if problem_id in done:
                continue
            try:
                problem = Problem(problem_id, row['question'], str(row.get('gold_answer', row.get('answer', ''))))
                if compress_cot(problem, row.get('long_cot', ''), template, endpoint, client, writer, params):
                    written += 1
            except ValueError as e:
                log.warning(f"Skipping row {index}: {e}")
    log.info(f"Wrote {written} compressed chains to {out_path}")
    return written


def changed_questions(previous_path: Path, problems: list[Problem]) -> set[str]:
    """Ids of problems whose question differs from the problem set saved last time"""
    if not previous_path.exists():
        return set()
    previous = {row['id']: row.get('question') for row in read_jsonl(previous_path)}
    return {p.id for p in problems if p.id in previous and previous[p.id] != p.question}

def run_spectrum(problems: list[Problem], alpha_grid: list[float], endpoint_map: dict,
    params: SamplingParams, repetitions: int=1, run_dir=None,
    client: InferenceClient=None, max_in_flight: int=DEFAULT_MAX_IN_FLIGHT,
    retry_errors: bool=False, run_id: str=None,
    token_counter: Callable[[str], int]=count_tokens_approx,
    open_tag: str=THINK_OPEN, close_tag: str=THINK_CLOSE) -> SpectrumRun:
    """Generate every (problem, alpha, sample) across the spectrum

    Records are appended to generations/records.jsonl as they complete.
    Keys already on disk are not generated again, unless they are ERROR
    records and retry_errors is set. Records of a problem whose question
    changed since the last call are dropped and generated afresh.

    @param endpoint_map: alpha -> endpoint, covering every alpha of the grid
    @param max_in_flight: concurrent requests allowed per endpoint
    """
    check_alpha_grid(alpha_grid)
    if repetitions < 1:
        raise DartConfigError(f"repetitions must be at least 1, got {repetitions}")
    if run_dir is None:
        raise DartConfigError("run_spectrum needs a run directory to persist records")
    endpoints = resolve_endpoint_map(endpoint_map, alpha_grid)
    ids = [p.id for p in problems]
    if len(set(ids)) != len(ids):
        raise ValueError("Problem ids must be unique within a run")

    gen_dir = generations_dir(run_dir)
    records_path = gen_dir / RECORDS_FILE
    existing = load_records(records_path)
    changed = changed_questions(gen_dir / PROBLEMS_FILE, problems)
    if changed and any(r.problem_id in changed for r in existing.values()):
        log.info(f"Questions changed for {len(changed)} problems, dropping their records")
        existing = {key: r for key, r in existing.items() if r.problem_id not in changed}
        write_jsonl(records_path, (r._asdict() for r in existing.values()))

    created_at = utc_now_iso()
    info_path = gen_dir / RUN_INFO_FILE
    if info_path.exists():
        info = read_json(info_path)
        run_id = run_id or info.get('run_id')
        created_at = info.get('created_at', created_at)
    run = SpectrumRun(run_id or f"run-{created_at}", list(alpha_grid), list(problems),
        created_at=created_at, repetitions=repetitions)
    save_run_info(run, run_dir, {'tool_version': TOOL_VERSION})

    todo = []
    for problem in problems:
        for alpha in alpha_grid:
            for sample_index in range(repetitions):
                key = record_key(problem.id, alpha, sample_index)
                done = existing.get(key)
                if done is None or (retry_errors and done.is_error):
                    todo.append((problem, alpha, sample_index))
    attempted = len(problems) * len(alpha_grid) * repetitions
    log.info(f"Generating {len(todo)} of {attempted} records, {attempted - len(todo)} already on disk")

    limits = {endpoint: threading.BoundedSemaphore(max_in_flight) for endpoint in set(endpoints.values())}
    client = client or InferenceClient()

    def work(problem: Problem, alpha: float, sample_index: int) -> GenerationRecord:
        endpoint = endpoints[format_alpha(alpha)]
        with limits[endpoint]:
            record = generate(problem, endpoint, alpha, params, sample_index, client,
                token_counter, open_tag, close_tag)
        writer.append(record._asdict())
        return record

    if todo:
        with JsonlAppender(records_path) as writer:
            pool = ThreadPoolExecutor(max_workers=max_in_flight * len(limits))
            try:
                futures = [pool.submit(work, *item) for item in todo]
                for count, future in enumerate(as_completed(futures), start=1):
                    record = future.result()
                    existing[record.key] = record
                    if count % 100 == 0:
                        log.info(f"{count} of {len(todo)} generations done")
            except Exception:
                pool.shutdown(wait=True, cancel_futures=True)
                raise
            pool.shutdown(wait=True)

    grid_keys = {format_alpha(a) for a in alpha_grid}
    known = set(ids)
    run.records = sort_records(
        (r for r in existing.values() if r.problem_id in known
            and format_alpha(r.alpha) in grid_keys and r.sample_index < repetitions),
        run.problems)

    errors = {alpha: count for alpha, count in run.error_counts().items() if count}
    if errors:
        log.warning(f"ERROR records per alpha: {errors}")
    log.info(f"Spectrum run {run.run_id} holds {len(run)} records")
    return run
