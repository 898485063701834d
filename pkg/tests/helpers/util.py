""" Utility functions for tests
"""
import re
import threading

from dartpipe import setup_argparse, augment_config, load_args_config
from dartpipe.checkpoints import TensorSet, write_tensor_set
from dartpipe.const import DType, GenerationRecord, Problem, SpectrumRun, FinishReason

def shim_argparse(testargv: list=[], tomldata: str=None):
    """Helper function to parse test args into a merged config

    @returns: (args, conf)
    """
    ap = setup_argparse()
    args = ap.parse_args(testargv)
    conf = augment_config(load_args_config(args, tomldata if tomldata is not None else ''), args)
    return args, conf

class FakeResponse:
    def __init__(self, status_code: int=200, payload: dict=None, text: str=''):
        self.status_code = status_code
        self.payload = payload
        self.text = text

    def json(self):
        if self.payload is None:
            raise ValueError("not JSON")
        return self.payload

def completion(content: str, finish_reason: str='stop', usage: dict=None,
    reasoning_content: str=None) -> dict:
    """Build a chat completion reply body"""
    message = {'role': 'assistant', 'content': content}
    if reasoning_content is not None:
        message['reasoning_content'] = reasoning_content
    reply = {'choices': [{'index': 0, 'message': message, 'finish_reason': finish_reason}]}
    if usage is not None:
        reply['usage'] = usage
    return reply

class FakeSession:
    """ Scripted stand-in for requests.Session

    responder(url, payload) returns a FakeResponse, or an exception to raise.
    """
    def __init__(self, responder):
        self.headers = {}
        self.calls = []
        self.responder = responder
        self._lock = threading.Lock()

    def post(self, url, json=None, timeout=None):
        with self._lock:
            self.calls.append((url, json))
        result = self.responder(url, json)
        if isinstance(result, Exception):
            raise result
        return result

def scripted(*responses):
    """Responder handing out responses in order, repeating the last one"""
    queue = list(responses)
    lock = threading.Lock()

    def responder(url, payload):
        with lock:
            if len(queue) > 1:
                return queue.pop(0)
            return queue[0]
    return responder

ALPHA_URL_RE = re.compile(r'/a(\d\.\d{3})/')
QUESTION_RE = re.compile(r'What is (\d+) \+ (\d+)\?')

def mock_endpoints(alpha_grid: list[float]) -> dict:
    return {f"{a:.3f}": f"http://mock/a{a:.3f}/v1" for a in alpha_grid}

def spectrum_responder(url, payload):
    """A pretend spectrum of models answering 'What is a + b?'

    Chains shrink as alpha grows. Past alpha 0.5 the model is too terse
    for sums above 50 and gets them wrong.
    """
    alpha = float(ALPHA_URL_RE.search(url).group(1))
    a, b = (int(x) for x in QUESTION_RE.search(payload['messages'][-1]['content']).groups())
    steps = int(round(40 * (1 - alpha))) + 2 + (a + b) % 3
    answer = a + b
    if alpha > 0.5 and answer > 50:
        answer += 1
    content = f"<think>{'step ' * steps}</think>The sum is \\boxed{{{answer}}}."
    return FakeResponse(200, completion(content))

def sum_problems(pairs: list[tuple[int, int]]) -> list[Problem]:
    return [Problem(f"p{i}", f"What is {a} + {b}?", str(a + b)) for i, (a, b) in enumerate(pairs)]

def make_record(problem_id: str, alpha: float, sample_index: int=0, reasoning_tokens: int=10,
    answer_tokens: int=5, error: bool=False, reasoning_text: str=None, answer_text: str='') -> GenerationRecord:
    if error:
        return GenerationRecord(problem_id, alpha, sample_index, finish_reason=FinishReason.ERROR,
            error='HTTP 503')
    reasoning_text = reasoning_text if reasoning_text is not None else 'step ' * reasoning_tokens
    return GenerationRecord(problem_id, alpha, sample_index,
        raw_text=f"<think>{reasoning_text}</think>{answer_text}",
        reasoning_text=reasoning_text, answer_text=answer_text,
        reasoning_tokens=reasoning_tokens, answer_tokens=answer_tokens,
        total_tokens=reasoning_tokens + answer_tokens)

def make_run(problems: list[Problem], alpha_grid: list[float], records: list[GenerationRecord]) -> SpectrumRun:
    return SpectrumRun('test-run', alpha_grid, problems, records)

def write_checkpoint(path, tensors: dict, metadata: dict=None):
    """Write {name: (DType, values)} as a checkpoint"""
    ts = TensorSet(metadata)
    for name, (dtype, values) in tensors.items():
        ts.add_values(name, dtype, values)
    return write_tensor_set(path, ts)

def small_checkpoints(tmp_path, base_values=None, distilled_values=None, dtype: DType=DType.F32):
    """A base and a distilled checkpoint with two matching tensors"""
    base_values = base_values if base_values is not None else [[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]
    distilled_values = distilled_values if distilled_values is not None else [[3.0, 2.0, 1.0], [0.0, -1.0, -2.0]]
    base = write_checkpoint(tmp_path / 'base.safetensors', {
        'layer.weight': (dtype, base_values),
        'layer.bias': (dtype, [0.5, -0.5]),
    }, {'format': 'pt'})
    distilled = write_checkpoint(tmp_path / 'distilled.safetensors', {
        'layer.weight': (dtype, distilled_values),
        'layer.bias': (dtype, [1.5, 0.5]),
    })
    return base, distilled
