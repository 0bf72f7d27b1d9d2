import json
import random
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from taskmill.gateway import (
    ChatRequest,
    ChatResponse,
    Gateway,
    GatewayConfig,
    HttpBackend,
    MockBackend,
    ParseError,
    ProtocolError,
    Role,
    ScriptExhausted,
    TransportError,
    fallback_embed,
    load_prompt,
    parse_candidates,
    parse_judge_reply,
    parse_offspring,
    parse_structured,
    parse_verifier_reply,
    prompt_checksums,
    render_prompt,
)

WELL_FORMED = """## INSTRUCTION
Write a function add(a, b) returning the sum of two integers.

## REASONING
Addition is a single built-in operation.
Return the operator result directly.

## SOLUTION 1
```python
def add(a, b):
    return a + b
```

## TESTS 1
```python
assert add(1, 2) == 3
assert add(-1, 1) == 0
```

## SOLUTION 2
```python
def add(a, b):
    return sum((a, b))
```

## TESTS 2
```python
assert add(0, 0) == 0
```

## SOLUTION 3
```python
import operator

def add(a, b):
    return operator.add(a, b)
```

## TESTS 3
```python
assert add(10, 5) == 15
```
"""


def _gateway(script=None, **kw):
    backend = MockBackend(script) if script else kw.pop("backend")
    return Gateway(GatewayConfig(), backend=backend, sleep_fn=lambda s: None, **kw)


def _messages():
    return [("system", "sys"), ("user", "hi")]


def test_chat_request_invariants():
    with pytest.raises(ValueError):
        ChatRequest(Role.CODER, (), 0.0, 10, "r1")
    with pytest.raises(ValueError):
        ChatRequest(Role.CODER, (("user", "hi"),), 0.0, 10, "r1")
    with pytest.raises(ValueError):
        ChatRequest(Role.CODER, (("system", "s"), ("robot", "x")), 0.0, 10, "r1")
    with pytest.raises(ValueError):
        ChatRequest(Role.CODER, (("system", "s"),), -1.0, 10, "r1")


def test_chat_response_invariants():
    with pytest.raises(ValueError):
        ChatResponse(content="", finish_reason="stop", latency_ms=0, attempt=1)
    ChatResponse(content="", finish_reason="error", latency_ms=0, attempt=1)


def test_mock_scripted_reply_exact():
    gw = _gateway({"coder": ["hello there"]})
    resp = gw.chat(Role.CODER, _messages())
    assert resp.content == "hello there"
    assert resp.finish_reason == "stop"
    assert resp.attempt == 1


def test_mock_exhaustion_and_per_role_isolation():
    gw = _gateway({"coder": ["a"], "judge": ["PASS", "PASS"]})
    assert gw.chat(Role.JUDGE, _messages()).content == "PASS"
    assert gw.chat(Role.CODER, _messages()).content == "a"
    assert gw.chat(Role.JUDGE, _messages()).content == "PASS"
    with pytest.raises(ScriptExhausted):
        gw.chat(Role.CODER, _messages())


def test_mock_cursors_checkpoint_roundtrip():
    backend = MockBackend({"coder": ["a", "b", "c"]})
    gw = Gateway(GatewayConfig(), backend=backend, sleep_fn=lambda s: None)
    gw.chat(Role.CODER, _messages())
    saved = backend.cursors
    assert saved == {"coder": 1}
    gw.chat(Role.CODER, _messages())
    backend.set_cursors(saved)
    assert gw.chat(Role.CODER, _messages()).content == "b"
    with pytest.raises(ValueError):
        backend.set_cursors({"coder": 99})


def test_scripted_retryable_then_success_counts_attempts():
    script = {"coder": [{"error": "retryable"}, {"error": "retryable"}, "done"]}
    gw = _gateway(script)
    resp = gw.chat(Role.CODER, _messages())
    assert resp.content == "done"
    assert resp.attempt == 3


def test_retries_exhausted_raises_transport_error():
    script = {"coder": [{"error": "retryable"}] * 10}
    gw = _gateway(script)
    gw.config.roles[Role.CODER].max_retries = 2
    with pytest.raises(TransportError, match="after 3 attempts"):
        gw.chat(Role.CODER, _messages())


def test_backoff_schedule_is_exponential():
    sleeps = []
    script = {"coder": [{"error": "retryable"}] * 3 + ["ok"]}
    gw = Gateway(
        GatewayConfig(),
        backend=MockBackend(script),
        sleep_fn=sleeps.append,
    )
    gw.config.roles[Role.CODER].backoff_base_s = 0.5
    gw.chat(Role.CODER, _messages())
    assert sleeps == [0.5, 1.0, 2.0]


class _ScriptedHandler(BaseHTTPRequestHandler):
    script = []
    hits = 0

    def do_POST(self):
        cls = type(self)
        status, body = cls.script[min(cls.hits, len(cls.script) - 1)]
        cls.hits += 1
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(body.encode("utf-8"))

    def log_message(self, *args):
        pass


@pytest.fixture
def stub_server():
    server = ThreadingHTTPServer(("127.0.0.1", 0), _ScriptedHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    _ScriptedHandler.hits = 0
    yield server
    server.shutdown()


def _http_gateway(server, max_retries=3):
    cfg = GatewayConfig(mode="http")
    url = "http://127.0.0.1:%d/v1/chat/completions" % server.server_address[1]
    for role_cfg in cfg.roles.values():
        role_cfg.endpoint_url = url
        role_cfg.max_retries = max_retries
        role_cfg.backoff_base_s = 0.001
    return Gateway(cfg, backend=HttpBackend(), sleep_fn=lambda s: None)


def _ok_body(text="fine"):
    return json.dumps(
        {"choices": [{"message": {"content": text}, "finish_reason": "stop"}]}
    )


def test_http_429_twice_then_200(stub_server):
    _ScriptedHandler.script = [(429, "{}"), (429, "{}"), (200, _ok_body())]
    gw = _http_gateway(stub_server)
    resp = gw.chat(Role.CODER, _messages())
    assert resp.content == "fine"
    assert resp.attempt == 3
    assert _ScriptedHandler.hits == 3


def test_http_always_500_exhausts(stub_server):
    _ScriptedHandler.script = [(500, "{}")]
    gw = _http_gateway(stub_server, max_retries=2)
    with pytest.raises(TransportError, match="after 3 attempts"):
        gw.chat(Role.CODER, _messages())
    assert _ScriptedHandler.hits == 3


def test_http_malformed_body_is_protocol_error(stub_server):
    _ScriptedHandler.script = [(200, '{"nonsense": true}')]
    gw = _http_gateway(stub_server)
    with pytest.raises(ProtocolError):
        gw.chat(Role.CODER, _messages())
    assert _ScriptedHandler.hits == 1  # no retry on protocol errors


class _TrackingBackend:
    def __init__(self):
        self.in_flight = 0
        self.peak = 0
        self.lock = threading.Lock()

    def attempt(self, role, cfg, payload):
        with self.lock:
            self.in_flight += 1
            self.peak = max(self.peak, self.in_flight)
        time.sleep(0.005)
        with self.lock:
            self.in_flight -= 1
        return ("ok", "x", "stop")


def test_per_role_concurrency_cap():
    backend = _TrackingBackend()
    cfg = GatewayConfig()
    cfg.roles[Role.CODER].concurrency = 4
    gw = Gateway(cfg, backend=backend, sleep_fn=lambda s: None)
    threads = [
        threading.Thread(target=gw.chat, args=(Role.CODER, _messages()))
        for _ in range(24)
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert backend.peak <= 4


# --- embeddings -------------------------------------------------------------


def _offline_gateway():
    return Gateway(
        GatewayConfig(mode="mock"),
        backend=MockBackend({"coder": ["unused"]}),
        sleep_fn=lambda s: None,
    )


def test_embed_requires_texts():
    with pytest.raises(ValueError):
        _offline_gateway().embed([])


def test_embed_deterministic_and_normalized():
    gw = _offline_gateway()
    a, b = gw.embed(["sort an array", "sort an array"])
    assert np.array_equal(a, b)
    vecs = gw.embed(["x", "sort an array of ints", ""])
    for v in vecs:
        assert abs(float(np.linalg.norm(v)) - 1.0) <= 1e-6
        assert v.shape == (384,)


def test_fallback_embed_frozen_cosine_regression():
    a = fallback_embed("two sum array")
    b = fallback_embed("two sum arrays")
    c = fallback_embed("regex parser")
    near = float(np.dot(a, b))
    far = float(np.dot(a, c))
    # values computed once from the fixed hash and frozen
    assert near == pytest.approx(2.0 / 3.0, abs=1e-9)
    assert far == pytest.approx(0.0, abs=1e-9)
    assert near > far


def test_fallback_embed_empty_text_is_basis_vector():
    v = fallback_embed("")
    assert v[0] == 1.0
    assert float(np.linalg.norm(v)) == 1.0


# --- response grammars ------------------------------------------------------


def test_parse_structured_golden():
    parsed = parse_structured(WELL_FORMED)
    assert parsed.instruction_text.startswith("Write a function add")
    assert len(parsed.reasoning_text.splitlines()) == 2
    assert len(parsed.candidates) == 3
    assert parsed.candidates[0].solution_source == "def add(a, b):\n    return a + b\n"
    assert "assert add(1, 2) == 3" in parsed.candidates[0].test_source
    assert [c.index for c in parsed.candidates] == [0, 1, 2]


def test_parse_structured_empty_input():
    with pytest.raises(ParseError, match="missing INSTRUCTION section"):
        parse_structured("")


def test_parse_structured_two_candidates():
    cut = WELL_FORMED.split("## SOLUTION 3")[0]
    with pytest.raises(ParseError, match="expected 3 candidates, found 2"):
        parse_structured(cut)


def test_parse_structured_unterminated_fence():
    broken = WELL_FORMED.replace(
        "def add(a, b):\n    return a + b\n```", "def add(a, b):\n    return a + b"
    )
    with pytest.raises(ParseError, match="unterminated fence in SOLUTION 1"):
        parse_structured(broken)


def test_parse_structured_missing_reasoning():
    cut = WELL_FORMED.replace("## REASONING", "## COMMENTARY")
    with pytest.raises(ParseError, match="missing REASONING section"):
        parse_structured(cut)


def test_parse_structured_duplicate_section():
    doubled = WELL_FORMED + "\n## SOLUTION 1\n```python\nx = 1\n```\n"
    with pytest.raises(ParseError, match="duplicate SOLUTION 1 section"):
        parse_structured(doubled)


def test_parse_structured_empty_block():
    broken = WELL_FORMED.replace(
        "```python\nassert add(10, 5) == 15\n```", "```python\n\n```"
    )
    with pytest.raises(ParseError, match="empty TESTS 3 block"):
        parse_structured(broken)


def test_parse_structured_total_under_fuzz():
    rng = random.Random(7)
    base = WELL_FORMED
    alphabet = "#`\n SOLUTIONTEST123abcxyz"
    for _ in range(10_000):
        text = list(base)
        for _ in range(rng.randrange(1, 6)):
            op = rng.randrange(3)
            pos = rng.randrange(len(text))
            if op == 0:
                text[pos] = rng.choice(alphabet)
            elif op == 1:
                text.insert(pos, rng.choice(alphabet))
            else:
                del text[pos]
        mutated = "".join(text)
        try:
            parse_structured(mutated)
        except ParseError:
            pass


def test_parse_candidates():
    body = "## SOLUTION" + WELL_FORMED.split("## SOLUTION", 1)[1]
    candidates = parse_candidates(body)
    assert len(candidates) == 3
    assert candidates[2].index == 2
    with pytest.raises(ParseError, match="expected 3 candidates, found 1"):
        parse_candidates("## SOLUTION 1\n```\nx\n```\n## TESTS 1\n```\ny\n```")


def test_parse_offspring():
    reply = (
        "## INSTRUCTION\nMerge sorted streams.\n\n"
        "## REASONING\nKeep a heap of heads.\nPop the minimum repeatedly.\n\n"
        "## PARENTS\n2, 4\n"
    )
    parsed = parse_offspring(reply)
    assert parsed.instruction_text == "Merge sorted streams."
    assert parsed.reasoning_text.startswith("Keep a heap")
    assert parsed.parent_indices == (2, 4)
    with pytest.raises(ParseError, match="missing REASONING section"):
        parse_offspring("## INSTRUCTION\nx\n## PARENTS\n1\n")
    with pytest.raises(ParseError, match="missing PARENTS section"):
        parse_offspring("## INSTRUCTION\nx\n## REASONING\ny\n")
    with pytest.raises(ParseError, match="out of range"):
        parse_offspring("## INSTRUCTION\nx\n## REASONING\ny\n## PARENTS\n9\n")
    with pytest.raises(ParseError, match="unparsable PARENTS entry"):
        parse_offspring("## INSTRUCTION\nx\n## REASONING\ny\n## PARENTS\ntwo\n")
    dup = parse_offspring("## INSTRUCTION\nx\n## REASONING\ny\n## PARENTS\n3, 3, 1\n")
    assert dup.parent_indices == (3, 1)


def test_parse_judge_reply():
    assert parse_judge_reply("PASS").passed
    result = parse_judge_reply("FAIL: clarity, functional_alignment")
    assert not result.passed
    assert result.failed_checks == ("clarity", "functional_alignment")
    closed = parse_judge_reply("Sure! This looks great.")
    assert not closed.passed
    assert closed.failed_checks == ("structure",)
    assert not parse_judge_reply("FAIL: vibes").passed


def test_parse_verifier_reply():
    assert parse_verifier_reply("DUPLICATE") is True
    assert parse_verifier_reply(" DISTINCT \n") is False
    assert parse_verifier_reply("they look similar") is False


# --- prompt templates -------------------------------------------------------


def test_prompts_load_and_render():
    checks = prompt_checksums()
    assert set(checks) == {
        "system_instructor",
        "system_coder",
        "system_judge",
        "structure",
        "candidates",
        "crossover",
        "mutation_tighten_constraints",
        "mutation_deepen_reasoning",
        "mutation_expand_scope",
        "judge",
        "dedup_verify",
    }
    assert all(len(v) == 64 for v in checks.values())
    rendered = render_prompt("structure", document_text="Sort a list.")
    assert "Sort a list." in rendered
    assert "${" not in rendered
    rendered = render_prompt("crossover", parent_block="1. a\n2. b")
    assert "1. a" in rendered
    with pytest.raises(ValueError):
        load_prompt("nonexistent")


def test_prompt_checksums_stable():
    assert prompt_checksums() == prompt_checksums()
