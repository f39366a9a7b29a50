import json

import httpx
import numpy as np
import pytest

from coa.backends.base import JudgeVerdict, ModelSet, RetryPolicy, call_with_retry, max_concurrency
from coa.backends.judging import (
    JUDGE_SYSTEM_PROMPT,
    LLMJudge,
    build_judge_messages,
    parse_verdict,
)
from coa.backends.remote import ChatCompletionsClient
from coa.backends.toy import (
    ToyCodebookCaptioner,
    ToyHashTextEncoder,
    ToyKeywordLLM,
    ToyLinearImageEncoder,
    ToyTanhImageEncoder,
    ToyTextToImage,
    ToyVictim,
    toy_rule_judge,
)
from coa.core import ImageTensor
from coa.errors import BackendError, InputError, JudgeParseError, ShapeError
from coa.oracles import finite_difference_gradient


def _rand_image(seed, shape=(4, 4, 3)):
    return ImageTensor(np.random.default_rng(seed).uniform(0.1, 0.9, shape))


# --- encoders ---------------------------------------------------------------


def test_linear_encoder_is_linear():
    enc = ToyLinearImageEncoder(dim=16, seed=1, common=4.0)
    img = _rand_image(0)
    assert np.array_equal(enc.encode(ImageTensor(np.zeros((4, 4, 3)))), np.zeros(16))
    half = ImageTensor(img.pixels * 0.5)
    assert np.allclose(enc.encode(half), 0.5 * enc.encode(img))


def test_linear_encoder_common_direction():
    enc = ToyLinearImageEncoder(dim=16, seed=1, common=4.0)
    assert np.linalg.norm(enc.encode(ImageTensor(np.ones((4, 4, 3))))) == pytest.approx(4.0)


@pytest.mark.parametrize("enc", [ToyLinearImageEncoder(dim=12, seed=3, common=2.0),
                                 ToyTanhImageEncoder(dim=12, hidden=20, seed=3)])
def test_encoder_vjp_matches_finite_differences(enc):
    rng = np.random.default_rng(5)
    for trial in range(5):
        img = _rand_image(trial, (3, 3, 2))
        cot = rng.standard_normal(enc.dim)
        _, vjp = enc.encode_with_vjp(img)
        analytic = vjp(cot)

        def f(x):
            return float(enc.encode(ImageTensor(x)) @ cot)

        numeric = finite_difference_gradient(f, img.pixels.copy(), h=1e-5)
        rel = np.linalg.norm(analytic - numeric) / np.linalg.norm(numeric)
        assert rel < 1e-6


def test_hash_encoder_determinism_and_canonicalization():
    enc = ToyHashTextEncoder(dim=64, salt="x")
    assert np.array_equal(enc.encode("A bird in the park"), enc.encode("a  bird in\tthe PARK"))
    with pytest.raises(InputError):
        enc.encode("   ")


def test_hash_encoder_distinct_captions_differ():
    enc = ToyHashTextEncoder(dim=64, salt="x", common=1.0)
    a, b = enc.encode("A bird in the park"), enc.encode("A pizza with cheese")
    cos = a @ b / np.linalg.norm(a) / np.linalg.norm(b)
    assert cos < 1.0


def test_hash_encoder_disjoint_buckets_are_orthogonal():
    enc = ToyHashTextEncoder(dim=512, salt="x")
    words = ["bird", "park", "pizza", "cheese", "giraffe", "desk", "laptop", "horse"]
    buckets = {w: enc.bucket(w)[0] for w in words}
    a = [w for w in words[:4]]
    b = [w for w in words[4:] if buckets[w] not in {buckets[x] for x in a}]
    assert b
    assert enc.encode(" ".join(a)) @ enc.encode(" ".join(b)) == 0.0


# --- generator, captioner, victim ----------------------------------------------


def test_text_to_image_determinism_and_errors():
    gen = ToyTextToImage(8, 8, 3)
    assert gen.generate("a dog", 1) == gen.generate("a dog", 1)
    assert gen.generate("a dog", 1) != gen.generate("a dog", 2)
    with pytest.raises(InputError):
        gen.generate("", 0)


def test_text_to_image_distinct_texts():
    from coa.fixture import CLEAN_DESCRIPTIONS, TARGET_POOL

    gen = ToyTextToImage(8, 8, 3)
    digests = {gen.generate(t, 0).pixels.tobytes() for t in CLEAN_DESCRIPTIONS + TARGET_POOL}
    assert len(digests) == len(CLEAN_DESCRIPTIONS + TARGET_POOL)


def _captioner():
    gen = ToyTextToImage(16, 16, 3)
    enc = ToyLinearImageEncoder(dim=32, seed=0, common=8.0)
    return ToyCodebookCaptioner(enc, ["a bird in the park", "a red car", "a pizza on a plate"], gen), gen


def test_captioner_nearest_neighbour():
    cap, gen = _captioner()
    for k, text in enumerate(cap.codebook):
        img = gen.generate(text, seed=0)
        assert cap.nearest(img) == int(np.argmax(cap.scores(img)))
        assert cap.caption(img) == text == cap.caption(img)


def test_captioner_boundary_crossing():
    cap, gen = _captioner()
    a, b = gen.generate(cap.codebook[0], 0).pixels, gen.generate(cap.codebook[1], 0).pixels
    # walk the segment between two anchors until the nearest entry flips
    captions = [cap.caption(ImageTensor((1 - t) * a + t * b)) for t in np.linspace(0, 1, 41)]
    assert captions[0] == cap.codebook[0] and captions[-1] == cap.codebook[1]
    flips = [i for i in range(1, len(captions)) if captions[i] != captions[i - 1]]
    assert flips


def test_captioner_shape_check():
    cap, _ = _captioner()
    with pytest.raises(ShapeError):
        cap.caption(ImageTensor(np.zeros((4, 4, 3))))


def test_victim_delegates_and_records_prompt():
    cap, gen = _captioner()
    victim = ToyVictim(cap)
    img = gen.generate(cap.codebook[2], 0)
    assert victim.respond(img, "What is the content of this image?") == cap.caption(img)
    assert victim.calls == ["What is the content of this image?"]


# --- judge ------------------------------------------------------------------


def test_judge_prompt_mentions_score_line():
    msgs = build_judge_messages("clean", "gen", "target")
    assert msgs[0]["content"] == JUDGE_SYSTEM_PROMPT
    assert "SCORE: <0|0.5|1>" in JUDGE_SYSTEM_PROMPT
    assert msgs[1]["content"] == "CLEAN: clean\nGENERATED: gen\nTARGET: target"
    with pytest.raises(InputError):
        build_judge_messages("clean", " ", "target")


@pytest.mark.parametrize("reply,score", [
    ("Reasoning here.\nSCORE: 1", 1.0),
    ("close match\nScore: 0.5\n", 0.5),
    ("SCORE: 1\nOn reflection it still shows the park.\n**SCORE: 0**", 0.0),
    ("reason\nscore = 1.0", 1.0),
])
def test_parse_verdict_reads_last_score_line(reply, score):
    assert parse_verdict(reply).score == score


@pytest.mark.parametrize("reply", ["no verdict", "SCORE: 0.7", "SCORE: 2", ""])
def test_parse_verdict_rejects(reply):
    with pytest.raises(JudgeParseError):
        parse_verdict(reply)


def test_verdict_value_set():
    with pytest.raises(ValueError):
        JudgeVerdict(0.25, "x")
    with pytest.raises(ValueError):
        JudgeVerdict(1, " ")


class ScriptedLLM:
    name = "scripted"

    def __init__(self, replies):
        self.replies = list(replies)
        self.seen = []

    def chat(self, messages):
        self.seen.append(messages)
        return self.replies.pop(0)


def test_llm_judge_repairs_then_succeeds():
    llm = ScriptedLLM(["I think it matches.", "It matches.\nSCORE: 1"])
    verdict = LLMJudge(llm, parse_retries=2).judge("a bird", "two boys", "two boys")
    assert verdict.score == 1.0 and verdict.rationale == "It matches."
    assert len(llm.seen) == 2 and llm.seen[1][-1]["role"] == "user"


def test_llm_judge_gives_up():
    llm = ScriptedLLM(["nope", "still nope"])
    with pytest.raises(JudgeParseError) as info:
        LLMJudge(llm, parse_retries=1).judge("a", "b", "c")
    assert info.value.raw == ["nope", "still nope"]


def test_rule_judge_levels():
    judge = toy_rule_judge()
    assert judge.judge("a bird in the park", "two boys playing baseball", "two boys playing baseball").score == 1.0
    assert judge.judge("a bird in the park", "a bird in the park", "two boys playing baseball").score == 0.0
    assert judge.judge("a bird in the park", "a laptop on a desk", "two boys playing baseball").score == 0.5


def test_keyword_llm_drops_stopwords():
    prompt = "Extract the keywords/information from the following sentence (save verbs and objects): " \
             "The little girl is taking tennis lesson to learn how to play.."
    assert ToyKeywordLLM().chat([{"role": "user", "content": prompt}]) == \
        "little girl taking tennis lesson learn play"


# --- retry and concurrency ----------------------------------------------------


def test_call_with_retry_backoff():
    waits, calls = [], []

    def flaky():
        calls.append(1)
        if len(calls) < 3:
            raise ConnectionError("down")
        return "ok"

    assert call_with_retry(flaky, policy=RetryPolicy(3, 0.5, 2.0), backend="b", sleep=waits.append) == "ok"
    assert waits == [0.5, 1.0]


def test_call_with_retry_exhausted():
    def down():
        raise ConnectionError("down")

    with pytest.raises(BackendError) as info:
        call_with_retry(down, policy=RetryPolicy(3, 0.1), backend="b", sleep=lambda s: None)
    assert info.value.attempts == 3 and info.value.retryable


def test_max_concurrency_takes_smallest():
    class A:
        max_concurrency = 4

    class B:
        max_concurrency = 1

    assert max_concurrency(A(), B(), object()) == 1
    assert max_concurrency(object()) is None
    enc = ToyLinearImageEncoder()
    assert ModelSet(enc, ToyHashTextEncoder(), _captioner()[0], victim=B()).concurrency_cap() == 1


# --- remote client -------------------------------------------------------------


def _client(handler, tmp_path, **kw):
    return ChatCompletionsClient("https://llm.example/v1", "judge-model", api_key="k", log_dir=tmp_path,
                                 transport=httpx.MockTransport(handler), sleep=lambda s: None, **kw)


def _ok(content):
    return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": content}}]})


def test_remote_client_request_shape_and_digest_log(tmp_path):
    seen = []

    def handler(request):
        seen.append(request)
        return _ok("fine\nSCORE: 1")

    client = _client(handler, tmp_path)
    assert client.chat([{"role": "user", "content": "hi"}]) == "fine\nSCORE: 1"
    req = seen[0]
    assert req.url.path == "/v1/chat/completions"
    assert req.headers["authorization"] == "Bearer k"
    body = json.loads(req.content)
    assert body == {"model": "judge-model", "messages": [{"role": "user", "content": "hi"}], "temperature": 0.0}
    rows = [json.loads(line) for line in (tmp_path / "remote_calls.jsonl").read_text().splitlines()]
    assert len(rows) == 1 and rows[0]["status"] == 200 and len(rows[0]["request_sha256"]) == 64


def test_remote_client_retries_transient(tmp_path):
    codes = iter([503, 429, 200])

    def handler(request):
        code = next(codes)
        return _ok("SCORE: 0") if code == 200 else httpx.Response(code)

    assert _client(handler, tmp_path).chat([{"role": "user", "content": "x"}]) == "SCORE: 0"
    assert len((tmp_path / "remote_calls.jsonl").read_text().splitlines()) == 3


def test_remote_client_fails_fast_on_client_error(tmp_path):
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(401, text="bad key")

    with pytest.raises(BackendError):
        _client(handler, tmp_path).chat([{"role": "user", "content": "x"}])
    assert len(calls) == 1


def test_remote_client_gives_up_after_three(tmp_path):
    def handler(request):
        raise httpx.ConnectError("refused")

    with pytest.raises(BackendError) as info:
        _client(handler, tmp_path).chat([{"role": "user", "content": "x"}])
    assert info.value.attempts == 3


def test_remote_judge_end_to_end(tmp_path):
    judge = LLMJudge(_client(lambda r: _ok("Step by step.\nSCORE: 0.5"), tmp_path))
    assert judge.judge("a", "b", "c").score == 0.5


def test_remote_key_from_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("MY_KEY", "secret")
    seen = []

    def handler(request):
        seen.append(request.headers.get("authorization"))
        return _ok("x")

    ChatCompletionsClient("https://h", "m", api_key_env="MY_KEY", transport=httpx.MockTransport(handler)).chat([])
    assert seen == ["Bearer secret"]
