from coa.backends.base import (
    Captioner,
    ChatLLM,
    DifferentiableImageEncoder,
    ImageEncoder,
    Judge,
    JudgeVerdict,
    ModelSet,
    RetryPolicy,
    TextEncoder,
    TextToImage,
    Victim,
    call_with_retry,
)
from coa.backends.judging import LLMJudge, parse_verdict
from coa.backends.toy import (
    ToyCodebookCaptioner,
    ToyHashTextEncoder,
    ToyKeywordLLM,
    ToyLinearImageEncoder,
    ToyRuleJudgeLLM,
    ToyTanhImageEncoder,
    ToyTextToImage,
    ToyVictim,
    toy_rule_judge,
)

__all__ = [
    "Captioner",
    "ChatLLM",
    "DifferentiableImageEncoder",
    "ImageEncoder",
    "Judge",
    "JudgeVerdict",
    "LLMJudge",
    "ModelSet",
    "RetryPolicy",
    "TextEncoder",
    "TextToImage",
    "ToyCodebookCaptioner",
    "ToyHashTextEncoder",
    "ToyKeywordLLM",
    "ToyLinearImageEncoder",
    "ToyRuleJudgeLLM",
    "ToyTanhImageEncoder",
    "ToyTextToImage",
    "ToyVictim",
    "Victim",
    "call_with_retry",
    "parse_verdict",
    "toy_rule_judge",
]
