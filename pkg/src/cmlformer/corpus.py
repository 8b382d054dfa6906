"""Code-mixed corpus records, annotation helpers and the translation client."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

from .tensor import IGNORE_INDEX
from .tokenizer import Encoding, pre_tokenize

log = logging.getLogger(__name__)

BASE, MIX = 0, 1


class RecordError(ValueError):
    """A corpus record violates its invariants."""


@dataclass(frozen=True)
class CmiConfig:
    w_n: float = 0.5
    w_p: float = 0.5

    def __post_init__(self):
        if self.w_n < 0 or self.w_p < 0 or self.w_n + self.w_p <= 0:
            raise ValueError("CMI weights must be non-negative with a positive sum")


def derive_switching_points(labels: Sequence[int]) -> list[int]:
    """Mark 1 wherever a word's language differs from the previous word's."""
    if len(labels) == 0:
        raise ValueError("labels must be non-empty")
    return [0] + [int(labels[i] != labels[i - 1]) for i in range(1, len(labels))]


def compute_cmi(labels: Sequence[int], switching_points: Sequence[int], cfg: CmiConfig = CmiConfig()) -> float:
    n = len(labels)
    if n == 0:
        raise ValueError("CMI undefined for an empty sentence")
    if len(switching_points) != n:
        raise ValueError("labels and switching points differ in length")
    n_base = sum(1 for l in labels if l == BASE)
    p = sum(switching_points)
    return (cfg.w_n * (n - n_base) + cfg.w_p * p) / n


def align_word_labels(word_labels: Sequence[int], encoding: Encoding, ignore_value: int = IGNORE_INDEX) -> list[int]:
    """Put each word's label on its first subword and ``ignore_value`` elsewhere."""
    if encoding.num_words != len(word_labels):
        raise ValueError(f"encoding covers {encoding.num_words} words but {len(word_labels)} labels were given")
    out = []
    prev = None
    for w in encoding.word_ids:
        if w is None or w == prev:
            out.append(ignore_value)
        else:
            out.append(int(word_labels[w]))
        if w is not None:
            prev = w
    return out


@dataclass(frozen=True)
class CorpusRecord:
    cm_text: str
    base_text: str
    mix_text: str
    labels: tuple[int, ...]
    switching_points: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(int(x) for x in self.labels))
        object.__setattr__(self, "switching_points", tuple(int(x) for x in self.switching_points))
        self.validate()

    @property
    def words(self) -> list[str]:
        return pre_tokenize(self.cm_text)

    def validate(self) -> None:
        n = len(self.words)
        if n == 0:
            raise RecordError("hinglish text is empty")
        if not self.base_text.strip() or not self.mix_text.strip():
            raise RecordError("missing parallel translation")
        if len(self.labels) != n:
            raise RecordError(f"{len(self.labels)} labels for {n} words")
        if len(self.switching_points) != n:
            raise RecordError(f"{len(self.switching_points)} switching points for {n} words")
        if any(l not in (0, 1) for l in self.labels) or any(t not in (0, 1) for t in self.switching_points):
            raise RecordError("labels and switching points must be 0/1")
        if self.switching_points[0] != 0:
            raise RecordError("switching_points[0] must be 0")
        if list(self.switching_points) != derive_switching_points(self.labels):
            raise RecordError("switching points disagree with labels")

    def cmi(self, cfg: CmiConfig = CmiConfig()) -> float:
        return compute_cmi(self.labels, self.switching_points, cfg)

    def to_json(self) -> dict:
        return {
            "hinglish": self.cm_text,
            "english": self.mix_text,
            "hindi_roman": self.base_text,
            "labels": list(self.labels),
            "switching_points": list(self.switching_points),
        }

    @classmethod
    def from_json(cls, obj: dict, derive_missing: bool = False) -> "CorpusRecord":
        for key in ("hinglish", "english", "hindi_roman", "labels"):
            if key not in obj:
                raise RecordError(f"missing field {key!r}")
        sp = obj.get("switching_points")
        if sp is None:
            if not derive_missing:
                raise RecordError("missing field 'switching_points'")
            sp = derive_switching_points(obj["labels"]) if obj["labels"] else []
        return cls(obj["hinglish"], obj["hindi_roman"], obj["english"], obj["labels"], sp)


def load_jsonl(path, derive_missing: bool = False) -> list[CorpusRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(CorpusRecord.from_json(json.loads(line), derive_missing))
            except (json.JSONDecodeError, RecordError, TypeError) as exc:
                raise RecordError(f"{path}:{lineno}: {exc}") from exc
    return records


def save_jsonl(records: Iterable[CorpusRecord], path, cmi: CmiConfig | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            obj = rec.to_json()
            if cmi is not None:
                obj["cmi"] = rec.cmi(cmi)
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


@dataclass(frozen=True)
class LabeledText:
    """A downstream classification example."""
    text: str
    label: int


def load_labeled_jsonl(path) -> list[LabeledText]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                label = int(obj["label"])
                if label not in (0, 1):
                    raise ValueError(f"label must be 0 or 1, got {label}")
                out.append(LabeledText(str(obj["text"]), label))
            except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
                raise RecordError(f"{path}:{lineno}: {exc}") from exc
    return out


# --------------------------------------------------------------------------
# translation augmentation
# --------------------------------------------------------------------------

PROMPT_TEMPLATE = """\
Task: Translate the given Hinglish text into both formal English and standardized Hindi (written in Roman script).

Input Hinglish: "{hinglish_text}"

Requirements:

1. English translation should be grammatically correct and natural.
2. Hindi translation must use ONLY Roman script (Latin alphabet), not Devanagari.
3. Maintain the original meaning and tone in both translations.
4. Use standard transliteration conventions for Hindi.
5. Preserve context from the original text.

Important:

- DO NOT include any explanations, notes, or additional text.
- Respond ONLY with the exact JSON format shown below.
- Both translations should be complete sentences with proper punctuation.
- If the input text is not in Hinglish, English, or Hindi, return "NULL"
- If the input is Hindi, return the Hindi as is in the "hindi_roman" field.
- If the input is English, return the English as is in the "english" field.

Return this exact JSON structure:

{
  "english": "Your English translation here",
  "hindi_roman": "Your Hindi translation in Roman script here"
}

Examples:

Input: "Main kal movie dekhne jaa raha hoon"
Output: {"english": "I am going to watch a movie tomorrow", "hindi_roman": "Main kal film dekhne ja raha hoon"}

Input: "Office ke baad hum coffee shop par milenge"
Output: {"english": "We will meet at the coffee shop after office", "hindi_roman": "Karyalay ke baad hum coffee shop par milenge"}
"""

DEFAULT_TEMPERATURE = 0.7
DEFAULT_RETRIES = 3
DEFAULT_RETRY_DELAY = 2.0


def build_translation_prompt(hinglish_text: str) -> str:
    return PROMPT_TEMPLATE.replace("{hinglish_text}", hinglish_text)


@dataclass(frozen=True)
class AugmentationResponse:
    english: str
    hindi_roman: str


class ResponseRejected(ValueError):
    """The model answered, but the answer is unusable."""


class NullResponse(ResponseRejected):
    """The model declined with ``"NULL"``."""


def parse_translation_response(body: str) -> AugmentationResponse:
    """Strictly parse ``{"english": ..., "hindi_roman": ...}``.

    Raises :class:`NullResponse` for a ``NULL`` answer and
    :class:`ResponseRejected` for anything else that is not exactly that
    JSON object with two non-empty string fields.
    """
    text = body.strip()
    if text in ("NULL", '"NULL"'):
        raise NullResponse("model returned NULL")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ResponseRejected(f"not valid JSON: {exc}") from exc
    if obj == "NULL":
        raise NullResponse("model returned NULL")
    if not isinstance(obj, dict):
        raise ResponseRejected("response is not a JSON object")
    fields = {}
    for key in ("english", "hindi_roman"):
        val = obj.get(key)
        if not isinstance(val, str) or not val.strip():
            raise ResponseRejected(f"missing or empty field {key!r}")
        if val.strip() == "NULL":
            raise NullResponse(f"field {key!r} is NULL")
        fields[key] = val
    return AugmentationResponse(**fields)


class Transport(Protocol):
    def __call__(self, prompt: str, temperature: float) -> str: ...


class MockTransport:
    """Offline transport: replays ``responses`` in order, or echoes the input.

    A response that is an exception instance is raised instead of returned.
    """

    def __init__(self, responses: Sequence | None = None):
        self.responses = list(responses) if responses is not None else None
        self.calls: list[tuple[str, float]] = []

    def __call__(self, prompt: str, temperature: float) -> str:
        self.calls.append((prompt, temperature))
        if self.responses is None:
            text = prompt.split('Input Hinglish: "', 1)[1].split('"\n', 1)[0]
            return json.dumps({"english": text, "hindi_roman": text}, ensure_ascii=False)
        item = self.responses.pop(0) if len(self.responses) > 1 else self.responses[0]
        if isinstance(item, BaseException):
            raise item
        return item


class HttpTransport:
    """POSTs ``{"prompt", "temperature"}`` as JSON and returns the body text."""

    def __init__(self, endpoint: str, timeout: float = 60.0):
        self.endpoint = endpoint
        self.timeout = timeout

    def __call__(self, prompt: str, temperature: float) -> str:
        import urllib.request

        data = json.dumps({"prompt": prompt, "temperature": temperature}).encode("utf-8")
        req = urllib.request.Request(self.endpoint, data=data, headers={"Content-Type": "application/json"})
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return resp.read().decode("utf-8")


def request_translation(text: str, client: Transport, retries: int = DEFAULT_RETRIES,
                        delay: float = DEFAULT_RETRY_DELAY, temperature: float = DEFAULT_TEMPERATURE,
                        sleep: Callable[[float], None] = time.sleep) -> AugmentationResponse | None:
    """Ask ``client`` for translations of ``text``; ``None`` if it never succeeds."""
    prompt = build_translation_prompt(text)
    for attempt in range(1, retries + 1):
        try:
            return parse_translation_response(client(prompt, temperature))
        except NullResponse as exc:
            log.info("skipping %r: %s", text, exc)
            return None
        except Exception as exc:  # transport failures and malformed bodies are retried
            log.warning("attempt %d/%d failed for %r: %s", attempt, retries, text, exc)
            if attempt < retries:
                sleep(delay)
    log.warning("giving up on %r after %d attempts", text, retries)
    return None


def augment(rows: Iterable[dict], client: Transport, retries: int = DEFAULT_RETRIES,
            delay: float = DEFAULT_RETRY_DELAY, temperature: float = DEFAULT_TEMPERATURE,
            sleep: Callable[[float], None] = time.sleep) -> list[dict]:
    """Attach ``english``/``hindi_roman`` to each row with a ``hinglish`` field.

    Rows whose translation cannot be obtained are dropped.
    """
    out = []
    for row in rows:
        resp = request_translation(row["hinglish"], client, retries, delay, temperature, sleep)
        if resp is None:
            continue
        out.append({**row, "english": resp.english, "hindi_roman": resp.hindi_roman})
    return out
