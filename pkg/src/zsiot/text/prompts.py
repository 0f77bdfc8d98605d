"""Hard-prompt (class description) files and LLM-backed generation."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Protocol, Sequence

import yaml

from ..errors import ConfigError

logger = logging.getLogger(__name__)

QUERY_TEMPLATE = "What are the important attributes and features to distinguish {c} from all the other classes?"
CLASS_LIST_PREAMBLE = "Here is a list of classes for a sensing task: {classes}."
FIXED_TEMPLATE = "The human action of {c}"


@dataclass
class HardPromptSet:
    descriptions: dict[str, str]
    provenance: str = "file"  # or "llm_generated"

    def __getitem__(self, name: str) -> str:
        try:
            text = self.descriptions[name]
        except KeyError:
            raise ConfigError(f"no hard prompt for class {name!r}") from None
        if not text or not text.strip():
            raise ConfigError(f"empty hard prompt for class {name!r}")
        return text

    def check(self, class_list: Sequence[str]) -> None:
        for c in class_list:
            self[c]

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            yaml.safe_dump(dict(self.descriptions), f, sort_keys=False, allow_unicode=True, width=1000)

    @classmethod
    def load(cls, path: str | Path) -> "HardPromptSet":
        with open(path) as f:
            data = yaml.safe_load(f) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"prompt file {path} must map class names to descriptions")
        return cls({str(k): str(v) for k, v in data.items()}, "file")


def default_prompts(dataset: str) -> HardPromptSet:
    """Descriptions shipped with the package for the supported datasets."""
    if dataset.startswith("synthetic"):
        from ..data.synthetic import synthetic_descriptions

        return HardPromptSet(synthetic_descriptions(), "file")
    key = "mmfi" if dataset.startswith("mmfi") else dataset
    try:
        text = resources.files("zsiot.text").joinpath(f"prompts/{key}.yaml").read_text()
    except FileNotFoundError:
        raise ConfigError(f"no shipped prompts for dataset {dataset!r}") from None
    return HardPromptSet({str(k): str(v) for k, v in yaml.safe_load(text).items()}, "file")


class LLMClient(Protocol):
    def complete(self, prompt: str) -> str: ...


class HTTPChatClient:
    """Minimal chat-completions client (OpenAI-compatible request shape).

    The bearer token is read from the environment variable named by ``token_env``.
    """

    def __init__(self, endpoint: str | None = None, model: str = "gpt-3.5-turbo",
                 token_env: str = "ZSIOT_LLM_API_KEY", timeout: float = 60.0):
        self.endpoint = endpoint or os.environ.get("ZSIOT_LLM_ENDPOINT")
        self.model = model
        self.token_env = token_env
        self.timeout = timeout

    def complete(self, prompt: str) -> str:
        import requests

        if not self.endpoint:
            raise ConfigError("no LLM endpoint configured (set ZSIOT_LLM_ENDPOINT)")
        token = os.environ.get(self.token_env)
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        r = requests.post(self.endpoint, timeout=self.timeout, headers=headers, json={
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
        })
        r.raise_for_status()
        return r.json()["choices"][0]["message"]["content"].strip()


def build_query(class_name: str, class_list: Sequence[str]) -> str:
    return CLASS_LIST_PREAMBLE.format(classes=", ".join(class_list)) + " " + QUERY_TEMPLATE.format(c=class_name)


def generate_hard_prompts(class_list: Sequence[str], llm_client: LLMClient | None = None,
                          prompt_file: str | Path | None = None, refresh: bool = False) -> HardPromptSet:
    """One description per class, asking the LLM only for classes missing from the file.

    Entries already in ``prompt_file`` win unless ``refresh`` is set, so manual
    edits survive regeneration. New answers are written back to the file.
    """
    existing: dict[str, str] = {}
    path = Path(prompt_file) if prompt_file else None
    if path is not None and path.exists():
        existing = HardPromptSet.load(path).descriptions

    missing = [c for c in class_list if refresh or not existing.get(c, "").strip()]
    generated: dict[str, str] = {}
    if missing and llm_client is not None:
        try:
            for c in missing:
                generated[c] = llm_client.complete(build_query(c, class_list))
        except Exception as exc:  # provider failure: fall back to the file
            logger.warning("LLM provider failed (%s); falling back to prompt file", exc)
            generated = {}

    merged = {c: generated.get(c) or existing.get(c, "") for c in class_list}
    absent = [c for c, v in merged.items() if not v.strip()]
    if absent:
        where = str(path) if path else "no prompt file given"
        raise ConfigError(f"no description for classes {absent} ({where})")

    prompts = HardPromptSet(merged, "llm_generated" if generated else "file")
    if generated and path is not None:
        prompts.save(path)
    return prompts
