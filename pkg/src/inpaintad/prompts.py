"""Per-category hierarchical text prompts: coarse whole-object templates
plus fine-grained detail descriptions, sampled during fine-tuning and
averaged into one condition embedding at inference."""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .errors import ContractError, ParameterError
from .ports import TextEncoder

_TEMPLATE = "A perfect {}."


def coarse_template(category: str) -> str:
    """The 'A perfect <category>.' template with underscores humanized."""
    return _TEMPLATE.format(category.replace("_", " "))


@dataclass
class PromptSet:
    """Deduplicated coarse + fine prompts for one category."""

    category: str
    coarse: list[str] = field(default_factory=list)
    fine: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.category:
            raise ParameterError("category must be a non-empty string")
        template = coarse_template(self.category)
        if template not in self.coarse:
            self.coarse = [template] + list(self.coarse)
        for p in list(self.coarse) + list(self.fine):
            if not isinstance(p, str) or not p.strip():
                raise ParameterError(f"empty prompt in category {self.category!r}")

    @property
    def all_prompts(self) -> list[str]:
        seen: dict[str, None] = {}
        for p in list(self.coarse) + list(self.fine):
            seen.setdefault(p)
        return list(seen)


def default_library_path() -> Path:
    return Path(str(resources.files("inpaintad").joinpath("resources/prompt_library.yaml")))


def load_prompt_library(path=None) -> dict[str, dict]:
    """Parse the prompt library file: one record per category with
    `coarse:` and `fine:` lists."""
    p = Path(path) if path is not None else default_library_path()
    with open(p, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ParameterError(f"prompt library {p} must map category -> record")
    return raw


def prompts_for_category(category: str, library: dict[str, dict] | None = None) -> PromptSet:
    """Look a category up in the library; unknown categories fall back to
    the template-only coarse set."""
    if not category:
        raise ParameterError("category must be a non-empty string")
    library = library if library is not None else load_prompt_library()
    record = library.get(category)
    if record is None:
        return PromptSet(category=category, coarse=[coarse_template(category)], fine=[])
    return PromptSet(
        category=category,
        coarse=[str(s) for s in record.get("coarse", [])],
        fine=[str(s) for s in record.get("fine", [])],
    )


def sample_training_prompt(ps: PromptSet, rng: np.random.Generator) -> str:
    """Uniform draw over the combined prompt set."""
    prompts = ps.all_prompts
    if not prompts:
        raise ContractError(f"category {ps.category!r} has an empty prompt set")
    return prompts[int(rng.integers(len(prompts)))]


def aggregate_prompt_embedding(ps: PromptSet, text: TextEncoder) -> np.ndarray:
    """Elementwise mean of the token-sequence embeddings of every prompt.

    Averaging is per token position, so the result keeps the denoiser's
    expected condition shape.
    """
    prompts = ps.all_prompts
    if not prompts:
        raise ContractError(f"category {ps.category!r} has an empty prompt set")
    # canonical order keeps the mean bit-identical under prompt reordering
    stack = np.stack([text.embed(p) for p in sorted(prompts)], axis=0)
    return stack.mean(axis=0)
