"""Perplexity and likelihood-ranked multiple-choice (cloze) scoring.

Cloze items mirror how multiple-choice benchmarks are scored: each candidate
continuation gets the model's mean per-token log-likelihood after the shared
context, and the highest-scoring candidate wins (ties to the lower index).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .arch import ModelConfig, ParamStore, forward
from .tensor import softmax_cross_entropy


@dataclass
class ClozeItem:
    context: list[int]
    candidates: list[list[int]]
    gold: int

    def validate(self) -> None:
        if len(self.context) == 0:
            raise ValueError("cloze item needs a nonempty context")
        if len(self.candidates) < 2:
            raise ValueError("cloze item needs at least 2 candidates")
        if not 0 <= self.gold < len(self.candidates):
            raise ValueError(f"gold index {self.gold} out of range")
        if any(len(c) == 0 for c in self.candidates):
            raise ValueError("candidates must be nonempty token lists")


@dataclass
class EvalReport:
    metric: str
    value: float
    item_count: int
    rows: list[dict] = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(
            {
                "metric": self.metric,
                "value": self.value,
                "item_count": self.item_count,
            },
            indent=2,
        )

    def to_csv(self) -> str:
        if not self.rows:
            return "index\n"
        keys = list(self.rows[0])
        lines = [",".join(keys)]
        for row in self.rows:
            lines.append(",".join(repr(row[k]) if isinstance(row[k], float) else str(row[k]) for k in keys))
        return "\n".join(lines) + "\n"


def perplexity(
    config: ModelConfig, params: ParamStore, batches: list[np.ndarray]
) -> EvalReport:
    """exp of the mean token-level cross entropy over all batches."""
    if not batches:
        raise ValueError("perplexity needs a nonempty batch list")
    total_loss = 0.0
    total_tokens = 0
    rows = []
    for i, batch in enumerate(batches):
        logits = forward(config, params, batch[:, :-1])
        b, t, v = logits.shape
        loss = float(
            softmax_cross_entropy(logits.reshape((b * t, v)), batch[:, 1:].reshape(-1)).data
        )
        total_loss += loss * b * t
        total_tokens += b * t
        rows.append({"index": i, "loss": loss})
    mean = total_loss / total_tokens
    return EvalReport("perplexity", float(np.exp(mean)), len(batches), rows)


def candidate_loglik(
    config: ModelConfig, params: ParamStore, context: list[int], candidate: list[int]
) -> float:
    """Mean per-token log-likelihood of ``candidate`` after ``context``."""
    seq = np.array(context + candidate, dtype=np.intp)[None, :]
    logits = forward(config, params, seq[:, :-1]).data[0]  # [T-1, V]
    z = logits - logits.max(axis=-1, keepdims=True)
    logprobs = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    start = len(context) - 1  # logits at position i predict token i+1
    lls = [logprobs[start + j, candidate[j]] for j in range(len(candidate))]
    return float(np.mean(lls))


def cloze_accuracy(
    config: ModelConfig, params: ParamStore, items: list[ClozeItem]
) -> EvalReport:
    if not items:
        raise ValueError("cloze_accuracy needs a nonempty item list")
    correct = 0
    rows = []
    for i, item in enumerate(items):
        item.validate()
        scores = [
            candidate_loglik(config, params, item.context, cand)
            for cand in item.candidates
        ]
        choice = int(np.argmax(scores))  # argmax keeps the lower index on ties
        hit = choice == item.gold
        correct += hit
        rows.append({"index": i, "choice": choice, "gold": item.gold, "correct": int(hit)})
    return EvalReport("cloze_accuracy", correct / len(items), len(items), rows)


def load_cloze_items(path) -> list[ClozeItem]:
    items = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            item = ClozeItem(
                context=list(d["context"]),
                candidates=[list(c) for c in d["candidates"]],
                gold=int(d["gold"]),
            )
            item.validate()
            items.append(item)
    return items


def save_cloze_items(items: list[dict] | list[ClozeItem], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            if isinstance(item, ClozeItem):
                d = {"context": item.context, "candidates": item.candidates, "gold": item.gold}
            else:
                d = item
            fh.write(json.dumps(d) + "\n")
