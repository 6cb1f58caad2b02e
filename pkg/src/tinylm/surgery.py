"""Parameter inheritance from a larger trained parent: layer-skip importance
scans, layer selection, structural-unit scoring (weight norms, first-order
saliency, learned gates), child construction, and MHA -> grouped-KV
conversion by mean-pooling.

Structural units are whole attention heads and whole FFN hidden channels.
Head-level scoring and slicing require an MHA parent (kv_groups == n_heads)
so each head owns a full q/k/v/out block; convert a child to grouped KV
afterwards if wanted. All tie-breaks prefer the lower index.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .arch import ModelConfig, ParamStore, forward, param_shapes
from .tensor import Tape, Tensor, sigmoid, softmax_cross_entropy
from .trainer import batch_loss

CRITERIA = ("l1", "l2", "taylor", "learned")


class PlanError(ValueError):
    """An inheritance plan is inconsistent with the configs it bridges."""


# ---------------------------------------------------------------------------
# layer importance
# ---------------------------------------------------------------------------


@dataclass
class LayerImportance:
    baseline: float
    scores: dict[tuple[int, int], float]  # (window, start) -> metric when skipped
    depth: int

    def importance(self, window: int, start: int) -> float:
        return self.baseline - self.scores[(window, start)]

    def window_importances(self, window: int) -> list[float]:
        starts = sorted(s for (w, s) in self.scores if w == window)
        return [self.importance(window, s) for s in starts]

    def to_csv(self) -> str:
        lines = ["window,start,score,importance"]
        for (w, s), v in sorted(self.scores.items()):
            lines.append(f"{w},{s},{v!r},{self.baseline - v!r}")
        return "\n".join(lines) + "\n"


def layer_skip_eval(
    config: ModelConfig,
    params: ParamStore,
    eval_batches: list[np.ndarray],
    windows: tuple[int, ...] = (1, 2, 3),
) -> LayerImportance:
    """Metric (negative mean loss) of the model with each contiguous layer
    window bypassed, plus the no-skip baseline. Importance of a window is
    baseline minus its skipped score."""
    if not eval_batches:
        raise ValueError("layer_skip_eval needs a nonempty eval set")

    def metric(skip: frozenset[int]) -> float:
        losses = []
        for batch in eval_batches:
            logits = forward(config, params, batch[:, :-1], skip_layers=skip)
            b, t, v = logits.shape
            losses.append(
                float(
                    softmax_cross_entropy(
                        logits.reshape((b * t, v)), batch[:, 1:].reshape(-1)
                    ).data
                )
            )
        return -float(np.mean(losses))

    baseline = metric(frozenset())
    scores: dict[tuple[int, int], float] = {}
    for w in windows:
        for start in range(0, config.depth - w + 1):
            scores[(w, start)] = metric(frozenset(range(start, start + w)))
    return LayerImportance(baseline=baseline, scores=scores, depth=config.depth)


def select_layers(
    importance: LayerImportance,
    child_depth: int,
    keep_ends: tuple[int, int] = (2, 2),
) -> list[int]:
    """First ``f`` and last ``b`` parent layers always survive; the rest of
    the child slots go to the highest single-layer importances among the
    middle layers. Returns ascending parent layer indices."""
    f, b = keep_ends
    depth = importance.depth
    if child_depth > depth:
        raise PlanError(f"child depth {child_depth} exceeds parent depth {depth}")
    if f + b > child_depth:
        raise PlanError(f"keep_ends {keep_ends} exceed child depth {child_depth}")
    kept = set(range(f)) | set(range(depth - b, depth))
    middle = [i for i in range(depth) if i not in kept]
    ranked = sorted(middle, key=lambda i: (-importance.importance(1, i), i))
    for i in ranked[: child_depth - len(kept)]:
        kept.add(i)
    return sorted(kept)


# ---------------------------------------------------------------------------
# structural-unit scoring
# ---------------------------------------------------------------------------


@dataclass
class NeuronScores:
    criterion: str
    head_scores: list[np.ndarray]  # per layer, [n_heads]
    ffn_scores: list[np.ndarray]  # per layer, [ffn_hidden]

    def top_units(self, layer: int, n_heads: int, n_channels: int) -> tuple[list[int], list[int]]:
        """Indices of the best units in one layer, ascending; ties keep the
        lower index."""
        heads = np.argsort(-self.head_scores[layer], kind="stable")[:n_heads]
        chans = np.argsort(-self.ffn_scores[layer], kind="stable")[:n_channels]
        return sorted(int(i) for i in heads), sorted(int(i) for i in chans)

    def to_csv(self) -> str:
        lines = ["layer,unit_kind,unit,score"]
        for layer, scores in enumerate(self.head_scores):
            lines += [f"{layer},head,{u},{s!r}" for u, s in enumerate(scores)]
        for layer, scores in enumerate(self.ffn_scores):
            lines += [f"{layer},ffn,{u},{s!r}" for u, s in enumerate(scores)]
        return "\n".join(lines) + "\n"


def _require_mha(config: ModelConfig) -> None:
    if config.kv_groups != config.n_heads:
        raise PlanError(
            "head-level surgery needs an MHA parent (kv_groups == n_heads); "
            "convert to grouped KV after building the child"
        )


def _head_weight_slices(params: ParamStore, layer: int, head: int, head_dim: int):
    p = f"layers.{layer}."
    cols = slice(head * head_dim, (head + 1) * head_dim)
    return (
        params[p + "wq"].data[:, cols],
        params[p + "wk"].data[:, cols],
        params[p + "wv"].data[:, cols],
        params[p + "wo"].data[cols, :],
    )


def _ffn_weight_slices(params: ParamStore, layer: int, channel: int):
    p = f"layers.{layer}."
    return (
        params[p + "wgate"].data[:, channel],
        params[p + "wup"].data[:, channel],
        params[p + "wdown"].data[channel, :],
    )


def score_neurons(
    config: ModelConfig,
    params: ParamStore,
    data_batches: list[np.ndarray],
    criterion: str,
    mask_steps: int = 120,
    mask_seed: int = 0,
) -> NeuronScores:
    """Importance of every head and FFN channel under one criterion.

    l1 / l2 sum the unit's weight magnitudes; taylor accumulates
    |w * dL/dw| over the given batches; learned trains relaxed gates (via
    learn_masks with a half-size target) and reports their final openness.
    """
    if criterion not in CRITERIA:
        raise ValueError(f"unknown criterion {criterion!r}; choose from {CRITERIA}")
    _require_mha(config)
    hd = config.head_dim

    if criterion in ("l1", "l2"):
        head_scores, ffn_scores = [], []
        for layer in range(config.depth):
            hs = np.zeros(config.n_heads)
            for h in range(config.n_heads):
                parts = _head_weight_slices(params, layer, h, hd)
                if criterion == "l1":
                    hs[h] = sum(np.abs(w).sum() for w in parts)
                else:
                    hs[h] = math.sqrt(sum((w * w).sum() for w in parts))
            fs = np.zeros(config.ffn_hidden)
            for c in range(config.ffn_hidden):
                parts = _ffn_weight_slices(params, layer, c)
                if criterion == "l1":
                    fs[c] = sum(np.abs(w).sum() for w in parts)
                else:
                    fs[c] = math.sqrt(sum((w * w).sum() for w in parts))
            head_scores.append(hs)
            ffn_scores.append(fs)
        return NeuronScores(criterion, head_scores, ffn_scores)

    if criterion == "taylor":
        if not data_batches:
            raise ValueError("taylor criterion needs data batches")
        head_scores = [np.zeros(config.n_heads) for _ in range(config.depth)]
        ffn_scores = [np.zeros(config.ffn_hidden) for _ in range(config.depth)]
        params.set_requires_grad(True)
        try:
            for batch in data_batches:
                with Tape() as tape:
                    logits = forward(config, params, batch[:, :-1])
                    b, t, v = logits.shape
                    loss = softmax_cross_entropy(
                        logits.reshape((b * t, v)), batch[:, 1:].reshape(-1)
                    )
                grad_map = tape.gradients(loss)
                sal = {
                    name: np.abs(tensor.data * grad_map[tensor])
                    for name, tensor in params.tensors.items()
                    if tensor in grad_map
                }
                for layer in range(config.depth):
                    p = f"layers.{layer}."
                    for h in range(config.n_heads):
                        cols = slice(h * hd, (h + 1) * hd)
                        head_scores[layer][h] += (
                            sal[p + "wq"][:, cols].sum()
                            + sal[p + "wk"][:, cols].sum()
                            + sal[p + "wv"][:, cols].sum()
                            + sal[p + "wo"][cols, :].sum()
                        )
                    ffn_scores[layer] += (
                        sal[p + "wgate"].sum(axis=0)
                        + sal[p + "wup"].sum(axis=0)
                        + sal[p + "wdown"].sum(axis=1)
                    )
        finally:
            params.set_requires_grad(False)
        return NeuronScores(criterion, head_scores, ffn_scores)

    # learned: train gates toward a generic half-size target and report the
    # final gate openness (monotone in the logits used for hardening)
    masks = learn_masks(
        config,
        params,
        data_batches,
        child_heads=max(1, config.n_heads // 2),
        child_channels=max(1, config.ffn_hidden // 2),
        steps=mask_steps,
        seed=mask_seed,
    )
    head_scores = [1.0 / (1.0 + np.exp(-lg)) for lg in masks.head_logits]
    ffn_scores = [1.0 / (1.0 + np.exp(-lg)) for lg in masks.ffn_logits]
    return NeuronScores("learned", head_scores, ffn_scores)


# ---------------------------------------------------------------------------
# learned masks
# ---------------------------------------------------------------------------


@dataclass
class MaskParams:
    head_logits: list[np.ndarray]
    ffn_logits: list[np.ndarray]
    head_target: int
    ffn_target: int
    final_temperature: float

    def harden(self) -> tuple[list[list[int]], list[list[int]]]:
        """Exactly the target count of units per layer, by logit, ties to the
        lower index. Returns (head indices, channel indices) per layer."""
        heads, chans = [], []
        for lg in self.head_logits:
            order = np.argsort(-lg, kind="stable")[: self.head_target]
            heads.append(sorted(int(i) for i in order))
        for lg in self.ffn_logits:
            order = np.argsort(-lg, kind="stable")[: self.ffn_target]
            chans.append(sorted(int(i) for i in order))
        return heads, chans


def learn_masks(
    config: ModelConfig,
    params: ParamStore,
    data_batches: list[np.ndarray],
    child_heads: int,
    child_channels: int,
    steps: int = 100,
    lr: float = 0.1,
    temperature: tuple[float, float] = (2.0, 0.5),
    penalty: float = 1.0,
    seed: int = 0,
) -> MaskParams:
    """Optimize one relaxed binary gate per head / FFN channel.

    Gates are sigmoid(logit / tau) with tau decaying linearly; the objective
    is the task loss plus ``penalty`` times the squared gap between each
    layer's expected retained count and its target. Model weights stay
    frozen; only the gate logits move (plain Adam)."""
    if not data_batches:
        raise ValueError("learn_masks needs data batches")
    if child_heads > config.n_heads or child_channels > config.ffn_hidden:
        raise ValueError("child unit counts exceed the parent's")
    _require_mha(config)
    params.set_requires_grad(False)
    rng = np.random.default_rng(seed)
    # gates open at the start: the relaxed model begins at the dense model's
    # operating point and the count penalty prunes from there
    head_logits = [
        Tensor(2.0 + rng.normal(0.0, 0.01, size=config.n_heads), requires_grad=True)
        for _ in range(config.depth)
    ]
    ffn_logits = [
        Tensor(2.0 + rng.normal(0.0, 0.01, size=config.ffn_hidden), requires_grad=True)
        for _ in range(config.depth)
    ]
    all_logits = head_logits + ffn_logits
    m = [np.zeros(t.shape) for t in all_logits]
    v = [np.zeros(t.shape) for t in all_logits]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    tau0, tau1 = temperature
    for step in range(steps):
        tau = tau0 + (tau1 - tau0) * (step / max(1, steps - 1))
        batch = data_batches[step % len(data_batches)]
        with Tape() as tape:
            head_gates = [sigmoid(lg * (1.0 / tau)) for lg in head_logits]
            ffn_gates = [sigmoid(lg * (1.0 / tau)) for lg in ffn_logits]
            logits = forward(
                config,
                params,
                batch[:, :-1],
                head_gates=head_gates,
                ffn_gates=ffn_gates,
            )
            b, t, vv = logits.shape
            loss = softmax_cross_entropy(
                logits.reshape((b * t, vv)), batch[:, 1:].reshape(-1)
            )
            for g in head_gates:
                loss = loss + penalty * (g.sum() - float(child_heads)) ** 2
            for g in ffn_gates:
                loss = loss + penalty * (g.sum() - float(child_channels)) ** 2
        if not np.isfinite(loss.data):
            raise RuntimeError(f"mask optimization diverged at step {step}")
        grad_map = tape.gradients(loss)
        for i, lg in enumerate(all_logits):
            g = grad_map.get(lg)
            if g is None:
                continue
            m[i] = beta1 * m[i] + (1 - beta1) * g
            v[i] = beta2 * v[i] + (1 - beta2) * g * g
            m_hat = m[i] / (1 - beta1 ** (step + 1))
            v_hat = v[i] / (1 - beta2 ** (step + 1))
            lg.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return MaskParams(
        head_logits=[lg.data.copy() for lg in head_logits],
        ffn_logits=[lg.data.copy() for lg in ffn_logits],
        head_target=child_heads,
        ffn_target=child_channels,
        final_temperature=tau1,
    )


# ---------------------------------------------------------------------------
# inheritance plans and child construction
# ---------------------------------------------------------------------------


@dataclass
class InheritancePlan:
    kept_layers: list[int]
    head_indices: list[list[int]]  # per kept layer, ascending
    ffn_indices: list[list[int]]  # per kept layer, ascending
    channel_plan: list[int]  # residual-stream columns, shared by all layers
    vocab_map: list[int]  # child row -> parent row for embedding/head

    def validate(self, parent: ModelConfig, child: ModelConfig) -> None:
        if sorted(self.kept_layers) != self.kept_layers or len(set(self.kept_layers)) != len(
            self.kept_layers
        ):
            raise PlanError("kept_layers must be strictly increasing")
        if len(self.kept_layers) != child.depth:
            raise PlanError(
                f"plan keeps {len(self.kept_layers)} layers, child depth is {child.depth}"
            )
        if self.kept_layers and not 0 <= self.kept_layers[-1] < parent.depth:
            raise PlanError("kept layer index outside the parent")
        if parent.head_dim != child.head_dim:
            raise PlanError(
                f"head_dim mismatch: parent {parent.head_dim}, child {child.head_dim}"
            )
        if len(self.head_indices) != child.depth or len(self.ffn_indices) != child.depth:
            raise PlanError("per-layer unit lists must match child depth")
        for heads, chans in zip(self.head_indices, self.ffn_indices):
            if len(heads) != child.n_heads:
                raise PlanError(f"plan retains {len(heads)} heads, child has {child.n_heads}")
            if len(chans) != child.ffn_hidden:
                raise PlanError(
                    f"plan retains {len(chans)} FFN channels, child has {child.ffn_hidden}"
                )
            if heads and not (0 <= min(heads) and max(heads) < parent.n_heads):
                raise PlanError("head index outside the parent")
            if chans and not (0 <= min(chans) and max(chans) < parent.ffn_hidden):
                raise PlanError("FFN channel index outside the parent")
        if len(self.channel_plan) != child.width:
            raise PlanError(
                f"channel plan length {len(self.channel_plan)} != child width {child.width}"
            )
        if self.channel_plan and not (
            0 <= min(self.channel_plan) and max(self.channel_plan) < parent.width
        ):
            raise PlanError("channel index outside the parent width")
        if len(self.vocab_map) != child.vocab_size:
            raise PlanError(
                f"vocab map length {len(self.vocab_map)} != child vocab {child.vocab_size}"
            )
        if self.vocab_map and not (
            0 <= min(self.vocab_map) and max(self.vocab_map) < parent.vocab_size
        ):
            raise PlanError("vocab row outside the parent")

    def to_json(self) -> str:
        return json.dumps(
            {
                "kept_layers": self.kept_layers,
                "head_indices": self.head_indices,
                "ffn_indices": self.ffn_indices,
                "channel_plan": self.channel_plan,
                "vocab_map": self.vocab_map,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "InheritancePlan":
        d = json.loads(text)
        return cls(
            kept_layers=list(d["kept_layers"]),
            head_indices=[list(x) for x in d["head_indices"]],
            ffn_indices=[list(x) for x in d["ffn_indices"]],
            channel_plan=list(d["channel_plan"]),
            vocab_map=list(d["vocab_map"]),
        )


def identity_plan(config: ModelConfig) -> InheritancePlan:
    return InheritancePlan(
        kept_layers=list(range(config.depth)),
        head_indices=[list(range(config.n_heads)) for _ in range(config.depth)],
        ffn_indices=[list(range(config.ffn_hidden)) for _ in range(config.depth)],
        channel_plan=list(range(config.width)),
        vocab_map=list(range(config.vocab_size)),
    )


def _head_cols(heads: list[int], head_dim: int) -> np.ndarray:
    return np.concatenate([np.arange(h * head_dim, (h + 1) * head_dim) for h in heads])


def build_child(
    parent_config: ModelConfig,
    parent_params: ParamStore,
    plan: InheritancePlan,
    child_config: ModelConfig,
) -> ParamStore:
    """Slice the parent into a child ParamStore: kept layers in order, head
    blocks and FFN channels per layer, one shared residual-channel plan, and
    embedding/head rows from the vocab map."""
    parent_config.validate()
    child_config.validate()
    plan.validate(parent_config, child_config)
    hd = parent_config.head_dim
    full_heads = list(range(parent_config.n_heads))
    prunes_heads = any(h != full_heads for h in plan.head_indices)
    if prunes_heads:
        _require_mha(parent_config)
        if child_config.kv_groups != child_config.n_heads:
            raise PlanError(
                "a head-pruned child keeps one KV head per query head; "
                "apply convert_to_gqa afterwards for grouped KV"
            )
    elif child_config.kv_groups != parent_config.kv_groups:
        raise PlanError(
            f"child kv_groups {child_config.kv_groups} must match parent "
            f"{parent_config.kv_groups} when no heads are pruned"
        )
    rows = np.asarray(plan.vocab_map)
    cols = np.asarray(plan.channel_plan)
    tensors: dict[str, Tensor] = {
        "embed": Tensor(parent_params["embed"].data[np.ix_(rows, cols)]),
        "head": Tensor(parent_params["head"].data[np.ix_(cols, rows)]),
        "final_norm": Tensor(parent_params["final_norm"].data[cols]),
    }
    for new_i, old_i in enumerate(plan.kept_layers):
        po = f"layers.{old_i}."
        pn = f"layers.{new_i}."
        heads = plan.head_indices[new_i]
        chans = np.asarray(plan.ffn_indices[new_i])
        hcols = _head_cols(heads, hd)
        kvcols = hcols if prunes_heads else np.arange(parent_config.kv_groups * hd)
        tensors[pn + "attn_norm"] = Tensor(parent_params[po + "attn_norm"].data[cols])
        tensors[pn + "wq"] = Tensor(parent_params[po + "wq"].data[np.ix_(cols, hcols)])
        tensors[pn + "wk"] = Tensor(parent_params[po + "wk"].data[np.ix_(cols, kvcols)])
        tensors[pn + "wv"] = Tensor(parent_params[po + "wv"].data[np.ix_(cols, kvcols)])
        tensors[pn + "wo"] = Tensor(parent_params[po + "wo"].data[np.ix_(hcols, cols)])
        tensors[pn + "ffn_norm"] = Tensor(parent_params[po + "ffn_norm"].data[cols])
        tensors[pn + "wgate"] = Tensor(parent_params[po + "wgate"].data[np.ix_(cols, chans)])
        tensors[pn + "wup"] = Tensor(parent_params[po + "wup"].data[np.ix_(cols, chans)])
        tensors[pn + "wdown"] = Tensor(parent_params[po + "wdown"].data[np.ix_(chans, cols)])
    store = ParamStore(tensors)
    try:
        store.validate(child_config)
    except ValueError as err:
        raise PlanError(str(err)) from err
    return store


def channel_importance(config: ModelConfig, params: ParamStore) -> np.ndarray:
    """Aggregate L2 mass of each residual-stream channel across the embedding,
    head, and every layer's projections; used to pick a shared channel plan
    when the child is narrower."""
    sq = np.zeros(config.width)
    sq += (params["embed"].data ** 2).sum(axis=0)
    sq += (params["head"].data ** 2).sum(axis=1)
    for i in range(config.depth):
        p = f"layers.{i}."
        for name in ("wq", "wk", "wv", "wgate", "wup"):
            sq += (params[p + name].data ** 2).sum(axis=1)
        sq += (params[p + "wo"].data ** 2).sum(axis=0)
        sq += (params[p + "wdown"].data ** 2).sum(axis=0)
    return np.sqrt(sq)


def make_plan(
    parent_config: ModelConfig,
    parent_params: ParamStore,
    child_config: ModelConfig,
    data_batches: list[np.ndarray],
    criterion: str = "taylor",
    keep_ends: tuple[int, int] = (2, 2),
    vocab_map: list[int] | None = None,
    mask_steps: int = 120,
    seed: int = 0,
) -> InheritancePlan:
    """End-to-end plan generation: skip-scan the parent for layer selection,
    score units with the chosen criterion, rank residual channels by
    aggregate L2, and map vocab rows (identity when sizes match)."""
    if vocab_map is None:
        if child_config.vocab_size != parent_config.vocab_size:
            raise PlanError("vocab sizes differ; pass an explicit vocab_map")
        vocab_map = list(range(parent_config.vocab_size))
    importance = layer_skip_eval(parent_config, parent_params, data_batches, windows=(1,))
    kept_layers = select_layers(importance, child_config.depth, keep_ends)
    if criterion == "learned":
        masks = learn_masks(
            parent_config,
            parent_params,
            data_batches,
            child_heads=child_config.n_heads,
            child_channels=child_config.ffn_hidden,
            steps=mask_steps,
            seed=seed,
        )
        all_heads, all_chans = masks.harden()
        head_indices = [all_heads[i] for i in kept_layers]
        ffn_indices = [all_chans[i] for i in kept_layers]
    else:
        scores = score_neurons(parent_config, parent_params, data_batches, criterion)
        head_indices, ffn_indices = [], []
        for i in kept_layers:
            heads, chans = scores.top_units(i, child_config.n_heads, child_config.ffn_hidden)
            head_indices.append(heads)
            ffn_indices.append(chans)
    if child_config.width == parent_config.width:
        channel_plan = list(range(parent_config.width))
    else:
        rank = channel_importance(parent_config, parent_params)
        order = np.argsort(-rank, kind="stable")[: child_config.width]
        channel_plan = sorted(int(i) for i in order)
    return InheritancePlan(
        kept_layers=kept_layers,
        head_indices=head_indices,
        ffn_indices=ffn_indices,
        channel_plan=channel_plan,
        vocab_map=list(vocab_map),
    )


# ---------------------------------------------------------------------------
# grouped-KV conversion
# ---------------------------------------------------------------------------


def convert_to_gqa(
    config: ModelConfig, params: ParamStore, groups: int
) -> tuple[ModelConfig, ParamStore]:
    """Mean-pool each group's KV head projections into one shared head.
    Query and output projections are untouched."""
    if groups < 1 or config.n_heads % groups != 0:
        raise ValueError(f"n_heads {config.n_heads} not divisible by groups {groups}")
    if config.kv_groups != config.n_heads:
        raise ValueError("convert_to_gqa expects an MHA model (kv_groups == n_heads)")
    hd = config.head_dim
    group_size = config.n_heads // groups
    new_config = ModelConfig(
        vocab_size=config.vocab_size,
        width=config.width,
        depth=config.depth,
        n_heads=config.n_heads,
        kv_groups=groups,
        ffn_hidden=config.ffn_hidden,
    )
    tensors: dict[str, Tensor] = {}
    for name, t in params.tensors.items():
        kind = name.split(".")[-1]
        if kind in ("wk", "wv"):
            d = t.shape[0]
            blocks = t.data.reshape(d, config.n_heads, hd)
            pooled = blocks.reshape(d, groups, group_size, hd).mean(axis=2)
            tensors[name] = Tensor(pooled.reshape(d, groups * hd))
        else:
            tensors[name] = Tensor(t.data.copy())
    store = ParamStore(tensors)
    store.validate(new_config)
    return new_config, store
