"""Fused LLM+GNN binary classifier.

The frozen language model's hidden state at the answer position is
concatenated with the graph embedding along the last dimension; a linear
projection onto the yes/no label pair plus LogSoftmax yields the
vulnerable/safe prediction. Code that the mini-C analyzer cannot parse falls
back to a zero graph embedding and the prediction is flagged.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .corpus import CodeSample
from .dfa import FeatureSpec, build_node_features, reaching_definitions
from .dialogue import render_prompt
from .gnn import Ggnn, GgnnConfig
from .lm import ByteTokenizer, LmModel, TransformerConfig
from .minic import MiniCError, parse_mini_c

__all__ = [
    "Prediction",
    "FusedClassifier",
    "fuse",
    "label_nll",
    "fused_input_width",
    "fused_layer_count",
    "InferenceBundle",
    "graph_embedding",
    "predict",
    "write_predictions_jsonl",
]

YES_INDEX = 0  # vulnerable
NO_INDEX = 1  # safe


@dataclass
class Prediction:
    label: bool  # True = vulnerable
    score: float  # probability of vulnerable, in (0, 1)
    log_probs: tuple[float, float]  # (yes, no)
    flagged: bool = False


def fused_input_width(lm_config: TransformerConfig, gnn_config: GgnnConfig | None) -> int:
    return lm_config.d_model + (gnn_config.state_dim if gnn_config else 0)


def fused_layer_count(lm_config: TransformerConfig, gnn_config: GgnnConfig | None) -> int:
    return lm_config.n_layers + (gnn_config.layer_count if gnn_config else 0)


def fuse(
    lm_hidden: Tensor,
    gnn_embedding: Tensor | None,
    valid_len: int | None = None,
    broadcast: bool = False,
) -> Tensor:
    """Concatenate the final non-pad hidden state with the graph embedding.

    ``valid_len`` is the number of non-pad positions (defaults to all).
    With ``broadcast`` the graph embedding is instead appended to every
    position, giving [T x (d + g)].
    """
    t = lm_hidden.shape[0]
    if t < 1:
        raise ag.ShapeError("fuse on empty hidden sequence")
    if valid_len is None:
        valid_len = t
    if not 1 <= valid_len <= t:
        raise ag.ShapeError(f"valid_len {valid_len} outside 1-{t}")
    if broadcast:
        if gnn_embedding is None:
            return lm_hidden
        ones = Tensor(np.ones((t, 1), dtype=lm_hidden.dtype))
        tiled = ag.matmul(ones, ag.expand_row(gnn_embedding))
        return ag.concat_last_dim([lm_hidden, tiled])
    row = ag.select_row(lm_hidden, valid_len - 1)
    if gnn_embedding is None:
        return row
    return ag.concat_last_dim([row, gnn_embedding])


class FusedClassifier:
    """Linear projection from the fused vector onto (yes, no) label logits."""

    def __init__(self, in_dim: int, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.in_dim = in_dim
        self.w = Tensor(rng.normal(0.0, in_dim**-0.5, size=(2, in_dim)).astype(dtype), requires_grad=True)
        self.b = Tensor(np.zeros(2, dtype=dtype), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return {"clf.w": self.w, "clf.b": self.b}

    def logits(self, fused: Tensor) -> Tensor:
        if fused.shape[-1] != self.in_dim:
            raise ag.ShapeError(f"classifier expects width {self.in_dim}, got {fused.shape[-1]}")
        out = ag.matmul(ag.expand_row(fused), ag.transpose(self.w))
        return ag.add(ag.select_row(out, 0), self.b)

    def classify(self, fused: Tensor, flagged: bool = False) -> Prediction:
        lp = ag.log_softmax(self.logits(fused)).data
        label = bool(np.argmax(lp) == YES_INDEX)
        return Prediction(
            label=label,
            score=float(np.exp(lp[YES_INDEX])),
            log_probs=(float(lp[YES_INDEX]), float(lp[NO_INDEX])),
            flagged=flagged,
        )


def label_nll(logits: Tensor, label: bool) -> Tensor:
    """Negative log-likelihood of the true label under LogSoftmax."""
    logp = ag.log_softmax(logits)
    idx = YES_INDEX if label else NO_INDEX
    return ag.scale(ag.sum_all(ag.slice_last_dim(logp, idx, idx + 1)), -1.0)


@dataclass
class InferenceBundle:
    lm: LmModel
    tokenizer: ByteTokenizer
    classifier: FusedClassifier
    gnn: Ggnn | None = None
    feature_spec: FeatureSpec | None = None

    @property
    def context_window(self) -> int:
        return self.lm.config.context_window


def graph_embedding(code: str, gnn: Ggnn, spec: FeatureSpec | None = None) -> tuple[Tensor, bool]:
    """GNN embedding for the code's CFG; zero vector + flag on parse failure."""
    spec = spec or FeatureSpec()
    try:
        cfg = parse_mini_c(code)
    except MiniCError:
        zero = np.zeros(gnn.config.state_dim, dtype=np.float32)
        return Tensor(zero), True
    reach = reaching_definitions(cfg)
    feats = build_node_features(cfg, reach, width=gnn.config.in_dim, spec=spec)
    return gnn.forward(cfg, feats), False


def predict(sample: CodeSample, bundle: InferenceBundle) -> Prediction:
    """Render the round-1 prompt, read out the frozen LM, fuse, classify."""
    ids = render_prompt(sample.code, bundle.tokenizer, bundle.context_window)
    out = bundle.lm.forward(ids)
    hidden_row = Tensor(out.hidden.data[-1].copy())
    if bundle.gnn is None:
        fused = hidden_row
        flagged = False
    else:
        emb, flagged = graph_embedding(sample.code, bundle.gnn, bundle.feature_spec)
        fused = ag.concat_last_dim([hidden_row, Tensor(emb.data.copy())])
    return bundle.classifier.classify(fused, flagged=flagged)


def write_predictions_jsonl(rows: list[tuple[str, Prediction]], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for sample_id, pred in rows:
            fh.write(
                json.dumps(
                    {
                        "sample_id": sample_id,
                        "label": pred.label,
                        "score": pred.score,
                        "flagged": pred.flagged,
                    }
                )
                + "\n"
            )
