"""Byte-level tokenizer and a small decoder-only transformer with LoRA.

The base weights are frozen; low-rank adapters on the attention query/value
projections carry all of the fine-tuning signal. The multitask loss averages
per-task mean-token negative log-likelihood across task groups.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor

__all__ = [
    "ByteTokenizer",
    "TransformerConfig",
    "LoraConfig",
    "LoraAdapter",
    "make_adapter",
    "lora_forward",
    "LmOutput",
    "LmModel",
    "multitask_loss",
    "generate_greedy",
]


class ByteTokenizer:
    """256 byte tokens plus reserved specials.

    Byte encoding never produces a special id, so encode/decode round-trips
    any UTF-8 text exactly.
    """

    PAD = 256
    BOS = 257
    EOS = 258
    SYSTEM = 259
    STUDENT = 260
    TEACHER = 261
    YES = 262
    NO = 263

    SPECIAL_SURFACE = {
        PAD: "<|pad|>",
        BOS: "<|bos|>",
        EOS: "<|eos|>",
        SYSTEM: "<|system|>",
        STUDENT: "<|student|>",
        TEACHER: "<|teacher|>",
        YES: "yes",
        NO: "no",
    }

    vocab_size = 264

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids) -> str:
        # "replace" only fires on byte sequences no valid encode() produces,
        # so encode -> decode stays the identity on real text
        parts: list[str] = []
        buf = bytearray()
        for i in ids:
            i = int(i)
            if i < 256:
                buf.append(i)
            else:
                if buf:
                    parts.append(buf.decode("utf-8", errors="replace"))
                    buf = bytearray()
                parts.append(self.SPECIAL_SURFACE[i])
        if buf:
            parts.append(buf.decode("utf-8", errors="replace"))
        return "".join(parts)


@dataclass(frozen=True)
class TransformerConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    context_window: int = 512
    vocab_size: int = ByteTokenizer.vocab_size
    profile: str = "desk"

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.profile == "paper" and (self.d_model, self.n_layers, self.context_window) != (4096, 8, 2048):
            raise ValueError("paper profile pins d_model=4096, n_layers=8, context_window=2048")

    @classmethod
    def desk(cls, **over) -> "TransformerConfig":
        return cls(**over)

    @classmethod
    def paper(cls) -> "TransformerConfig":
        return cls(d_model=4096, n_layers=8, n_heads=32, context_window=2048, profile="paper")


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 8
    alpha: float = 16.0
    init_std: float = 0.02

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("LoRA rank must be >= 1")


@dataclass
class LoraAdapter:
    """Low-rank delta for one frozen weight: A is Gaussian, B starts at zero."""

    a: Tensor  # [r x d_in]
    b: Tensor  # [d_out x r]
    rank: int
    alpha: float


def make_adapter(d_in: int, d_out: int, cfg: LoraConfig, rng: np.random.Generator, dtype=np.float32) -> LoraAdapter:
    a = Tensor(rng.normal(0.0, cfg.init_std, size=(cfg.rank, d_in)).astype(dtype), requires_grad=True)
    b = Tensor(np.zeros((d_out, cfg.rank), dtype=dtype), requires_grad=True)
    return LoraAdapter(a=a, b=b, rank=cfg.rank, alpha=cfg.alpha)


def lora_forward(x: Tensor, w0: Tensor, adapter: LoraAdapter | None) -> Tensor:
    """x @ W0^T plus the scaled low-rank path (alpha/r) x A^T B^T.

    W0 stays frozen; only A and B are trainable. With B at its zero
    initialization the output equals the base layer exactly.
    """
    base = ag.matmul(x, ag.transpose(w0))
    if adapter is None:
        return base
    d_out, d_in = w0.shape
    if adapter.a.shape != (adapter.rank, d_in) or adapter.b.shape != (d_out, adapter.rank):
        raise ag.ShapeError(
            f"adapter rank mismatch: A {adapter.a.shape}, B {adapter.b.shape} "
            f"for weight {w0.shape} rank {adapter.rank}"
        )
    delta = ag.matmul(ag.matmul(x, ag.transpose(adapter.a)), ag.transpose(adapter.b))
    return ag.add(base, ag.scale(delta, adapter.alpha / adapter.rank))


@dataclass
class LmOutput:
    logits: Tensor  # [T x V]
    hidden: Tensor  # [T x d_model], post final layer norm


class LmModel:
    """Decoder-only transformer over the byte vocabulary.

    Base parameters are created frozen (requires_grad=False); when LoRA is
    enabled the adapters are the only trainable tensors.
    """

    def __init__(
        self,
        config: TransformerConfig,
        seed: int = 0,
        lora: LoraConfig | None = LoraConfig(),
        dtype=np.float32,
    ):
        self.config = config
        self.lora_config = lora
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        d = config.d_model

        def frozen(shape, std):
            return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=False)

        def ones(n):
            return Tensor(np.ones(n, dtype=dtype), requires_grad=False)

        def zeros(n):
            return Tensor(np.zeros(n, dtype=dtype), requires_grad=False)

        self.tok_emb = frozen((config.vocab_size, d), 0.02)
        self.pos_emb = frozen((config.context_window, d), 0.02)
        self.layers = []
        for _ in range(config.n_layers):
            layer = {
                "ln1_g": ones(d), "ln1_b": zeros(d),
                "wq": frozen((d, d), d**-0.5), "wk": frozen((d, d), d**-0.5),
                "wv": frozen((d, d), d**-0.5), "wo": frozen((d, d), d**-0.5),
                "ln2_g": ones(d), "ln2_b": zeros(d),
                "w1": frozen((4 * d, d), d**-0.5), "b1": zeros(4 * d),
                "w2": frozen((d, 4 * d), (4 * d) ** -0.5), "b2": zeros(d),
            }
            self.layers.append(layer)
        self.ln_f_g = ones(d)
        self.ln_f_b = zeros(d)
        self.lm_head = frozen((config.vocab_size, d), 0.02)

        # adapters on the attention query/value projections only
        self.adapters: dict[str, LoraAdapter] = {}
        if lora is not None:
            for i in range(config.n_layers):
                self.adapters[f"layer{i}.wq"] = make_adapter(d, d, lora, rng, dtype)
                self.adapters[f"layer{i}.wv"] = make_adapter(d, d, lora, rng, dtype)

    # --- parameter access --------------------------------------------------

    def base_parameters(self) -> dict[str, Tensor]:
        params = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb,
                  "ln_f_g": self.ln_f_g, "ln_f_b": self.ln_f_b, "lm_head": self.lm_head}
        for i, layer in enumerate(self.layers):
            for k, t in layer.items():
                params[f"layer{i}.{k}"] = t
        return params

    def adapter_parameters(self) -> dict[str, Tensor]:
        params = {}
        for name, ad in self.adapters.items():
            params[f"{name}.lora_a"] = ad.a
            params[f"{name}.lora_b"] = ad.b
        return params

    def parameters(self) -> dict[str, Tensor]:
        return {**self.base_parameters(), **self.adapter_parameters()}

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.parameters().items() if t.requires_grad}

    # --- forward -------------------------------------------------------------

    def forward(self, token_ids) -> LmOutput:
        ids = np.asarray(token_ids, dtype=np.int64)
        t = ids.shape[0]
        if t == 0:
            raise ag.ShapeError("forward on empty token sequence")
        if t > self.config.context_window:
            raise ag.ShapeError(f"sequence length {t} exceeds context window {self.config.context_window}")
        d = self.config.d_model
        n_heads = self.config.n_heads
        dh = d // n_heads

        x = ag.add(ag.embedding_lookup(self.tok_emb, ids), ag.embedding_lookup(self.pos_emb, np.arange(t)))
        mask = Tensor(np.triu(np.full((t, t), -np.inf, dtype=self.dtype), k=1))
        inv_sqrt = 1.0 / math.sqrt(dh)

        for i, layer in enumerate(self.layers):
            xn = ag.layer_norm(x, layer["ln1_g"], layer["ln1_b"])
            q = lora_forward(xn, layer["wq"], self.adapters.get(f"layer{i}.wq"))
            k = ag.matmul(xn, ag.transpose(layer["wk"]))
            v = lora_forward(xn, layer["wv"], self.adapters.get(f"layer{i}.wv"))
            heads = []
            for h in range(n_heads):
                qh = ag.slice_last_dim(q, h * dh, (h + 1) * dh)
                kh = ag.slice_last_dim(k, h * dh, (h + 1) * dh)
                vh = ag.slice_last_dim(v, h * dh, (h + 1) * dh)
                scores = ag.add(ag.scale(ag.matmul(qh, ag.transpose(kh)), inv_sqrt), mask)
                heads.append(ag.matmul(ag.softmax(scores), vh))
            attn_out = ag.matmul(ag.concat_last_dim(heads), ag.transpose(layer["wo"]))
            x = ag.add(x, attn_out)

            xn2 = ag.layer_norm(x, layer["ln2_g"], layer["ln2_b"])
            hdn = ag.relu(ag.add(ag.matmul(xn2, ag.transpose(layer["w1"])), layer["b1"]))
            mlp_out = ag.add(ag.matmul(hdn, ag.transpose(layer["w2"])), layer["b2"])
            x = ag.add(x, mlp_out)

        hidden = ag.layer_norm(x, self.ln_f_g, self.ln_f_b)
        logits = ag.matmul(hidden, ag.transpose(self.lm_head))
        return LmOutput(logits=logits, hidden=hidden)


def _item_ids_mask(item):
    if hasattr(item, "token_ids"):
        return np.asarray(item.token_ids, dtype=np.int64), np.asarray(item.loss_mask, dtype=bool)
    ids, mask = item
    return np.asarray(ids, dtype=np.int64), np.asarray(mask, dtype=bool)


def multitask_loss(model: LmModel, task_batches) -> Tensor:
    """Mean over tasks of per-task mean-token NLL.

    ``task_batches`` is a list of task groups; each group is a list of
    rendered dialogues (or (token_ids, loss_mask) pairs). Within a task the
    per-token losses over all samples pool into one mean; the final loss is
    the plain average of the task means, so duplicating samples inside one
    task leaves the value unchanged.
    """
    if len(task_batches) == 0:
        raise ValueError("multitask_loss needs at least one task group")
    task_losses: list[Tensor] = []
    for ti, group in enumerate(task_batches):
        if len(group) == 0:
            raise ValueError(f"task {ti} has no samples")
        sums: list[Tensor] = []
        count = 0
        for item in group:
            ids, mask = _item_ids_mask(item)
            shifted = mask[1:]
            if ids.shape[0] < 2 or not shifted.any():
                continue
            out = model.forward(ids)
            logits = ag.slice_rows(out.logits, 0, ids.shape[0] - 1)
            sums.append(ag.cross_entropy(logits, ids[1:], shifted, reduction="sum"))
            count += int(shifted.sum())
        if count == 0:
            raise ValueError(f"task {ti} contributes zero valid tokens")
        total = sums[0]
        for s in sums[1:]:
            total = ag.add(total, s)
        task_losses.append(ag.scale(total, 1.0 / count))
    loss = task_losses[0]
    for t in task_losses[1:]:
        loss = ag.add(loss, t)
    return ag.scale(loss, 1.0 / len(task_losses))


def generate_greedy(model: LmModel, prompt_ids, max_new: int) -> list[int]:
    """Argmax decoding from the prompt; stops at EOS or ``max_new`` tokens.

    If the sequence outgrows the context window, the visible context slides
    left (generation continues on the newest window).
    """
    ids = [int(i) for i in prompt_ids]
    if len(ids) > model.config.context_window:
        raise ag.ShapeError("prompt exceeds context window")
    out: list[int] = []
    for _ in range(max_new):
        window = ids[-model.config.context_window:]
        logits = model.forward(window).logits
        nxt = int(np.argmax(logits.data[-1]))
        out.append(nxt)
        ids.append(nxt)
        if nxt == ByteTokenizer.EOS:
            break
    return out
