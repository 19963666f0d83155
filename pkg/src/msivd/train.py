"""Two-stage training: multitask SIFT of the LM, then fused classifier training.

Stage one optimizes the LoRA adapters only under the task-averaged dialogue
loss. Stage two freezes the language model entirely (its hidden states are
cached once) and trains the graph network plus the label classifier. Both
stages log one loss row per optimizer step and are bitwise deterministic for
a fixed seed.
"""
from __future__ import annotations

import json
import logging
import math
import random
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .corpus import CodeSample
from .dfa import FeatureSpec, build_node_features, reaching_definitions
from .dialogue import DialogueRecord, RenderedDialogue, render, render_prompt
from .fusion import FusedClassifier, label_nll
from .gnn import Ggnn, GgnnConfig
from .lm import ByteTokenizer, LmModel, LoraConfig, TransformerConfig
from .minic import MiniCError, parse_mini_c

log = logging.getLogger("msivd.train")

__all__ = [
    "TrainConfig",
    "LossCurve",
    "Checkpoint",
    "CheckpointError",
    "Sgd",
    "TrainingStream",
    "render_training_streams",
    "sift_batch_loss",
    "train_sift",
    "train_fused",
    "save_checkpoint",
    "load_checkpoint",
    "build_lm_from_checkpoint",
    "build_bundle_from_checkpoint",
]

SIFT_MODES = ("multi-round", "single-round", "label-only")
TASK_GROUPINGS = ("round", "objective")

CKPT_MAGIC = b"MSIVDCKP"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    stage: str = "sift"  # sift | fused
    learning_rate: float | None = None  # stage default: 1e-5 sift, 1e-6 fused
    batch_size: int = 4
    epochs: int | None = None  # stage default: 10 sift, 5 fused
    seed: int = 0
    profile: str = "desk"
    sift_mode: str = "multi-round"
    task_grouping: str = "round"
    use_gnn: bool = True
    clip_norm: float | None = 1.0
    momentum: float = 0.0
    lm_config: TransformerConfig = field(default_factory=TransformerConfig)
    gnn_config: GgnnConfig = field(default_factory=GgnnConfig)
    lora_config: LoraConfig = field(default_factory=LoraConfig)

    def __post_init__(self):
        if self.stage not in ("sift", "fused"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.learning_rate is None:
            self.learning_rate = 1e-5 if self.stage == "sift" else 1e-6
        if self.epochs is None:
            self.epochs = 10 if self.stage == "sift" else 5
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.epochs <= 0:
            raise ValueError("learning rate, batch size and epochs must be positive")
        if self.sift_mode not in SIFT_MODES:
            raise ValueError(f"unknown sift_mode {self.sift_mode!r}; have {SIFT_MODES}")
        if self.task_grouping not in TASK_GROUPINGS:
            raise ValueError(f"unknown task_grouping {self.task_grouping!r}")
        if self.profile == "paper":
            self.lm_config = TransformerConfig.paper()
            self.gnn_config = GgnnConfig.paper()

    def snapshot(self) -> dict:
        """JSON-safe view of the full configuration (nested configs included)."""
        return asdict(self)


@dataclass
class LossCurve:
    rows: list[tuple[int, float]] = field(default_factory=list)

    def append(self, step: int, loss: float) -> None:
        self.rows.append((step, float(loss)))

    def losses(self) -> list[float]:
        return [loss for _, loss in self.rows]

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("step,loss\n")
            for step, loss in self.rows:
                fh.write(f"{step},{loss:.9e}\n")

    @classmethod
    def from_csv(cls, path) -> "LossCurve":
        curve = cls()
        with open(path, encoding="utf-8") as fh:
            header = fh.readline().strip()
            if header != "step,loss":
                raise ValueError(f"bad loss curve header {header!r}")
            for line in fh:
                step, loss = line.strip().split(",")
                curve.append(int(step), float(loss))
        return curve


# --- checkpoint container -------------------------------------------------------


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    version: int
    config: dict
    tensors: dict[str, np.ndarray]
    metrics_history: list[dict] = field(default_factory=list)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Binary container: magic, u32 version, u32 header length, JSON header
    (config + tensor directory), raw little-endian float payload."""
    directory = {}
    offset = 0
    payloads = []
    for name in sorted(ckpt.tensors):
        arr = ckpt.tensors[name]
        dtype = "<f8" if arr.dtype == np.float64 else "<f4"
        blob = np.ascontiguousarray(arr).astype(dtype).tobytes()
        directory[name] = {
            "shape": list(arr.shape),
            "dtype": dtype,
            "offset": offset,
            "nbytes": len(blob),
        }
        payloads.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"config": ckpt.config, "tensors": directory, "metrics_history": ckpt.metrics_history},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", ckpt.version))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in payloads:
            fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CKPT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CKPT_VERSION:
            raise CheckpointError(f"checkpoint version mismatch: file {version}, supported {CKPT_VERSION}")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()
    tensors = {}
    for name, meta in header["tensors"].items():
        blob = payload[meta["offset"] : meta["offset"] + meta["nbytes"]]
        arr = np.frombuffer(blob, dtype=meta["dtype"]).reshape(meta["shape"]).copy()
        tensors[name] = arr.astype(np.float64 if meta["dtype"] == "<f8" else np.float32)
    return Checkpoint(
        version=version,
        config=header["config"],
        tensors=tensors,
        metrics_history=header["metrics_history"],
    )


def _apply_state(params: dict[str, Tensor], tensors: dict[str, np.ndarray], prefix: str) -> None:
    for name, tensor in params.items():
        key = prefix + name
        if key not in tensors:
            raise CheckpointError(f"checkpoint missing tensor {key!r}")
        arr = tensors[key]
        if tuple(arr.shape) != tensor.shape:
            raise CheckpointError(
                f"dimension mismatch for {key!r}: checkpoint {tuple(arr.shape)}, model {tensor.shape}"
            )
        tensor.data[...] = arr.astype(tensor.data.dtype)


# --- optimizer ---------------------------------------------------------------------


class Sgd:
    """Plain mini-batch gradient descent with optional momentum and global-norm
    clipping (clipping is logged when it fires)."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.0,
                 clip_norm: float | None = None):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.clip_norm = clip_norm
        self._velocity = {name: np.zeros_like(t.data) for name, t in params.items()} if momentum else None

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def step(self) -> bool:
        grads = {name: t.grad for name, t in self.params.items() if t.grad is not None}
        clipped = False
        if self.clip_norm is not None and grads:
            total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
            if total > self.clip_norm:
                factor = self.clip_norm / total
                for g in grads.values():
                    g *= g.dtype.type(factor)
                clipped = True
                log.info("gradient clipping active: norm %.4f -> %.4f", total, self.clip_norm)
        for name, t in self.params.items():
            g = t.grad
            if g is None:
                continue
            if self._velocity is not None:
                v = self._velocity[name]
                v *= self.momentum
                v -= self.lr * g
                t.data += v
            else:
                t.data -= t.data.dtype.type(self.lr) * g
        return clipped


# --- stage 1: multitask SIFT ------------------------------------------------------------


def _task_index(round_no: int, grouping: str) -> int:
    if grouping == "round":
        return round_no - 1
    return 0 if round_no == 1 else 1  # detection vs explanation


@dataclass
class TrainingStream:
    """One dialogue rendered once, with its teacher spans mapped to tasks."""

    rendered: RenderedDialogue
    tasks: list[tuple[int, tuple[int, int]]]  # (task index, [start, end) span)


def render_training_streams(
    dialogues: list[DialogueRecord],
    tokenizer: ByteTokenizer,
    config: TrainConfig,
) -> list[TrainingStream]:
    """Each complete dialogue becomes a single training stream.

    Multi-round mode keeps all rounds, mapping each teacher span to its task
    group; single-round and label-only modes keep round 1 only. Negatives
    always train their single round under task 0 (detection).
    """
    window = config.lm_config.context_window
    streams: list[TrainingStream] = []
    for d in dialogues:
        if d.label and config.sift_mode == "multi-round":
            rendered = render(d, tokenizer, context_window=window)
            tasks = [
                (_task_index(r, config.task_grouping), span)
                for r, span in enumerate(rendered.teacher_spans, start=1)
            ]
        else:
            rendered = render(d, tokenizer, up_to_round=1, context_window=window, mask_rounds={1})
            tasks = [(0, rendered.teacher_spans[0])]
        streams.append(TrainingStream(rendered=rendered, tasks=tasks))
    return streams


def _span_shift_mask(span: tuple[int, int], t: int) -> np.ndarray:
    """Mask over the shifted target positions (length t-1) for one span."""
    m = np.zeros(t, dtype=bool)
    m[span[0] : span[1]] = True
    return m[1:]


def sift_batch_loss(model: LmModel, streams: list[TrainingStream], accumulate: bool = True) -> float:
    """Task-averaged loss over a batch of streams, Eq.-style pooling: per-task
    summed NLL over all spans divided by the task's valid-token count, then
    the plain mean over tasks present in the batch.

    Each stream is forwarded once and backpropagated immediately so only one
    computation graph is alive at a time; gradients accumulate across streams.
    """
    counts: dict[int, int] = {}
    for s in streams:
        t = s.rendered.token_ids.shape[0]
        for task, span in s.tasks:
            counts[task] = counts.get(task, 0) + int(_span_shift_mask(span, t).sum())
    active = {task for task, c in counts.items() if c > 0}
    if not active:
        raise ValueError("batch contributes zero valid tokens")
    n_tasks = len(active)

    total = 0.0
    for s in streams:
        ids = s.rendered.token_ids
        t = ids.shape[0]
        contribs = None
        out = model.forward(ids)
        logits = ag.slice_rows(out.logits, 0, t - 1)
        for task, span in s.tasks:
            m = _span_shift_mask(span, t)
            if not m.any():
                continue
            ce_sum = ag.cross_entropy(logits, ids[1:], m, reduction="sum")
            part = ag.scale(ce_sum, 1.0 / (counts[task] * n_tasks))
            contribs = part if contribs is None else ag.add(contribs, part)
        if contribs is None:
            continue
        if accumulate:
            ag.backward(contribs)
        total += contribs.item()
    return total


def train_sift(dialogues: list[DialogueRecord], config: TrainConfig) -> tuple[Checkpoint, LossCurve]:
    """Fine-tune the LoRA adapters under the task-averaged dialogue loss."""
    if not dialogues:
        raise ValueError("train_sift needs at least one dialogue")
    tokenizer = ByteTokenizer()
    model = LmModel(config.lm_config, seed=config.seed, lora=config.lora_config)
    streams = render_training_streams(dialogues, tokenizer, config)

    if config.sift_mode == "multi-round":
        n_tasks = 3 if config.task_grouping == "round" else 2
    else:
        n_tasks = 1
    present = {t for s in streams for t, _ in s.tasks}
    missing = sorted(set(range(n_tasks)) - present)
    if missing:
        raise ValueError(f"empty task group(s): {missing}")

    optimizer = Sgd(
        model.adapter_parameters(), lr=config.learning_rate,
        momentum=config.momentum, clip_norm=config.clip_norm,
    )
    curve = LossCurve()
    order_rng = random.Random(config.seed)
    step = 0
    for _epoch in range(config.epochs):
        order = list(range(len(streams)))
        order_rng.shuffle(order)
        for start in range(0, len(order), config.batch_size):
            batch = [streams[i] for i in order[start : start + config.batch_size]]
            optimizer.zero_grad()
            loss_value = sift_batch_loss(model, batch)
            optimizer.step()
            curve.append(step, loss_value)
            step += 1

    masked_rounds = 3 if config.sift_mode == "multi-round" else 1
    ckpt = Checkpoint(
        version=CKPT_VERSION,
        config={"stage": "sift", "train": config.snapshot()},
        tensors={f"lm.{k}": t.data.copy() for k, t in model.parameters().items()},
        metrics_history=[
            {
                "stage": "sift",
                "mode": config.sift_mode,
                "n_tasks": n_tasks,
                "masked_rounds": masked_rounds,
                "steps": step,
                "final_loss": curve.rows[-1][1],
            }
        ],
    )
    return ckpt, curve


def build_lm_from_checkpoint(ckpt: Checkpoint, expect: TransformerConfig | None = None) -> LmModel:
    train_cfg = ckpt.config["train"]
    lm_cfg = TransformerConfig(**train_cfg["lm_config"])
    if expect is not None and expect != lm_cfg:
        raise CheckpointError(
            f"dimension mismatch between checkpoint and config: "
            f"checkpoint d_model={lm_cfg.d_model}, config d_model={expect.d_model}"
        )
    lora_cfg = LoraConfig(**train_cfg["lora_config"]) if train_cfg.get("lora_config") else None
    model = LmModel(lm_cfg, seed=train_cfg.get("seed", 0), lora=lora_cfg)
    _apply_state(model.parameters(), ckpt.tensors, "lm.")
    return model


# --- stage 2: fused classifier -------------------------------------------------------------


def train_fused(
    samples: list[CodeSample],
    sift_checkpoint: Checkpoint | None,
    config: TrainConfig,
) -> tuple[Checkpoint, LossCurve]:
    """Train the GNN and label classifier against the frozen language model.

    The LM (base and adapters) receives no gradient; its read-out hidden
    states are computed once per sample and cached for the whole loop.
    """
    if not samples:
        raise ValueError("train_fused needs at least one sample")
    tokenizer = ByteTokenizer()
    if sift_checkpoint is not None:
        lm = build_lm_from_checkpoint(sift_checkpoint, expect=config.lm_config)
    else:
        lm = LmModel(config.lm_config, seed=config.seed, lora=config.lora_config)

    window = lm.config.context_window
    hidden_cache: list[np.ndarray] = []
    for s in samples:
        out = lm.forward(render_prompt(s.code, tokenizer, window))
        hidden_cache.append(out.hidden.data[-1].copy())

    gnn: Ggnn | None = None
    spec = FeatureSpec()
    graph_cache: list[tuple] = []
    in_dim = lm.config.d_model
    if config.use_gnn:
        gnn = Ggnn(config.gnn_config, seed=config.seed)
        in_dim += config.gnn_config.state_dim
        n_flagged = 0
        for s in samples:
            try:
                cfg_graph = parse_mini_c(s.code)
            except MiniCError:
                graph_cache.append(None)
                n_flagged += 1
                continue
            reach = reaching_definitions(cfg_graph)
            feats = build_node_features(cfg_graph, reach, width=gnn.config.in_dim, spec=spec)
            graph_cache.append((cfg_graph, feats))
        if n_flagged:
            log.warning("%d/%d samples fell back to zero graph embeddings", n_flagged, len(samples))

    classifier = FusedClassifier(in_dim, seed=config.seed + 1)
    trainable: dict[str, Tensor] = dict(classifier.parameters())
    if gnn is not None:
        trainable.update(gnn.parameters())
    optimizer = Sgd(trainable, lr=config.learning_rate, momentum=config.momentum, clip_norm=config.clip_norm)

    curve = LossCurve()
    order_rng = random.Random(config.seed)
    step = 0
    for _epoch in range(config.epochs):
        order = list(range(len(samples)))
        order_rng.shuffle(order)
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            optimizer.zero_grad()
            total = None
            for si in batch:
                hidden_row = Tensor(hidden_cache[si])
                if gnn is None:
                    fused = hidden_row
                else:
                    cached = graph_cache[si]
                    if cached is None:
                        emb = Tensor(np.zeros(gnn.config.state_dim, dtype=np.float32))
                    else:
                        emb = gnn.forward(cached[0], cached[1])
                    fused = ag.concat_last_dim([hidden_row, emb])
                nll = label_nll(classifier.logits(fused), samples[si].label)
                total = nll if total is None else ag.add(total, nll)
            loss = ag.scale(total, 1.0 / len(batch))
            ag.backward(loss)
            optimizer.step()
            curve.append(step, loss.item())
            step += 1

    tensors = {f"lm.{k}": t.data.copy() for k, t in lm.parameters().items()}
    tensors.update({k: t.data.copy() for k, t in classifier.parameters().items()})
    if gnn is not None:
        tensors.update({k: t.data.copy() for k, t in gnn.parameters().items()})
    ckpt = Checkpoint(
        version=CKPT_VERSION,
        config={"stage": "fused", "train": config.snapshot(), "use_gnn": config.use_gnn},
        tensors=tensors,
        metrics_history=(sift_checkpoint.metrics_history if sift_checkpoint else [])
        + [
            {
                "stage": "fused",
                "use_gnn": config.use_gnn,
                "steps": step,
                "final_loss": curve.rows[-1][1],
            }
        ],
    )
    return ckpt, curve


def build_bundle_from_checkpoint(ckpt: Checkpoint):
    """Reconstruct the inference bundle (LM + optional GNN + classifier)."""
    from .fusion import InferenceBundle

    if ckpt.config.get("stage") != "fused":
        raise CheckpointError("inference needs a fused-stage checkpoint")
    train_cfg = ckpt.config["train"]
    lm = build_lm_from_checkpoint(ckpt)
    use_gnn = ckpt.config.get("use_gnn", True)
    gnn = None
    in_dim = lm.config.d_model
    if use_gnn:
        gnn_cfg = GgnnConfig(**{**train_cfg["gnn_config"], "mlp_hidden": tuple(train_cfg["gnn_config"]["mlp_hidden"])})
        gnn = Ggnn(gnn_cfg, seed=train_cfg.get("seed", 0))
        _apply_state(gnn.parameters(), ckpt.tensors, "")
        in_dim += gnn_cfg.state_dim
    classifier = FusedClassifier(in_dim, seed=train_cfg.get("seed", 0) + 1)
    _apply_state(classifier.parameters(), ckpt.tensors, "")
    return InferenceBundle(lm=lm, tokenizer=ByteTokenizer(), classifier=classifier, gnn=gnn)
