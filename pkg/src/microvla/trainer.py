"""Training loop for both decode regimes with per-step loss/accuracy metrics.

Supervision always covers exactly the D action positions. Joint mode feeds
learned query slots and predicts all D tokens from one forward; causal mode
teacher-forces ground-truth action tokens shifted by one so slot t predicts
token t under the standard causal mask. Runs are deterministic given the
config seed: fixed data order, fixed reduction order, single thread.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import codec as codec_mod
from . import tensor as T
from .codec import ActionCodec
from .encoder import encode_image
from .errors import ConfigError, StateError
from .masks import build_mask
from .policy import (
    Model,
    action_argmax,
    assemble_sequence,
    causal_slots,
    forward,
    joint_slots,
)
from .tensor import Tensor
from .world import Episode, derive_seed

CSV_COLUMNS = [
    "step",
    "train_loss",
    "action_token_accuracy",
    "val_loss",
    "val_accuracy",
    "wall_ms_per_step",
    "val_vector_accuracy",
    "val_l2_error",
]


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "joint"
    batch_size: int = 16
    steps: int = 1500
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    eval_every: int = 50
    seed: int = 0
    timing: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.mode not in ("causal", "joint"):
            raise ConfigError(f"unknown training mode {self.mode!r}")


@dataclass
class MetricsRow:
    step: int
    train_loss: float
    action_token_accuracy: float
    val_loss: float
    val_accuracy: float
    wall_ms_per_step: float
    val_vector_accuracy: float
    val_l2_error: float

    def __post_init__(self):
        for name in ("action_token_accuracy", "val_accuracy",
                     "val_vector_accuracy"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def as_csv(self) -> str:
        return ",".join([
            str(self.step),
            repr(self.train_loss),
            repr(self.action_token_accuracy),
            repr(self.val_loss),
            repr(self.val_accuracy),
            repr(self.wall_ms_per_step),
            repr(self.val_vector_accuracy),
            repr(self.val_l2_error),
        ])


class Adam:
    """Adam with global-norm gradient clipping, state per parameter list."""

    def __init__(self, params: list[Tensor], cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self):
        cfg = self.cfg
        grads = [
            p.grad if p.grad is not None else np.zeros_like(p.data)
            for p in self.params
        ]
        if cfg.grad_clip > 0:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads))
            if norm > cfg.grad_clip:
                scale = cfg.grad_clip / norm
                grads = [g * scale for g in grads]
        self.t += 1
        bc1 = 1.0 - cfg.beta1 ** self.t
        bc2 = 1.0 - cfg.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * (g * g)
            p.data -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)


def supervised_sequence(model: Model, codec: ActionCodec, ep: Episode):
    """Assemble one episode into (embeddings, mask, labels, supervised).

    Labels are identical in both modes (position prefix+t is supervised with
    action token t); only the slot contents and the attention mask differ.
    """
    cfg = model.config
    tokens = codec_mod.tokenize(codec, ep.action)
    if cfg.mask_mode == "joint":
        slots = joint_slots(model.policy)
    else:
        slots = causal_slots(model.policy, tokens[:-1])
    img_emb = encode_image(ep.image, model.encoder,
                           dtype=model.policy.token_table.data.dtype)
    emb, layout = assemble_sequence(model.policy, img_emb, [ep.instruction],
                                    slots)
    mask = build_mask(layout, cfg.mask_mode,
                      joint_full_bidirectional=cfg.joint_full_bidirectional)
    labels = np.zeros(layout.total, dtype=np.int64)
    supervised = np.zeros(layout.total, dtype=bool)
    labels[layout.prefix_len:] = tokens
    supervised[layout.prefix_len:] = True
    return emb, mask, labels, supervised, layout


def _episode_loss(model: Model, codec: ActionCodec, ep: Episode):
    emb, mask, labels, supervised, layout = supervised_sequence(model, codec, ep)
    logits = forward(model.policy, emb, mask)
    loss = T.cross_entropy_logits(logits, labels, supervised)
    return loss, logits, labels, layout


@dataclass
class StepStats:
    loss: float
    token_accuracy: float


def train_step(model: Model, codec: ActionCodec, batch: list[Episode],
               tcfg: TrainConfig, opt: Adam) -> StepStats:
    """One optimizer step over a batch; episodes are reduced in list order."""
    if codec is None:
        raise StateError("train_step requires a fitted codec")
    if not batch:
        raise ConfigError("train_step batch must be nonempty")
    T.zero_grads(opt.params)
    inv = 1.0 / len(batch)
    total_loss = 0.0
    hits = 0
    slots = 0
    for ep in batch:
        loss, logits, labels, layout = _episode_loss(model, codec, ep)
        loss.backward(seed=np.asarray(inv, dtype=loss.data.dtype))
        total_loss += loss.item()
        pred = action_argmax(model.config,
                             logits.data[layout.prefix_len:])
        hits += sum(int(p == l) for p, l in
                    zip(pred, labels[layout.prefix_len:]))
        slots += layout.action_len
    opt.step()
    return StepStats(loss=total_loss * inv, token_accuracy=hits / slots)


@dataclass
class EvalStats:
    loss: float
    token_accuracy: float
    vector_accuracy: float
    l2_error: float


def evaluate(model: Model, codec: ActionCodec,
             episodes: list[Episode]) -> EvalStats:
    """No-gradient pass over a split.

    Token accuracy uses the per-slot restricted argmax (slot t may only emit
    dimension t's tokens), matching how the decode paths read the logits.
    Also reports the fraction of episodes with every token correct and the
    mean L2 error between the detokenized prediction and the true action.
    """
    if not episodes:
        raise ConfigError("empty evaluation set")
    total_loss = 0.0
    hits = 0
    slots = 0
    vec_hits = 0
    l2_sum = 0.0
    with T.no_grad():
        for ep in episodes:
            loss, logits, labels, layout = _episode_loss(model, codec, ep)
            total_loss += loss.item()
            pred = action_argmax(model.config,
                                 logits.data[layout.prefix_len:])
            truth = labels[layout.prefix_len:]
            matches = sum(int(p == l) for p, l in zip(pred, truth))
            hits += matches
            slots += layout.action_len
            vec_hits += int(matches == layout.action_len)
            decoded = codec_mod.detokenize(codec, pred)
            l2_sum += float(np.linalg.norm(decoded - ep.action))
    n = len(episodes)
    return EvalStats(
        loss=total_loss / n,
        token_accuracy=hits / slots,
        vector_accuracy=vec_hits / n,
        l2_error=l2_sum / n,
    )


def fit_codec(model_cfg, train_episodes: list[Episode],
              quantile_lo: float = 0.01, quantile_hi: float = 0.99) -> ActionCodec:
    """Fit the codec on the training actions, in the policy's vocab layout."""
    actions = np.stack([ep.action for ep in train_episodes])
    return codec_mod.fit(actions, bins=model_cfg.action_bins,
                         quantile_lo=quantile_lo, quantile_hi=quantile_hi,
                         vocab_base=model_cfg.text_vocab_size)


@dataclass
class TrainResult:
    rows: list[MetricsRow]
    codec: ActionCodec
    final: MetricsRow


def run_training(model: Model, train_eps: list[Episode],
                 val_eps: list[Episode], tcfg: TrainConfig,
                 codec: ActionCodec | None = None,
                 progress=None) -> TrainResult:
    """Train for tcfg.steps, evaluating every eval_every steps and at the end.

    Deterministic given config and data: per-epoch shuffling uses seeds
    derived from tcfg.seed and batches reduce in a fixed order.
    """
    if tcfg.mode != model.config.mask_mode:
        raise StateError(
            f"training mode {tcfg.mode!r} != model mask_mode "
            f"{model.config.mask_mode!r}"
        )
    if codec is None:
        codec = fit_codec(model.config, train_eps)
    opt = Adam(model.params(), tcfg)

    rows: list[MetricsRow] = []
    order: list[int] = []
    epoch = 0
    win_loss = 0.0
    win_acc = 0.0
    win_wall = 0.0
    win_n = 0
    for step in range(1, tcfg.steps + 1):
        if len(order) < tcfg.batch_size:
            rng = np.random.default_rng(derive_seed(tcfg.seed, "shuffle", epoch))
            order = list(rng.permutation(len(train_eps)))
            epoch += 1
        take, order = order[:tcfg.batch_size], order[tcfg.batch_size:]
        batch = [train_eps[i] for i in take]
        t0 = time.perf_counter()
        stats = train_step(model, codec, batch, tcfg, opt)
        wall_ms = (time.perf_counter() - t0) * 1e3
        win_loss += stats.loss
        win_acc += stats.token_accuracy
        win_wall += wall_ms
        win_n += 1
        if step % tcfg.eval_every == 0 or step == tcfg.steps:
            ev = evaluate(model, codec, val_eps)
            row = MetricsRow(
                step=step,
                train_loss=win_loss / win_n,
                action_token_accuracy=win_acc / win_n,
                val_loss=ev.loss,
                val_accuracy=ev.token_accuracy,
                wall_ms_per_step=(win_wall / win_n) if tcfg.timing else 0.0,
                val_vector_accuracy=ev.vector_accuracy,
                val_l2_error=ev.l2_error,
            )
            rows.append(row)
            win_loss = win_acc = win_wall = 0.0
            win_n = 0
            if progress is not None:
                progress(row)
    return TrainResult(rows=rows, codec=codec, final=rows[-1])


def write_metrics_csv(path, rows: list[MetricsRow],
                      config_echo: dict[str, str]):
    """CSV with the resolved run configuration echoed as comment lines."""
    with open(path, "w") as fh:
        for key in sorted(config_echo):
            fh.write(f"# {key}={config_echo[key]}\n")
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for row in rows:
            fh.write(row.as_csv() + "\n")


def read_metrics_csv(path) -> tuple[dict[str, str], list[dict[str, float]]]:
    config: dict[str, str] = {}
    rows: list[dict[str, float]] = []
    header: list[str] | None = None
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("# "):
                key, _, value = line[2:].partition("=")
                config[key] = value
                continue
            if header is None:
                header = line.split(",")
                continue
            vals = line.split(",")
            rows.append({k: float(v) for k, v in zip(header, vals)})
    return config, rows
