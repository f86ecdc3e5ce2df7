"""Training orchestration: base training, inductive novel fine-tuning,
per-image transductive tuning, and the ablation/sweep drivers.

Phases and their freeze sets:

* base: every base-model parameter trains (prompts, attention layers, norms,
  head MLP) with per-pixel cross-entropy on scenes whose novel pixels are
  relabelled background.
* fine-tune (inductive or the warmup of transductive): only the visual
  prompts (base prompts optional by config), the novel residual head, and
  the causal attention weights move; all else stays bit-identical.
* transductive: per test image, a fresh copy of the fine-tunable state is
  optimized -- cross-entropy only for the first `ce_only_iters`, then the
  full composite objective with the region prior snapshotted at the switch.

Runs are pure functions of (config, seeds); training emits an append-only
JSONL log with one record per iteration (see README for the schema).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward, parameter, zero_grad
from .blocks import ConfigurationError, set_trainable
from .decoder import (
    DecoderParams,
    FeaturePyramid,
    PromptSet,
    SegOutput,
    full_forward,
)
from .episodes import (
    Episode,
    Scene,
    Split,
    SyntheticWorld,
    WorldConfig,
    build_base_trainset,
    build_episode,
    init_novel_prompts,
    make_split,
)
from .evaluation import EvalReport, evaluate
from .objectives import (
    AdamW,
    TransductiveConfig,
    base_block,
    conditional_entropy,
    estimate_prior,
    kd_loss,
    marginal_entropy,
    oracle_prior,
    pixel_ce,
    predictive_entropy,
    transductive_loss,
)

PROMPT_INIT_MODES = ("random", "masked-pooling")
RANDOM_PROMPT_SIGMA = 0.02


@dataclass
class TrainSettings:
    base_iters: int = 200
    base_lr: float = 1e-4  # reference-scale default; desk presets override
    finetune_iters: int = 100
    finetune_lr: float = 5e-3
    weight_decay: float = 0.05
    batch_size: int = 8  # reference setting uses 16
    trainset_size: int = 64


@dataclass
class RunConfig:
    mode: str = "inductive"  # base | inductive | transductive
    seed: int = 0
    split_index: int = 0
    shots: int = 1
    num_queries: int = 6
    causal_attention: str = "shared"  # none | first-layer | separate | shared
    prompt_init: str = "masked-pooling"  # random | masked-pooling
    train_base_prompts: bool = True
    causal_residual: bool = False
    num_layers: int = 3
    head_count: int = 4
    activation: str = "softplus"
    include_background: bool = True
    world: WorldConfig = field(default_factory=WorldConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    transductive: TransductiveConfig = field(default_factory=TransductiveConfig)

    def __post_init__(self):
        if self.mode not in ("base", "inductive", "transductive"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.prompt_init not in PROMPT_INIT_MODES:
            raise ConfigurationError(f"unknown prompt init {self.prompt_init!r}")

    def digest(self) -> dict:
        d = asdict(self)
        d["world"] = asdict(self.world)
        return d


@dataclass
class Checkpoint:
    prompts: PromptSet
    decoder: DecoderParams
    manifest: dict

    def all_tensors(self) -> dict[str, Tensor]:
        out = dict(self.prompts.tensors())
        out.update(self.decoder.tensors())
        return out


class TrainingLog:
    """Append-only JSONL training log; silently off when path is None."""

    def __init__(self, path=None):
        self.path = path
        self.records: list[dict] = []

    def append(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record) + "\n")


# -- label map <-> prompt index conversion -----------------------------------------


def labels_to_indices(labels: np.ndarray, class_ids: list[int]) -> np.ndarray:
    index_of = {cid: i for i, cid in enumerate(class_ids)}
    flat = labels.reshape(-1)
    out = np.empty_like(flat)
    for pos, v in enumerate(flat):
        try:
            out[pos] = index_of[int(v)]
        except KeyError:
            raise ValueError(f"label id {int(v)} not among classes {class_ids}") from None
    return out.reshape(labels.shape)


def indices_to_labels(indices: np.ndarray, class_ids: list[int]) -> np.ndarray:
    return np.asarray(class_ids, dtype=np.int64)[indices]


def predict_labels(prompts: PromptSet, pyramid: FeaturePyramid, decoder: DecoderParams, cfg: RunConfig) -> np.ndarray:
    seg = full_forward(prompts, pyramid, decoder, cfg.causal_attention, cfg.causal_residual)
    return indices_to_labels(seg.argmax_map, prompts.class_ids)


# -- model construction --------------------------------------------------------------


def init_base_model(world: SyntheticWorld, split: Split, cfg: RunConfig) -> tuple[PromptSet, DecoderParams]:
    rng = np.random.default_rng([cfg.seed, 0xB0DE])
    dim = world.config.embed_dim
    prompts = PromptSet(
        v_base=parameter(rng.normal(scale=RANDOM_PROMPT_SIGMA, size=(len(split.base_class_ids), dim))),
        v_novel=parameter(np.zeros((0, dim))),
        base_class_ids=list(split.base_class_ids),
        novel_class_ids=[],
    )
    decoder = DecoderParams.init(
        rng, dim, cfg.num_layers, head_count=cfg.head_count, activation=cfg.activation
    )
    return prompts, decoder


def base_trainable_tensors(prompts: PromptSet, decoder: DecoderParams) -> dict[str, Tensor]:
    """Everything the base phase optimizes; the causal module and novel head
    belong to the novel machinery and are untouched here."""
    out = {"prompts.base": prompts.v_base}
    for i, layer in enumerate(decoder.layers):
        out.update(layer.tensors(f"decoder.layer{i}"))
    out.update(decoder.head_mlp.tensors("head.mlp"))
    return out


def finetune_trainable_tensors(prompts: PromptSet, decoder: DecoderParams, cfg: RunConfig) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {"prompts.novel": prompts.v_novel}
    if decoder.w_novel is not None:
        out["head.w_novel"] = decoder.w_novel
    if cfg.causal_attention in ("shared", "first-layer"):
        out.update(decoder.causal.tensors("decoder.causal"))
    elif cfg.causal_attention == "separate":
        for i, c in enumerate(decoder.causal_separate or []):
            out.update(c.tensors(f"decoder.causal{i}"))
    if cfg.train_base_prompts:
        out["prompts.base"] = prompts.v_base
    return out


def apply_freeze(prompts: PromptSet, decoder: DecoderParams, trainable: dict[str, Tensor]) -> None:
    everything = dict(prompts.tensors())
    everything.update(decoder.tensors())
    set_trainable(everything, False)
    set_trainable(trainable, True)


def clone_state(prompts: PromptSet, decoder: DecoderParams) -> tuple[PromptSet, DecoderParams]:
    """Deep copy with fresh tensors; trainability flags are preserved."""
    arrays = {n: t.data.copy() for n, t in {**prompts.tensors(), **decoder.tensors()}.items()}
    flags = {n: t.requires_grad for n, t in {**prompts.tensors(), **decoder.tensors()}.items()}
    new_prompts, new_decoder = _rebuild_structs(
        embed_dim=prompts.v_base.shape[1],
        num_layers=decoder.num_layers,
        head_count=decoder.layers[0].self_attn.head_count if decoder.layers else 1,
        activation=decoder.head_mlp.activation,
        base_class_ids=prompts.base_class_ids,
        novel_class_ids=prompts.novel_class_ids,
        separate_causal=decoder.causal_separate is not None,
        has_w_novel=decoder.w_novel is not None,
        arrays=arrays,
    )
    for n, t in {**new_prompts.tensors(), **new_decoder.tensors()}.items():
        t.requires_grad = flags[n]
    return new_prompts, new_decoder


def _rebuild_structs(
    embed_dim,
    num_layers,
    head_count,
    activation,
    base_class_ids,
    novel_class_ids,
    separate_causal,
    has_w_novel,
    arrays,
) -> tuple[PromptSet, DecoderParams]:
    rng = np.random.default_rng(0)  # placeholder values, overwritten below
    decoder = DecoderParams.init(
        rng, embed_dim, num_layers, head_count=head_count,
        activation=activation, separate_causal=separate_causal,
    )
    if has_w_novel:
        decoder.w_novel = parameter(np.zeros((len(novel_class_ids), embed_dim)))
    prompts = PromptSet(
        v_base=parameter(np.zeros((len(base_class_ids), embed_dim))),
        v_novel=parameter(np.zeros((len(novel_class_ids), embed_dim))),
        base_class_ids=list(base_class_ids),
        novel_class_ids=list(novel_class_ids),
    )
    targets = {**prompts.tensors(), **decoder.tensors()}
    if set(targets) != set(arrays):
        missing = set(targets) ^ set(arrays)
        raise ConfigurationError(f"checkpoint tensor names mismatch: {sorted(missing)}")
    for name, t in targets.items():
        t.data = arrays[name].copy()
    return prompts, decoder


# -- checkpoint files -----------------------------------------------------------------


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    tensors = {n: t.data for n, t in ckpt.all_tensors().items()}
    manifest = dict(ckpt.manifest)
    manifest.update(
        {
            "kind": "checkpoint",
            "embed_dim": ckpt.prompts.v_base.shape[1],
            "num_layers": ckpt.decoder.num_layers,
            "head_count": ckpt.decoder.layers[0].self_attn.head_count if ckpt.decoder.layers else 1,
            "activation": ckpt.decoder.head_mlp.activation,
            "base_class_ids": list(ckpt.prompts.base_class_ids),
            "novel_class_ids": list(ckpt.prompts.novel_class_ids),
            "separate_causal": ckpt.decoder.causal_separate is not None,
            "has_w_novel": ckpt.decoder.w_novel is not None,
            "trainable": {n: t.requires_grad for n, t in ckpt.all_tensors().items()},
        }
    )
    ad.save_archive(path, tensors, manifest)


def load_checkpoint(path) -> Checkpoint:
    arrays, mf = ad.load_archive(path)
    prompts, decoder = _rebuild_structs(
        embed_dim=mf["embed_dim"],
        num_layers=mf["num_layers"],
        head_count=mf["head_count"],
        activation=mf["activation"],
        base_class_ids=mf["base_class_ids"],
        novel_class_ids=mf["novel_class_ids"],
        separate_causal=mf["separate_causal"],
        has_w_novel=mf["has_w_novel"],
        arrays=arrays,
    )
    ckpt = Checkpoint(prompts=prompts, decoder=decoder, manifest=mf)
    for n, t in ckpt.all_tensors().items():
        t.requires_grad = bool(mf.get("trainable", {}).get(n, False))
    return ckpt


# -- base training ---------------------------------------------------------------------


def train_base(world: SyntheticWorld, split: Split, cfg: RunConfig, log: TrainingLog | None = None) -> Checkpoint:
    log = log or TrainingLog()
    prompts, decoder = init_base_model(world, split, cfg)
    scenes = build_base_trainset(world, split, cfg.train.trainset_size, seed=cfg.seed * 11 + 1)
    label_idx = [labels_to_indices(s.labels, prompts.class_ids) for s in scenes]

    trainable = base_trainable_tensors(prompts, decoder)
    apply_freeze(prompts, decoder, trainable)
    opt = AdamW(lr=cfg.train.base_lr, weight_decay=cfg.train.weight_decay)
    bs = min(cfg.train.batch_size, len(scenes))

    last_good: dict[str, np.ndarray] | None = None
    last_loss = float("nan")
    for it in range(cfg.train.base_iters):
        picks = [(it * bs + j) % len(scenes) for j in range(bs)]
        zero_grad(trainable.values())
        loss = None
        for idx in picks:
            seg = full_forward(prompts, scenes[idx].pyramid, decoder, cfg.causal_attention)
            ce = pixel_ce(seg.probs, label_idx[idx])
            loss = ce if loss is None else loss + ce
        loss = loss * (1.0 / bs)
        value = loss.item()
        if np.isnan(value):
            if last_good is not None:
                for n, t in trainable.items():
                    t.data = last_good[n]
            log.append({"iter": it, "phase": "base", "event": "nan-abort", "loss": value})
            break
        last_good = {n: t.data.copy() for n, t in trainable.items()}
        last_loss = value
        backward(loss)
        opt.step(trainable)
        log.append({"iter": it, "phase": "base", "loss": value, "lr": cfg.train.base_lr,
                    "terms": {"ce": value}})

    return Checkpoint(
        prompts=prompts,
        decoder=decoder,
        manifest={"config": cfg.digest(), "iteration": cfg.train.base_iters, "final_loss": last_loss},
    )


# -- novel fine-tuning -------------------------------------------------------------------


def _support_batch(episode: Episode, class_ids: list[int]) -> list[tuple[FeaturePyramid, np.ndarray]]:
    """Support scenes with labels: the novel class where masked, else background."""
    batch = []
    for cid in episode.novel_class_ids:
        for shot in episode.support.shots[cid]:
            labels = np.where(shot.mask == 1, cid, 0)
            batch.append((shot.pyramid, labels_to_indices(labels, class_ids)))
    return batch


def prepare_novel_state(
    base_ckpt: Checkpoint, episode: Episode, cfg: RunConfig
) -> tuple[PromptSet, DecoderParams]:
    """Fresh fine-tunable copy of the base model, with novel prompts and the
    residual head initialized per config (the base checkpoint is untouched)."""
    base_prompts, decoder = clone_state(base_ckpt.prompts, base_ckpt.decoder)
    dim = base_prompts.v_base.shape[1]
    n = len(episode.novel_class_ids)

    if cfg.prompt_init == "masked-pooling":
        v_novel_init = init_novel_prompts(episode.support, episode.novel_class_ids)
        w_novel_init = init_novel_prompts(episode.support, episode.novel_class_ids)
    else:
        rng = np.random.default_rng([cfg.seed, 0x7A2D])
        v_novel_init = rng.normal(scale=RANDOM_PROMPT_SIGMA, size=(n, dim))
        w_novel_init = rng.normal(scale=RANDOM_PROMPT_SIGMA, size=(n, dim))

    prompts = PromptSet(
        v_base=base_prompts.v_base,
        v_novel=parameter(v_novel_init),
        base_class_ids=list(base_ckpt.prompts.base_class_ids),
        novel_class_ids=list(episode.novel_class_ids),
    )
    decoder.w_novel = parameter(w_novel_init)
    if cfg.causal_attention == "separate" and decoder.causal_separate is None:
        from .blocks import CausalAttentionParams

        rng = np.random.default_rng([cfg.seed, 0x5E9A])
        decoder.causal_separate = [
            CausalAttentionParams.init(rng, dim) for _ in range(decoder.num_layers)
        ]

    trainable = finetune_trainable_tensors(prompts, decoder, cfg)
    apply_freeze(prompts, decoder, trainable)
    return prompts, decoder


def _ce_steps(
    prompts: PromptSet,
    decoder: DecoderParams,
    trainable: dict[str, Tensor],
    opt: AdamW,
    batch: list[tuple[FeaturePyramid, np.ndarray]],
    iters: int,
    cfg: RunConfig,
    log: TrainingLog,
    phase: str,
    start_iter: int = 0,
) -> None:
    """Plain support cross-entropy steps; shared verbatim by inductive
    fine-tuning and the warmup phase of transductive tuning."""
    for it in range(start_iter, start_iter + iters):
        zero_grad(trainable.values())
        loss = None
        for pyramid, labels in batch:
            seg = full_forward(prompts, pyramid, decoder, cfg.causal_attention, cfg.causal_residual)
            ce = pixel_ce(seg.probs, labels)
            loss = ce if loss is None else loss + ce
        loss = loss * (1.0 / len(batch))
        backward(loss)
        opt.step(trainable)
        log.append(
            {
                "iter": it,
                "phase": phase,
                "loss": loss.item(),
                "lr": cfg.train.finetune_lr,
                "terms": {"ce": loss.item(), "query_entropy": 0.0, "marginal": 0.0, "kd": 0.0},
                "weights": {"alpha": 0.0, "gamma": 0.0},
            }
        )


def finetune_inductive(
    base_ckpt: Checkpoint, episode: Episode, cfg: RunConfig, log: TrainingLog | None = None
) -> Checkpoint:
    """Support-set cross-entropy fine-tuning of the permitted parameters."""
    if not episode.support.shots or all(len(s) == 0 for s in episode.support.shots.values()):
        raise ValueError("episode has an empty support set")
    log = log or TrainingLog()
    prompts, decoder = prepare_novel_state(base_ckpt, episode, cfg)
    trainable = finetune_trainable_tensors(prompts, decoder, cfg)
    batch = _support_batch(episode, prompts.class_ids)
    opt = AdamW(lr=cfg.train.finetune_lr, weight_decay=cfg.train.weight_decay)
    _ce_steps(prompts, decoder, trainable, opt, batch, cfg.train.finetune_iters, cfg, log, "ce")
    return Checkpoint(
        prompts=prompts,
        decoder=decoder,
        manifest={"config": cfg.digest(), "iteration": cfg.train.finetune_iters},
    )


# -- transductive tuning -----------------------------------------------------------------


def _frozen_base_probs(base_ckpt: Checkpoint, pyramid: FeaturePyramid, cfg: RunConfig) -> np.ndarray:
    """Base-class distribution of the frozen post-base-training model on one
    image; the knowledge-distillation anchor, computed once."""
    seg = full_forward(base_ckpt.prompts, pyramid, base_ckpt.decoder, cfg.causal_attention)
    return seg.probs.data.copy()


def tune_transductive(
    base_ckpt: Checkpoint,
    episode: Episode,
    query: Scene,
    cfg: RunConfig,
    log: TrainingLog | None = None,
) -> tuple[Checkpoint, SegOutput]:
    """Test-time optimization for one unlabeled image.

    Runs `ce_only_iters` of support cross-entropy, snapshots the region
    prior from the query predictions at the switch, then `full_iters` of the
    full composite objective. The base checkpoint is never touched; every
    image gets fresh parameter copies.
    """
    log = log or TrainingLog()
    tcfg = cfg.transductive
    prompts, decoder = prepare_novel_state(base_ckpt, episode, cfg)
    trainable = finetune_trainable_tensors(prompts, decoder, cfg)
    batch = _support_batch(episode, prompts.class_ids)
    opt = AdamW(lr=cfg.train.finetune_lr, weight_decay=cfg.train.weight_decay)

    _ce_steps(prompts, decoder, trainable, opt, batch, tcfg.ce_only_iters, cfg, log, "ce")

    num_base = prompts.num_base
    old_base_joint = _frozen_base_probs(base_ckpt, query.pyramid, cfg)  # (pixels, B)
    if tcfg.full_iters > 0:
        if tcfg.prior_mode == "oracle":
            index_of = {cid: i for i, cid in enumerate(prompts.class_ids)}
            prior = oracle_prior(query.labels, index_of, len(prompts.class_ids))
        else:
            seg = full_forward(prompts, query.pyramid, decoder, cfg.causal_attention, cfg.causal_residual)
            prior = estimate_prior(seg.probs)

        for it in range(tcfg.ce_only_iters, tcfg.ce_only_iters + tcfg.full_iters):
            zero_grad(trainable.values())
            support_ce = None
            for pyramid, labels in batch:
                seg = full_forward(prompts, pyramid, decoder, cfg.causal_attention, cfg.causal_residual)
                ce = pixel_ce(seg.probs, labels)
                support_ce = ce if support_ce is None else support_ce + ce
            support_ce = support_ce * (1.0 / len(batch))

            query_seg = full_forward(prompts, query.pyramid, decoder, cfg.causal_attention, cfg.causal_residual)
            entropy = predictive_entropy(query_seg.probs)
            conditional = conditional_entropy(support_ce, query_seg.probs)
            marginal = marginal_entropy(query_seg.probs, prior)
            distill = kd_loss(base_block(query_seg.probs, num_base), old_base_joint)
            loss = transductive_loss(conditional, marginal, distill, tcfg)
            backward(loss)
            opt.step(trainable)
            log.append(
                {
                    "iter": it,
                    "phase": "transductive",
                    "loss": loss.item(),
                    "lr": cfg.train.finetune_lr,
                    "terms": {
                        "ce": support_ce.item(),
                        "query_entropy": entropy.item(),
                        "marginal": marginal.item(),
                        "kd": distill.item(),
                    },
                    "weights": {"alpha": tcfg.alpha, "gamma": tcfg.gamma},
                }
            )

    final = full_forward(prompts, query.pyramid, decoder, cfg.causal_attention, cfg.causal_residual)
    ckpt = Checkpoint(
        prompts=prompts,
        decoder=decoder,
        manifest={"config": cfg.digest(), "iteration": tcfg.total_iters},
    )
    return ckpt, final


# -- evaluation drivers --------------------------------------------------------------------


def evaluate_checkpoint(ckpt: Checkpoint, scenes: list[Scene], cfg: RunConfig,
                        base_ids: list[int], novel_ids: list[int]) -> EvalReport:
    preds = [predict_labels(ckpt.prompts, s.pyramid, ckpt.decoder, cfg) for s in scenes]
    report = evaluate(preds, [s.labels for s in scenes], base_ids, novel_ids,
                      include_background=cfg.include_background)
    from .evaluation import size_bucket_report

    report.size_buckets = size_bucket_report(preds, scenes)
    return report


def run_episode(
    base_ckpt: Checkpoint, episode: Episode, cfg: RunConfig, log: TrainingLog | None = None
) -> tuple[EvalReport, Checkpoint]:
    """Fine-tune per config mode and score the episode's query set."""
    if cfg.mode == "transductive":
        preds, ckpt = [], None
        for query in episode.queries:
            ckpt, seg = tune_transductive(base_ckpt, episode, query, cfg, log)
            preds.append(indices_to_labels(seg.argmax_map, ckpt.prompts.class_ids))
        report = evaluate(
            preds, [q.labels for q in episode.queries],
            episode.base_class_ids, episode.novel_class_ids,
            include_background=cfg.include_background,
        )
        from .evaluation import size_bucket_report

        report.size_buckets = size_bucket_report(preds, episode.queries)
        return report, ckpt
    ckpt = finetune_inductive(base_ckpt, episode, cfg, log)
    report = evaluate_checkpoint(ckpt, episode.queries, cfg,
                                 episode.base_class_ids, episode.novel_class_ids)
    return report, ckpt


def run_seed(world_seed: int, cfg: RunConfig, base_ckpt: Checkpoint | None = None,
             log: TrainingLog | None = None) -> tuple[EvalReport, Checkpoint, Checkpoint]:
    """World + split + base training + episode for one seed; returns
    (report, base checkpoint, fine-tuned checkpoint)."""
    cfg = replace(cfg, seed=world_seed, world=replace(cfg.world, seed=world_seed))
    world = generate_world_cached(cfg.world)
    split = make_split(world, cfg.split_index)
    if base_ckpt is None:
        base_ckpt = train_base(world, split, cfg, log)
    episode = build_episode(world, split, cfg.shots, seed=cfg.seed, num_queries=cfg.num_queries)
    report, tuned = run_episode(base_ckpt, episode, cfg, log)
    return report, base_ckpt, tuned


_WORLD_CACHE: dict[tuple, SyntheticWorld] = {}


def generate_world_cached(config: WorldConfig) -> SyntheticWorld:
    from .episodes import generate_world

    key = tuple(sorted((k, str(v)) for k, v in asdict(config).items()))
    if key not in _WORLD_CACHE:
        _WORLD_CACHE[key] = generate_world(config)
    return _WORLD_CACHE[key]


# -- ablation and sweep drivers ----------------------------------------------------------------


ABLATION_ROWS = [
    # (row, causal attention, prompt init, transduction) -- the seven studied variants
    (1, "none", "random", False),
    (2, "none", "masked-pooling", False),
    (3, "first-layer", "masked-pooling", False),
    (4, "separate", "masked-pooling", False),
    (5, "shared", "random", False),
    (6, "shared", "masked-pooling", False),
    (7, "shared", "masked-pooling", True),
]


def _averaged(reports: list[EvalReport]) -> dict:
    base = float(np.mean([r.base_miou for r in reports]))
    novel = float(np.mean([r.novel_miou for r in reports]))
    return {"base": base, "novel": novel, "mean": (base + novel) / 2.0}


def run_ablation_suite(cfg: RunConfig, seeds: list[int], log: TrainingLog | None = None) -> list[dict]:
    """All seven variants over shared seeds (and shared per-seed base models)."""
    base_ckpts: dict[int, Checkpoint] = {}
    rows = []
    for row, causal, init_mode, transduce in ABLATION_ROWS:
        reports = []
        for seed in seeds:
            row_cfg = replace(
                cfg,
                causal_attention=causal,
                prompt_init=init_mode,
                mode="transductive" if transduce else "inductive",
            )
            report, base_ckpt, _ = run_seed(seed, row_cfg, base_ckpts.get(seed), log)
            base_ckpts.setdefault(seed, base_ckpt)
            reports.append(report)
        entry = {"row": row, "causal_attention": causal, "prompt_init": init_mode,
                 "transduction": transduce}
        entry.update(_averaged(reports))
        rows.append(entry)
    return rows


def sweep_shots(cfg: RunConfig, shot_values: list[int], seeds: list[int]) -> list[dict]:
    base_ckpts: dict[int, Checkpoint] = {}
    rows = []
    for k in shot_values:
        reports = []
        for seed in seeds:
            k_cfg = replace(cfg, shots=k)
            report, base_ckpt, _ = run_seed(seed, k_cfg, base_ckpts.get(seed))
            base_ckpts.setdefault(seed, base_ckpt)
            reports.append(report)
        entry = {"shots": k}
        entry.update(_averaged(reports))
        rows.append(entry)
    return rows


def sweep_transduction_start(cfg: RunConfig, starts: list[int], seeds: list[int]) -> list[dict]:
    """Vary the iteration at which the composite losses kick in, keeping the
    total optimization length fixed."""
    total = cfg.transductive.total_iters
    base_ckpts: dict[int, Checkpoint] = {}
    rows = []
    for start in starts:
        if start > total:
            raise ConfigurationError(f"start {start} exceeds total iterations {total}")
        reports = []
        for seed in seeds:
            s_cfg = replace(
                cfg,
                mode="transductive",
                transductive=replace(cfg.transductive, ce_only_iters=start, full_iters=total - start),
            )
            report, base_ckpt, _ = run_seed(seed, s_cfg, base_ckpts.get(seed))
            base_ckpts.setdefault(seed, base_ckpt)
            reports.append(report)
        entry = {"start": start}
        entry.update(_averaged(reports))
        rows.append(entry)
    return rows


def sweep_iterations(cfg: RunConfig, iter_values: list[int], seeds: list[int]) -> list[dict]:
    """Inductive fine-tuning length sweep (novel learning curve driver)."""
    base_ckpts: dict[int, Checkpoint] = {}
    rows = []
    for iters in iter_values:
        reports = []
        for seed in seeds:
            i_cfg = replace(cfg, mode="inductive", train=replace(cfg.train, finetune_iters=iters))
            report, base_ckpt, _ = run_seed(seed, i_cfg, base_ckpts.get(seed))
            base_ckpts.setdefault(seed, base_ckpt)
            reports.append(report)
        entry = {"iterations": iters}
        entry.update(_averaged(reports))
        rows.append(entry)
    return rows
