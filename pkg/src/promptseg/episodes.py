"""Synthetic task generation: worlds, scenes, splits, supports, episodes.

A world is a set of unit-norm class prototypes with a controlled pairwise
cosine ceiling (learnable but confusable classes) plus a noise level. Scenes
place 1-4 non-overlapping rectangular class regions on the grid; each pixel's
feature is its class prototype plus Gaussian noise, and coarser pyramid
levels are 2x2 average-pooled copies of the finest level. All generation is
a pure function of the seeds involved.

Class id 0 is the background and owns prototype row 0; foreground classes
are 1..F. A split designates two foreground classes as novel; during base
training novel pixels are relabelled to background, and support scenes for a
novel class mask exactly that class's pixels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .blocks import ConfigurationError
from .decoder import FeaturePyramid


class EmptyMaskError(ValueError):
    """A support shot mask has no foreground pixels."""


@dataclass
class WorldConfig:
    num_foreground: int = 7
    embed_dim: int = 32
    grid: tuple[int, int] = (16, 16)
    noise_sigma: float = 0.25
    cos_ceiling: float = 0.6
    num_levels: int = 3
    seed: int = 0
    # prototypes draw most of their mass from a small shared concept basis,
    # so classes are related (confusable) rather than independent directions;
    # a ceiling of 0 switches to fully orthogonal prototypes instead
    concept_count: int = 5
    concept_share: float = 0.75
    # every placed region additionally gets one appearance offset shared by
    # all its pixels, drawn in a style subspace orthogonal to every class
    # direction (scale = instance_scale * noise_sigma): instances of a class
    # vary in ways that carry no class information, so a prototype pooled
    # from one support instance is biased no matter how many pixels it covers
    instance_scale: float = 1.0
    style_count: int = 6


@dataclass
class SyntheticWorld:
    prototypes: np.ndarray  # (1 + num_foreground, C), unit rows; row 0 = background
    config: WorldConfig
    concepts: np.ndarray | None = None  # shared basis the prototypes mix
    styles: np.ndarray | None = None  # class-orthogonal appearance directions

    @property
    def num_classes(self) -> int:
        return self.prototypes.shape[0]

    @property
    def foreground_ids(self) -> list[int]:
        return list(range(1, self.num_classes))


@dataclass
class Region:
    class_id: int
    top: int
    left: int
    height: int
    width: int

    @property
    def area(self) -> int:
        return self.height * self.width

    def pixel_mask(self, grid: tuple[int, int]) -> np.ndarray:
        m = np.zeros(grid, dtype=bool)
        m[self.top : self.top + self.height, self.left : self.left + self.width] = True
        return m


@dataclass
class Scene:
    pyramid: FeaturePyramid
    labels: np.ndarray  # (H, W) int class ids, 0 = background
    regions: list[Region]


@dataclass
class Split:
    split_id: int
    base_class_ids: list[int]  # includes background id 0
    novel_class_ids: list[int]

    def __post_init__(self):
        if set(self.base_class_ids) & set(self.novel_class_ids):
            raise ConfigurationError("split base and novel ids overlap")


@dataclass
class Shot:
    pyramid: FeaturePyramid
    mask: np.ndarray  # (H, W) binary, 1 on the novel class pixels


@dataclass
class SupportSet:
    shots: dict[int, list[Shot]]  # novel class id -> K shots
    rejected_scenes: int  # multi-novel candidates discarded during generation


@dataclass
class Episode:
    split_id: int
    base_class_ids: list[int]
    novel_class_ids: list[int]
    support: SupportSet
    queries: list[Scene]
    shots: int
    seed: int

    def __post_init__(self):
        novel = set(self.novel_class_ids)
        for cid, shots in self.support.shots.items():
            for k, shot in enumerate(shots):
                uniq = set(np.unique(shot.mask))
                if not uniq <= {0, 1}:
                    raise ConfigurationError(f"support mask for class {cid} shot {k} is not binary")
                if shot.mask.sum() == 0:
                    raise EmptyMaskError(f"support mask for class {cid} shot {k} is empty")
        for q in self.queries:
            present = set(np.unique(q.labels)) - {0}
            if not present <= set(self.base_class_ids) | novel:
                raise ConfigurationError("query labels outside the split's classes")


# -- world generation ------------------------------------------------------------


def _orthonormal_rows(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    raw = rng.normal(size=(count, dim))
    q, _ = np.linalg.qr(raw.T)
    return q.T[:count]


def generate_world(config: WorldConfig) -> SyntheticWorld:
    """Unit prototypes whose pairwise |cos| stays under the ceiling.

    Each prototype mixes a couple of directions from a shared orthonormal
    concept basis with its own unique orthogonal component, so classes are
    related but distinguishable. Candidates exceeding the ceiling get their
    projections onto offending earlier prototypes removed (Gram-Schmidt
    style) until they comply. A ceiling of 0 yields mutually orthogonal
    prototypes and needs count <= embed_dim.
    """
    count = 1 + config.num_foreground
    rng = np.random.default_rng([config.seed, 0x570])
    if config.cos_ceiling < 1e-12:
        if count > config.embed_dim:
            raise ConfigurationError(
                f"cannot fit {count} mutually orthogonal prototypes in dimension {config.embed_dim}"
            )
        return SyntheticWorld(
            prototypes=_orthonormal_rows(rng, count, config.embed_dim), config=config
        )

    span = config.concept_count + config.style_count + count
    if span > config.embed_dim:
        raise ConfigurationError(
            f"{config.concept_count} concepts + {config.style_count} styles + {count} "
            f"unique components exceed dimension {config.embed_dim}"
        )
    basis = _orthonormal_rows(rng, span, config.embed_dim)
    concepts = basis[: config.concept_count]
    styles = basis[config.concept_count : config.concept_count + config.style_count]
    uniques = basis[config.concept_count + config.style_count :]

    protos: list[np.ndarray] = [uniques[0]]  # background: unstructured, shares no concept
    share = config.concept_share
    for k in range(1, count):
        placed = False
        for attempt in range(200):
            picks = rng.choice(config.concept_count, size=2, replace=False)
            weights = rng.uniform(0.4, 1.0, size=2)
            combo = weights @ concepts[picks]
            combo /= np.linalg.norm(combo)
            v = np.sqrt(share) * combo + np.sqrt(1.0 - share) * uniques[k]
            v /= np.linalg.norm(v)
            for _pass in range(50):
                offenders = [p for p in protos if abs(float(v @ p)) > config.cos_ceiling]
                if not offenders:
                    break
                for p in offenders:
                    v = v - (v @ p) * p
                norm = np.linalg.norm(v)
                if norm < 1e-9:
                    break
                v /= norm
            if protos and max(abs(float(v @ p)) for p in protos) > config.cos_ceiling + 1e-12:
                continue
            if abs(np.linalg.norm(v) - 1.0) > 1e-9:
                continue
            protos.append(v)
            placed = True
            break
        if not placed:
            raise ConfigurationError(
                f"cosine ceiling {config.cos_ceiling} infeasible for {count} prototypes "
                f"in dimension {config.embed_dim}"
            )
    return SyntheticWorld(
        prototypes=np.stack(protos), config=config, concepts=concepts, styles=styles
    )


def make_split(world: SyntheticWorld, split_index: int, novel_per_split: int = 2) -> Split:
    """Rotating novel ids over the foreground classes, four splits per world."""
    fg = world.foreground_ids
    start = (split_index * novel_per_split) % len(fg)
    novel = [fg[(start + j) % len(fg)] for j in range(novel_per_split)]
    base = [0] + [c for c in fg if c not in novel]
    return Split(split_id=split_index, base_class_ids=base, novel_class_ids=novel)


# -- scene rendering ---------------------------------------------------------------


def _pool2x2(grid_feats: np.ndarray) -> np.ndarray:
    h, w, c = grid_feats.shape
    return grid_feats.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))


def _build_pyramid(grid_feats: np.ndarray, num_levels: int) -> FeaturePyramid:
    levels_fine_to_coarse = [grid_feats]
    for _ in range(num_levels - 1):
        levels_fine_to_coarse.append(_pool2x2(levels_fine_to_coarse[-1]))
    levels, dims = [], []
    for lv in reversed(levels_fine_to_coarse):  # coarse -> fine
        h, w, c = lv.shape
        levels.append(lv.reshape(h * w, c))
        dims.append((h, w))
    return FeaturePyramid(levels=levels, dims=dims)


def _rect_for_area(rng: np.random.Generator, target_area: int, grid: tuple[int, int]) -> tuple[int, int]:
    """Rectangle sides whose product tracks the target area as closely as the
    grid allows (within one pixel for any region that fits the grid)."""
    gh, gw = grid
    aspect = rng.uniform(0.6, 1.6)
    preferred_h = np.sqrt(target_area * aspect)
    best: tuple[int, int, int] | None = None  # (err, aspect-dist rank, h)
    best_w = 1
    for h in range(1, gh + 1):
        w = min(max(int(round(target_area / h)), 1), gw)
        err = abs(h * w - target_area)
        rank = (err, abs(h - preferred_h))
        if best is None or rank < (best[0], best[1]):
            best = (err, abs(h - preferred_h), h)
            best_w = w
    return best[2], best_w


def _place_regions(
    rng: np.random.Generator,
    class_ids: list[int],
    fractions: list[float],
    grid: tuple[int, int],
) -> list[Region]:
    gh, gw = grid
    occupied = np.zeros(grid, dtype=bool)
    regions: list[Region] = []
    for cid, frac in zip(class_ids, fractions):
        h, w = _rect_for_area(rng, max(1, round(frac * gh * gw)), grid)
        for _attempt in range(120):
            top = int(rng.integers(0, gh - h + 1))
            left = int(rng.integers(0, gw - w + 1))
            patch = occupied[top : top + h, left : left + w]
            if not patch.any():
                occupied[top : top + h, left : left + w] = True
                regions.append(Region(cid, top, left, h, w))
                break
        # a region that cannot be placed without overlap is dropped
    return regions


def render_scene(
    world: SyntheticWorld,
    layout_seed: int,
    class_ids: list[int] | None = None,
    size_fractions: list[float] | None = None,
    size_range: tuple[float, float] = (0.05, 0.3),
) -> Scene:
    """One scene: rectangles on the grid, prototype-plus-noise features.

    Classes and sizes are drawn from the world's defaults when not given.
    Regions never overlap, so the painted label areas equal the rectangle
    areas requested (up to integer rounding of the rectangle sides).
    """
    cfg = world.config
    rng = np.random.default_rng([cfg.seed, 0x5CE, layout_seed])
    if class_ids is None:
        count = int(rng.integers(1, 5))
        class_ids = list(rng.choice(world.foreground_ids, size=count, replace=False))
    if size_fractions is None:
        size_fractions = list(rng.uniform(*size_range, size=len(class_ids)))
    regions = _place_regions(rng, [int(c) for c in class_ids], size_fractions, cfg.grid)

    labels = np.zeros(cfg.grid, dtype=np.int64)
    for r in regions:
        labels[r.top : r.top + r.height, r.left : r.left + r.width] = r.class_id
    feats = world.prototypes[labels].copy()  # (H, W, C)
    if cfg.noise_sigma > 0:
        instance_sigma = cfg.instance_scale * cfg.noise_sigma
        if instance_sigma > 0 and world.styles is not None:
            for r in regions:
                coeffs = rng.normal(size=world.styles.shape[0])
                offset = coeffs @ world.styles / np.sqrt(world.styles.shape[0])
                feats[r.top : r.top + r.height, r.left : r.left + r.width] += instance_sigma * offset
        feats = feats + rng.normal(scale=cfg.noise_sigma, size=feats.shape)
    return Scene(pyramid=_build_pyramid(feats, cfg.num_levels), labels=labels, regions=regions)


def relabel_novel_as_background(labels: np.ndarray, novel_ids: list[int]) -> np.ndarray:
    out = labels.copy()
    out[np.isin(out, novel_ids)] = 0
    return out


def build_base_trainset(
    world: SyntheticWorld,
    split: Split,
    count: int,
    seed: int = 1,
    novel_region_rate: float = 0.15,
) -> list[Scene]:
    """Scenes for base training; novel-class pixels are relabelled background.

    Novel-class regions appear at a configurable rate (they are present in
    the training imagery but unlabeled), so the background class absorbs
    novel features without fully entrenching on them."""
    scenes = []
    base_fg = [c for c in split.base_class_ids if c != 0]
    for i in range(count):
        layout_seed = seed * 100_000 + i
        rng = np.random.default_rng([world.config.seed, 0xBA5E, layout_seed])
        k = int(rng.integers(1, 5))
        class_ids = []
        for _ in range(k):
            pool = split.novel_class_ids if rng.random() < novel_region_rate else base_fg
            remaining = [c for c in pool if c not in class_ids]
            if not remaining:
                remaining = [c for c in world.foreground_ids if c not in class_ids]
            if remaining:
                class_ids.append(int(rng.choice(remaining)))
        scene = render_scene(world, layout_seed=layout_seed, class_ids=class_ids)
        scene.labels = relabel_novel_as_background(scene.labels, split.novel_class_ids)
        scenes.append(scene)
    return scenes


def build_support(world: SyntheticWorld, split: Split, shots: int, seed: int = 2) -> SupportSet:
    """K single-novel-class scenes per novel class.

    Candidate scenes put the target novel object in context: its two most
    similar base classes (the ones it will be confused with) plus one random
    foreground class. Any candidate containing a second novel class is
    rejected and regenerated (the count of rejections is reported).
    """
    rejected = 0
    result: dict[int, list[Shot]] = {}
    novel = set(split.novel_class_ids)
    base_fg = [c for c in split.base_class_ids if c != 0]
    for cid in split.novel_class_ids:
        relatives = sorted(
            base_fg, key=lambda b: -abs(float(world.prototypes[cid] @ world.prototypes[b]))
        )[:2]
        shots_for_class: list[Shot] = []
        attempt = 0
        while len(shots_for_class) < shots:
            layout_seed = seed * 1_000_000 + cid * 10_000 + attempt
            attempt += 1
            rng = np.random.default_rng([world.config.seed, 0x50F, layout_seed])
            others = [c for c in world.foreground_ids if c != cid and c not in relatives]
            context = relatives + list(rng.choice(others, size=2, replace=False))
            class_ids = [cid] + context
            # support objects are small: the few-shot prototype estimate has
            # to come from a handful of noisy pixels
            scene = render_scene(
                world, layout_seed=layout_seed, class_ids=class_ids, size_range=(0.04, 0.10)
            )
            present = set(np.unique(scene.labels)) & novel
            if present != {cid}:
                rejected += 1  # absent target or a second novel category
                continue
            mask = (scene.labels == cid).astype(np.int64)
            shots_for_class.append(Shot(pyramid=scene.pyramid, mask=mask))
        result[cid] = shots_for_class
    return SupportSet(shots=result, rejected_scenes=rejected)


def build_queries(
    world: SyntheticWorld, split: Split, count: int, seed: int = 3
) -> list[Scene]:
    """Evaluation scenes containing both base and novel regions."""
    queries = []
    for i in range(count):
        layout_seed = seed * 2_000_000 + i
        rng = np.random.default_rng([world.config.seed, 0x0E7, layout_seed])
        forced_novel = split.novel_class_ids[i % len(split.novel_class_ids)]
        others = [c for c in world.foreground_ids if c != forced_novel]
        extra = int(rng.integers(1, 4))
        class_ids = [forced_novel] + list(rng.choice(others, size=extra, replace=False))
        queries.append(
            render_scene(world, layout_seed=layout_seed, class_ids=class_ids, size_range=(0.08, 0.3))
        )
    return queries


def build_episode(
    world: SyntheticWorld,
    split: Split,
    shots: int,
    seed: int = 0,
    num_queries: int = 6,
) -> Episode:
    support = build_support(world, split, shots, seed=seed * 7 + 2)
    queries = build_queries(world, split, num_queries, seed=seed * 7 + 3)
    return Episode(
        split_id=split.split_id,
        base_class_ids=split.base_class_ids,
        novel_class_ids=split.novel_class_ids,
        support=support,
        queries=queries,
        shots=shots,
        seed=seed,
    )


# -- masked average pooling ---------------------------------------------------------


def init_novel_prompts(support: SupportSet, novel_class_ids: list[int]) -> np.ndarray:
    """Masked average global pooling of the k-shot support features.

    For each novel class: per shot, average the head-level feature vectors
    under the binary mask, then average over the K shots. Pooling happens at
    the finest pyramid level, the one the segmentation heads consume.
    """
    rows = []
    for cid in novel_class_ids:
        shots = support.shots[cid]
        acc = None
        for k, shot in enumerate(shots):
            h, w = shot.pyramid.head_dims
            feats = shot.pyramid.head_features.reshape(h, w, -1)
            weight = float(shot.mask.sum())
            if weight == 0:
                raise EmptyMaskError(f"all-zero mask for class {cid}, shot {k}")
            pooled = (shot.mask[..., None] * feats).sum(axis=(0, 1)) / weight
            acc = pooled if acc is None else acc + pooled
        rows.append(acc / len(shots))
    return np.stack(rows)


# -- episode archive ------------------------------------------------------------------


def save_episode(path, episode: Episode) -> None:
    tensors: dict[str, np.ndarray] = {}
    for cid, shots in episode.support.shots.items():
        for k, shot in enumerate(shots):
            for li, lv in enumerate(shot.pyramid.levels):
                tensors[f"support.{cid}.{k}.level{li}"] = lv
            tensors[f"support.{cid}.{k}.mask"] = shot.mask.astype(np.float64)
    for qi, scene in enumerate(episode.queries):
        for li, lv in enumerate(scene.pyramid.levels):
            tensors[f"query.{qi}.level{li}"] = lv
        tensors[f"query.{qi}.labels"] = scene.labels.astype(np.float64)
    manifest = {
        "kind": "episode",
        "split_id": episode.split_id,
        "base_class_ids": episode.base_class_ids,
        "novel_class_ids": episode.novel_class_ids,
        "shots": episode.shots,
        "seed": episode.seed,
        "rejected_scenes": episode.support.rejected_scenes,
        "level_dims": [list(d) for d in episode.queries[0].pyramid.dims]
        if episode.queries
        else [],
        "num_queries": len(episode.queries),
        "query_regions": [
            [[r.class_id, r.top, r.left, r.height, r.width] for r in q.regions]
            for q in episode.queries
        ],
    }
    ad.save_archive(path, tensors, manifest)


def load_episode(path) -> Episode:
    tensors, mf = ad.load_archive(path)
    dims = [tuple(d) for d in mf["level_dims"]]

    def pyramid(prefix):
        levels = [tensors[f"{prefix}.level{li}"] for li in range(len(dims))]
        return FeaturePyramid(levels=levels, dims=list(dims))

    shots: dict[int, list[Shot]] = {}
    for cid in mf["novel_class_ids"]:
        shots[cid] = []
        for k in range(mf["shots"]):
            prefix = f"support.{cid}.{k}"
            mask = tensors[f"{prefix}.mask"].astype(np.int64)
            shots[cid].append(Shot(pyramid=pyramid(prefix), mask=mask))
    queries = []
    for qi in range(mf["num_queries"]):
        regions = [Region(*map(int, r)) for r in mf["query_regions"][qi]]
        queries.append(
            Scene(
                pyramid=pyramid(f"query.{qi}"),
                labels=tensors[f"query.{qi}.labels"].astype(np.int64),
                regions=regions,
            )
        )
    return Episode(
        split_id=mf["split_id"],
        base_class_ids=list(mf["base_class_ids"]),
        novel_class_ids=list(mf["novel_class_ids"]),
        support=SupportSet(shots=shots, rejected_scenes=mf["rejected_scenes"]),
        queries=queries,
        shots=mf["shots"],
        seed=mf["seed"],
    )


def describe_episode(episode: Episode) -> str:
    lines = [
        f"episode seed={episode.seed} split={episode.split_id} shots={episode.shots}",
        f"base classes:  {episode.base_class_ids}",
        f"novel classes: {episode.novel_class_ids}",
        f"support scenes rejected during generation: {episode.support.rejected_scenes}",
    ]
    for cid, shots in episode.support.shots.items():
        areas = [int(s.mask.sum()) for s in shots]
        lines.append(f"  support class {cid}: {len(shots)} shots, mask areas {areas}")
    for qi, q in enumerate(episode.queries):
        present = sorted(set(np.unique(q.labels)))
        lines.append(f"  query {qi}: classes present {present}, {len(q.regions)} regions")
    return "\n".join(lines)
