import numpy as np
import pytest

import naive
from promptseg.blocks import ConfigurationError
from promptseg.decoder import FeaturePyramid
from promptseg.episodes import (
    EmptyMaskError,
    Shot,
    SupportSet,
    WorldConfig,
    build_base_trainset,
    build_episode,
    build_support,
    describe_episode,
    generate_world,
    init_novel_prompts,
    load_episode,
    make_split,
    render_scene,
    save_episode,
)


def _world(**overrides):
    return generate_world(WorldConfig(**overrides))


def test_world_generation_is_deterministic():
    a, b = _world(seed=5), _world(seed=5)
    assert a.prototypes.tobytes() == b.prototypes.tobytes()
    assert not np.array_equal(a.prototypes, _world(seed=6).prototypes)


def test_world_zero_ceiling_gives_orthogonal_prototypes():
    world = _world(cos_ceiling=0.0, num_foreground=7, embed_dim=32)
    gram = world.prototypes @ world.prototypes.T
    np.testing.assert_allclose(gram, np.eye(8), atol=1e-9)


def test_world_default_ceiling_holds_for_every_pair():
    world = _world()
    protos = world.prototypes
    np.testing.assert_allclose(np.linalg.norm(protos, axis=1), np.ones(len(protos)), atol=1e-12)
    for i in range(len(protos)):
        for j in range(i + 1, len(protos)):
            assert abs(protos[i] @ protos[j]) <= 0.6 + 1e-12


def test_world_infeasible_ceiling_raises():
    with pytest.raises(ConfigurationError, match="orthogonal"):
        _world(cos_ceiling=0.0, num_foreground=10, embed_dim=4)


def test_splits_rotate_and_stay_disjoint():
    world = _world()
    seen_novel = []
    for i in range(4):
        split = make_split(world, i)
        assert set(split.base_class_ids) & set(split.novel_class_ids) == set()
        assert 0 in split.base_class_ids
        assert len(split.novel_class_ids) == 2
        seen_novel.append(tuple(split.novel_class_ids))
    assert len(set(seen_novel)) == 4  # rotation actually moves


def test_render_full_frame_noiseless_scene_is_pure_prototype():
    world = _world(noise_sigma=0.0)
    scene = render_scene(world, layout_seed=1, class_ids=[3], size_fractions=[1.0])
    assert np.all(scene.labels == 3)
    h, w = scene.pyramid.head_dims
    feats = scene.pyramid.head_features.reshape(h, w, -1)
    np.testing.assert_array_equal(feats, np.broadcast_to(world.prototypes[3], feats.shape))


def test_pyramid_levels_are_2x2_averages_of_finer_level():
    world = _world()
    scene = render_scene(world, layout_seed=2)
    fine = scene.pyramid.levels[-1]
    mid = scene.pyramid.levels[-2]
    h, w = scene.pyramid.dims[-1]
    fine_grid = fine.reshape(h, w, -1)
    pooled = fine_grid.reshape(h // 2, 2, w // 2, 2, -1).mean(axis=(1, 3))
    np.testing.assert_allclose(mid.reshape(h // 2, w // 2, -1), pooled, atol=1e-14)


def test_region_areas_match_requested_fractions():
    world = _world()
    fractions = [0.05, 0.15, 0.35]
    scene = render_scene(world, layout_seed=3, class_ids=[1, 2, 3], size_fractions=fractions)
    assert len(scene.regions) == 3
    total = world.config.grid[0] * world.config.grid[1]
    for region, frac in zip(scene.regions, fractions):
        target = round(frac * total)
        painted = int((scene.labels == region.class_id).sum())
        assert abs(painted - target) <= 1
        assert painted == region.area  # no overlap erases region pixels


def test_scene_rendering_is_deterministic():
    world = _world()
    a = render_scene(world, layout_seed=9)
    b = render_scene(world, layout_seed=9)
    assert a.labels.tobytes() == b.labels.tobytes()
    assert a.pyramid.head_features.tobytes() == b.pyramid.head_features.tobytes()


def test_base_trainset_relabels_novel_to_background():
    world = _world()
    split = make_split(world, 0)
    scenes = build_base_trainset(world, split, count=100, seed=4)
    novel = set(split.novel_class_ids)
    saw_novel_region = False
    for scene in scenes:
        assert set(np.unique(scene.labels)) & novel == set()
        for region in scene.regions:
            if region.class_id in novel:
                saw_novel_region = True
                assert np.all(scene.labels[region.pixel_mask(world.config.grid)] == 0)
            elif region.class_id in split.base_class_ids:
                assert np.all(scene.labels[region.pixel_mask(world.config.grid)] == region.class_id)
    assert saw_novel_region  # the audit actually exercised the relabelling


def test_single_novel_scene_becomes_all_background():
    world = _world()
    split = make_split(world, 0)
    cid = split.novel_class_ids[0]
    scene = render_scene(world, layout_seed=11, class_ids=[cid], size_fractions=[0.3])
    from promptseg.episodes import relabel_novel_as_background

    out = relabel_novel_as_background(scene.labels, split.novel_class_ids)
    assert np.all(out == 0)


def test_support_has_k_shots_of_one_novel_class_each():
    world = _world()
    split = make_split(world, 0)
    support = build_support(world, split, shots=1, seed=5)
    assert set(support.shots) == set(split.novel_class_ids)
    for cid, shots in support.shots.items():
        assert len(shots) == 1
        assert shots[0].mask.sum() >= 1
        assert set(np.unique(shots[0].mask)) <= {0, 1}


def test_support_masks_exclude_base_pixels_and_multi_novel_scenes():
    world = _world()
    split = make_split(world, 1)
    support = build_support(world, split, shots=5, seed=6)
    assert support.rejected_scenes >= 1  # generation really had to discard candidates
    h0, w0 = world.config.grid
    for cid, shots in support.shots.items():
        for shot in shots:
            feats = shot.pyramid.head_features.reshape(h0, w0, -1)
            # masked pixels all carry the class prototype direction (noisy)
            masked_mean = feats[shot.mask == 1].mean(axis=0)
            sims = world.prototypes @ masked_mean / np.linalg.norm(masked_mean)
            assert int(np.argmax(sims)) == cid


def test_support_generation_is_deterministic():
    world = _world()
    split = make_split(world, 0)
    a = build_support(world, split, shots=2, seed=7)
    b = build_support(world, split, shots=2, seed=7)
    for cid in split.novel_class_ids:
        for sa, sb in zip(a.shots[cid], b.shots[cid]):
            assert sa.mask.tobytes() == sb.mask.tobytes()
            assert sa.pyramid.head_features.tobytes() == sb.pyramid.head_features.tobytes()


# -- masked average pooling -----------------------------------------------------


def _shot_from_grid(feats_grid: np.ndarray, mask: np.ndarray) -> Shot:
    h, w, c = feats_grid.shape
    return Shot(
        pyramid=FeaturePyramid(levels=[feats_grid.reshape(h * w, c)], dims=[(h, w)]),
        mask=mask,
    )


def test_masked_pooling_full_mask_is_plain_mean():
    rng = np.random.default_rng(8)
    feats = rng.normal(size=(4, 4, 6))
    support = SupportSet(shots={5: [_shot_from_grid(feats, np.ones((4, 4), dtype=np.int64))]}, rejected_scenes=0)
    out = init_novel_prompts(support, [5])
    np.testing.assert_allclose(out[0], feats.reshape(-1, 6).mean(axis=0), atol=1e-15)


def test_masked_pooling_single_pixel_mask_returns_that_feature():
    rng = np.random.default_rng(9)
    feats = rng.normal(size=(4, 4, 6))
    mask = np.zeros((4, 4), dtype=np.int64)
    mask[2, 1] = 1
    support = SupportSet(shots={5: [_shot_from_grid(feats, mask)]}, rejected_scenes=0)
    out = init_novel_prompts(support, [5])
    np.testing.assert_array_equal(out[0], feats[2, 1])


def test_masked_pooling_two_shot_hand_fixture():
    f1 = np.array([[[1.0, 0.0], [3.0, 2.0]], [[5.0, 4.0], [7.0, 6.0]]])  # 2x2x2
    m1 = np.array([[1, 0], [1, 0]])
    f2 = np.array([[[10.0, 1.0], [0.0, 0.0]], [[0.0, 0.0], [20.0, 3.0]]])
    m2 = np.array([[1, 0], [0, 1]])
    support = SupportSet(
        shots={9: [_shot_from_grid(f1, m1), _shot_from_grid(f2, m2)]}, rejected_scenes=0
    )
    out = init_novel_prompts(support, [9])
    shot1 = (np.array([1.0, 0.0]) + np.array([5.0, 4.0])) / 2.0
    shot2 = (np.array([10.0, 1.0]) + np.array([20.0, 3.0])) / 2.0
    np.testing.assert_allclose(out[0], (shot1 + shot2) / 2.0, atol=1e-15)


@pytest.mark.parametrize("seed", range(20))
def test_masked_pooling_matches_naive_loop(seed):
    rng = np.random.default_rng(seed + 3100)
    shots, feats_list, masks = [], [], []
    for _ in range(3):
        feats = rng.normal(size=(4, 4, 5))
        mask = (rng.random((4, 4)) < 0.4).astype(np.int64)
        mask[rng.integers(0, 4), rng.integers(0, 4)] = 1  # keep nonempty
        shots.append(_shot_from_grid(feats, mask))
        feats_list.append(feats)
        masks.append(mask)
    support = SupportSet(shots={3: shots}, rejected_scenes=0)
    out = init_novel_prompts(support, [3])
    np.testing.assert_allclose(out[0], naive.masked_pool(feats_list, masks), atol=1e-12)


def test_masked_pooling_is_linear_in_features():
    rng = np.random.default_rng(10)
    feats = rng.normal(size=(4, 4, 5))
    mask = np.ones((4, 4), dtype=np.int64)
    base = init_novel_prompts(SupportSet({2: [_shot_from_grid(feats, mask)]}, 0), [2])
    scaled = init_novel_prompts(SupportSet({2: [_shot_from_grid(feats * 3.5, mask)]}, 0), [2])
    np.testing.assert_allclose(scaled, base * 3.5, atol=1e-12)


def test_masked_pooling_empty_mask_names_class_and_shot():
    feats = np.zeros((2, 2, 3))
    support = SupportSet(
        shots={7: [_shot_from_grid(feats, np.zeros((2, 2), dtype=np.int64))]}, rejected_scenes=0
    )
    with pytest.raises(EmptyMaskError, match="class 7, shot 0"):
        init_novel_prompts(support, [7])


# -- episodes --------------------------------------------------------------------


def test_episode_determinism_is_bitwise():
    world = _world(seed=12)
    split = make_split(world, 0)
    a = build_episode(world, split, shots=2, seed=3)
    b = build_episode(world, split, shots=2, seed=3)
    for qa, qb in zip(a.queries, b.queries):
        assert qa.labels.tobytes() == qb.labels.tobytes()
        for la, lb in zip(qa.pyramid.levels, qb.pyramid.levels):
            assert la.tobytes() == lb.tobytes()
    for cid in split.novel_class_ids:
        for sa, sb in zip(a.support.shots[cid], b.support.shots[cid]):
            assert sa.mask.tobytes() == sb.mask.tobytes()


def test_every_query_contains_a_novel_class():
    world = _world()
    split = make_split(world, 2)
    episode = build_episode(world, split, shots=1, seed=1, num_queries=6)
    for q in episode.queries:
        assert set(np.unique(q.labels)) & set(split.novel_class_ids)


def test_episode_archive_round_trip(tmp_path):
    world = _world(seed=13)
    split = make_split(world, 1)
    episode = build_episode(world, split, shots=2, seed=5, num_queries=3)
    path = tmp_path / "episode.bin"
    save_episode(path, episode)
    loaded = load_episode(path)
    assert loaded.novel_class_ids == episode.novel_class_ids
    assert loaded.base_class_ids == episode.base_class_ids
    assert loaded.shots == episode.shots
    for qa, qb in zip(episode.queries, loaded.queries):
        assert qa.labels.tobytes() == qb.labels.tobytes()
        for la, lb in zip(qa.pyramid.levels, qb.pyramid.levels):
            assert la.tobytes() == lb.tobytes()
        assert [r.__dict__ for r in qa.regions] == [r.__dict__ for r in qb.regions]
    for cid in episode.novel_class_ids:
        for sa, sb in zip(episode.support.shots[cid], loaded.support.shots[cid]):
            assert sa.mask.tobytes() == sb.mask.tobytes()
            assert sa.pyramid.head_features.tobytes() == sb.pyramid.head_features.tobytes()


def test_describe_episode_summarizes_contents():
    world = _world()
    split = make_split(world, 0)
    episode = build_episode(world, split, shots=1, seed=2, num_queries=2)
    text = describe_episode(episode)
    assert f"novel classes: {split.novel_class_ids}" in text
    assert "query 1" in text
