from __future__ import annotations

import numpy as np
import pytest

from kerneladapt.datagen import (
    DataConfig,
    PhantomConfig,
    build_datasets,
    dataset_hash,
    generate_phantom,
    load_bundle,
    lung_bbox,
    preprocess,
    save_bundle,
    split_folds,
    synthesize_domain_pair,
)
from kerneladapt.recon import KernelSpec

MICRO = DataConfig(
    grid_size=64,
    n_angles=40,
    n_source_volumes=4,
    n_target_volumes=2,
    slices_per_volume=2,
    pairs_per_family=2,
)


@pytest.fixture(scope="module")
def micro_bundle():
    return build_datasets(MICRO, 11)


def test_phantom_intensity_landmarks():
    cfg = PhantomConfig(noise_hu=0.0)
    img, lesions, lungs = generate_phantom(np.random.default_rng(0), cfg)
    assert img.shape == (cfg.grid_size, cfg.grid_size)
    assert img.min() == pytest.approx(-1000.0)  # air background
    assert lungs.any()
    lung_wo_lesion = lungs & ~lesions
    assert np.median(img[lung_wo_lesion]) == pytest.approx(-800.0, abs=30.0)
    body_interior = (img > -500.0) & ~lungs
    assert np.median(img[body_interior]) == pytest.approx(0.0, abs=30.0)


def test_phantom_lesions_inside_lungs_and_configurable():
    cfg = PhantomConfig(lesion_count=(1, 4))
    rng = np.random.default_rng(3)
    hit = 0
    for _ in range(20):
        img, lesions, lungs = generate_phantom(rng, cfg)
        assert not (lesions & ~lungs).any()
        hit += int(lesions.any())
    assert hit >= 18  # at least one lesion requested for every draw

    none_cfg = PhantomConfig(lesion_count=(0, 0))
    _, lesions, _ = generate_phantom(np.random.default_rng(5), none_cfg)
    assert not lesions.any()


def test_phantom_determinism():
    cfg = PhantomConfig()
    a = generate_phantom(np.random.default_rng(42), cfg)
    b = generate_phantom(np.random.default_rng(42), cfg)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def test_preprocess_affine_landmarks():
    img = np.array([[-1000.0, 300.0], [-350.0, -2000.0]])
    out = preprocess(img, spacing=1.75)
    assert out[0, 0] == pytest.approx(0.0)
    assert out[0, 1] == pytest.approx(1.0)
    assert out[1, 0] == pytest.approx(0.5)
    assert out[1, 1] == pytest.approx(0.0)  # clipped up to the window floor


def test_preprocess_is_idempotent():
    rng = np.random.default_rng(9)
    img = rng.normal(-400.0, 300.0, (32, 32))
    once = preprocess(img, spacing=1.75)
    twice = preprocess(once, spacing=1.75)
    assert np.array_equal(once, twice)
    assert once.min() >= 0.0 and once.max() <= 1.0


def test_preprocess_resamples_other_spacings():
    img = np.zeros((32, 32))
    out = preprocess(img, spacing=3.5)
    assert out.shape == (64, 64)
    stack = preprocess(np.zeros((3, 32, 32)), spacing=3.5)
    assert stack.shape == (3, 64, 64)


def test_preprocess_crops_to_lung_box():
    img = np.full((40, 40), -1000.0)
    mask = np.zeros((40, 40), dtype=bool)
    mask[10:20, 14:30] = True
    out = preprocess(img, spacing=1.75, lung_mask=mask)
    rows, cols = lung_bbox(mask, margin=2)
    assert out.shape == (rows.stop - rows.start, cols.stop - cols.start)
    assert out.shape == (14, 20)


def test_preprocess_rejects_bad_input():
    with pytest.raises(ValueError):
        preprocess(np.array([[np.nan, 0.0]]), spacing=1.75)
    with pytest.raises(ValueError):
        preprocess(np.zeros((4, 4)), spacing=0.0)


def test_domain_pair_same_kernel_is_identical():
    phantom = generate_phantom(np.random.default_rng(1), PhantomConfig(grid_size=64))
    spec = KernelSpec(a=20.0, b=2.0)
    pair = synthesize_domain_pair(phantom, spec, spec, n_angles=30)
    assert np.array_equal(pair.image_smooth, pair.image_sharp)


def test_domain_pair_orders_kernels():
    phantom = generate_phantom(np.random.default_rng(1), PhantomConfig(grid_size=64))
    with pytest.raises(ValueError):
        synthesize_domain_pair(phantom, KernelSpec(a=30.0, b=2.0), KernelSpec(), n_angles=30)


def test_domain_pair_sharp_image_is_noisier():
    phantom = generate_phantom(np.random.default_rng(8), PhantomConfig(grid_size=64))
    pair = synthesize_domain_pair(
        phantom, KernelSpec(), KernelSpec(a=40.0, b=3.0), n_angles=60, family="x", pair_id=0
    )
    # images come back cropped to the lung box, masks on the same crop
    assert pair.lesion_mask_hidden.shape == pair.image_smooth.shape
    assert pair.image_sharp.std() > pair.image_smooth.std()


def test_bundle_counts_and_shapes(micro_bundle):
    b = micro_bundle
    assert len(b.source_volumes) == 4
    assert len(b.target_volumes) == 2
    assert len(b.target_twin_volumes) == 2
    assert all(len(v.slices) == 2 for v in b.source_volumes)
    n_pairs = len(b.paired_train) + len(b.paired_test)
    assert n_pairs == 2 * 4  # pairs_per_family x families
    shape = b.source_volumes[0].slices[0].image.shape
    assert shape[0] % 16 == 0 and shape[1] % 16 == 0
    for vol in b.source_volumes + b.target_volumes:
        for s in vol.slices:
            assert s.image.shape == shape
            assert s.image.min() >= 0.0 and s.image.max() <= 1.0


def test_bundle_pair_split_is_stratified(micro_bundle):
    b = micro_bundle
    families = sorted({p.family for p in b.paired_train + b.paired_test})
    assert len(families) == 4
    for fam in families:
        n_train = sum(p.family == fam for p in b.paired_train)
        n_test = sum(p.family == fam for p in b.paired_test)
        assert n_train + n_test == 2
        assert n_test >= 1


def test_bundle_domain_tags(micro_bundle):
    b = micro_bundle
    assert all(s.domain_tag == "smooth" for v in b.source_volumes for s in v.slices)
    assert all(s.domain_tag == "sharp" for v in b.target_volumes for s in v.slices)
    assert all(s.kernel.a == 0.0 for v in b.source_volumes for s in v.slices)
    assert all(s.kernel.a > 0.0 for v in b.target_volumes for s in v.slices)


def test_target_twins_share_anatomy_and_differ_in_texture(micro_bundle):
    b = micro_bundle
    for tgt, twin in zip(b.target_volumes, b.target_twin_volumes):
        for s_t, s_w in zip(tgt.slices, twin.slices):
            assert np.array_equal(s_t.lesion_mask, s_w.lesion_mask)
            assert s_w.kernel.a == 0.0
            assert not np.array_equal(s_t.image, s_w.image)
            assert s_t.image.std() > s_w.image.std()


def test_build_datasets_deterministic():
    a = build_datasets(MICRO, 11)
    b = build_datasets(MICRO, 11)
    assert np.array_equal(
        a.source_volumes[2].slices[1].image, b.source_volumes[2].slices[1].image
    )
    assert np.array_equal(a.paired_train[0].image_sharp, b.paired_train[0].image_sharp)
    c = build_datasets(MICRO, 12)
    assert not np.array_equal(
        a.source_volumes[2].slices[1].image, c.source_volumes[2].slices[1].image
    )


def test_lesion_free_pair_corpus():
    cfg = DataConfig(
        grid_size=64,
        n_angles=30,
        n_source_volumes=1,
        n_target_volumes=1,
        slices_per_volume=1,
        pairs_per_family=2,
        lesion_free_pairs=True,
    )
    b = build_datasets(cfg, 2)
    for p in b.paired_train + b.paired_test:
        assert not p.lesion_mask_hidden.any()


def test_split_folds_partitions_everything():
    items = list(range(50))
    fs = split_folds(items, k=5, seed=0)
    sizes = [len(fs.fold_ids(i)) for i in range(5)]
    assert sizes == [10] * 5
    seen = sorted(i for f in range(5) for i in fs.fold_ids(f))
    assert seen == items

    fs52 = split_folds(list(range(52)), k=5, seed=1)
    assert sorted(len(fs52.fold_ids(i)) for i in range(5)) == [10, 10, 10, 11, 11]


def test_split_folds_deterministic_and_validated():
    a = split_folds(list(range(20)), k=4, seed=3)
    b = split_folds(list(range(20)), k=4, seed=3)
    assert [a.fold_ids(i) for i in range(4)] == [b.fold_ids(i) for i in range(4)]
    with pytest.raises(ValueError):
        split_folds(list(range(3)), k=5)
    with pytest.raises(ValueError):
        split_folds(list(range(10)), k=1)


def test_save_load_roundtrip(tmp_path, micro_bundle):
    out = tmp_path / "ds"
    save_bundle(micro_bundle, out)
    loaded = load_bundle(out)
    assert loaded.config == micro_bundle.config
    assert len(loaded.source_volumes) == len(micro_bundle.source_volumes)
    for va, vb in zip(micro_bundle.source_volumes, loaded.source_volumes):
        for sa, sb in zip(va.slices, vb.slices):
            assert np.array_equal(sa.image, sb.image)
            assert np.array_equal(sa.lesion_mask, sb.lesion_mask)
            assert sa.kernel == sb.kernel
            assert sa.volume_id == sb.volume_id
    for pa, pb in zip(micro_bundle.paired_test, loaded.paired_test):
        assert pa.family == pb.family
        assert np.array_equal(pa.image_smooth, pb.image_smooth)
        assert np.array_equal(pa.lesion_mask_hidden, pb.lesion_mask_hidden)
    assert dataset_hash(out) == dataset_hash(out)


def test_dataset_hash_tracks_content(tmp_path, micro_bundle):
    out1 = tmp_path / "d1"
    out2 = tmp_path / "d2"
    save_bundle(micro_bundle, out1)
    save_bundle(micro_bundle, out2)
    assert dataset_hash(out1) == dataset_hash(out2)
    other = build_datasets(MICRO, 99)
    out3 = tmp_path / "d3"
    save_bundle(other, out3)
    assert dataset_hash(out1) != dataset_hash(out3)
