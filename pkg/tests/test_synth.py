import numpy as np
import pytest
from sklearn.model_selection import cross_val_score
from sklearn.neighbors import KNeighborsClassifier

from condseg.errors import ValidationError
from condseg.synth import (ANNOTATION_STYLES, DOMAIN_STYLES, LESION_RADIUS, SceneSpec, gen_annotation_styles,
                           gen_blobs, gen_continuous, gen_domains, gen_multitask, multilabel_pairs, regenerate)


def small_sets():
    return {
        "domains": gen_domains(7, {"train": 6, "val": 2, "test": 2}, seed=1),
        "styles": gen_annotation_styles(gen_blobs({"train": 12, "val": 3, "test": 3}, seed=1), seed=1),
        "multitask": gen_multitask(1, nuclei_n=20, anomaly_n=6, val=(4, 2), test=(4, 2)),
        "continuous": gen_continuous(1, n=12, val_n=3, test_n=3),
    }


SETS = small_sets()


def _same(a, b):
    assert len(a.samples) == len(b.samples)
    for x, y in zip(a.samples, b.samples):
        assert x.sample_id == y.sample_id and x.record == y.record
        assert x.image.tobytes() == y.image.tobytes() and x.mask.tobytes() == y.mask.tobytes()


@pytest.mark.parametrize("name", sorted(SETS))
def test_bit_reproducible(name):
    _same(SETS[name], small_sets()[name])


@pytest.mark.parametrize("name", sorted(SETS))
def test_regenerate_from_params(name):
    ds = SETS[name]
    _same(ds, regenerate(ds.name, ds.seed, ds.params))


def test_seed_changes_bytes():
    a = gen_continuous(1, n=2, val_n=1, test_n=1)
    b = gen_continuous(2, n=2, val_n=1, test_n=1)
    assert a.samples[0].image.tobytes() != b.samples[0].image.tobytes()


def test_counts_do_not_shift_other_samples():
    # per-sample streams: adding samples leaves earlier ones untouched
    a = gen_domains(3, {"train": 2, "val": 1, "test": 1}, seed=4)
    b = gen_domains(3, {"train": 5, "val": 1, "test": 1}, seed=4)
    first = {s.sample_id: s for s in b.samples}
    for s in a.samples:
        assert s.image.tobytes() == first[s.sample_id].image.tobytes()


@pytest.mark.parametrize("name", sorted(SETS))
def test_mask_validity(name):
    for s in SETS[name].samples:
        assert s.image.dtype == np.float32 and s.image.shape[0] == 1
        assert 0 <= s.image.min() and s.image.max() <= 1
        assert set(np.unique(s.mask)) <= {0, 1}
        assert not s.mask.all()
        if s.subset_tag != "anomaly":
            assert s.mask.any(), s.sample_id


def test_domain_counts_and_schema():
    ds = SETS["domains"]
    assert ds.schema.total_dim == 7
    assert ds.counts()["train"] == {st.name: 6 for st in DOMAIN_STYLES}
    with pytest.raises(ValidationError):
        gen_domains(1)


def test_styles_are_separable_by_3nn():
    ds = gen_domains(7, {"train": 20, "val": 0, "test": 0}, seed=0)
    X = np.array([[s.image.mean(), s.image.var()] for s in ds.samples])
    y = [s.subset_tag for s in ds.samples]
    acc = cross_val_score(KNeighborsClassifier(3), X, y, cv=5).mean()
    assert acc > 0.8


def test_annotation_style_thirds():
    ds = SETS["styles"]
    assert ds.counts()["train"] == {"accurate": 4, "fine": 4, "coarse": 4}
    for split in ("val", "test"):
        assert {s.record["style"] for s in ds.split(split)} == {"accurate"}


def test_annotation_remainder_goes_to_accurate():
    ds = gen_annotation_styles(gen_blobs({"train": 14, "val": 1, "test": 1}, seed=0))
    assert ds.counts()["train"] == {"accurate": 6, "fine": 4, "coarse": 4}


def test_accurate_untouched_coarse_changed():
    base = gen_blobs({"train": 12, "val": 3, "test": 3}, seed=1)
    orig = {s.sample_id: s.mask for s in base.samples}
    ds = SETS["styles"]
    for s in ds.samples:
        same = np.array_equal(s.mask, orig[s.sample_id])
        if s.subset_tag == "accurate":
            assert same
        if s.subset_tag == "coarse":
            assert not same
    assert ANNOTATION_STYLES == ("accurate", "fine", "coarse")


def test_multitask_structure():
    ds = gen_multitask(0)
    assert ds.counts()["train"] == {"anomaly": 48, "nuclei": 400}
    pairs = multilabel_pairs(ds, "train")
    assert len(pairs) == 48
    for nuc, anom in pairs:
        assert nuc.image.tobytes() == anom.image.tobytes()
        assert nuc.record["task"] == "nuclei" and anom.record["task"] == "anomaly"
        assert not np.array_equal(nuc.mask, anom.mask)
        assert not (nuc.mask & anom.mask).any()


def test_multilabel_images_appear_exactly_twice():
    ds = SETS["multitask"]
    for split in ("train", "val", "test"):
        ids = [s.image_id for s in ds.split(split) if "-a" in s.image_id]
        assert all(ids.count(i) == 2 for i in set(ids))
    with pytest.raises(ValidationError):
        gen_multitask(0, nuclei_n=2, anomaly_n=4)


def test_continuous_metadata_span_and_monotone_size():
    ds = gen_continuous(0)
    enc = np.array([(s.record["size"] - LESION_RADIUS[0]) / np.ptp(LESION_RADIUS) for s in ds.samples])
    assert enc.min() >= 0 and enc.max() <= 1 and np.ptp(enc) > 0.9
    from condseg.synth import _lesion_scene
    scene = _lesion_scene(np.random.default_rng(3), 32)
    areas = [int(scene.render(r)[1].sum()) for r in np.linspace(*LESION_RADIUS, 11)]
    assert areas == sorted(areas) and areas[-1] > areas[0]


def test_scene_spec_validation():
    with pytest.raises(ValidationError):
        SceneSpec(size=4)
    with pytest.raises(ValidationError):
        SceneSpec(size=10, style=DOMAIN_STYLES[4])
    with pytest.raises(ValidationError):
        regenerate("mystery", 0, {})
