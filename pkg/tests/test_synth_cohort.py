import numpy as np
import pytest

from mmdnn.featurize import PROGRESSIVE, extract_features
from mmdnn.patch_atlas import build_patch_atlas
from mmdnn.synth_cohort import (
    TABLE1_GROUP_COUNTS,
    CohortParameterError,
    CohortSpec,
    disease_layout,
    effect_fraction,
    make_template,
    read_cohort,
    sample_cohort,
    scaled_group_counts,
    write_cohort,
)


def test_single_roi_template():
    roi, brainstem = make_template(CohortSpec(dims=(10, 10, 10), n_rois=1))
    assert brainstem == 1
    assert roi.n_rois == 1
    assert set(np.unique(roi.labels).tolist()) == {0, 1}


def test_default_template_labels_every_foreground_voxel():
    spec = CohortSpec()
    roi, brainstem = make_template(spec)
    assert roi.volume.dims == (32, 32, 32)
    sizes = roi.roi_sizes()
    assert len(sizes) == 17 and sizes[1:].min() > 0
    # foreground is exactly the ellipsoid; every voxel inside carries a label
    coords = roi.volume.coordinates()
    centre = (np.array(spec.dims) - 1) / 2
    semi = np.array(spec.dims) * np.array([0.45, 0.47, 0.42])
    inside = (((coords - centre) / semi) ** 2).sum(axis=1) <= 1
    assert np.array_equal(inside, roi.labels > 0)
    # brainstem is the most inferior ROI
    zc = [coords[roi.labels == r, 2].mean() for r in range(1, 17)]
    assert int(np.argmin(zc)) + 1 == brainstem


def test_template_deterministic():
    a, _ = make_template(CohortSpec(seed=11))
    b, _ = make_template(CohortSpec(seed=11))
    assert a == b


def test_too_many_rois():
    with pytest.raises(CohortParameterError):
        make_template(CohortSpec(dims=(3, 3, 3), n_rois=100))


@pytest.mark.parametrize("field,value", [("noise_sigma", -1), ("affected_fraction", 0), ("affected_fraction", 1.5)])
def test_spec_validation(field, value):
    with pytest.raises(CohortParameterError):
        CohortSpec(**{field: value})


def test_effect_factor_range():
    with pytest.raises(CohortParameterError):
        CohortSpec(effect={"sAD": (1.2, 0.9)})


def test_ramp_fraction():
    assert effect_fraction("pMCI", 12, 36) == pytest.approx(2 / 3)
    assert effect_fraction("pMCI", 0, 36) == 1.0
    assert effect_fraction("pNC", 48, 36) == 0.0
    assert effect_fraction("sAD", None, 36) == 1.0
    assert effect_fraction("sNC", None, 36) == 0.0


def test_scaled_counts_profile():
    counts = scaled_group_counts(200)
    assert sum(counts.values()) == 200
    assert counts == {"sNC": 58, "sMCI": 66, "pNC": 3, "pMCI": 35, "sAD": 38}
    assert scaled_group_counts(1242) == TABLE1_GROUP_COUNTS


def test_cohort_structure(small_spec, small_template):
    roi, brainstem = small_template
    scans = sample_cohort(small_spec, roi, brainstem)
    n_subjects = sum(small_spec.group_counts.values())
    assert len(scans) == n_subjects * small_spec.scans_per_subject
    for s in scans:
        assert (s.months_to_conversion is not None) == (s.group in PROGRESSIVE)
        assert s.expansion.data.min() > 0 and s.pet.data.min() >= 0
    by_subject = {}
    for s in scans:
        by_subject.setdefault(s.subject_id, []).append(s)
    for subject_scans in by_subject.values():
        if subject_scans[0].group in PROGRESSIVE:
            m = [s.months_to_conversion for s in sorted(subject_scans, key=lambda s: s.scan_month)]
            assert m == sorted(m, reverse=True)


def test_cohort_deterministic(small_spec, small_template):
    roi, brainstem = small_template
    a = sample_cohort(small_spec, roi, brainstem)
    b = sample_cohort(small_spec, roi, brainstem)
    assert all(x.expansion == y.expansion and x.pet == y.pet for x, y in zip(a, b))


def noise_free_spec(**kw):
    base = dict(dims=(16, 16, 16), n_rois=6, noise_sigma=0.0, subject_sigma=0.0, pet_gain_sigma=0.0,
                group_counts={"sNC": 1, "sAD": 1, "pMCI": 1, "sMCI": 1}, seed=5)
    base.update(kw)
    return CohortSpec(**base)


def test_noise_free_atrophy_ratio():
    spec = noise_free_spec(effect={"sAD": (0.8, 0.7), "sMCI": (0.9, 0.9), "pMCI": (0.8, 0.7)})
    roi, brainstem = make_template(spec)
    layout = disease_layout(spec, roi.n_rois, brainstem)
    atlas = build_patch_atlas(roi, (20,), seed=0)
    scans = {s.group: s for s in sample_cohort(spec, roi, brainstem) if s.scan_month == 0}
    nc = extract_features(scans["sNC"], atlas, roi)
    ad = extract_features(scans["sAD"], atlas, roi)
    p2r = atlas.scales[0].patch_to_roi
    affected = np.array([p2r[p] in layout.ad_rois for p in range(1, atlas.scales[0].n_patches + 1)])
    assert affected.any() and (~affected).any()
    ratio = ad.volume[0] / nc.volume[0]
    assert np.allclose(ratio[affected], 0.8, rtol=1e-6)
    assert np.allclose(ratio[~affected], 1.0, rtol=1e-6)
    pet_ratio = ad.pet[0] / nc.pet[0]
    assert np.allclose(pet_ratio[affected], 0.7, rtol=1e-6)
    assert np.allclose(pet_ratio[~affected], 1.0, rtol=1e-6)


def test_progressive_ramp_noise_free():
    spec = noise_free_spec(effect={"pMCI": (0.7, 0.7)})
    roi, brainstem = make_template(spec)
    layout = disease_layout(spec, roi.n_rois, brainstem)
    scans = sample_cohort(spec, roi, brainstem)
    nc = next(s for s in scans if s.group == "sNC")
    r = layout.ad_rois[0]
    mask = roi.labels == r
    for s in (s for s in scans if s.group == "pMCI"):
        f = effect_fraction("pMCI", s.months_to_conversion, spec.horizon_months)
        got = s.expansion.data[mask].mean() / nc.expansion.data[mask].mean()
        assert got == pytest.approx(1 - f * 0.3, rel=1e-6)


def test_smci_nuisance_disjoint_from_ad():
    spec = CohortSpec()
    roi, brainstem = make_template(spec)
    layout = disease_layout(spec, roi.n_rois, brainstem)
    assert len(layout.ad_rois) == 4
    assert not set(layout.ad_rois) & set(layout.nuisance_rois)
    assert brainstem not in layout.ad_rois + layout.nuisance_rois


def test_brainstem_purity_statistical(small_spec, small_template):
    roi, brainstem = small_template
    spec = CohortSpec(**{**small_spec.to_dict(), "group_counts": {"sAD": 30}})
    scans = sample_cohort(spec, roi, brainstem)
    mask = roi.labels == brainstem
    exp_means = np.array([s.expansion.data[mask].mean() for s in scans])
    assert abs(exp_means.mean() - 1.0) < 0.01


def test_write_read_cohort(tmp_path, small_spec, small_template):
    roi, brainstem = small_template
    scans = sample_cohort(small_spec, roi, brainstem)[:4]
    write_cohort(tmp_path, small_spec, roi, brainstem, scans)
    roi2, b2, scans2 = read_cohort(tmp_path)
    assert roi2 == roi and b2 == brainstem
    for a, b in zip(scans, scans2):
        assert a.scan_id == b.scan_id and a.expansion == b.expansion and a.pet == b.pet
        assert a.months_to_conversion == b.months_to_conversion
