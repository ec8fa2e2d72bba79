"""Attention-map pipeline tests: raw map construction, per-sample
standardization, teacher/student transforms, and heatmap export.
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import ordistill.tensor as T
from ordistill.attention import (AttentionMap, NORM_EPS, export_heatmaps, normalize,
                                 spatial_attention, student_map, teacher_map)
from ordistill.errors import ContractError
from ordistill.netpbm import decode_pgm

ORACLE_NORM = np.array([-1.34164, -0.44721, 0.44721, 1.34164])


def raw_map(values):
    return AttentionMap(T.Tensor(np.asarray(values, dtype=np.float64)), "raw")


def test_spatial_attention_all_ones():
    m = spatial_attention(T.Tensor(np.ones((2, 3, 4, 4))))
    assert m.stage == "raw"
    np.testing.assert_array_equal(m.values.data, np.ones((2, 1, 4, 4)))


def test_spatial_attention_two_channel_oracle():
    f = T.Tensor(np.arange(1.0, 9.0).reshape(1, 2, 2, 2))
    m = spatial_attention(f)
    # channel means 2.5 and 6.5; weighted maps averaged across channels
    np.testing.assert_allclose(m.values.data[0, 0].reshape(-1), [17.5, 22.0, 26.5, 31.0])


def test_spatial_attention_single_channel():
    rng = np.random.default_rng(0)
    plane = rng.normal(size=(1, 1, 3, 3))
    m = spatial_attention(T.Tensor(plane))
    np.testing.assert_allclose(m.values.data, plane.mean() * plane)


def test_normalize_oracle_values():
    m = normalize(raw_map([[[[17.5, 22.0], [26.5, 31.0]]]]))
    got = m.values.data.reshape(-1)
    np.testing.assert_allclose(got, ORACLE_NORM, atol=2e-5)
    assert abs(got.sum()) < 1e-10
    assert abs((got ** 2).sum() - 4.0) < 1e-3


def test_normalize_constant_map_to_zeros():
    m = normalize(raw_map(np.full((2, 1, 3, 3), 5.0)))
    np.testing.assert_array_equal(m.values.data, np.zeros((2, 1, 3, 3)))


def test_normalize_affine_invariance():
    rng = np.random.default_rng(1)
    base = rng.normal(size=(1, 1, 4, 4))
    a = normalize(raw_map(base)).values.data
    b = normalize(raw_map(3.0 * base + 10.0)).values.data
    np.testing.assert_allclose(a, b, atol=1e-4)


def test_teacher_map_oracle_and_detachment():
    norm = normalize(raw_map([[[[17.5, 22.0], [26.5, 31.0]]]]))
    t = teacher_map(norm)
    np.testing.assert_allclose(t.values.data.reshape(-1), np.abs(ORACLE_NORM), atol=2e-5)
    assert not t.values.requires_grad
    assert (t.values.data >= 0).all()


def test_student_map_oracle():
    norm = normalize(raw_map([[[[17.5, 22.0], [26.5, 31.0]]]]))
    s = student_map(norm)
    np.testing.assert_allclose(s.values.data.reshape(-1),
                               np.maximum(ORACLE_NORM, 0.0), atol=2e-5)
    assert (s.values.data >= 0).all()


def test_stage_guards():
    r = raw_map(np.zeros((1, 1, 2, 2)))
    with pytest.raises(ContractError):
        teacher_map(r)
    with pytest.raises(ContractError):
        student_map(r)
    with pytest.raises(ContractError):
        normalize(AttentionMap(T.Tensor(np.zeros((1, 1, 2, 2))), "teacher"))
    with pytest.raises(ContractError):
        AttentionMap(T.Tensor(np.zeros((1, 1, 2, 2))), "bogus")


def test_abs_decomposition_identity_exact():
    rng = np.random.default_rng(2)
    norm_vals = rng.normal(size=(3, 1, 4, 4))
    m = AttentionMap(T.Tensor(norm_vals), "normalized")
    m_neg = AttentionMap(T.Tensor(-norm_vals), "normalized")
    lhs = teacher_map(m).values.data
    rhs = student_map(m).values.data + student_map(m_neg).values.data
    assert lhs.tobytes() == rhs.tobytes()


def test_spatial_attention_degree_two_homogeneity():
    rng = np.random.default_rng(3)
    f32 = rng.normal(size=(2, 3, 4, 4)).astype(np.float32)
    base = spatial_attention(T.Tensor(f32)).values.data
    scaled = spatial_attention(T.Tensor(np.float32(3.0) * f32)).values.data
    np.testing.assert_allclose(scaled, 9.0 * base, rtol=1e-5)
    # normalization is scale-invariant once the map std dwarfs the eps term
    f = rng.normal(size=(2, 3, 4, 4)) * 2.0
    norm_a = normalize(spatial_attention(T.Tensor(f))).values.data
    norm_b = normalize(spatial_attention(T.Tensor(3.0 * f))).values.data
    np.testing.assert_allclose(norm_a, norm_b, atol=1e-4)


def test_normalized_map_moments_random_batch():
    rng = np.random.default_rng(4)
    for _ in range(20):
        f = rng.normal(size=(2, 3, 4, 4)) * 4.0
        m = normalize(spatial_attention(T.Tensor(f))).values.data
        hw = 16
        assert abs(m.mean()) < 1e-6
        assert abs((m ** 2).sum(axis=(2, 3)) - hw).max() < 1e-3


@given(st.integers(0, 2 ** 31 - 1), st.integers(2, 4), st.integers(2, 4))
@settings(max_examples=40, deadline=None)
def test_student_plus_negated_student_equals_teacher(seed, h, w):
    rng = np.random.default_rng(seed)
    vals = rng.normal(size=(1, 1, h, w))
    m = AttentionMap(T.Tensor(vals), "normalized")
    neg = AttentionMap(T.Tensor(-vals), "normalized")
    lhs = teacher_map(m).values.data
    rhs = student_map(m).values.data + student_map(neg).values.data
    np.testing.assert_array_equal(lhs, rhs)


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=40, deadline=None)
def test_teacher_and_student_nonnegative(seed):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(2, 2, 4, 4))
    norm = normalize(spatial_attention(T.Tensor(f)))
    assert (teacher_map(norm).values.data >= 0).all()
    assert (student_map(norm).values.data >= 0).all()


def test_export_heatmaps_naming_and_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    vals = rng.normal(size=(2, 1, 4, 4))
    m = AttentionMap(T.Tensor(vals), "raw", source_model=3)
    paths = export_heatmaps(m, str(tmp_path), "test", [7, 12])
    assert [p.split("/")[-1] for p in paths] == \
        ["test_000007_03_raw.pgm", "test_000012_03_raw.pgm"]
    for i, p in enumerate(paths):
        with open(p, "rb") as fh:
            img = decode_pgm(fh.read())
        assert img.shape == (4, 4)
        assert img.min() == 0 and img.max() == 255
        plane = vals[i, 0]
        expect = np.round((plane - plane.min()) / (plane.max() - plane.min()) * 255)
        np.testing.assert_array_equal(img, expect.astype(np.uint8))


def test_export_heatmaps_constant_plane(tmp_path):
    m = AttentionMap(T.Tensor(np.zeros((1, 1, 3, 3))), "student")
    (path,) = export_heatmaps(m, str(tmp_path), "train", [0])
    with open(path, "rb") as fh:
        assert not decode_pgm(fh.read()).any()


def test_export_heatmaps_id_count_mismatch(tmp_path):
    m = AttentionMap(T.Tensor(np.zeros((2, 1, 3, 3))), "raw")
    with pytest.raises(ContractError):
        export_heatmaps(m, str(tmp_path), "test", [0])


def test_normalize_eps_constant():
    assert NORM_EPS == 1e-5
