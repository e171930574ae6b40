import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_case
from simdrc.dialogue import segmentation_from_lengths
from simdrc.errors import (
    DimensionMismatch,
    IndexOutOfRange,
    NoContentTokens,
    ParseError,
    RepresentativeTokenQueried,
    SameUtterance,
    SingleUtterance,
    Undefined,
    ZeroNorm,
)
from simdrc.geometry import (
    block_contrast,
    coherence_score,
    cosine,
    isotropy_distance,
    isotropy_value,
    locality_distance,
    locality_value,
    mask_special,
    metric_report,
    read_embeddings,
    similarity_csv,
    similarity_matrix,
    similarity_pgm,
    write_embeddings,
)
from simdrc.oracles import brute_force_block_contrast, brute_force_metrics

INV_SQRT2 = 1 / math.sqrt(2)


@pytest.mark.parametrize(
    "u, v, expected",
    [((1, 0), (1, 0), 1.0), ((1, 0), (0, 1), 0.0), ((1, 0), (1, 1), INV_SQRT2)],
)
def test_cosine(u, v, expected):
    assert cosine(u, v) == pytest.approx(expected, abs=1e-12)


def test_cosine_errors():
    with pytest.raises(ZeroNorm):
        cosine((0, 0), (1, 0))
    with pytest.raises(DimensionMismatch):
        cosine((1, 0), (1, 0, 0))


def test_cosine_is_clamped():
    v = np.array([0.1, 0.2, 0.3]) * 1e3
    assert cosine(v, v) <= 1.0


# two utterances of [content, eou] plus [CONTEXT]
SEG22 = segmentation_from_lengths([2, 2])


def _rows(*rows):
    return np.array(rows, dtype=float)


def test_locality_value_examples():
    H = _rows((1, 0), (1, 0), (0, 1), (0, 1), (1, 1))
    assert locality_value(H, SEG22, 0, 0) == 1.0
    H = _rows((1, 0), (0, 1), (0, 1), (0, 1), (1, 1))
    assert locality_value(H, SEG22, 0, 0) == pytest.approx(0.0, abs=1e-15)
    H = _rows((2, 0), (1, 1), (0, 1), (0, 1), (1, 1))
    assert locality_value(H, SEG22, 0, 0) == pytest.approx(INV_SQRT2, abs=1e-12)


def test_locality_value_errors():
    H = np.ones((5, 2))
    with pytest.raises(RepresentativeTokenQueried):
        locality_value(H, SEG22, 0, 1)
    with pytest.raises(IndexOutOfRange):
        locality_value(H, SEG22, 2, 0)
    with pytest.raises(IndexOutOfRange):
        locality_value(H, SEG22, 0, 5)


def test_locality_distance_examples():
    assert locality_distance(np.ones((5, 3)), SEG22) == pytest.approx(1.0, abs=1e-15)
    H = _rows((1, 0), (1, 0), (0, 1), (1, 0), (1, 1))
    assert locality_distance(H, SEG22) == pytest.approx(0.5, abs=1e-15)


def test_locality_distance_needs_content():
    from simdrc.dialogue import Segmentation

    seg = Segmentation(spans=((0, 1),), rep_indices=(0,), context_index=1, total_len=2)
    with pytest.raises(NoContentTokens):
        locality_distance(np.ones((2, 2)), seg)


def test_seed17_matches_oracle(seed17_case):
    H, seg = seed17_case
    ref = brute_force_metrics(H, seg)
    assert abs(locality_distance(H, seg) - ref.locality_distance) <= 1e-12
    assert abs(isotropy_distance(H, seg) - ref.isotropy_distance) <= 1e-12
    assert abs(coherence_score(H, seg) - ref.coherence) <= 1e-12
    S = similarity_matrix(H)
    assert abs(block_contrast(S, seg) - brute_force_block_contrast(S, seg)) <= 1e-12


def test_isotropy_value_examples():
    H = _rows((1, 0), (1, 1), (0, 1), (1, 1), (1, 0))
    assert isotropy_value(H, SEG22, 0, 1) == pytest.approx(1.0)
    H = _rows((1, 0), (1, 0), (0, 1), (-1, 0), (1, 0))
    assert isotropy_value(H, SEG22, 0, 1) == -1.0
    H = _rows((1, 0), (1, 1), (0, 1), (1, 0), (1, 0))
    assert isotropy_value(H, SEG22, 0, 1) == pytest.approx(INV_SQRT2, abs=1e-12)
    with pytest.raises(SameUtterance):
        isotropy_value(H, SEG22, 1, 1)
    with pytest.raises(IndexOutOfRange):
        isotropy_value(H, SEG22, 0, 2)


def test_isotropy_distance_examples():
    assert isotropy_distance(np.ones((5, 2)), SEG22) == pytest.approx(1.0)
    H = _rows((1, 0), (1, 0), (1, 0), (0, 1), (1, 0))
    assert isotropy_distance(H, SEG22) == pytest.approx(0.0, abs=1e-15)
    seg3 = segmentation_from_lengths([2, 2, 2])
    H = _rows((1, 0), (1, 0), (1, 0), (0, 1), (1, 0), (-1, 0), (1, 0))
    assert isotropy_distance(H, seg3) == pytest.approx(-1 / 3, abs=1e-12)


def test_isotropy_distance_single_utterance():
    with pytest.raises(SingleUtterance):
        isotropy_distance(np.ones((3, 2)), segmentation_from_lengths([2]))


def test_coherence_examples():
    assert coherence_score(np.ones((5, 2)), SEG22) == pytest.approx(1.0)
    H = _rows((1, 0), (1, 0), (1, 0), (-1, 0), (0, 1))
    assert coherence_score(H, SEG22) == pytest.approx(0.0, abs=1e-15)


def test_metric_report_single_utterance_has_no_isotropy():
    rep = metric_report(np.ones((4, 2)), segmentation_from_lengths([3]))
    assert rep.isotropy_distance is None
    assert rep.locality_distance == pytest.approx(1.0)
    assert rep.per_utterance_locality == [pytest.approx(1.0)]


def test_similarity_matrix_examples():
    assert similarity_matrix(np.ones((1, 3))).tolist() == [[1.0]]
    assert similarity_matrix(_rows((1, 0), (0, 1))).tolist() == [[1.0, 0.0], [0.0, 1.0]]


def test_similarity_matrix_zero_row_named():
    with pytest.raises(ZeroNorm) as info:
        similarity_matrix(_rows((1, 0), (0, 0)))
    assert info.value.row == 1


@pytest.mark.parametrize("seed", range(20))
def test_similarity_matrix_invariants(seed):
    H, _ = random_case(seed)
    S = similarity_matrix(H)
    assert np.array_equal(S, S.T)
    assert np.all(np.abs(np.diag(S) - 1.0) <= 1e-9)
    assert np.all(np.abs(S) <= 1 + 1e-9)


def test_block_contrast_examples():
    seg = segmentation_from_lengths([2, 3])
    owner = np.array(seg.utterance_of())
    S = (owner[:, None] == owner[None, :]).astype(float)
    assert block_contrast(S, seg) == pytest.approx(1.0)
    assert block_contrast(np.full((6, 6), 0.3), seg) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(Undefined):
        block_contrast(np.ones((3, 3)), segmentation_from_lengths([2]))


def test_mask_special_zeroes_eou_and_context():
    S = np.ones((5, 5))
    masked = mask_special(S, SEG22)
    for k in (1, 3, 4):
        assert not masked[k].any() and not masked[:, k].any()
    assert masked[0, 2] == 1.0


# ------------------------------------------------------------- properties

cases = st.integers(min_value=0, max_value=10**6).map(lambda s: random_case(s, min_utts=2))


@settings(max_examples=60, deadline=None)
@given(cases, st.integers(0, 10**6), st.sampled_from([0.5, 2.0, 10.0, 1e-3, 37.0]))
def test_scale_invariance(case, pick, factor):
    H, seg = case
    row = pick % H.shape[0]
    H2 = H.copy()
    H2[row] *= factor
    for f in (locality_distance, isotropy_distance, coherence_score):
        assert abs(f(H, seg) - f(H2, seg)) <= 1e-9
    assert np.max(np.abs(similarity_matrix(H) - similarity_matrix(H2))) <= 1e-9


@settings(max_examples=60, deadline=None)
@given(cases)
def test_bounds_and_symmetry(case):
    H, seg = case
    for f in (locality_distance, isotropy_distance, coherence_score):
        assert -1.0 <= f(H, seg) <= 1.0
    n = seg.n_utterances
    for i in range(n):
        for j in range(n):
            if i != j:
                assert isotropy_value(H, seg, i, j) == isotropy_value(H, seg, j, i)


@settings(max_examples=60, deadline=None)
@given(cases, st.randoms(use_true_random=False))
def test_permutation_consistency(case, rnd):
    H, seg = case
    order = list(range(seg.n_utterances))
    rnd.shuffle(order)
    rows = [t for i in order for t in range(*seg.spans[i])] + [seg.context_index]
    seg2 = segmentation_from_lengths([seg.spans[i][1] - seg.spans[i][0] for i in order])
    H2 = H[rows]
    assert abs(locality_distance(H, seg) - locality_distance(H2, seg2)) <= 1e-12
    assert abs(isotropy_distance(H, seg) - isotropy_distance(H2, seg2)) <= 1e-12


@pytest.mark.parametrize("seed", range(200))
def test_oracle_equivalence(seed):
    H, seg = random_case(seed)
    ref = brute_force_metrics(H, seg)
    rep = metric_report(H, seg)
    assert abs(rep.locality_distance - ref.locality_distance) <= 1e-12
    assert abs(rep.coherence - ref.coherence) <= 1e-12
    if ref.isotropy_distance is None:
        assert rep.isotropy_distance is None
    else:
        assert abs(rep.isotropy_distance - ref.isotropy_distance) <= 1e-12
    np.testing.assert_allclose(rep.per_utterance_locality, ref.per_utterance_locality, atol=1e-12, rtol=0)


# ------------------------------------------------------------ file formats


def test_text_embeddings_round_trip(tmp_path):
    mats = [np.random.default_rng(1).standard_normal((4, 3)), np.array([[0.1, 1e-300]])]
    write_embeddings(tmp_path / "e.txt", mats)
    back = read_embeddings(tmp_path / "e.txt")
    assert len(back) == 2 and all(np.array_equal(a, b) for a, b in zip(mats, back))


def test_binary_embeddings_layout(tmp_path):
    H = np.arange(6, dtype=float).reshape(2, 3)
    write_embeddings(tmp_path / "e.bin", [H], binary=True)
    raw = (tmp_path / "e.bin").read_bytes()
    assert raw[:4] == b"EMB1"
    assert struct.unpack("<QQ", raw[4:20]) == (2, 3)
    assert struct.unpack("<6d", raw[20:]) == tuple(range(6))
    assert np.array_equal(read_embeddings(tmp_path / "e.bin")[0], H)


@pytest.mark.parametrize("text", ["2 2\n1 2\n", "x y\n", "1 2\n1 nope\n", "1 2\n1 2 3\n"])
def test_text_embeddings_malformed(tmp_path, text):
    (tmp_path / "e.txt").write_text(text)
    with pytest.raises(ParseError):
        read_embeddings(tmp_path / "e.txt")


def test_binary_truncated(tmp_path):
    (tmp_path / "e.bin").write_bytes(b"EMB1" + struct.pack("<QQ", 2, 2) + b"\0" * 8)
    with pytest.raises(ParseError):
        read_embeddings(tmp_path / "e.bin")


def test_similarity_exports():
    S = similarity_matrix(_rows((1, 0), (0, 1)))
    assert similarity_csv(S) == "1.0,0.0\n0.0,1.0\n"
    pgm = similarity_pgm(S).splitlines()
    assert pgm[:3] == ["P2", "2 2", "255"]
    assert pgm[3:] == ["255 128", "128 255"]
    assert similarity_pgm(np.array([[-1.0]])).splitlines()[3] == "0"
