import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from poseur.errors import ConfigurationError, ContractViolation, EmptyInputError
from poseur.evaluation import (
    OksConfig,
    PoseInstance,
    average_precision,
    average_precision_bruteforce,
    exhaustive_match,
    greedy_match,
    instance_score,
    oks,
    pck,
    read_jsonl,
    write_jsonl,
)


def _inst(kps, image_id=0, score=1.0, kp=None, area=100.0, vis=None):
    kps = np.asarray(kps, dtype=float)
    return PoseInstance(image_id, kps, vis, (0, 0, 10, 10), score, kp, area)


def test_instance_score_examples():
    assert instance_score(_inst(np.zeros((2, 2)))) == 1.0
    assert instance_score(_inst(np.zeros((2, 2)), score=0.9, kp=[0.8, 0.6])) == pytest.approx(0.63)
    assert instance_score(_inst(np.zeros((2, 2)), score=0.0, kp=[0.8, 0.6])) == 0.0


def test_instance_invariants():
    with pytest.raises(ContractViolation):
        _inst(np.zeros((2, 2)), area=0.0)
    with pytest.raises(ContractViolation):
        _inst(np.zeros((2, 2)), score=1.5)


def test_oks_examples():
    gt = _inst([[5.0, 5.0]], area=50.0)
    assert oks(gt.keypoints, gt) == 1.0
    d = np.sqrt(2 * 50.0 * 0.08**2)
    assert oks(np.array([[5.0 + d, 5.0]]), gt) == pytest.approx(np.exp(-1.0), rel=1e-12)


def test_oks_ignores_invisible():
    gt = _inst([[1.0, 1.0], [2.0, 2.0]], vis=[2, 0])
    assert oks(np.array([[1.0, 1.0], [90.0, 90.0]]), gt) == 1.0
    with pytest.raises(ContractViolation):
        oks(gt.keypoints, _inst([[1.0, 1.0]], vis=[0]))


def test_oks_config_validation():
    with pytest.raises(ConfigurationError):
        OksConfig(thresholds=(0.5, 0.5))
    with pytest.raises(ConfigurationError):
        OksConfig(falloff=[0.1, -0.1])
    assert OksConfig().thresholds == pytest.approx(np.arange(0.5, 0.951, 0.05))


def test_ap_perfect_and_empty():
    gts = [_inst([[i, i], [i + 1, i]], image_id=i) for i in range(4)]
    assert average_precision(gts, gts)["mean_ap"] == 1.0
    assert average_precision([], gts)["mean_ap"] == 0.0


def test_ap_hand_case_matches_bruteforce():
    gts = [_inst([[0, 0], [4, 4]]), _inst([[6, 6], [9, 9]])]
    dets = [
        _inst([[0.3, 0], [4, 4.5]], score=0.9),
        _inst([[6, 6], [9, 9]], score=0.8),
        _inst([[0, 0.1], [4, 4]], score=0.7),
    ]
    assert average_precision(dets, gts)["ap"] == average_precision_bruteforce(dets, gts)["ap"]


def test_greedy_prefers_higher_oks_then_lower_index():
    mat = np.array([[0.8, 0.9, 0.9], [0.95, 0.2, 0.1]])
    np.testing.assert_array_equal(greedy_match(mat, 0.5), [1, 0])
    np.testing.assert_array_equal(exhaustive_match(mat, 0.5), [1, 0])


@st.composite
def _scene(draw):
    n_img = draw(st.integers(1, 3))
    gts, dets = [], []
    for img in range(n_img):
        for _ in range(draw(st.integers(0, 5))):
            gts.append(_inst(draw(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=3, max_size=3)), image_id=img))
        for _ in range(draw(st.integers(0, 5))):
            kps = draw(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=3, max_size=3))
            score = draw(st.sampled_from([0.2, 0.5, 0.5, 0.9]))
            dets.append(_inst(kps, image_id=img, score=score, area=draw(st.sampled_from([20.0, 100.0]))))
    return dets, gts


@given(_scene())
def test_greedy_equals_exhaustive(case):
    dets, gts = case
    assert average_precision(dets, gts)["ap"] == average_precision_bruteforce(dets, gts)["ap"]


@given(_scene())
def test_ap_invariant_under_monotone_rescaling(case):
    dets, gts = case
    squashed = [
        PoseInstance(d.image_id, d.keypoints, d.visibility, d.bbox, d.bbox_score**3, d.kp_scores, d.area) for d in dets
    ]
    assert average_precision(dets, gts)["ap"] == average_precision(squashed, gts)["ap"]


def test_pck_examples():
    gts = [_inst([[0, 0], [10, 0]])]  # bbox diagonal sqrt(200)
    diag = np.sqrt(200.0)
    assert pck([gts[0].keypoints], gts) == 1.0
    assert pck([gts[0].keypoints + 100], gts) == 0.0
    half = gts[0].keypoints + np.array([[0.4 * diag, 0], [0.6 * diag, 0]])
    assert pck([half], gts) == 0.5
    with pytest.raises(EmptyInputError):
        pck([], [])
    with pytest.raises(ContractViolation):
        pck([gts[0].keypoints], gts, norm=0.0)


def test_jsonl_round_trip(tmp_path):
    insts = [_inst([[1.5, 2.0], [3, 4]], image_id=3, score=0.4, kp=[0.1, 0.9], vis=[2, 1])]
    write_jsonl(tmp_path / "d.jsonl", insts)
    back = read_jsonl(tmp_path / "d.jsonl")[0]
    assert back.image_id == 3 and back.bbox_score == 0.4
    np.testing.assert_array_equal(back.keypoints, insts[0].keypoints)
    np.testing.assert_array_equal(back.visibility, [2, 1])
    assert set(insts[0].to_record()) == {"image_id", "keypoints", "bbox", "bbox_score", "kp_scores", "area"}
