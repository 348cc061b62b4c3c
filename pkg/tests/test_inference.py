import numpy as np
import pytest

from cascadeseg.cascade import desk_config, init_params
from cascadeseg.cascade.model import anchors_for, backbone, rpn_forward
from cascadeseg.geometry import BinaryMask, clip_boxes, decode_boxes, paste_mask
from cascadeseg.inference import (
    SEGMENTS,
    Instance,
    PredictionParseError,
    Timer,
    infer_dataset,
    infer_scene,
    mask_voting,
    propose,
    read_predictions,
    run_cascade_inference,
    write_predictions,
)
from cascadeseg.tensor import ContractError
from oracles import nms_reference

FULL = np.array([1.5, 1.5, 3.0, 3.0])  # covers a whole 3 x 3 image


def raw_instance(box, scores, probs):
    scores = np.asarray(scores, dtype=float)
    best = int(scores[1:].argmax()) + 1
    return Instance(np.asarray(box, float), best, float(scores[best]), np.asarray(probs, float), None, scores)


@pytest.fixture(scope="module")
def desk():
    return desk_config()


@pytest.fixture(scope="module")
def desk_params(desk):
    return init_params(desk, 0)


@pytest.fixture(scope="module")
def image():
    return np.random.default_rng(8).random((1, 96, 96))


# ----------------------------------------------------------------------------
# proposals


def oracle_proposals(params, features, config, height, width, count):
    logits, deltas = rpn_forward(params, features, config)
    anchors = anchors_for(config, features.shape[1], features.shape[2])
    boxes = clip_boxes(decode_boxes(anchors, deltas.data), width, height, config.min_box_size)
    ok = np.flatnonzero((boxes[:, 2] >= config.min_proposal_size) & (boxes[:, 3] >= config.min_proposal_size))
    keep = nms_reference(boxes[ok], logits.data[ok], config.nms_infer)[:count]
    return boxes[ok][keep]


def test_proposals_match_oracle(tiny, tiny_params):
    img = np.random.default_rng(5).random((1, 32, 32))
    feats = backbone(tiny_params, img, tiny)
    boxes, scores = propose(tiny_params, feats, tiny, 32, 32)
    assert len(boxes) == tiny.proposal_count
    np.testing.assert_allclose(boxes, oracle_proposals(tiny_params, feats, tiny, 32, 32, tiny.proposal_count), rtol=1e-12)
    assert np.all(np.diff(scores) <= 0)


def test_fewer_survivors_than_budget(tiny, tiny_params):
    cfg = tiny.replace(proposal_count=100_000)
    img = np.random.default_rng(6).random((1, 32, 32))
    feats = backbone(tiny_params, img, cfg)
    boxes, _ = propose(tiny_params, feats, cfg, 32, 32)
    assert len(boxes) < 100_000
    np.testing.assert_allclose(boxes, oracle_proposals(tiny_params, feats, cfg, 32, 32, None), rtol=1e-12)


# ----------------------------------------------------------------------------
# raw instances


def test_raw_instances_from_both_passes(desk, desk_params, image):
    feats = backbone(desk_params, image, desk)
    props, _ = propose(desk_params, feats, desk, 96, 96)
    assert len(props) == 300
    raw = run_cascade_inference(desk_params, image, desk)
    assert len(raw) == 600
    np.testing.assert_allclose([r.box for r in raw[:300]], props, rtol=1e-6)
    for r in raw:
        assert r.probs.shape == (28, 28)
        assert r.class_scores.sum() == pytest.approx(1.0)
        assert r.score == r.class_scores[r.category] == r.class_scores[1:].max()


def test_zero_regressor_keeps_boxes(desk, image):
    params = init_params(desk, 0)
    for name in ("s3.bbox.w", "s3.bbox.b"):
        params.set(name, np.zeros(params[name].shape))
    raw = run_cascade_inference(params, image, desk)
    np.testing.assert_allclose([r.box for r in raw[300:]], [r.box for r in raw[:300]], rtol=1e-12)


def test_inference_is_deterministic(tiny, tiny_params, small_scenes):
    scenes = [s for s in small_scenes[:2]]
    a = infer_dataset(tiny_params, scenes, tiny)
    b = infer_dataset(tiny_params, scenes, tiny)
    assert list(a) == [s.id for s in scenes]
    for k in a:
        assert [(i.category, i.score, i.mask) for i in a[k]] == [(i.category, i.score, i.mask) for i in b[k]]


def test_missing_parameters_rejected(tiny, image):
    params = init_params(tiny, 0)
    del params.params["s3.bbox.w"]
    with pytest.raises(ContractError):
        run_cascade_inference(params, image, tiny)


def test_timer_covers_all_segments(tiny, tiny_params, small_scenes):
    timer = Timer()
    infer_scene(tiny_params, small_scenes[0], tiny, timer)
    assert tuple(timer.seconds) == SEGMENTS
    assert all(v > 0 for v in timer.seconds.values())


# ----------------------------------------------------------------------------
# mask voting


def test_paste_of_matching_grid_is_identity():
    probs = np.arange(9.0).reshape(3, 3) / 8
    np.testing.assert_allclose(paste_mask(probs, FULL, 3, 3), probs, atol=1e-12)


def test_single_instance_votes_for_itself(desk):
    probs = np.array([[0.9, 0.2, 0.7], [0.1, 0.6, 0.4], [0.5, 0.3, 0.8]])
    out = mask_voting([raw_instance(FULL, [0.2, 0.8, 0.0], probs)], desk, 3, 3)
    assert len(out) == 1
    assert out[0].category == 1 and out[0].score == 0.8
    np.testing.assert_array_equal(out[0].mask.bits, probs >= 0.5)


def test_identical_pair_gives_one_instance(desk):
    probs = np.array([[0.9, 0.2, 0.7], [0.1, 0.6, 0.4], [0.5, 0.3, 0.8]])
    inst = raw_instance(FULL, [0.2, 0.8, 0.0], probs)
    out = mask_voting([inst, inst], desk, 3, 3)
    assert len(out) == 1
    np.testing.assert_array_equal(out[0].mask.bits, probs >= 0.5)


def test_votes_are_score_weighted(desk):
    a = np.full((3, 3), 0.2) + 0.8 * np.eye(3)
    b = np.ones((3, 3))
    out = mask_voting([raw_instance(FULL, [0.1, 0.9, 0.0], a), raw_instance(FULL, [0.7, 0.3, 0.0], b)], desk, 3, 3)
    # off-diagonal: (0.9 * 0.2 + 0.3 * 1) / 1.2 = 0.4
    assert len(out) == 1 and out[0].score == 0.9
    np.testing.assert_array_equal(out[0].mask.bits, np.eye(3, dtype=bool))
    # equal weights: (0.2 + 1) / 2 = 0.6
    out = mask_voting([raw_instance(FULL, [0.1, 0.5, 0.0], a), raw_instance(FULL, [0.5, 0.5, 0.0], b)], desk, 3, 3)
    assert out[0].mask.bits.all()


def test_distant_instances_do_not_vote(desk):
    left = raw_instance([2.0, 2.0, 4.0, 4.0], [0.1, 0.9, 0.0], np.ones((4, 4)))
    right = raw_instance([10.0, 10.0, 4.0, 4.0], [0.1, 0.6, 0.0], np.zeros((4, 4)))
    out = mask_voting([left, right], desk, 12, 12)
    # the second survivor renders an empty mask and is dropped
    assert len(out) == 1
    assert out[0].mask.bits[:4, :4].all() and out[0].mask.area == 16


def test_voting_is_per_category_and_order_free(desk, rng):
    raw = []
    for _ in range(30):
        xy = rng.uniform(4, 20, 2)
        s = rng.dirichlet([1, 1, 1])
        raw.append(raw_instance([*xy, 8.0, 8.0], s, rng.random((6, 6))))
    out = mask_voting(raw, desk, 24, 24)
    for c in (1, 2):
        scores = [i.score for i in out if i.category == c]
        assert scores == sorted(scores, reverse=True)
    perm = [raw[i] for i in rng.permutation(len(raw))]
    key = lambda insts: sorted((i.category, i.score, i.mask.to_rle()) for i in insts)
    assert key(mask_voting(perm, desk, 24, 24)) == key(out)
    assert mask_voting([], desk, 24, 24) == []


# ----------------------------------------------------------------------------
# prediction files


def test_prediction_file_round_trip(tmp_path, rng):
    preds = {}
    for sid in ("a", "b"):
        insts = []
        for k in range(3):
            bits = rng.random((6, 7)) > 0.5
            insts.append(Instance(rng.uniform(1, 5, 4), k % 2 + 1, float(rng.random()), None, BinaryMask(bits)))
        preds[sid] = insts
    path = tmp_path / "p.txt"
    write_predictions(preds, path)
    back = read_predictions(path)
    assert list(back) == ["a", "b"]
    for sid, insts in preds.items():
        ordered = sorted(insts, key=lambda i: -i.score)
        for x, y in zip(ordered, back[sid]):
            assert (x.category, x.score, x.mask) == (y.category, y.score, y.mask)
            np.testing.assert_array_equal(x.box, y.box)


def test_malformed_prediction_line(tmp_path):
    path = tmp_path / "p.txt"
    path.write_text("a\t1\t0.5\t1 2 3\t-\n")
    with pytest.raises(PredictionParseError):
        read_predictions(path)
