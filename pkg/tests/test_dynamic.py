import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dystab.batching import FlowProvider
from dystab.dynamic import (confidence, evaluate_dynamic, loss_A, loss_D, loss_TC, make_phi, make_psi,
                            predict_sequence, train_dynamic)
from dystab.synthdata import generate_corpus
from dystab.tensor import Tensor

from helpers import StubInpainter, gradcheck, param_fn, tiny_cfg, two_motion_flow

IMG = np.random.default_rng(0).random((16, 16, 3)).astype(np.float32)


def test_perfect_inpainter_gives_zero():
    mask, flow = two_motion_flow()
    out = loss_A(mask, [flow], IMG, StubInpainter(flow))
    assert out.value.item() == pytest.approx(0.0, abs=1e-6)


def test_zero_inpainter_accurate_mask_near_two():
    mask, flow = two_motion_flow()
    out = loss_A(mask, [flow], IMG, StubInpainter(flow, scale=0.0))
    assert out.value.item() >= 1.8
    assert out.terms["inside"] == pytest.approx(1.0, abs=2e-3)


def test_empty_mask_scores_one():
    # no inside region: the inside ratio is 0 and the context ratio is 1
    _, flow = two_motion_flow()
    out = loss_A(np.zeros((16, 16)), [flow], IMG, make_psi(tiny_cfg(), 0))
    assert out.value.item() == pytest.approx(1.0, abs=1e-3)


def test_bad_inpainter_capped_only_when_bounded():
    mask, flow = two_motion_flow()
    psi = StubInpainter(flow, scale=-3.0)
    assert loss_A(mask, [flow], IMG, psi).value.item() <= 2.0 + 1e-6
    assert loss_A(mask, [flow], IMG, psi, bounded=False).value.item() > 6.0


def test_loss_A_needs_a_flow():
    with pytest.raises(ValueError):
        loss_A(np.ones((16, 16)), [], IMG, StubInpainter(np.zeros((16, 16, 2))))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 16), st.floats(-3, 3))
def test_loss_A_bounded(seed, scale):
    rng = np.random.default_rng(seed)
    mask = rng.random((16, 16)) ** rng.uniform(0.2, 5)
    flow = rng.normal(0, rng.uniform(0.1, 4), (16, 16, 2))
    psi = StubInpainter(rng.normal(0, 2, (16, 16, 2)) + scale * flow)
    v = loss_A(mask, [flow, -flow], IMG, psi).value.item()
    assert -1e-6 <= v <= 2.0 + 1e-3


def test_confidence_scalar_and_batch():
    mask, flow = two_motion_flow()
    psi = StubInpainter(flow, scale=0.0)
    c = confidence(mask, [flow], IMG, psi)
    assert isinstance(c, float) and c > 1.8
    cb = confidence(np.stack([mask, mask])[:, None], [np.stack([flow, flow])], np.stack([IMG, IMG]),
                    StubInpainter(np.stack([flow, flow]), 0.0))
    np.testing.assert_allclose(cb, [c, c], atol=1e-6)


# -- temporal consistency ------------------------------------------------------------
def test_tc_identical_masks_zero_flow():
    mask, _ = two_motion_flow()
    zero = np.zeros((16, 16, 2))
    assert loss_TC(mask, mask, zero, zero).value.item() == 0.0


def test_tc_flipped_labels_is_two():
    mask, _ = two_motion_flow()
    zero = np.zeros((16, 16, 2))
    assert loss_TC(mask, 1 - mask, zero, zero).value.item() == pytest.approx(2.0, abs=1e-6)


def test_tc_integer_shift_consistent():
    mask = np.zeros((16, 16), np.float32)
    mask[4:9, 3:8] = 1
    shifted = np.roll(mask, (1, 2), axis=(0, 1))
    u12 = np.zeros((16, 16, 2), np.float32)
    u12[..., 0], u12[..., 1] = 2, 1
    out = loss_TC(mask, shifted, u12, -u12)
    assert out.value.item() == pytest.approx(0.0, abs=1e-3)
    assert not out.terms["all_occluded"]


def test_tc_all_occluded_is_flagged():
    mask, _ = two_motion_flow()
    zero = np.zeros((16, 16, 2))
    out = loss_TC(mask, 1 - mask, zero, zero, occ=np.ones((1, 16, 16), bool))
    assert out.value.item() == 0.0 and out.terms["all_occluded"]


# -- combined objective ------------------------------------------------------------
def test_loss_D_reduces_to_parts():
    cfg = tiny_cfg()
    phi, psi = make_phi(cfg, 0), make_psi(cfg, 1)
    _, u = two_motion_flow()
    d = loss_D(phi, psi, IMG, u, -u, cfg)
    m1, m2 = d.masks
    la = loss_A(m1, [u], IMG, psi, cfg.dynamic.eps).value.item()
    tc = loss_TC(m1, m2, u, -u).value.item()
    assert d.value.item() == pytest.approx(la - cfg.dynamic.lambda_tc * tc, abs=1e-5)
    d0 = loss_D(phi, psi, IMG, u, -u, cfg.updated(**{"dynamic.lambda_tc": 0.0}))
    assert d0.value.item() == pytest.approx(la, abs=1e-6)
    # the stored sign of lambda_tc is ignored
    dn = loss_D(phi, psi, IMG, u, -u, cfg.updated(**{"dynamic.lambda_tc": -cfg.dynamic.lambda_tc}))
    assert dn.value.item() == pytest.approx(d.value.item(), abs=1e-6)


# -- gradients -----------------------------------------------------------------------
def test_gradcheck_loss_A_mask():
    _, flow = two_motion_flow()
    psi = make_psi(tiny_cfg(), 2)
    rng = np.random.default_rng(3)
    m = rng.uniform(0.1, 0.9, (1, 1, 16, 16))
    assert gradcheck(lambda t: loss_A(t, [flow], IMG, psi).value, [m]) < 1e-3
    assert gradcheck(lambda t: loss_A(t, [flow], IMG, psi, bounded=False).value, [m]) < 1e-3


def test_gradcheck_loss_A_psi_params():
    mask, flow = two_motion_flow()
    psi = make_psi(tiny_cfg(), 2)
    fn = param_fn(psi, "dec3.w", lambda: loss_A(mask, [flow], IMG, psi, bounded=False).value)
    assert gradcheck(fn, [psi.params["dec3.w"].data]) < 1e-3


def test_gradcheck_loss_TC():
    rng = np.random.default_rng(4)
    u = rng.normal(0, 1.5, (16, 16, 2))
    m1, m2 = rng.random((2, 1, 1, 16, 16))
    assert gradcheck(lambda a, b: loss_TC(a, b, u, -u).value, [m1, m2]) < 1e-3


def test_gradcheck_loss_D_phi_params():
    cfg = tiny_cfg()
    phi, psi = make_phi(cfg, 0), make_psi(cfg, 1)
    _, u = two_motion_flow()
    fn = param_fn(phi, "head.w", lambda: loss_D(phi, psi, IMG, u, -u, cfg).value)
    assert gradcheck(fn, [phi.params["head.w"].data]) < 1e-3


# -- training ------------------------------------------------------------------------
@pytest.fixture(scope="module")
def corpus():
    return generate_corpus(4, {"plain": 1.0}, seed=0, height=16, width=16, n_frames=4)


def test_phi_ascends_and_psi_descends(corpus):
    # a phi step raises the objective; a psi step lowers psi's (uncapped) loss
    from dystab.batching import assemble, sample_pairs
    from dystab.dynamic import phi_step, psi_step
    cfg = tiny_cfg(**{"dynamic.lr": 1e-3, "dynamic.lambda_tc": 0.0})
    phi, psi = make_phi(cfg, 0), make_psi(cfg, 1)
    flows = FlowProvider(corpus)
    batch = assemble(sample_pairs(corpus, np.random.default_rng(0))[:4], corpus, flows)
    image = Tensor(batch.image)

    def objective():
        return loss_D(phi, psi, image, batch.u12, batch.u21, cfg, flows=batch.extra).value.item()

    def psi_loss():
        m = phi(batch.flow_tensor("u12"))[:, 1:2]
        return loss_A(Tensor(m.data), batch.flows(), image, psi, cfg.dynamic.eps, bounded=False).value.item()

    before = objective()
    phi_step(phi, psi, batch, cfg)
    assert objective() > before
    before = psi_loss()
    psi_step(phi, psi, batch, cfg)
    assert psi_loss() < before


def test_train_dynamic_is_deterministic(corpus, tmp_path):
    cfg = tiny_cfg(**{"dynamic.epochs": 1})
    outs = []
    for i in range(2):
        phi, psi = make_phi(cfg, 0), make_psi(cfg, 1)
        rows = train_dynamic(corpus, phi, psi, cfg, seed=5, val=corpus[:1], log_path=tmp_path / f"log{i}.csv")
        outs.append((phi.params.to_bytes(), psi.params.to_bytes(), (tmp_path / f"log{i}.csv").read_text()))
    assert outs[0] == outs[1]
    header = outs[0][2].splitlines()[0]
    assert header == "epoch,L_A,L_TC,val_miou,flip_rate"
    assert len(rows) == 1


def test_prediction_and_evaluation_shapes(corpus):
    cfg = tiny_cfg()
    phi = make_phi(cfg, 0)
    flows = FlowProvider(corpus)
    raw = predict_sequence(phi, corpus[0], flows, 0)
    assert raw.shape == (4, 16, 16)
    ev = evaluate_dynamic(phi, corpus, flows)
    assert 0 <= ev["miou"] <= 1 and 0 <= ev["flip_rate"] <= 1
