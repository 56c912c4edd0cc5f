import math

import numpy as np
import pytest

from corrfuse.config import TrainConfig
from corrfuse.diffmath import Tensor, check_gradients, sigmoid
from corrfuse.disease_corr import DiseaseCorrelation
from corrfuse.model import (Dims, ModelParams, Splits, ablate, apply_variant, bce_loss, cxr_dropout,
                            forward, forward_detailed, label_matrix, load_model, save_model, train)
from corrfuse.pgraph import similarity_matrix

from conftest import make_record


def two_patient_batch(rng, J=3, F=4):
    return [
        make_record("a", rng.standard_normal((3, J)), [(rng.standard_normal(F), 6.0), (rng.standard_normal(F), 30.0)],
                    labels=(1, 0, 1)),
        make_record("b", rng.standard_normal((2, J)), [], labels=(0, 1, 1)),
    ]


def small_params(rng, batch, dim=8, heads=2, hidden=6, zero_heads=False):
    dims = Dims(batch[0].ehr.n_features, 4, batch[0].labels.size, dim, hidden, heads)
    return ModelParams.init(dims, rng, zero_heads=zero_heads)


def correlation_for(batch):
    return DiseaseCorrelation.from_labels(label_matrix(batch), 0.4)


# -- brute-force end-to-end oracle ---------------------------------------------------

def mlp_np(x, p):
    return np.tanh(x @ p.W1.data + p.b1.data) @ p.W2.data + p.b2.data


def leaky(x, s):
    return np.where(x > 0, x, s * x)


def softmax_np(x):
    e = np.exp(x - x.max())
    return e / e.sum()


def forward_oracle(batch, params, corr, delta=0.6, window=48.0, slope=0.01):
    B, d = len(batch), params.head_W.shape[1]
    h = np.stack([mlp_np(r.ehr.summary(), params.ehr_enc) for r in batch])
    W_E, a = params.agg.W_E.data, params.agg.a.data
    heads, _, hd = W_E.shape
    rows = []
    for s in range(B):
        nbs = [t for t in range(B) if t != s
               and h[s] @ h[t] / (np.linalg.norm(h[s]) * np.linalg.norm(h[t])) > delta]
        m_ee = np.zeros(d)
        if nbs:
            parts = []
            for i in range(heads):
                z = h @ W_E[i]
                e = np.array([leaky(a[i, :hd] @ z[s] + a[i, hd:] @ z[t], slope) for t in nbs])
                w = softmax_np(e)
                parts.append(sum(wj * z[t] for wj, t in zip(w, nbs)))
            m_ee = np.concatenate(parts)
        m_ec = np.zeros(d)
        if batch[s].cxrs:
            w = softmax_np(np.array([c.time_hours / window for c in batch[s].cxrs]))
            m_ec = sum(wk * (mlp_np(c.features, params.cxr_enc) @ params.agg.W_C.data)
                       for wk, c in zip(w, batch[s].cxrs))
        T = np.stack([h[s], m_ee, m_ec])
        present = [True, bool(nbs), bool(batch[s].cxrs)]
        A_hat = corr.A_hat
        Z = np.eye(A_hat.shape[0])
        proto = A_hat @ leaky(A_hat @ Z @ params.gcn.W1.data, 0.2) @ params.gcn.W2.data
        f = params.fusion
        out = []
        for n in range(proto.shape[0]):
            q = proto[n] @ f.W_q.data
            sc = np.array([q @ (T[j] @ f.W_k.data) / math.sqrt(d) if present[j] else -np.inf for j in range(3)])
            w = np.zeros(3)
            w[np.isfinite(sc)] = softmax_np(sc[np.isfinite(sc)])
            fused = sum(w[j] * (T[j] @ f.W_v.data) for j in range(3))
            z = fused @ params.head_W.data[n] + params.head_b.data[n]
            out.append(1.0 / (1.0 + math.exp(-z)))
        rows.append(out)
    return np.array(rows)


@pytest.mark.parametrize("delta", [-0.99, 0.999])
def test_forward_matches_brute_force(rng, delta):
    batch = two_patient_batch(rng)
    params = small_params(rng, batch, dim=4, heads=2)
    corr = correlation_for(batch)
    got = forward(batch, params, corr, delta=delta).data
    np.testing.assert_allclose(got, forward_oracle(batch, params, corr, delta=delta), rtol=1e-11)


def test_zero_heads_predict_one_half(rng):
    batch = two_patient_batch(rng)
    params = small_params(rng, batch, zero_heads=True)
    assert np.all(forward(batch, params, correlation_for(batch)).data == 0.5)


def test_forward_is_deterministic(rng):
    batch = two_patient_batch(rng)
    params = small_params(rng, batch)
    corr = correlation_for(batch)
    assert np.array_equal(forward(batch, params, corr).data, forward(batch, params, corr).data)


def test_bce_examples():
    assert bce_loss(Tensor([[0.5, 0.5]]), [[1, 0]]).item() == pytest.approx(2 * math.log(2), rel=1e-14)
    y = np.array([[1.0, 0.0, 1.0]])
    assert bce_loss(Tensor(y), y).item() <= 2e-7 * 3


def test_bce_gradient_wrt_logits_is_residual(rng):
    z = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    y = (rng.random((4, 3)) < 0.5).astype(float)
    bce_loss(sigmoid(z), y).backward()
    np.testing.assert_allclose(z.grad, (sigmoid(z).data - y) / 4, rtol=1e-9)
    assert max(check_gradients(lambda: bce_loss(sigmoid(z), y), [z]).values()) < 1e-6


def test_full_pipeline_gradient_check(rng):
    batch = two_patient_batch(rng)
    params = small_params(rng, batch, dim=8, heads=2)
    corr = correlation_for(batch)
    y = label_matrix(batch)
    delta = 0.0
    out = forward_detailed(batch, params, corr, delta=delta)
    h = np.stack([mlp_np(r.ehr.summary(), params.ehr_enc) for r in batch])
    assert abs(similarity_matrix(h)[0, 1] - delta) > 1e-3      # no edge flips under perturbation
    assert out.graph.ehr_edges                                # the neighbor path is exercised
    report = check_gradients(lambda: bce_loss(forward(batch, params, corr, delta=delta), y),
                             {k: v for k, v in params.named().items() if k != "fusion.g"})
    assert max(report.values()) < 1e-3, report


def test_no_cga_gradient_reaches_global_query(rng):
    batch = two_patient_batch(rng)
    params = small_params(rng, batch)
    corr = correlation_for(batch)
    y = label_matrix(batch)
    fn = lambda: bce_loss(forward(batch, params, corr, variant="no-cga"), y)  # noqa: E731
    assert check_gradients(fn, {"g": params.fusion.g})["g"] < 1e-3


def test_cxr_dropout_counts(rng):
    batch = [make_record(str(i), np.ones((1, 2)), [([1.0], 1.0)] if i < 10 else []) for i in range(14)]
    assert cxr_dropout(batch, 0.0, rng) == batch
    out = cxr_dropout(batch, 0.3, rng)
    assert sum(1 for a, b in zip(batch, out) if a.n_cxr and not b.n_cxr) == 3
    assert sum(r.n_cxr for r in batch) == 10       # input untouched


def test_dropped_patients_mask_cxr_slot(rng):
    batch = two_patient_batch(rng) + [make_record("c", rng.standard_normal((2, 3)),
                                                  [(rng.standard_normal(4), 1.0)], labels=(1, 1, 0))]
    params = small_params(rng, batch)
    dropped = cxr_dropout(batch, 0.5, rng)
    assert sum(r.n_cxr == 0 for r in dropped) == 2
    out = forward_detailed(dropped, params, correlation_for(batch))
    no_cxr = np.array([r.n_cxr == 0 for r in dropped])
    assert np.isneginf(out.stack.mask[no_cxr, 2]).all()
    assert np.all(out.alpha.data[no_cxr, :, 2] == 0.0)
    assert np.all(out.alpha.data[~no_cxr, :, 2] > 0.0)


def test_variant_equivalences(rng):
    single = [make_record("a", rng.standard_normal((2, 3)), [(rng.standard_normal(4), 10.0)])]
    single[0].labels[:] = [1, 0]
    params = small_params(rng, single)
    corr = correlation_for(single)
    full = forward(single, params, corr).data
    assert np.array_equal(full, forward(single, params, corr, variant="no-ehr-ehr").data)
    assert np.array_equal(full, forward(single, params, corr, variant="last-cxr-only").data)
    multi = two_patient_batch(rng)
    last = apply_variant(multi, "last-cxr-only")
    assert [c.time_hours for c in last[0].cxrs] == [30.0]


def memorize_set(rng, n=16, J=3, N=3):
    recs = []
    for i in range(n):
        y = (rng.random(N) < 0.5).astype(int)
        y[i % N] = 1
        recs.append(make_record(f"m{i}", rng.standard_normal((3, J)) + y[:J] * 2.0, [], labels=y))
    return recs


def test_one_epoch_smoke(rng):
    recs = memorize_set(rng, n=8)
    res = train(Splits(recs, recs, []), TrainConfig(dim=8, hidden=8, heads=2, epochs=1))
    assert len(res.history) == 1 and math.isfinite(res.history[0].train_loss)


def test_loss_decreases_when_memorizing(rng):
    recs = memorize_set(rng)
    cfg = TrainConfig(dim=16, hidden=16, heads=2, batch_size=16, epochs=50, patience=100,
                      cxr_dropout_rate=0.0, learning_rate=3e-3)
    losses = [r.train_loss for r in train(Splits(recs, recs, []), cfg).history]
    assert len(losses) == 50
    assert sum(b > a for a, b in zip(losses, losses[1:])) <= 5
    assert losses[-1] < losses[0]


def test_training_is_deterministic(small_cohort, tiny_config):
    a = train(small_cohort, tiny_config)
    b = train(small_cohort, tiny_config)
    assert a.history == b.history
    for k, v in a.params.state().items():
        assert np.array_equal(v, b.params.state()[k])


def test_checkpoint_round_trip_preserves_predictions(tmp_path, small_cohort, tiny_config):
    res = train(small_cohort, tiny_config)
    save_model(res, tmp_path / "m.ckpt")
    back = load_model(tmp_path / "m.ckpt")
    batch = small_cohort[:10]
    assert np.array_equal(forward(batch, res.params, res.correlation).data,
                          forward(batch, back.params, back.correlation).data)
    assert back.config == res.config and back.variant == "full"


def test_ablate_reports_test_split(small_cohort, tiny_config):
    out = ablate("no-cga", small_cohort, tiny_config)
    assert out.variant == "no-cga"
    assert out.test.per_disease.shape == (6,)
    with pytest.raises(ValueError):
        ablate("bogus", small_cohort, tiny_config)
