import math
from types import SimpleNamespace

import numpy as np
import pytest

from crystal import tensor as T
from crystal.corruption import CorruptionSpec
from crystal.errors import ContractError, TrainingDiverged
from crystal.gradcheck import numeric_grad
from crystal.model import ModelConfig, TinyVLM
from crystal.taskgen import VOCAB, make_sample, make_split
from crystal.tensor import Tensor
from crystal.trainer import (
    METRICS_HEADER, TERMS, LossConfig, TrainConfig, attention_alignment, chance_level,
    corrupt_batch, dual_path_losses, dual_path_step, evaluate, evaluate_all, loss_kl, lr_at,
    make_batch, predict, train,
)

MICRO = ModelConfig(n_layers=2, n_heads=2, d_model=16, n_latents=2, init_std=0.3, patch_init_std=0.3)
BLUR = CorruptionSpec("blur", 10.0, 0)


@pytest.fixture(scope="module")
def samples():
    return [make_sample(s, "count") for s in (11, 12, 13)]


def direct_kl(p, q):
    return sum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)


# ---------------------------------------------------------------- loss breakdown


def test_identity_corruption_null(samples):
    lb, _ = dual_path_step(TinyVLM(MICRO), samples, CorruptionSpec.identity(), LossConfig())
    assert abs(lb.kl) <= 1e-9 and abs(lb.attn) <= 1e-9
    assert abs(lb.ce_int - lb.ce_cor) <= 1e-9


@pytest.mark.parametrize("variant", ["answer_to_latents_mse", "answer_to_all_kl"])
def test_identity_null_other_variants(samples, variant):
    lb, _ = dual_path_step(TinyVLM(MICRO), samples, CorruptionSpec.identity(), LossConfig(attn_variant=variant))
    assert abs(lb.attn) <= 1e-9


def test_total_is_weighted_sum(samples):
    cfg = LossConfig(w_ce_int=0.5, w_ce_cor=2.0, w_kl=0.25, w_attn=3.0)
    lb, _ = dual_path_step(TinyVLM(MICRO), samples, BLUR, cfg)
    expected = sum(w * getattr(lb, t) for w, t in zip(cfg.weights, TERMS))
    assert abs(lb.total - expected) <= 1e-12
    assert min(lb.ce_int, lb.ce_cor, lb.kl, lb.attn) >= 0


def test_weight_mask_total_is_ce_int(samples):
    lb, _ = dual_path_step(TinyVLM(MICRO), samples, BLUR, LossConfig(1.0, 0.0, 0.0, 0.0))
    assert lb.total == lb.ce_int


@pytest.mark.parametrize("term", TERMS)
def test_zero_weight_excision(samples, term):
    weights = {f"w_{t}": (0.0 if t == term else 1.0) for t in TERMS}
    cfg = LossConfig(**weights)
    m = TinyVLM(MICRO)
    _, g_zero = dual_path_step(m, samples, BLUR, cfg)
    _, g_stub = dual_path_step(m, samples, BLUR, cfg, stub_terms=(term,))
    for k in g_zero:
        np.testing.assert_allclose(g_zero[k], g_stub[k], rtol=0, atol=1e-12)


def test_corrupted_loss_reaches_latent_embeddings(samples):
    m = TinyVLM(MICRO)
    # undetached teacher: the analytic gradient is then the full derivative FD sees
    cfg = LossConfig(0.0, 1.0, 1.0, 1.0, teacher_detach=False)
    _, grads = dual_path_step(m, samples, BLUR, cfg)
    lat_ids = VOCAB.latent_ids(MICRO.n_latents, MICRO.latent_mode)
    g = grads["tok_emb"][lat_ids]
    assert np.abs(g).max() > 0
    # finite-difference probe on one latent embedding coordinate
    batch = make_batch(MICRO, samples)
    cor = corrupt_batch(batch.images, [BLUR] * len(samples))

    def value():
        with T.no_grad():
            return float(dual_path_losses(m, batch, cor, cfg).total.data)

    table = m.params["tok_emb"].data
    coord = lat_ids[0] * MICRO.d_model + int(np.argmax(np.abs(g[0])))
    num = numeric_grad(value, table, [coord])[0]
    ana = grads["tok_emb"].reshape(-1)[coord]
    assert num != 0 and abs(num - ana) <= 1e-4 * max(abs(num), abs(ana))


def test_loss_locality(samples):
    m = TinyVLM(MICRO)
    batch = make_batch(MICRO, samples)
    cor = corrupt_batch(batch.images, [BLUR] * len(samples))
    res = dual_path_losses(m, batch, cor, LossConfig())
    T.backward(res.terms["ce_int"] + res.terms["ce_cor"] + res.terms["kl"])
    omega = m.layout_omega()
    outside = np.setdiff1d(np.arange(MICRO.max_seq_len), omega)
    for tr in (res.trace_int, res.trace_cor):
        g = tr.logits.grad
        assert np.all(g[:, outside] == 0.0)
        assert np.abs(g[:, omega]).max() > 0


# ---------------------------------------------------------------- KL and alignment oracles


def _trace(logits):
    return SimpleNamespace(logits=Tensor(np.asarray(logits, dtype=float)))


def test_loss_kl_identical_is_zero():
    x = np.random.default_rng(0).normal(size=(2, 4, 6))
    assert loss_kl(_trace(x), _trace(x), [1, 2]).item() == 0.0


def test_loss_kl_is_mean_over_positions():
    # KL(one-hot || q) = -ln q0, so pick q0 = e^-0.2 and e^-0.4
    sure = [0.0, -1000.0]
    rows_q = [[math.log(math.exp(-k)), math.log(1 - math.exp(-k))] for k in (0.2, 0.4)]
    li = _trace([[sure, sure]])
    lc = _trace([rows_q])
    assert loss_kl(li, lc, [0, 1]).item() == pytest.approx(0.3, abs=1e-12)


def test_loss_kl_matches_direct_sum():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(3, 5, 7)), rng.normal(size=(3, 5, 7))
    omega = [2, 4]
    sm = lambda z: np.exp(z - z.max()) / np.exp(z - z.max()).sum()  # noqa: E731
    direct = np.mean([direct_kl(sm(a[i, j]), sm(b[i, j])) for i in range(3) for j in omega])
    assert loss_kl(_trace(a), _trace(b), omega).item() == pytest.approx(direct, abs=1e-10)


def test_loss_kl_empty_omega():
    x = np.zeros((1, 3, 4))
    with pytest.raises(ContractError):
        loss_kl(_trace(x), _trace(x), [])


def test_attention_kl_hand_built():
    a_int = Tensor(np.array([0.3, 0.1]).reshape(1, 1, 1, 2))
    a_cor = Tensor(np.array([0.1, 0.3]).reshape(1, 1, 1, 2))
    v = attention_alignment(a_int, a_cor, "answer_to_latents_kl").item()
    assert v == pytest.approx(direct_kl([0.75, 0.25], [0.25, 0.75]), abs=1e-10)
    assert v == pytest.approx(0.5493, abs=1e-4)


def test_attention_mse_single_cell():
    H, M, K, delta = 4, 2, 8, 0.3
    a = np.random.default_rng(2).uniform(size=(1, H, M, K)) / K
    b = a.copy()
    b[0, 1, 1, 5] += delta
    v = attention_alignment(Tensor(a), Tensor(b), "answer_to_latents_mse").item()
    assert v == pytest.approx(delta**2 / (H * M * K), rel=1e-12)


@pytest.mark.parametrize("variant", ["answer_to_latents_kl", "answer_to_latents_mse", "answer_to_all_kl"])
def test_alignment_zero_when_equal(variant):
    a = np.random.default_rng(3).uniform(0.1, 1, size=(1, 2, 2, 4))
    a /= a.sum(axis=-1, keepdims=True)
    assert attention_alignment(Tensor(a), Tensor(a.copy()), variant).item() == pytest.approx(0.0, abs=1e-15)


def test_alignment_teacher_detached():
    a_int = Tensor(np.array([0.3, 0.1]).reshape(1, 1, 1, 2), requires_grad=True)
    a_cor = Tensor(np.array([0.1, 0.3]).reshape(1, 1, 1, 2), requires_grad=True)
    T.backward(attention_alignment(a_int, a_cor, "answer_to_latents_kl"))
    assert a_int.grad is None and a_cor.grad is not None


def test_loss_config_validation():
    with pytest.raises(ContractError):
        LossConfig(w_kl=-1.0)
    with pytest.raises(ContractError):
        LossConfig(layers=())
    with pytest.raises(ContractError):
        LossConfig(attn_variant="frobenius")


def test_ce_uniform_logits_give_ln_v(samples):
    m = TinyVLM(MICRO)
    for k in ("head_w", "head_b"):
        m.params[k].data[:] = 0.0
    lb, _ = dual_path_step(m, samples, BLUR, LossConfig())
    assert lb.ce_int == pytest.approx(math.log(MICRO.vocab_size), abs=1e-12)
    assert lb.ce_cor == pytest.approx(math.log(MICRO.vocab_size), abs=1e-12)


# ---------------------------------------------------------------- training loop


def test_warmup_schedule():
    tc = TrainConfig(lr=0.1, warmup=100)
    assert lr_at(0, tc) == pytest.approx(0.001)
    assert lr_at(99, tc) == lr_at(500, tc) == 0.1


def test_zero_lr_leaves_parameters_unchanged():
    m = TinyVLM(MICRO)
    before = m.state()
    data = make_split(0, 8)
    train(m, data, TrainConfig(steps=1, lr=0.0, batch_size=2), LossConfig())
    assert all(before[k].tobytes() == m.params[k].data.tobytes() for k in before)


@pytest.mark.parametrize("optimizer", ["adam", "sgd"])
def test_same_seed_bitwise_identical_metrics(tmp_path, optimizer):
    data = make_split(0, 16)
    tc = TrainConfig(steps=3, batch_size=2, optimizer=optimizer, lr=0.01)
    for name in ("a.csv", "b.csv"):
        train(TinyVLM(MICRO), data, tc, LossConfig(), log_path=tmp_path / name)
    a, b = (tmp_path / "a.csv").read_bytes(), (tmp_path / "b.csv").read_bytes()
    assert a == b
    assert a.decode().splitlines()[0] == ",".join(METRICS_HEADER)
    assert len(a.decode().splitlines()) == 4


def test_training_reduces_loss_on_tiny_set():
    data = make_split(0, 4)
    rows = train(TinyVLM(MICRO), data, TrainConfig(steps=30, batch_size=4, lr=3e-3, warmup=1), LossConfig())
    assert rows[-1]["ce_int"] < rows[0]["ce_int"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_batch_seed():
    m = TinyVLM(MICRO)
    m.params["head_b"].data[0] = np.inf
    with pytest.raises(TrainingDiverged) as exc:
        train(m, make_split(0, 4), TrainConfig(steps=2, batch_size=2), LossConfig())
    assert exc.value.step == 0 and isinstance(exc.value.batch_seed, int)


def test_empty_dataset_rejected():
    with pytest.raises(ContractError):
        train(TinyVLM(MICRO), [], TrainConfig(steps=1), LossConfig())


# ---------------------------------------------------------------- evaluation


@pytest.fixture(scope="module")
def eval_set():
    return make_split(3, 40, split="eval")


def test_untrained_model_near_chance(eval_set):
    acc = evaluate_all(TinyVLM(ModelConfig(n_layers=1, d_model=32, n_heads=2)), eval_set)
    assert set(acc) == {"intact", "corrupted_with_latents", "corrupted_no_latents", "blind"}
    for v in acc.values():
        assert 0.0 <= v <= 1 / 6 + 0.1


def test_intact_is_plain_inference(eval_set):
    m = TinyVLM(MICRO)
    from crystal.trainer import decode_ids

    ids = decode_ids(MICRO, eval_set)
    plain = m.greedy_decode(ids, np.stack([s.image for s in eval_set]))
    assert predict(m, eval_set, "intact").tolist() == plain.tolist()


def test_identity_spec_makes_corrupted_conditions_match_intact(eval_set):
    m = TinyVLM(MICRO)
    ident = CorruptionSpec.identity()
    base = evaluate(m, eval_set, "intact")
    assert evaluate(m, eval_set, "corrupted_no_latents", ident) == base
    assert evaluate(m, eval_set, "corrupted_with_latents", ident) == base


def test_chance_is_majority_frequency():
    data = [make_sample(s, "exist") for s in range(30)]
    yes = sum(d.answer_text() == "yes" for d in data)
    assert chance_level(data) == max(yes, 30 - yes) / 30


def test_evaluate_rejects_bad_condition(eval_set):
    with pytest.raises(ContractError):
        evaluate(TinyVLM(MICRO), eval_set, "sideways")
