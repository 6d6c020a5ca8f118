import importlib

import numpy as np
import pytest

from idlike.embedcore import normalize
from idlike.encoder import AdapterBackend, BackendServer, toy_backend
from idlike.errors import (
    CheckpointError,
    ConfigError,
    DivergenceDetected,
    EmptyInput,
    GradientUnsupported,
    NoOodPrompts,
    TooFewPrompts,
)
from idlike.miner import MinedDatasets, MinedEntry
from idlike.promptlearn import (
    AdamW,
    LossWeights,
    PromptSet,
    TrainConfig,
    checkpoint_bytes,
    init_prompts,
    interleaved_stream,
    load_checkpoint,
    objective,
    prompt_features,
    save_checkpoint,
    train,
)
from idlike.promptlearn.checkpoint import MAGIC
from oracles import central_fd, max_rel_err

train_mod = importlib.import_module("idlike.promptlearn.train")


def mined_set(dim, n_in, n_out, K, seed=0):
    rng = np.random.default_rng(seed)
    d_in = [MinedEntry(i, 0, (0, 0, 1, 1), 0.0, normalize(rng.normal(size=dim)), i % K) for i in range(n_in)]
    d_out = [MinedEntry(i, 1, (0, 0, 1, 1), 0.0, normalize(rng.normal(size=dim))) for i in range(n_out)]
    return MinedDatasets(d_in, d_out)


# prompts

def test_init_prompts_shapes_and_determinism():
    b = toy_backend(0, 16)
    ps = init_prompts(["dog", "cat"], 3, 16, 0, b)
    assert (ps.K, ps.C, ps.L, ps.text_context_dim) == (2, 3, 16, 16)
    again = init_prompts(["dog", "cat"], 3, 16, 0, b)
    assert np.array_equal(ps.id_ctx, again.id_ctx) and np.array_equal(ps.ood_ctx, again.ood_ctx)
    assert not np.array_equal(ps.id_ctx, init_prompts(["dog", "cat"], 3, 16, 1, b).id_ctx)
    np.testing.assert_array_equal(ps.class_tokens[1], b.class_token("cat"))
    assert init_prompts(["dog"], 0, 4, 0, b).C == 0


def test_init_std():
    ps = init_prompts([f"c{k}" for k in range(10)], 50, 16, 3, toy_backend(0, 32))
    allv = np.concatenate([ps.id_ctx.ravel(), ps.ood_ctx.ravel()])
    assert abs(allv.std() - 0.02) < 0.001 and abs(allv.mean()) < 0.001


def test_prompt_sequences():
    ps = init_prompts(["dog", "cat"], 2, 4, 0, toy_backend(0, 8))
    seq = ps.id_sequences()[1]
    assert len(seq) == 5 and seq.class_slot == 4
    np.testing.assert_array_equal(seq.entries[4], ps.class_tokens[1])
    assert all(s.class_slot is None and len(s) == 4 for s in ps.ood_sequences())


def test_prompt_set_shape_validation():
    with pytest.raises(ConfigError):
        PromptSet(np.zeros((1, 2, 4)), np.zeros((1, 3, 4)), np.zeros((1, 4)))
    with pytest.raises(ConfigError):
        PromptSet(np.zeros((1, 2, 4)), np.zeros((0, 2, 4)), np.zeros((2, 4)))


def test_prompt_features_contract():
    b = toy_backend(0, 16)
    ps = init_prompts(["a", "b"], 3, 4, 0, b)
    ps.ood_ctx[2] = ps.ood_ctx[1]
    fi, fo = prompt_features(ps, b)
    assert fi.shape == (2, 16) and fo.shape == (3, 16)
    np.testing.assert_allclose(np.linalg.norm(np.vstack([fi, fo]), axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(fo[1], fo[2])


def test_prompt_feature_jacobian_fd(rng):
    b = toy_backend(2, 8)
    ps = init_prompts(["a", "b"], 2, 3, 0, b, std=0.5)
    g_in, g_out = rng.normal(size=(2, 8)), rng.normal(size=(2, 8))
    _, _, vjp = prompt_features(ps, b, with_vjp=True)
    d_id, d_ood = vjp(g_in, g_out)

    def f():
        fi, fo = prompt_features(ps, b)
        return float(np.sum(fi * g_in) + np.sum(fo * g_out))

    assert max_rel_err(d_id, central_fd(f, ps.id_ctx)) < 1e-3
    assert max_rel_err(d_ood, central_fd(f, ps.ood_ctx)) < 1e-3


def test_prompt_features_without_gradients():
    b = toy_backend(0, 8)
    server = BackendServer(b)
    a = AdapterBackend(server.handle, info=server.handle({"kind": "info"}) | {"differentiable_text": False})
    ps = init_prompts(["a"], 2, 2, 0, b)
    prompt_features(ps, a)
    with pytest.raises(GradientUnsupported):
        prompt_features(ps, a, with_vjp=True)
    with pytest.raises(GradientUnsupported):
        train(mined_set(8, 2, 2, 1), ps, a, TrainConfig(), LossWeights())


# objective and training

@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("form", ["ratio_a", "ratio_b"])
def test_objective_gradient(seed, form):
    rng = np.random.default_rng(seed)
    dim = 16
    b = toy_backend(seed, dim)
    ps = init_prompts(["a", "b", "c"], 3, 2, seed, b, std=0.5)
    ids = [(normalize(rng.normal(size=dim)), int(rng.integers(3))) for _ in range(2)]
    oods = [normalize(rng.normal(size=dim)) for _ in range(2)]
    w = LossWeights(0.3, 0.2, float(rng.choice([0.01, 0.1, 1.0])))
    _, _, (g_id, g_ood) = objective(ps, b, ids, oods, w, form)
    f = lambda: objective(ps, b, ids, oods, w, form, with_grad=False)[0]
    assert max_rel_err(np.concatenate([g_id.ravel(), g_ood.ravel()]),
                       np.concatenate([central_fd(f, ps.id_ctx).ravel(), central_fd(f, ps.ood_ctx).ravel()])) < 1e-3


def test_objective_parts():
    b = toy_backend(0, 8)
    ps = init_prompts(["a"], 2, 2, 0, b)
    z = normalize(np.ones(8))
    total, parts, grads = objective(ps, b, [], [z], LossWeights(0.3, 0.0), with_grad=False)
    assert parts["l_in"] is None and parts["l_div"] is None and grads is None
    assert total == pytest.approx(0.3 * parts["l_out"])


def test_interleaved_stream():
    s = interleaved_stream(3, 5, 0, 0)
    assert [k for k, _ in s] == ["in", "out", "in", "out", "in", "out", "out", "out"]
    assert sorted(i for k, i in s if k == "in") == [0, 1, 2]
    assert sorted(i for k, i in s if k == "out") == [0, 1, 2, 3, 4]
    assert s == interleaved_stream(3, 5, 0, 0) and s != interleaved_stream(3, 5, 0, 1)


def test_l_in_descends():
    b = toy_backend(1, 16)
    mined = mined_set(16, 20, 0, 2)
    ps = init_prompts(["a", "b"], 0, 4, 0, b)
    _, hist = train(mined, ps, b, TrainConfig(epochs=5, batch_size=20), LossWeights(0.0, 0.0))
    l_in = [h["l_in"] for h in hist]
    assert len(l_in) == 5
    assert all(b_ <= a_ for a_, b_ in zip(l_in, l_in[1:]))


def test_l_in_moving_average_at_batch_one():
    b = toy_backend(1, 16)
    mined = mined_set(16, 20, 0, 2)
    ps = init_prompts(["a", "b"], 0, 4, 0, b)
    _, hist = train(mined, ps, b, TrainConfig(epochs=3), LossWeights(0.0, 0.0))
    ma = np.convolve([h["l_in"] for h in hist], np.ones(5) / 5, mode="valid")
    assert ma[-1] < ma[0]


def test_train_is_deterministic_and_leaves_backend_alone():
    b = toy_backend(0, 16)
    mined = mined_set(16, 6, 6, 2)
    ps = init_prompts(["a", "b"], 3, 2, 0, b)
    before = b.checksum()
    p1, h1 = train(mined, ps, b, TrainConfig(epochs=1), LossWeights())
    p2, h2 = train(mined, ps, b, TrainConfig(epochs=1), LossWeights())
    assert b.checksum() == before
    assert np.array_equal(p1.id_ctx, p2.id_ctx) and np.array_equal(p1.ood_ctx, p2.ood_ctx)
    assert h1 == h2
    assert not np.array_equal(p1.ood_ctx, ps.ood_ctx)
    assert {"step", "epoch", "kind", "l_in", "l_out", "l_div", "total"} <= set(h1[0])
    assert [h["kind"] for h in h1[:4]] == ["in", "out", "in", "out"]


def test_train_preconditions():
    b = toy_backend(0, 8)
    with pytest.raises(EmptyInput):
        train(MinedDatasets(), init_prompts(["a"], 2, 2, 0, b), b, TrainConfig(), LossWeights())
    with pytest.raises(TooFewPrompts):
        train(mined_set(8, 2, 2, 1), init_prompts(["a"], 1, 2, 0, b), b, TrainConfig(), LossWeights())
    with pytest.raises(NoOodPrompts):
        train(mined_set(8, 2, 2, 1), init_prompts(["a"], 0, 2, 0, b), b, TrainConfig(), LossWeights(0.3, 0.0))
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        TrainConfig(out_loss_form="other")


def test_divergence_detected(monkeypatch):
    b = toy_backend(0, 8)
    real = train_mod.loss_in_grad

    def poisoned(row, label, tau):
        v, gi, go = real(row, label, tau)
        return float("nan"), gi, go

    monkeypatch.setattr(train_mod, "loss_in_grad", poisoned)
    with pytest.raises(DivergenceDetected) as info:
        train(mined_set(8, 2, 2, 1), init_prompts(["a"], 2, 2, 0, b), b, TrainConfig(), LossWeights())
    assert len(info.value.history) == 1


def test_adamw_against_reference_formula():
    p = np.array([1.0, -2.0])
    opt = AdamW([p], lr=0.1, weight_decay=0.01)
    ref, m, v = np.array([1.0, -2.0]), np.zeros(2), np.zeros(2)
    for t, g in enumerate([np.array([0.5, -1.0]), np.array([0.2, 0.3]), np.array([-0.4, 0.1])], 1):
        opt.step([g])
        ref = ref * (1 - 0.1 * 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.1 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(p, ref, rtol=1e-15)


def test_adamw_matches_torch():
    torch = pytest.importorskip("torch")
    rng = np.random.default_rng(0)
    p = rng.normal(size=5)
    tp = torch.tensor(p.copy(), requires_grad=True)
    topt = torch.optim.AdamW([tp], lr=0.005, weight_decay=0.1)
    opt = AdamW([p], lr=0.005, weight_decay=0.1)
    for _ in range(10):
        g = rng.normal(size=5)
        opt.step([g])
        tp.grad = torch.tensor(g)
        topt.step()
    np.testing.assert_allclose(p, tp.detach().numpy(), rtol=1e-12)


# checkpoints

def test_checkpoint_round_trip(tmp_path):
    b = toy_backend(0, 8)
    ps = init_prompts(["dog", "cat"], 3, 2, 0, b)
    path = save_checkpoint(tmp_path / "p.ckpt", ps, step=42, config={"loss.tau": "0.01"})
    back, meta = load_checkpoint(path)
    assert meta == {"step": 42, "config": {"loss.tau": "0.01"}, "version": 1}
    assert back.class_names == ["dog", "cat"]
    for a, c in ((ps.id_ctx, back.id_ctx), (ps.ood_ctx, back.ood_ctx), (ps.class_tokens, back.class_tokens)):
        np.testing.assert_array_equal(c, a.astype(np.float32).astype(np.float64))
    assert checkpoint_bytes(back, 42, {"loss.tau": "0.01"}) == path.read_bytes()


def test_checkpoint_layout():
    ps = init_prompts(["x"], 2, 3, 0, toy_backend(0, 8))
    data = checkpoint_bytes(ps, 7)
    assert data[:8] == MAGIC
    assert np.frombuffer(data[8:28], dtype="<u4").tolist() == [1, 1, 2, 3, 8]
    assert len(data) == 40 + int(np.frombuffer(data[36:40], dtype="<u4")[0]) + 4 * (1 * 3 * 8 + 2 * 3 * 8 + 8)


def test_checkpoint_zero_ood(tmp_path):
    ps = init_prompts(["x"], 0, 3, 0, toy_backend(0, 8))
    back, _ = load_checkpoint(save_checkpoint(tmp_path / "z.ckpt", ps))
    assert back.C == 0 and back.ood_ctx.shape == (0, 3, 8)


def test_checkpoint_corruption(tmp_path):
    data = checkpoint_bytes(init_prompts(["x"], 2, 3, 0, toy_backend(0, 8)))
    for bad in (b"XXXXXXXX" + data[8:], data[:20], data[:-4], data[:8] + b"\x02" + data[9:]):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(bad)
        with pytest.raises(CheckpointError):
            load_checkpoint(p)
